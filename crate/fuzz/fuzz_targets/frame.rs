#![no_main]
use libfuzzer_sys::fuzz_target;
use reltrack::evaldata::io::{decode_frame, encode_frame};

fuzz_target!(|data: &[u8]| {
    if let Ok(points) = decode_frame(data) {
        assert_eq!(encode_frame(&points), data);
    }
});
