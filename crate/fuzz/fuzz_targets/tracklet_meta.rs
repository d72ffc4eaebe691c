#![no_main]
use libfuzzer_sys::fuzz_target;
use reltrack::evaldata::io::TrackletMeta;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok((meta, boxes)) = TrackletMeta::parse(text) {
            assert_eq!(boxes.len(), meta.frame_count);
        }
    }
});
