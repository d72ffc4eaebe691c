#![no_main]
use libfuzzer_sys::fuzz_target;
use reltrack::numeric::Checkpoint;

fuzz_target!(|data: &[u8]| {
    // The encoding is canonical: anything that decodes re-encodes to itself.
    if let Ok(ckpt) = Checkpoint::from_bytes(data) {
        assert_eq!(ckpt.to_bytes(), data);
    }
});
