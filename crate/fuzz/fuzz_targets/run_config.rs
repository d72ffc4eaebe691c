#![no_main]
use libfuzzer_sys::fuzz_target;
use reltrack::config::TrainConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    // A config that parses must round-trip through its own text form.
    if let Ok(cfg) = TrainConfig::from_text(text) {
        assert_eq!(TrainConfig::from_text(&cfg.to_text()).expect("round trip"), cfg);
    }
});
