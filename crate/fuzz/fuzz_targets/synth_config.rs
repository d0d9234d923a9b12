#![no_main]

use libfuzzer_sys::fuzz_target;
use osda::data::SynthConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = SynthConfig::from_json(text) {
        let json = serde_json::to_string(&cfg).expect("serialises");
        assert_eq!(SynthConfig::from_json(&json).expect("round trip"), cfg);
    }
});
