#![no_main]

use libfuzzer_sys::fuzz_target;
use osda::RunConfig;

// Input: newline-separated `key=value` overrides applied to the defaults.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let overrides: Vec<String> = text.lines().map(str::to_string).collect();
    let base = serde_json::to_value(RunConfig::default()).expect("defaults serialise");
    let _ = RunConfig::with_overrides(base, &overrides);
});
