#![no_main]

use libfuzzer_sys::fuzz_target;
use osda::data::{format_features, parse_features};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(table) = parse_features(text) {
        let again = parse_features(&format_features(&table)).expect("formatted table parses");
        assert_eq!(again, table);
    }
});
