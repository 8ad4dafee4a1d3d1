#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(settings) = ifs_core::config::parse_config(text) {
            // Accepted settings must snapshot and re-parse losslessly.
            let snapshot = ifs_core::config::resolved_snapshot(&settings);
            let again = ifs_core::config::parse_config(&snapshot)
                .expect("snapshot of accepted settings must parse");
            let roundtrip = ifs_core::config::resolved_snapshot(&again);
            assert_eq!(snapshot, roundtrip);
        }
    }
});
