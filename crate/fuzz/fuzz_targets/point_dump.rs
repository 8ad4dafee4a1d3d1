#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(points) = ifs_core::chaos::parse_point_dump(data) {
        // Accepted inputs must have a header count that matches the
        // payload exactly: 8-byte count, then 8 bytes per point.
        assert_eq!(8 + points.len() * 8, data.len());
    }
});
