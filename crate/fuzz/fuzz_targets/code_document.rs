#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok((code, meta)) = ifs_core::codec::decode_code(text) {
            // A document that decodes must re-encode and decode to the
            // same code (round-trip stability on accepted inputs).
            let encoded = ifs_core::codec::encode_code(&code, meta.as_ref())
                .expect("decoded code must re-encode");
            let (again, _) = ifs_core::codec::decode_code(&encoded)
                .expect("re-encoded document must decode");
            assert_eq!(code, again);
        }
    }
});
