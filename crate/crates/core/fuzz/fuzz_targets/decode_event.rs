#![no_main]

use libfuzzer_sys::fuzz_target;
use tracelens_core::protocol::{decode_event, encode_event};

fuzz_target!(|data: &[u8]| {
    if let Ok(record) = decode_event(data) {
        // Anything accepted must survive a round trip unchanged.
        let line = encode_event(&record).expect("decoded records encode");
        let again = decode_event(line.trim_end().as_bytes()).expect("re-encoded line decodes");
        assert_eq!(again, record);
    }
});
