#![no_main]

use libfuzzer_sys::fuzz_target;
use tracelens_core::collector::script::{render, TraceScript};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(script) = TraceScript::parse(text) {
        let again = TraceScript::parse(&render(&script.records)).expect("rendered scripts parse");
        assert_eq!(again.records, script.records);
    }
});
