#![no_main]

use libfuzzer_sys::fuzz_target;
use tracelens::api::parse_node_path;

fuzz_target!(|data: &[u8]| {
    let Ok(raw) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(names) = parse_node_path(raw) {
        assert!(names.iter().all(|n| !n.is_empty()));
    }
});
