#![no_main]

use libfuzzer_sys::fuzz_target;
use tracelens_core::collector::perf::{translate, PerfSession};
use tracelens_core::ingest::{assemble, IngestConfig};

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    let session = PerfSession {
        session_id: "fuzz".into(),
        wall_start: 0,
        command: "work".into(),
        hostname: "h".into(),
        count_events: vec!["page-faults".into()],
        root_pid: 100,
    };
    let records = translate(&text, session);
    let cfg = IngestConfig {
        strict: false,
        ..IngestConfig::default()
    };
    let _ = assemble(records, &cfg);
});
