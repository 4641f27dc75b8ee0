#![no_main]

//! A whole session from raw bytes: handshake, then every line through the
//! assembler in lenient mode, then finalization.

use libfuzzer_sys::fuzz_target;
use tracelens_core::ingest::{IngestConfig, SessionAssembler, Flow};
use tracelens_core::protocol::handshake;

fuzz_target!(|data: &[u8]| {
    let mut lines = data.split(|&b| b == b'\n');
    let Some(Ok(header)) = lines.next().map(handshake) else {
        return;
    };
    let cfg = IngestConfig {
        strict: false,
        reorder_capacity: 8,
        ..IngestConfig::default()
    };
    let mut session = SessionAssembler::new(header, cfg, None);
    for line in lines {
        if session.feed_line(line) != Flow::Continue {
            break;
        }
    }
    let finished = session.finish().expect("in-memory sessions finish");
    let _ = finished.to_bundle();
});
