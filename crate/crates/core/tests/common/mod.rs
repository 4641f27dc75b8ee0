#![allow(dead_code, unused_imports)]

use std::io::Cursor;
use std::path::{Path, PathBuf};

use tracelens_core::collector::script::TraceScript;
use tracelens_core::ingest::{accept_session, IngestConfig};
use tracelens_core::model::EventRecord;
use tracelens_core::store::OutputRoot;
use tracelens_core::testkit::to_wire;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn golden_records() -> Vec<EventRecord> {
    TraceScript::from_file(&fixture("golden.trace")).expect("golden script parses").records
}

/// Streams `records` through the wire ingest path into a fresh bundle
/// under `root`.
pub fn ingest(records: &[EventRecord], root: &Path) -> PathBuf {
    let out = OutputRoot::new(root).unwrap();
    let outcome = accept_session(Cursor::new(to_wire(records)), &IngestConfig::default(), &out).expect("session completes");
    outcome.bundle
}

pub use tracelens_core::testkit::dir_snapshot as snapshot;
