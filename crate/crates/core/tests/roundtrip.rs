mod common;

use proptest::prelude::*;
use tracelens_core::collector::script::{render, TraceScript};
use tracelens_core::ingest::{accept_session, assemble, IngestConfig};
use tracelens_core::protocol::{decode_event, encode_event};
use tracelens_core::store::{load, OutputRoot};
use tracelens_core::testkit::{generate, to_wire, GenParams};

fn small() -> GenParams {
    GenParams {
        max_threads: 12,
        max_events: 1500,
        ..GenParams::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn wire_encode_decode_identity(seed in any::<u64>()) {
        for r in generate(seed, &small()) {
            let line = encode_event(&r).unwrap();
            prop_assert!(line.ends_with('\n'));
            prop_assert_eq!(decode_event(line.trim_end().as_bytes()).unwrap(), r);
        }
    }

    #[test]
    fn script_render_parse_identity(seed in any::<u64>()) {
        let recs = generate(seed, &small());
        let text = render(&recs);
        prop_assert_eq!(TraceScript::parse(&text).unwrap().records, recs);
    }

    #[test]
    fn finalize_then_load_is_identity(seed in any::<u64>(), spill in prop::sample::select(vec![1usize, 7, 1024])) {
        let recs = generate(seed, &small());
        let cfg = IngestConfig { spill_threshold: spill, ..IngestConfig::default() };
        let expected = assemble(recs.clone(), &cfg).unwrap().to_bundle().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = OutputRoot::new(dir.path()).unwrap();
        let outcome = accept_session(std::io::Cursor::new(to_wire(&recs)), &cfg, &out).unwrap();
        prop_assert!(!outcome.bundle.join(".spill").exists());
        prop_assert_eq!(load(&outcome.bundle).unwrap(), expected);
    }
}
