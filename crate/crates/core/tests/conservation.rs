//! Time and value conservation over generated sessions.

use std::collections::BTreeMap;

use proptest::prelude::*;
use tracelens_core::ingest::{assemble, IngestConfig};
use tracelens_core::model::{EventRecord, Tid, WALLTIME};
use tracelens_core::store::HOTCOLD;
use tracelens_core::testkit::{generate, GenParams};

fn check(seed: u64) -> Result<(), TestCaseError> {
    let recs = generate(seed, &GenParams::default());
    let mut sums: BTreeMap<(Tid, String), u64> = BTreeMap::new();
    for r in &recs {
        if let EventRecord::Sample(s) = r {
            *sums.entry((s.tid, s.metric_id.clone())).or_default() += s.period;
        }
    }
    let finished = assemble(recs, &IngestConfig::default()).unwrap();
    prop_assert_eq!(finished.manifest.error_count, 0);
    let bundle = finished.to_bundle().unwrap();
    prop_assert_eq!(bundle.timelines.len(), bundle.tree.len());
    for (tid, tl) in &bundle.timelines {
        prop_assert_eq!(tl.on_ns() + tl.off_ns(), tl.exit_t - tl.spawn_t, "tid {}", tid);
        let flames = &bundle.flames[tid];
        let wall = sums.get(&(*tid, WALLTIME.to_string())).copied().unwrap_or(0);
        prop_assert_eq!(flames[HOTCOLD].root().hot_ns, wall);
        prop_assert_eq!(flames[HOTCOLD].root().value(WALLTIME), wall);
        for m in bundle.manifest.metrics.iter().filter(|m| m.id != WALLTIME) {
            let want = sums.get(&(*tid, m.id.clone())).copied().unwrap_or(0);
            prop_assert_eq!(flames[&m.id].root().value(&m.id), want, "tid {} metric {}", tid, m.id);
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn on_plus_off_is_lifetime_and_roots_sum_periods(seed in any::<u64>()) {
        check(seed)?;
    }
}
