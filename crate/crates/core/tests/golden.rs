mod common;

use common::*;
use tracelens_core::flame::{COLD_CHANNEL, HOT_CHANNEL};
use tracelens_core::model::{EventRecord, WALLTIME};
use tracelens_core::store::{load, HOTCOLD};
use tracelens_core::testkit::shuffle_bounded;
use tracelens_core::timeline::ActivityState;

#[test]
fn fixture_has_the_intended_shape() {
    let recs = golden_records();
    let count = |f: fn(&EventRecord) -> bool| recs.iter().filter(|r| f(r)).count();
    assert_eq!(count(|r| matches!(r, EventRecord::Spawn(s) if s.pid == s.tid)), 3);
    assert_eq!(count(|r| matches!(r, EventRecord::Spawn(s) if s.pid != s.tid)), 2);
    assert_eq!(count(|r| matches!(r, EventRecord::Exec(_))), 1);
    assert!(count(|r| matches!(r, EventRecord::SwitchOut(_))) >= 2);
    let EventRecord::Header(h) = &recs[0] else { panic!("header first") };
    let ids: Vec<_> = h.metrics.iter().map(|m| m.id.as_str()).collect();
    assert_eq!(ids, ["walltime", "page-faults"]);
}

#[test]
fn replays_are_byte_identical_including_shuffled() {
    let recs = golden_records();
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let a = snapshot(&ingest(&recs, dirs[0].path()));
    let b = snapshot(&ingest(&recs, dirs[1].path()));
    let shuffled = shuffle_bounded(&recs, 1000, 7);
    assert_ne!(shuffled, recs);
    let c = snapshot(&ingest(&shuffled, dirs[2].path()));
    assert!(a.contains_key("manifest.json") && a.contains_key("tree.json"));
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn bundle_contents_match_the_script() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = load(&ingest(&golden_records(), dir.path())).unwrap();
    let m = &bundle.manifest;
    assert_eq!(m.session_id, "golden-1");
    assert_eq!(m.thread_count, 5);
    assert_eq!(bundle.tree.len(), 5);
    assert_eq!(m.duration_ns, 7500);
    assert!(!m.truncated && !m.aborted);
    assert_eq!(m.error_count, 0);

    let child = bundle.tree.get(200).unwrap();
    let names: Vec<_> = child.names.iter().map(|n| n.name.as_str()).collect();
    assert_eq!(names, ["work", "child"]);
    assert_eq!(bundle.tree.get(101).unwrap().spawn_sid, Some(3));

    // 101 is off between 2200 and 4000, 200 between 3400 and 4500.
    let off = |tid| {
        bundle.timelines[&tid]
            .segments
            .iter()
            .filter(|s| s.state == ActivityState::OffCpu)
            .map(|s| (s.start, s.end))
            .collect::<Vec<_>>()
    };
    assert_eq!(off(101), [(2200, 4000)]);
    assert_eq!(off(200), [(3400, 4500)]);
    assert_eq!(off(100), []);
    for tl in bundle.timelines.values() {
        assert_eq!(tl.on_ns() + tl.off_ns(), tl.exit_t - tl.spawn_t);
    }

    let g = &bundle.flames[&100][HOTCOLD];
    assert_eq!(g.root().value(WALLTIME), 25);
    let hit = g.search("b").unwrap();
    let wall = &hit.channels[WALLTIME];
    assert_eq!((wall.matched, wall.total), (20, 25));
    assert_eq!(wall.fraction, 0.8);
    let b = g.find_path(&["main", "a", "b"]).unwrap();
    assert_eq!(g.line_breakdown(b, WALLTIME).unwrap(), [(30, 20)]);

    let cold = &bundle.flames[&101][HOTCOLD].search("wait_queue").unwrap().channels[COLD_CHANNEL];
    assert_eq!((cold.matched, cold.total), (1800, 1800));
    assert_eq!(bundle.flames[&101][HOTCOLD].root().channel(HOT_CHANNEL), 20);

    let pf = &bundle.flames[&200]["page-faults"];
    assert_eq!(pf.root().value("page-faults"), 7);
}
