//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the verdict lines are always
//! printed. Set `TRACELENS_UPDATE_SNAPSHOTS=1` to rewrite the committed API
//! snapshots from the current build instead of comparing against them.

use std::alloc::{GlobalAlloc, Layout, System};
use std::collections::BTreeMap;
use std::io::{BufReader, Cursor, Read, Write};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tracelens::api::{Api, ApiConfig};
use tracelens_core::collector::script::{render, TraceScript};
use tracelens_core::envcheck::{CheckRegistry, CheckStatus, FixtureKnobs, MAX_STACK_KNOB, NUMA_BALANCING_KNOB};
use tracelens_core::flame::aggregate;
use tracelens_core::ingest::{accept_session, assemble, IngestConfig};
use tracelens_core::model::{EventRecord, Tid, WALLTIME};
use tracelens_core::protocol::{decode_event, encode_event};
use tracelens_core::sourcemap::SourceRoot;
use tracelens_core::store::{load, parse_roofline, OutputRoot, HOTCOLD};
use tracelens_core::testkit::oracle::{brute_force_search, graph_prefix_values, prefix_fold, random_sample_set};
use tracelens_core::testkit::{dir_snapshot, fuzz_line, generate, shuffle_bounded, to_wire, GenParams, SessionGen, WireStream};

// ---------------------------------------------------------------------------
// Allocation accounting for the memory criterion.

struct Counting;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            let now = CURRENT.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            if new_size >= layout.size() {
                let now = CURRENT.fetch_add(new_size - layout.size(), Ordering::Relaxed) + new_size - layout.size();
                PEAK.fetch_max(now, Ordering::Relaxed);
            } else {
                CURRENT.fetch_sub(layout.size() - new_size, Ordering::Relaxed);
            }
        }
        p
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

/// Peak heap growth while running `f`, in bytes.
fn peak_during<T>(f: impl FnOnce() -> T) -> (T, usize) {
    let base = CURRENT.load(Ordering::SeqCst);
    PEAK.store(base, Ordering::SeqCst);
    let out = f();
    (out, PEAK.load(Ordering::SeqCst).saturating_sub(base))
}

// ---------------------------------------------------------------------------
// Shared fixtures.

type Verdict = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn golden_script_path() -> PathBuf {
    manifest_dir().join("../core/tests/fixtures/golden.trace")
}

fn golden_records() -> Result<Vec<EventRecord>, String> {
    TraceScript::from_file(&golden_script_path())
        .map(|s| s.records)
        .map_err(|e| format!("golden script: {e}"))
}

fn ingest_wire(records: &[EventRecord], root: &Path, cfg: &IngestConfig) -> Result<PathBuf, String> {
    let out = OutputRoot::new(root).map_err(|e| e.to_string())?;
    accept_session(Cursor::new(to_wire(records)), cfg, &out)
        .map(|o| o.bundle)
        .map_err(|e| format!("ingest: {e}"))
}

// ---------------------------------------------------------------------------
// Criteria.

fn conservation() -> Verdict {
    let start = Instant::now();
    let sessions = 200u64;
    let (mut threads, mut events) = (0usize, 0usize);
    for seed in 0..sessions {
        let recs = generate(seed, &GenParams::default());
        let timed = recs.iter().filter(|r| r.timestamp().is_some()).count();
        ensure(timed <= 10_000, || format!("seed {seed}: {timed} events"))?;
        events += timed;
        let mut sums: BTreeMap<(Tid, String), u64> = BTreeMap::new();
        for r in &recs {
            if let EventRecord::Sample(s) = r {
                *sums.entry((s.tid, s.metric_id.clone())).or_default() += s.period;
            }
        }
        let finished = assemble(recs, &IngestConfig::default()).map_err(|e| format!("seed {seed}: {e}"))?;
        ensure(finished.manifest.error_count == 0, || format!("seed {seed}: ingest errors"))?;
        let bundle = finished.to_bundle().map_err(|e| e.to_string())?;
        ensure(bundle.tree.len() <= 50 && bundle.timelines.len() == bundle.tree.len(), || format!("seed {seed}: too many threads"))?;
        for (tid, tl) in &bundle.timelines {
            threads += 1;
            ensure(tl.on_ns() + tl.off_ns() == tl.exit_t - tl.spawn_t, || {
                format!("seed {seed} tid {tid}: on+off {} != lifetime {}", tl.on_ns() + tl.off_ns(), tl.exit_t - tl.spawn_t)
            })?;
            let flames = &bundle.flames[tid];
            let wall = sums.get(&(*tid, WALLTIME.to_string())).copied().unwrap_or(0);
            ensure(flames[HOTCOLD].root().hot_ns == wall, || format!("seed {seed} tid {tid}: hot_ns != walltime periods"))?;
            for m in bundle.manifest.metrics.iter().filter(|m| m.id != WALLTIME) {
                let want = sums.get(&(*tid, m.id.clone())).copied().unwrap_or(0);
                ensure(flames[&m.id].root().value(&m.id) == want, || {
                    format!("seed {seed} tid {tid}: {} root != period sum", m.id)
                })?;
            }
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:.1?} (limit 60 s)"))?;
    Ok(format!("{sessions} sessions, {threads} threads, {events} events conserved, {elapsed:.1?}"))
}

fn oracle_equivalence() -> Verdict {
    let mut nodes = 0usize;
    for seed in 0..100 {
        let set = random_sample_set(seed, 10_000, 32);
        let g = aggregate(&set.sample_refs(), &set.off, &set.dict).map_err(|e| e.to_string())?;
        nodes += g.len();
        ensure(graph_prefix_values(&g) == prefix_fold(&set), || format!("set {seed}: trie differs from prefix fold"))?;
    }
    let patterns = ["a", "b", "^b$", "ab|ba", "^a", "x_y", "main", "c$", ".", "zzz"];
    let mut searched = 0usize;
    for seed in 1000..1200 {
        let set = random_sample_set(seed, 300, 8);
        let g = aggregate(&set.sample_refs(), &set.off, &set.dict).map_err(|e| e.to_string())?;
        if g.len() > 1000 {
            continue;
        }
        for p in patterns {
            let got = g.search(p).map_err(|e| e.to_string())?;
            for (ch, matched) in brute_force_search(&g, p) {
                ensure(got.channels[&ch].matched == matched, || format!("set {seed} /{p}/ channel {ch}: matched differs"))?;
            }
            searched += 1;
        }
    }
    Ok(format!("100 tries ({nodes} nodes) vs prefix fold, {searched} searches vs enumeration"))
}

fn determinism() -> Verdict {
    let recs = golden_records()?;
    let cfg = IngestConfig::default();
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let a = dir_snapshot(&ingest_wire(&recs, dirs[0].path(), &cfg)?);
    let b = dir_snapshot(&ingest_wire(&recs, dirs[1].path(), &cfg)?);
    let shuffled = shuffle_bounded(&recs, 1000, 0xC0FFEE);
    ensure(shuffled != recs, || "shuffle left the order unchanged".into())?;
    let c = dir_snapshot(&ingest_wire(&shuffled, dirs[2].path(), &cfg)?);
    ensure(a == b, || "two replays differ".into())?;
    ensure(a == c, || "shuffled replay differs".into())?;
    Ok(format!("3 bundles of {} files byte-identical", a.len()))
}

fn wire_fuzzing() -> Verdict {
    let valid: Vec<String> = generate(
        11,
        &GenParams {
            max_events: 2000,
            ..GenParams::default()
        },
    )
    .iter()
    .map(|r| encode_event(r).expect("encodes"))
    .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let start = Instant::now();
    let (mut events, mut errors) = (0u32, BTreeMap::<&'static str, u32>::new());
    let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
        for _ in 0..100_000 {
            let line = fuzz_line(&mut rng, &valid);
            match decode_event(&line) {
                Ok(_) => events += 1,
                Err(e) => *errors.entry(e.code()).or_default() += 1,
            }
        }
    }));
    ensure(outcome.is_ok(), || "decoder panicked".into())?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(30), || format!("took {elapsed:.1?} (limit 30 s)"))?;
    ensure(errors.keys().all(|c| !c.is_empty()), || "unnamed error".into())?;
    Ok(format!("100000 lines: {events} events, {} errors in {} classes, {elapsed:.1?}", errors.values().sum::<u32>(), errors.len()))
}

fn round_trips() -> Verdict {
    let params = GenParams {
        max_threads: 20,
        max_events: 3000,
        ..GenParams::default()
    };
    let mut records = 0usize;
    for seed in 0..50 {
        let recs = generate(seed, &params);
        for r in &recs {
            let line = encode_event(r).map_err(|e| e.to_string())?;
            let back = decode_event(line.trim_end().as_bytes()).map_err(|e| format!("seed {seed}: {e}"))?;
            ensure(&back == r, || format!("seed {seed}: wire round trip changed {}", r.type_tag()))?;
        }
        records += recs.len();
        let parsed = TraceScript::parse(&render(&recs)).map_err(|e| format!("seed {seed}: {e}"))?;
        ensure(parsed.records == recs, || format!("seed {seed}: script round trip differs"))?;
    }
    for seed in 100..130 {
        let recs = generate(seed, &params);
        let cfg = IngestConfig {
            spill_threshold: 16,
            ..IngestConfig::default()
        };
        let expected = assemble(recs.clone(), &cfg)
            .map_err(|e| e.to_string())?
            .to_bundle()
            .map_err(|e| e.to_string())?;
        let dir = tempfile::tempdir().unwrap();
        let loaded = load(&ingest_wire(&recs, dir.path(), &cfg)?).map_err(|e| e.to_string())?;
        ensure(loaded == expected, || format!("seed {seed}: loaded bundle differs from finalized session"))?;
    }
    Ok(format!("{records} records wire+script identical; 30 bundles finalize/load identical"))
}

fn write_knobs(root: &Path, max_stack: Option<&str>, numa: Option<&str>) {
    let dir = root.join("proc/sys/kernel");
    std::fs::create_dir_all(&dir).unwrap();
    if let Some(v) = max_stack {
        std::fs::write(dir.join("perf_event_max_stack"), format!("{v}\n")).unwrap();
    }
    if let Some(v) = numa {
        std::fs::write(dir.join("numa_balancing"), format!("{v}\n")).unwrap();
    }
}

fn env_checks() -> Verdict {
    use CheckStatus::*;
    let registry = CheckRegistry::default();
    let stack_cases = [(Some("127"), Fail), (Some("1024"), Pass), (None, Unknown)];
    let numa_cases = [(Some("0"), Pass), (Some("1"), Fail), (None, Unknown)];
    for (ms, want_ms) in stack_cases {
        for (numa, want_numa) in numa_cases {
            let mut knobs = FixtureKnobs::default();
            if let Some(v) = ms {
                knobs = knobs.with(MAX_STACK_KNOB, v);
            }
            if let Some(v) = numa {
                knobs = knobs.with(NUMA_BALANCING_KNOB, v);
            }
            let report = registry.report(&knobs);
            let got: Vec<_> = report.results.iter().map(|r| (r.check_id.as_str(), r.status)).collect();
            let want = vec![("perf_event_max_stack", want_ms), ("numa_balancing", want_numa)];
            ensure(got == want, || format!("max_stack={ms:?} numa={numa:?}: got {got:?}"))?;
        }
    }
    // Exit codes of the `check` command over real fixture trees.
    let bin = env!("CARGO_BIN_EXE_tracelens");
    let cases: [(Option<&str>, Option<&str>, bool, i32); 7] = [
        (Some("1024"), Some("0"), false, 0),
        (Some("127"), Some("0"), false, 1),
        (Some("1024"), Some("1"), false, 1),
        (None, Some("0"), false, 0),
        (None, Some("0"), true, 2),
        (Some("1024"), Some("0"), true, 0),
        (Some("127"), None, true, 1),
    ];
    for (ms, numa, strict, want) in cases {
        let tmp = tempfile::tempdir().unwrap();
        write_knobs(tmp.path(), ms, numa);
        let mut cmd = Command::new(bin);
        cmd.arg("check").arg("--proc-root").arg(tmp.path());
        if strict {
            cmd.arg("--strict-unknown");
        }
        let code = cmd.output().map_err(|e| e.to_string())?.status.code();
        ensure(code == Some(want), || {
            format!("check max_stack={ms:?} numa={numa:?} strict={strict}: exit {code:?}, expected {want}")
        })?;
    }
    Ok("3x3 grid exact; check exit codes 0/1/2 on 7 fixture trees".into())
}

fn api_contract() -> Verdict {
    let recs = golden_records()?;
    let tmp = tempfile::tempdir().unwrap();
    let plain = tmp.path().join("results");
    ingest_wire(&recs, &plain, &IngestConfig::default())?;
    let roof_bytes = std::fs::read(manifest_dir().join("tests/fixtures/roofline.json")).map_err(|e| e.to_string())?;
    let roofline = parse_roofline(&roof_bytes).map_err(|e| e.to_string())?;
    let with_roof = tmp.path().join("with-roofline");
    ingest_wire(
        &recs,
        &with_roof,
        &IngestConfig {
            roofline: Some(roofline),
            ..IngestConfig::default()
        },
    )?;
    let source_root = SourceRoot::new(manifest_dir().join("tests/fixtures/src")).map_err(|e| e.to_string())?;
    let api = Api::new(ApiConfig {
        source_root: Some(source_root),
        ..ApiConfig::new(&plain)
    });
    let roof_api = Api::new(ApiConfig::new(&with_roof));
    let coarse_api = Api::new(ApiConfig {
        exact_threshold: 1,
        ..ApiConfig::new(&plain)
    });

    let s = "/api/v1/sessions/golden-1";
    let snapshots: Vec<(&str, &Api, String)> = vec![
        ("sessions", &api, "/api/v1/sessions".into()),
        ("tree", &api, format!("{s}/tree")),
        ("timeline_101", &api, format!("{s}/threads/101/timeline")),
        ("timeline_200_buckets", &coarse_api, format!("{s}/threads/200/timeline?bucket_ns=1000")),
        ("flame_100_walltime", &api, format!("{s}/threads/100/flame")),
        ("flame_200_page_faults", &api, format!("{s}/threads/200/flame?metric=page-faults")),
        ("flame_101_chronological", &api, format!("{s}/threads/101/flame?mode=chronological")),
        ("search_100_b", &api, format!("{s}/threads/100/flame/search?metric=walltime&q=b")),
        ("spawnstack_101", &api, format!("{s}/threads/101/spawnstack")),
        ("lines_100_main_a_b", &api, format!("{s}/threads/100/lines?metric=walltime&node=main/a/b")),
        ("source_work_c", &api, format!("{s}/source?file=work.c")),
        ("roofline", &roof_api, format!("{s}/roofline")),
        ("sessions_with_roofline", &roof_api, "/api/v1/sessions".into()),
    ];
    let update = std::env::var_os("TRACELENS_UPDATE_SNAPSHOTS").is_some();
    let snap_dir = manifest_dir().join("tests/snapshots");
    for (name, api, target) in &snapshots {
        let r = api.get(target);
        ensure(r.status == 200, || format!("{name}: status {} for {target}: {}", r.status, r.body))?;
        ensure(api.get(target) == r, || format!("{name}: repeated request differs"))?;
        let path = snap_dir.join(format!("{name}.json"));
        if update {
            std::fs::create_dir_all(&snap_dir).map_err(|e| e.to_string())?;
            std::fs::write(&path, r.body_text()).map_err(|e| e.to_string())?;
            continue;
        }
        let want = std::fs::read_to_string(&path).map_err(|e| format!("{name}: snapshot missing: {e}"))?;
        ensure(want == r.body_text(), || format!("{name}: body differs from {}", path.display()))?;
    }

    let errors: [(&Api, String, u16, &str); 9] = [
        (&api, format!("{s}/threads/100/flame/search?q=("), 400, "InvalidPattern"),
        (&api, format!("{s}/threads/999/timeline"), 404, "UnknownThread"),
        (&api, format!("{s}/threads/999/flame"), 404, "UnknownThread"),
        (&api, format!("{s}/threads/100/lines?node=main%2F%25zz"), 422, "MalformedNodePath"),
        (&api, format!("{s}/threads/100/lines?node=main//a"), 422, "MalformedNodePath"),
        (&api, format!("{s}/roofline"), 404, "NoRoofline"),
        (&api, "/api/v1/sessions/nope/tree".into(), 404, "UnknownSession"),
        (&api, format!("{s}/threads/100/spawnstack"), 404, "NoSpawnStack"),
        (&api, format!("{s}/source?file=../../Cargo.toml"), 400, "PathEscapesRoot"),
    ];
    for (api, target, status, code) in &errors {
        let r = api.get(target);
        ensure(r.status == *status && r.body["error_code"] == *code, || {
            format!("{target}: got {} {}, expected {status} {code}", r.status, r.body)
        })?;
    }

    let tree = api.get(&format!("{s}/tree"));
    let nodes = tree.body["nodes"].as_array().map(Vec::len).unwrap_or(0);
    ensure(Some(nodes as u64) == tree.body["thread_count"].as_u64(), || "tree node count != thread_count".into())?;
    let search = api.get(&format!("{s}/threads/100/flame/search?q=b"));
    ensure(search.body["fraction"] == 0.8, || format!("search fraction {}", search.body["fraction"]))?;

    // The same bodies come back over a real socket.
    let served = over_http(Arc::new(Api::new(ApiConfig::new(&plain))), "/api/v1/sessions")?;
    ensure(served == api.get("/api/v1/sessions").body_text(), || "HTTP body differs from dispatch".into())?;

    let verb = if update { "rewritten" } else { "match" };
    Ok(format!("{} snapshots {verb}; {} error cases; HTTP wiring ok", snapshots.len(), errors.len()))
}

fn over_http(api: Arc<Api>, target: &str) -> Result<String, String> {
    let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.map_err(|e| e.to_string())?;
        let addr = listener.local_addr().map_err(|e| e.to_string())?;
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let server = tokio::spawn(tracelens::http::serve(listener, tracelens::http::router(api, None), async move {
            let _ = rx.await;
        }));
        let target = target.to_string();
        let raw = tokio::task::spawn_blocking(move || {
            let mut s = std::net::TcpStream::connect(addr)?;
            write!(s, "GET {target} HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n")?;
            let mut out = String::new();
            s.read_to_string(&mut out)?;
            Ok::<_, std::io::Error>(out)
        })
        .await
        .map_err(|e| e.to_string())?
        .map_err(|e| e.to_string())?;
        let _ = tx.send(());
        let _ = server.await;
        let (head, body) = raw.split_once("\r\n\r\n").ok_or("malformed HTTP response")?;
        if !head.starts_with("HTTP/1.1 200") {
            return Err(format!("HTTP status line: {}", head.lines().next().unwrap_or("")));
        }
        Ok(body.to_string())
    })
}

fn throughput() -> Verdict {
    let params = |n: usize| GenParams {
        max_events: n,
        exact_events: true,
        ..GenParams::default()
    };
    let run = |n: usize| -> Result<(Duration, usize), String> {
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let ((elapsed, result), peak) = peak_during(|| {
            let start = Instant::now();
            let out = OutputRoot::new(tmp.path()).map_err(|e| e.to_string());
            let result = out.and_then(|out| {
                let reader = BufReader::new(WireStream::new(SessionGen::new(77, params(n))));
                accept_session(reader, &IngestConfig::default(), &out).map_err(|e| e.to_string())
            });
            (start.elapsed(), result)
        });
        let outcome = result?;
        let manifest = load(&outcome.bundle).map_err(|e| e.to_string())?.manifest;
        let events: u64 = manifest
            .event_counts
            .iter()
            .filter(|(tag, _)| !matches!(tag.as_str(), "header" | "frame" | "stack"))
            .map(|(_, n)| n)
            .sum();
        if events != n as u64 {
            return Err(format!("{events} events ingested, expected {n}"));
        }
        Ok((elapsed, peak))
    };
    let (t_small, m_small) = run(100_000)?;
    let (t_big, m_big) = run(1_000_000)?;
    let mib = |b: usize| b as f64 / (1024.0 * 1024.0);
    let ratio = m_big as f64 / m_small.max(1) as f64;
    let detail = format!(
        "1e6 events in {t_big:.1?}, peak {:.1} MiB; 1e5 events in {t_small:.1?}, peak {:.1} MiB; ratio {ratio:.2}",
        mib(m_big),
        mib(m_small)
    );
    ensure(t_big < Duration::from_secs(30), || format!("too slow: {detail}"))?;
    ensure(m_big < 1 << 30, || format!("too much memory: {detail}"))?;
    ensure(ratio < 2.0, || format!("memory grows with event count: {detail}"))?;
    Ok(detail)
}

fn main() {
    // `cargo test -- <filter>` passes arguments through; honor a plain
    // substring filter and ignore libtest flags.
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> Verdict); 8] = [
        ("conservation", conservation),
        ("oracle-equivalence", oracle_equivalence),
        ("determinism-reorder", determinism),
        ("wire-fuzzing", wire_fuzzing),
        ("round-trips", round_trips),
        ("env-checks", env_checks),
        ("api-contract", api_contract),
        ("throughput", throughput),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let verdict = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match verdict {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(reason) => {
                failed += 1;
                println!("FAIL {name}: {reason}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
