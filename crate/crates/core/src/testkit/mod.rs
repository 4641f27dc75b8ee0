//! Seeded generators of valid sessions for tests and benchmarks.
//!
//! Generated sessions are valid under strict ingest: dictionaries come
//! first, every timestamp is unique and increasing, switch events pair up
//! (or are left pending and closed by exit/end), and no event touches an
//! exited thread.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::*;
use crate::protocol::encode_event;

pub mod oracle;

#[derive(Debug, Clone)]
pub struct GenParams {
    /// Cap on threads, spawned or implicit (the root thread included).
    pub max_threads: usize,
    /// Upper bound on timestamped events (the exact count is random).
    pub max_events: usize,
    pub max_depth: usize,
    pub frames: usize,
    pub stacks: usize,
    /// Also emit samples for tids that were never spawned.
    pub implicit_threads: bool,
    /// Declare extra count metrics besides wall time.
    pub count_metrics: bool,
    /// Emit exactly `max_events` timestamped events instead of a random
    /// number between half and all of it.
    pub exact_events: bool,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            max_threads: 50,
            max_events: 10_000,
            max_depth: 12,
            frames: 40,
            stacks: 60,
            implicit_threads: true,
            count_metrics: true,
            exact_events: false,
        }
    }
}

const FUNCTIONS: &[&str] = &[
    "main", "run", "parse", "compute", "alloc", "free", "read", "write", "lock", "unlock", "hash", "sort", "io_wait",
    "poll", "encode", "decode",
];
const FILES: &[&str] = &["main.c", "util.c", "io.c", "lib/hash.rs", "vendor/x.cc"];

#[derive(Debug, Clone)]
struct GenThread {
    tid: Tid,
    pid: Pid,
    off: bool,
}

/// Lazy generator of one session; memory stays bounded by the thread
/// count and dictionary size, so it can drive very long streams.
pub struct SessionGen {
    rng: ChaCha8Rng,
    params: GenParams,
    queue: VecDeque<EventRecord>,
    metrics: Vec<String>,
    stacks: usize,
    live: Vec<GenThread>,
    spawned: usize,
    next_tid: Tid,
    t: Timestamp,
    remaining: usize,
    finished: bool,
}

impl SessionGen {
    pub fn new(seed: u64, params: GenParams) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut queue = VecDeque::new();
        let mut metrics = vec![MetricDesc::walltime()];
        if params.count_metrics {
            metrics.push(MetricDesc {
                id: "page-faults".into(),
                kind: MetricKind::Count,
                unit: "faults".into(),
            });
            metrics.push(MetricDesc {
                id: "cycles".into(),
                kind: MetricKind::Count,
                unit: "cycles".into(),
            });
        }
        queue.push_back(EventRecord::Header(SessionHeader {
            version: 1,
            session_id: format!("gen-{seed}"),
            wall_start: 1_700_000_000_000_000_000 + seed % 1_000_000_000,
            command: "generated --seed".into(),
            hostname: "testhost".into(),
            metrics: metrics.clone(),
        }));
        let frames = params.frames.max(1);
        for fid in 1..=frames as FrameId {
            let function = FUNCTIONS[rng.gen_range(0..FUNCTIONS.len())].to_string();
            let file = rng.gen_bool(0.8).then(|| FILES[rng.gen_range(0..FILES.len())].to_string());
            queue.push_back(EventRecord::Frame(FrameDef {
                fid,
                function,
                line: file.as_ref().and_then(|_| rng.gen_bool(0.9).then(|| rng.gen_range(1..500))),
                file,
                module: rng.gen_bool(0.3).then(|| "libx.so".to_string()),
            }));
        }
        let stacks = params.stacks.max(1);
        for sid in 1..=stacks as StackId {
            let depth = rng.gen_range(1..=params.max_depth.max(1));
            let frames_v = (0..depth).map(|_| rng.gen_range(1..=frames as FrameId)).collect();
            queue.push_back(EventRecord::Stack(StackDef { sid, frames: frames_v }));
        }
        let total = if params.exact_events {
            params.max_events
        } else {
            rng.gen_range(params.max_events / 2..=params.max_events.max(1))
        };
        // The root spawn and the closing `end` come out of the same budget.
        let remaining = total.saturating_sub(2);
        let mut gen = SessionGen {
            rng,
            metrics: metrics.into_iter().map(|m| m.id).collect(),
            params,
            queue,
            stacks,
            live: Vec::new(),
            spawned: 0,
            next_tid: 1000,
            t: 0,
            remaining,
            finished: false,
        };
        gen.spawn(0);
        gen
    }

    fn tick(&mut self) -> Timestamp {
        self.t += self.rng.gen_range(1..=2000);
        self.t
    }

    fn sid(&mut self) -> StackId {
        self.rng.gen_range(1..=self.stacks as StackId)
    }

    fn spawn(&mut self, parent: Tid) {
        let tid = self.next_tid;
        self.next_tid += 1;
        let pid = match self.live.iter().find(|th| th.tid == parent) {
            Some(p) if self.rng.gen_bool(0.6) => p.pid,
            _ => tid,
        };
        let t = self.tick();
        let sid = (parent != 0 && self.rng.gen_bool(0.8)).then(|| self.sid());
        self.queue.push_back(EventRecord::Spawn(Spawn {
            parent_tid: parent,
            pid,
            tid,
            t,
            sid,
            name: format!("task{}", self.spawned),
        }));
        self.spawned += 1;
        self.live.push(GenThread { tid, pid, off: false });
    }

    fn step(&mut self) {
        if self.remaining == 0 || self.live.is_empty() {
            // Leave some threads open and some off-CPU: end closes them.
            let t = self.tick() + self.rng.gen_range(0..1000);
            self.queue.push_back(EventRecord::End(End { t }));
            self.finished = true;
            return;
        }
        self.remaining -= 1;
        let idx = self.rng.gen_range(0..self.live.len());
        let th = self.live[idx].clone();
        let roll: u32 = self.rng.gen_range(0..1000);
        if roll < 15 && self.spawned < self.params.max_threads {
            self.spawn(th.tid);
        } else if roll < 20 && self.params.implicit_threads && self.spawned < self.params.max_threads {
            let tid = self.next_tid;
            self.next_tid += 1;
            self.spawned += 1;
            let t = self.tick();
            let sid = self.sid();
            self.queue.push_back(EventRecord::Sample(Sample {
                tid,
                pid: tid,
                t,
                metric_id: WALLTIME.into(),
                period: self.rng.gen_range(1..10_000),
                sid,
            }));
            self.live.push(GenThread { tid, pid: tid, off: false });
        } else if roll < 25 {
            let t = self.tick();
            self.queue.push_back(EventRecord::Exec(Exec {
                tid: th.tid,
                t,
                name: format!("exec{}", self.rng.gen_range(0..5)),
            }));
        } else if roll < 32 && self.live.len() > 1 {
            let t = self.tick();
            self.queue.push_back(EventRecord::Exit(Exit { tid: th.tid, t }));
            self.live.swap_remove(idx);
        } else if roll < 200 {
            let t = self.tick();
            if th.off {
                self.queue.push_back(EventRecord::SwitchIn(SwitchIn { tid: th.tid, t }));
            } else {
                let sid = self.sid();
                self.queue.push_back(EventRecord::SwitchOut(SwitchOut { tid: th.tid, t, sid }));
            }
            self.live[idx].off = !th.off;
        } else {
            let t = self.tick();
            let sid = self.sid();
            let metric = if self.rng.gen_bool(0.75) {
                WALLTIME.to_string()
            } else {
                self.metrics.choose(&mut self.rng).cloned().unwrap_or_else(|| WALLTIME.into())
            };
            self.queue.push_back(EventRecord::Sample(Sample {
                tid: th.tid,
                pid: th.pid,
                t,
                metric_id: metric,
                period: self.rng.gen_range(1..10_000),
                sid,
            }));
        }
    }
}

impl Iterator for SessionGen {
    type Item = EventRecord;

    fn next(&mut self) -> Option<EventRecord> {
        loop {
            if let Some(r) = self.queue.pop_front() {
                return Some(r);
            }
            if self.finished {
                return None;
            }
            self.step();
        }
    }
}

/// One generated session as a vector.
pub fn generate(seed: u64, params: &GenParams) -> Vec<EventRecord> {
    SessionGen::new(seed, params.clone()).collect()
}

/// Permutes the timestamped records so that none moves more than
/// `max_displacement` positions; dictionary records, the header and the
/// end record keep their places.
pub fn shuffle_bounded(records: &[EventRecord], max_displacement: usize, seed: u64) -> Vec<EventRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let movable: Vec<usize> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.timestamp().is_some() && !matches!(r, EventRecord::End(_)))
        .map(|(i, _)| i)
        .collect();
    // Sorting by index + jitter in [0, d] moves each element by at most d.
    let mut keyed: Vec<(usize, usize)> = movable
        .iter()
        .enumerate()
        .map(|(k, &i)| (k + rng.gen_range(0..=max_displacement), i))
        .collect();
    keyed.sort_by_key(|&(key, _)| key);
    let mut out = records.to_vec();
    for (slot, (_, src)) in movable.iter().zip(keyed) {
        out[*slot] = records[src].clone();
    }
    out
}

/// The session in wire format.
pub fn to_wire(records: &[EventRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        out.extend_from_slice(encode_event(r).expect("generated records encode").as_bytes());
    }
    out
}

/// Every file under `dir` by relative path, for byte-level comparisons of
/// bundles.
pub fn dir_snapshot(dir: &std::path::Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    fn walk(base: &std::path::Path, dir: &std::path::Path, out: &mut std::collections::BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).expect("readable directory") {
            let path = entry.expect("readable entry").path();
            if path.is_dir() {
                walk(base, &path, out);
            } else {
                let rel = path.strip_prefix(base).expect("under base").to_string_lossy().replace('\\', "/");
                out.insert(rel, std::fs::read(&path).expect("readable file"));
            }
        }
    }
    let mut out = std::collections::BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// A random input line for decoder fuzzing: pure noise, a mutated valid
/// line, two valid lines spliced together, or a valid line as is.
pub fn fuzz_line(rng: &mut ChaCha8Rng, valid: &[String]) -> Vec<u8> {
    match rng.gen_range(0..4) {
        0 => (0..rng.gen_range(0..200)).map(|_| rng.gen()).collect(),
        1 => {
            let mut line = valid[rng.gen_range(0..valid.len())].clone().into_bytes();
            for _ in 0..rng.gen_range(1..6) {
                if line.is_empty() {
                    break;
                }
                let i = rng.gen_range(0..line.len());
                match rng.gen_range(0..3) {
                    0 => line[i] = rng.gen(),
                    1 => {
                        line.remove(i);
                    }
                    _ => line.insert(i, b"{}[]\",:0-e\\"[rng.gen_range(0..11)]),
                }
            }
            line
        }
        2 => {
            let a = &valid[rng.gen_range(0..valid.len())];
            let b = &valid[rng.gen_range(0..valid.len())];
            let (x, y) = (rng.gen_range(0..=a.len()), rng.gen_range(0..=b.len()));
            [&a.as_bytes()[..x], &b.as_bytes()[y..]].concat()
        }
        _ => valid[rng.gen_range(0..valid.len())].trim_end().as_bytes().to_vec(),
    }
}

/// Wire bytes of a generated session, produced lazily so arbitrarily long
/// sessions can be streamed without materializing them.
pub struct WireStream {
    gen: SessionGen,
    buf: Vec<u8>,
    pos: usize,
}

impl WireStream {
    pub fn new(gen: SessionGen) -> Self {
        WireStream {
            gen,
            buf: Vec::new(),
            pos: 0,
        }
    }
}

impl std::io::Read for WireStream {
    fn read(&mut self, out: &mut [u8]) -> std::io::Result<usize> {
        while self.pos == self.buf.len() {
            let Some(r) = self.gen.next() else { return Ok(0) };
            self.buf.clear();
            self.pos = 0;
            self.buf
                .extend_from_slice(encode_event(&r).expect("generated records encode").as_bytes());
        }
        let n = out.len().min(self.buf.len() - self.pos);
        out[..n].copy_from_slice(&self.buf[self.pos..self.pos + n]);
        self.pos += n;
        Ok(n)
    }
}
