//! Deliberately naive reference implementations used to cross-check the
//! real code paths. They favour obviousness over speed.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;

use crate::flame::{FlameGraph, FrameKey, COLD_CHANNEL, HOT_CHANNEL};
use crate::model::*;
use crate::timeline::{ActivitySegment, ActivityState, Bucket};

/// Root-first key path of every node, value per channel.
pub type PrefixValues = BTreeMap<Vec<FrameKey>, BTreeMap<String, u64>>;

/// A random dictionary plus weighted samples and off-CPU intervals over it.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub dict: SessionDictionary,
    /// (sid, metric id, period)
    pub samples: Vec<(StackId, String, u64)>,
    /// (sid, duration)
    pub off: Vec<(StackId, u64)>,
}

impl SampleSet {
    pub fn sample_refs(&self) -> Vec<(StackId, &str, u64)> {
        self.samples.iter().map(|(s, m, p)| (*s, m.as_str(), *p)).collect()
    }
}

/// Builds a random sample set. Function names come from a small alphabet so
/// that sibling collisions and repeated names along a path are common.
pub fn random_sample_set(seed: u64, max_samples: usize, max_depth: usize) -> SampleSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = ["a", "b", "c", "ab", "ba", "main", "x_y", "b2"];
    let files = [None, Some("f.c"), Some("g.c")];
    let mut dict = SessionDictionary::new();
    dict.accept(&EventRecord::Header(SessionHeader {
        version: 1,
        session_id: format!("oracle-{seed}"),
        wall_start: 0,
        command: String::new(),
        hostname: String::new(),
        metrics: vec![
            MetricDesc::walltime(),
            MetricDesc {
                id: "cycles".into(),
                kind: MetricKind::Count,
                unit: "cycles".into(),
            },
        ],
    }))
    .expect("valid header");
    let frame_count = rng.gen_range(1..=24u64);
    for fid in 1..=frame_count {
        let file = files[rng.gen_range(0..files.len())].map(str::to_string);
        dict.accept(&EventRecord::Frame(FrameDef {
            fid,
            function: names[rng.gen_range(0..names.len())].to_string(),
            line: file.as_ref().map(|_| rng.gen_range(1..50)),
            file,
            module: None,
        }))
        .expect("valid frame");
    }
    let stack_count = rng.gen_range(1..=40u64);
    for sid in 1..=stack_count {
        let depth = rng.gen_range(1..=max_depth.max(1));
        let frames = (0..depth).map(|_| rng.gen_range(1..=frame_count)).collect();
        dict.accept(&EventRecord::Stack(StackDef { sid, frames }))
            .expect("valid stack");
    }
    let n = rng.gen_range(0..=max_samples);
    let samples = (0..n)
        .map(|_| {
            let metric = if rng.gen_bool(0.7) { WALLTIME } else { "cycles" };
            (rng.gen_range(1..=stack_count), metric.to_string(), rng.gen_range(1..100_000))
        })
        .collect();
    let off = (0..rng.gen_range(0..=n / 4 + 1))
        .map(|_| (rng.gen_range(1..=stack_count), rng.gen_range(1..1_000_000)))
        .collect();
    SampleSet { dict, samples, off }
}

fn key_path(dict: &SessionDictionary, sid: StackId) -> Vec<FrameKey> {
    let mut frames = dict.resolve(sid).expect("known stack");
    frames.reverse();
    frames.into_iter().map(FrameKey::from).collect()
}

/// Inclusive values by summing every sample into every prefix of its path.
pub fn prefix_fold(set: &SampleSet) -> PrefixValues {
    let mut out = PrefixValues::new();
    let mut add = |path: &[FrameKey], channel: &str, v: u64| {
        for len in 0..=path.len() {
            *out.entry(path[..len].to_vec())
                .or_default()
                .entry(channel.to_string())
                .or_insert(0) += v;
        }
    };
    for (sid, metric, period) in &set.samples {
        let path = key_path(&set.dict, *sid);
        add(&path, metric, *period);
        if metric == WALLTIME {
            add(&path, HOT_CHANNEL, *period);
        }
    }
    for (sid, d) in &set.off {
        add(&key_path(&set.dict, *sid), COLD_CHANNEL, *d);
    }
    out
}

/// The values a graph claims for every node, in the same shape as
/// [`prefix_fold`]. Zero entries are omitted.
pub fn graph_prefix_values(g: &FlameGraph) -> PrefixValues {
    let mut out = PrefixValues::new();
    for idx in 0..g.len() {
        let mut path = Vec::new();
        let mut cur = idx;
        while let Some(p) = g.nodes[cur].parent {
            path.push(g.nodes[cur].key.clone());
            cur = p;
        }
        path.reverse();
        let node = &g.nodes[idx];
        let mut vals: BTreeMap<String, u64> = node
            .values
            .iter()
            .filter(|(_, &v)| v > 0)
            .map(|(k, &v)| (k.clone(), v))
            .collect();
        for (ch, v) in [(HOT_CHANNEL, node.hot_ns), (COLD_CHANNEL, node.cold_ns)] {
            if v > 0 {
                vals.insert(ch.to_string(), v);
            }
        }
        let prev = out.insert(path, vals);
        assert!(prev.is_none(), "duplicate node path in graph");
    }
    out
}

/// Matched value per channel by enumerating every node and keeping those
/// that match while no proper ancestor does.
pub fn brute_force_search(g: &FlameGraph, pattern: &str) -> BTreeMap<String, u64> {
    let re = Regex::new(pattern).expect("valid pattern");
    let matches = |idx: usize| idx != 0 && re.is_match(&g.nodes[idx].key.function);
    let mut out: BTreeMap<String, u64> = g.channels().into_iter().map(|c| (c, 0)).collect();
    for idx in 0..g.len() {
        if !matches(idx) {
            continue;
        }
        let mut ancestor = g.nodes[idx].parent;
        let mut maximal = true;
        while let Some(a) = ancestor {
            if matches(a) {
                maximal = false;
                break;
            }
            ancestor = g.nodes[a].parent;
        }
        if maximal {
            for (ch, acc) in out.iter_mut() {
                *acc += g.nodes[idx].channel(ch);
            }
        }
    }
    out
}

/// Buckets by walking the segments in unit steps of `step` ns, which
/// must divide `bucket_ns` and every segment boundary.
pub fn brute_force_buckets(segments: &[ActivitySegment], bucket_ns: u64, step: u64) -> Vec<Bucket> {
    let mut acc: BTreeMap<u64, (u64, u64)> = BTreeMap::new();
    for seg in segments {
        let mut t = seg.start;
        while t < seg.end {
            let e = acc.entry(t / bucket_ns).or_default();
            match seg.state {
                ActivityState::OnCpu => e.0 += step,
                ActivityState::OffCpu => e.1 += step,
            }
            t += step;
        }
    }
    acc.into_iter()
        .map(|(index, (on_ns, off_ns))| Bucket {
            index,
            dominant: if on_ns > off_ns { ActivityState::OnCpu } else { ActivityState::OffCpu },
            on_ns,
            off_ns,
        })
        .collect()
}
