//! Flame graph aggregation, flame charts and search.
//!
//! A thread's samples are folded into one trie keyed by [`FrameKey`]. Each
//! node carries an inclusive value per metric, a hot (on-CPU wall time) and
//! a cold (off-CPU wall time) channel, and a per-line histogram for the
//! leaf frames that landed on it. The finished trie ([`FlameGraph`]) is
//! stored flat in depth-first pre-order with children sorted by key, which
//! makes its serialization canonical.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{FrameDef, SessionDictionary, StackId, Timestamp, WALLTIME};
use crate::timeline::OffInterval;

/// Function name of the synthetic root node.
pub const ROOT_FUNCTION: &str = "(all)";
/// Search channel for on-CPU wall time.
pub const HOT_CHANNEL: &str = "hot_ns";
/// Search channel for off-CPU wall time.
pub const COLD_CHANNEL: &str = "cold_ns";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FlameError {
    #[error("stack {0} cannot be resolved")]
    UnresolvableStack(StackId),
    #[error("unknown metric '{0}'")]
    UnknownMetric(String),
    #[error("invalid pattern: {0}")]
    InvalidPattern(String),
    #[error("no node {0}")]
    NoSuchNode(usize),
}

/// Identity of a trie node. Line numbers are deliberately not part of it;
/// they are tracked in the node's line histogram instead.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FrameKey {
    pub function: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub module: Option<String>,
}

impl FrameKey {
    pub fn root() -> Self {
        FrameKey {
            function: ROOT_FUNCTION.to_string(),
            file: None,
            module: None,
        }
    }
}

impl From<&FrameDef> for FrameKey {
    fn from(f: &FrameDef) -> Self {
        FrameKey {
            function: f.function.clone(),
            file: f.file.clone(),
            module: f.module.clone(),
        }
    }
}

type KeyId = u32;

/// Session-wide interning of frame keys and stack paths, shared by all
/// per-thread builders.
#[derive(Debug, Default)]
pub struct StackPaths {
    keys: Vec<FrameKey>,
    key_ids: HashMap<FrameKey, KeyId>,
    paths: HashMap<StackId, Arc<StackPath>>,
}

/// A stack resolved to interned keys, root first.
#[derive(Debug)]
pub struct StackPath {
    keys: Vec<KeyId>,
    leaf_line: Option<u32>,
}

impl StackPaths {
    pub fn new() -> Self {
        Self::default()
    }

    fn intern(&mut self, key: FrameKey) -> KeyId {
        if let Some(&id) = self.key_ids.get(&key) {
            return id;
        }
        let id = self.keys.len() as KeyId;
        self.keys.push(key.clone());
        self.key_ids.insert(key, id);
        id
    }

    /// Resolves (and caches) the path of `sid`.
    pub fn resolve(&mut self, sid: StackId, dict: &SessionDictionary) -> Result<Arc<StackPath>, FlameError> {
        if let Some(p) = self.paths.get(&sid) {
            return Ok(p.clone());
        }
        let frames = dict.resolve(sid).ok_or(FlameError::UnresolvableStack(sid))?;
        let leaf_line = frames.first().and_then(|f| f.line);
        let keys = frames
            .iter()
            .rev()
            .map(|f| self.intern(FrameKey::from(*f)))
            .collect();
        let path = Arc::new(StackPath { keys, leaf_line });
        self.paths.insert(sid, path.clone());
        Ok(path)
    }

    fn key(&self, id: KeyId) -> &FrameKey {
        &self.keys[id as usize]
    }
}

#[derive(Debug, Default)]
struct BuildNode {
    key: Option<KeyId>,
    children: HashMap<KeyId, u32>,
    values: Vec<u64>,
    hot_ns: u64,
    cold_ns: u64,
    lines: HashMap<(u16, u32), u64>,
}

/// Streaming trie construction for one thread.
#[derive(Debug)]
pub struct FlameBuilder {
    metrics: Vec<String>,
    walltime: Option<usize>,
    nodes: Vec<BuildNode>,
}

impl FlameBuilder {
    pub fn new(metrics: &[String]) -> Self {
        let root = BuildNode {
            values: vec![0; metrics.len()],
            ..BuildNode::default()
        };
        FlameBuilder {
            metrics: metrics.to_vec(),
            walltime: metrics.iter().position(|m| m == WALLTIME),
            nodes: vec![root],
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn walk(&mut self, path: &StackPath, mut visit: impl FnMut(&mut BuildNode)) -> usize {
        let mut idx = 0usize;
        visit(&mut self.nodes[0]);
        for &key in &path.keys {
            let next = match self.nodes[idx].children.get(&key) {
                Some(&child) => child as usize,
                None => {
                    let child = self.nodes.len();
                    self.nodes.push(BuildNode {
                        key: Some(key),
                        values: vec![0; self.metrics.len()],
                        ..BuildNode::default()
                    });
                    self.nodes[idx].children.insert(key, child as u32);
                    child
                }
            };
            idx = next;
            visit(&mut self.nodes[idx]);
        }
        idx
    }

    /// Adds one sample of metric index `metric` along `path`.
    pub fn add_sample(&mut self, path: &StackPath, metric: usize, period: u64) {
        let hot = Some(metric) == self.walltime;
        let leaf = self.walk(path, |n| {
            n.values[metric] += period;
            if hot {
                n.hot_ns += period;
            }
        });
        if let Some(line) = path.leaf_line {
            *self.nodes[leaf].lines.entry((metric as u16, line)).or_insert(0) += period;
        }
    }

    /// Adds an off-CPU interval of `duration` ns along `path`.
    pub fn add_off(&mut self, path: &StackPath, duration: u64) {
        self.walk(path, |n| n.cold_ns += duration);
    }

    /// Produces the canonical graph: pre-order, children sorted by key.
    pub fn finish(&self, paths: &StackPaths) -> FlameGraph {
        let mut nodes = Vec::with_capacity(self.nodes.len());
        // (build index, parent index in output)
        let mut stack: Vec<(usize, Option<usize>)> = vec![(0, None)];
        while let Some((bidx, parent)) = stack.pop() {
            let b = &self.nodes[bidx];
            let out_idx = nodes.len();
            let key = match b.key {
                Some(k) => paths.key(k).clone(),
                None => FrameKey::root(),
            };
            let mut line_hist: BTreeMap<String, BTreeMap<u32, u64>> = BTreeMap::new();
            for (&(m, line), &v) in &b.lines {
                *line_hist
                    .entry(self.metrics[m as usize].clone())
                    .or_default()
                    .entry(line)
                    .or_insert(0) += v;
            }
            nodes.push(FlameNode {
                key,
                parent,
                children: Vec::new(),
                values: self.metrics.iter().cloned().zip(b.values.iter().copied()).collect(),
                hot_ns: b.hot_ns,
                cold_ns: b.cold_ns,
                line_hist,
            });
            if let Some(p) = parent {
                nodes[p].children.push(out_idx);
            }
            let mut kids: Vec<(&FrameKey, usize)> = b
                .children
                .iter()
                .map(|(&k, &c)| (paths.key(k), c as usize))
                .collect();
            kids.sort_by(|a, b| a.0.cmp(b.0));
            for (_, c) in kids.into_iter().rev() {
                stack.push((c, Some(out_idx)));
            }
        }
        FlameGraph {
            metrics: self.metrics.clone(),
            nodes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlameNode {
    pub key: FrameKey,
    pub parent: Option<usize>,
    /// Indices of the children, in key order.
    pub children: Vec<usize>,
    /// Inclusive value per metric id.
    pub values: BTreeMap<String, u64>,
    pub hot_ns: u64,
    pub cold_ns: u64,
    /// Per metric, value attributed to each source line of this frame when
    /// it was the leaf of a sample.
    pub line_hist: BTreeMap<String, BTreeMap<u32, u64>>,
}

impl FlameNode {
    pub fn value(&self, metric: &str) -> u64 {
        self.values.get(metric).copied().unwrap_or(0)
    }

    /// Inclusive value of a search channel (a metric id, `hot_ns` or `cold_ns`).
    pub fn channel(&self, channel: &str) -> u64 {
        match channel {
            HOT_CHANNEL => self.hot_ns,
            COLD_CHANNEL => self.cold_ns,
            m => self.value(m),
        }
    }
}

/// A finished trie. `nodes[0]` is the synthetic root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlameGraph {
    /// Metric channels present in `values`.
    pub metrics: Vec<String>,
    pub nodes: Vec<FlameNode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelFraction {
    pub matched: u64,
    pub total: u64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeMatch {
    pub node: usize,
    /// Function names from the root (exclusive) to the node.
    pub path: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub matches: Vec<NodeMatch>,
    pub channels: BTreeMap<String, ChannelFraction>,
}

impl FlameGraph {
    pub fn empty(metrics: &[String]) -> Self {
        FlameBuilder::new(metrics).finish(&StackPaths::new())
    }

    pub fn root(&self) -> &FlameNode {
        &self.nodes[0]
    }

    pub fn node(&self, idx: usize) -> Option<&FlameNode> {
        self.nodes.get(idx)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.len() <= 1
    }

    /// Function names from the root (exclusive) down to `idx`.
    pub fn path_of(&self, idx: usize) -> Vec<String> {
        let mut path = Vec::new();
        let mut cur = Some(idx);
        while let Some(i) = cur {
            let node = &self.nodes[i];
            if node.parent.is_some() {
                path.push(node.key.function.clone());
            }
            cur = node.parent;
        }
        path.reverse();
        path
    }

    /// Follows function names from the root. When several siblings share a
    /// function name (differing file or module) the first in key order wins.
    pub fn find_path<S: AsRef<str>>(&self, path: &[S]) -> Option<usize> {
        let mut idx = 0;
        for name in path {
            idx = *self.nodes[idx]
                .children
                .iter()
                .find(|&&c| self.nodes[c].key.function == name.as_ref())?;
        }
        Some(idx)
    }

    /// Value attributed to `idx` itself, excluding its children.
    pub fn self_value(&self, idx: usize, channel: &str) -> u64 {
        let node = &self.nodes[idx];
        let children: u64 = node.children.iter().map(|&c| self.nodes[c].channel(channel)).sum();
        node.channel(channel) - children
    }

    fn keep_projection(&self, keep: impl Fn(&FlameNode) -> bool, map: impl Fn(&FlameNode) -> FlameNode, metrics: Vec<String>) -> FlameGraph {
        let mut nodes: Vec<FlameNode> = Vec::new();
        let mut stack: Vec<(usize, Option<usize>)> = vec![(0, None)];
        while let Some((idx, parent)) = stack.pop() {
            let src = &self.nodes[idx];
            let out = nodes.len();
            let mut node = map(src);
            node.parent = parent;
            node.children = Vec::new();
            nodes.push(node);
            if let Some(p) = parent {
                nodes[p].children.push(out);
            }
            for &c in src.children.iter().rev() {
                if keep(&self.nodes[c]) {
                    stack.push((c, Some(out)));
                }
            }
        }
        FlameGraph { metrics, nodes }
    }

    /// The hot-and-cold view: wall time only, on- and off-CPU.
    pub fn project_hotcold(&self) -> FlameGraph {
        self.keep_projection(
            |n| n.hot_ns > 0 || n.cold_ns > 0 || n.value(WALLTIME) > 0,
            |n| FlameNode {
                key: n.key.clone(),
                parent: None,
                children: Vec::new(),
                values: BTreeMap::from([(WALLTIME.to_string(), n.value(WALLTIME))]),
                hot_ns: n.hot_ns,
                cold_ns: n.cold_ns,
                line_hist: n
                    .line_hist
                    .get(WALLTIME)
                    .map(|h| BTreeMap::from([(WALLTIME.to_string(), h.clone())]))
                    .unwrap_or_default(),
            },
            vec![WALLTIME.to_string()],
        )
    }

    /// The view of a single metric; nodes with no value for it are dropped.
    pub fn project_metric(&self, metric: &str) -> FlameGraph {
        self.keep_projection(
            |n| n.value(metric) > 0,
            |n| FlameNode {
                key: n.key.clone(),
                parent: None,
                children: Vec::new(),
                values: BTreeMap::from([(metric.to_string(), n.value(metric))]),
                hot_ns: 0,
                cold_ns: 0,
                line_hist: n
                    .line_hist
                    .get(metric)
                    .map(|h| BTreeMap::from([(metric.to_string(), h.clone())]))
                    .unwrap_or_default(),
            },
            vec![metric.to_string()],
        )
    }

    /// Lines of node `idx` by value, descending; ties by ascending line.
    pub fn line_breakdown(&self, idx: usize, metric: &str) -> Result<Vec<(u32, u64)>, FlameError> {
        if !self.metrics.iter().any(|m| m == metric) {
            return Err(FlameError::UnknownMetric(metric.to_string()));
        }
        let node = self
            .nodes
            .get(idx)
            .ok_or(FlameError::NoSuchNode(idx))?;
        Ok(line_breakdown(node, metric))
    }

    /// Channels searched: every metric plus the hot and cold channels.
    pub fn channels(&self) -> Vec<String> {
        let mut out = self.metrics.clone();
        out.push(HOT_CHANNEL.to_string());
        out.push(COLD_CHANNEL.to_string());
        out
    }

    /// Finds nodes whose function name matches `pattern` (unanchored).
    ///
    /// Per channel, the matched value is the sum over maximal matched
    /// subtrees, so nested matches are not double counted. The root never
    /// matches.
    pub fn search(&self, pattern: &str) -> Result<SearchResult, FlameError> {
        let re = Regex::new(pattern).map_err(|e| FlameError::InvalidPattern(e.to_string()))?;
        let channels = self.channels();
        let mut matched = vec![0u64; channels.len()];
        let mut matches = Vec::new();
        // (node, inside an already-matched subtree)
        let mut stack: Vec<(usize, bool)> =
            self.root().children.iter().rev().map(|&c| (c, false)).collect();
        while let Some((idx, covered)) = stack.pop() {
            let node = &self.nodes[idx];
            let hit = re.is_match(&node.key.function);
            if hit {
                matches.push(NodeMatch {
                    node: idx,
                    path: self.path_of(idx),
                });
                if !covered {
                    for (acc, ch) in matched.iter_mut().zip(&channels) {
                        *acc += node.channel(ch);
                    }
                }
            }
            for &c in node.children.iter().rev() {
                stack.push((c, covered || hit));
            }
        }
        let root = self.root();
        let channels = channels
            .into_iter()
            .zip(matched)
            .map(|(ch, m)| {
                let total = root.channel(&ch);
                let fraction = if total == 0 { 0.0 } else { m as f64 / total as f64 };
                (ch, ChannelFraction { matched: m, total, fraction })
            })
            .collect();
        Ok(SearchResult { matches, channels })
    }
}

/// Entries of `node.line_hist[metric]`, value descending, ties by line.
pub fn line_breakdown(node: &FlameNode, metric: &str) -> Vec<(u32, u64)> {
    let mut out: Vec<(u32, u64)> = node
        .line_hist
        .get(metric)
        .map(|h| h.iter().map(|(&l, &v)| (l, v)).collect())
        .unwrap_or_default();
    out.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    out
}

/// Folds samples and off-CPU intervals into one trie with every metric of
/// the session.
///
/// `samples` are `(sid, metric_id, period)`; `off` are `(sid, duration_ns)`.
pub fn aggregate(
    samples: &[(StackId, &str, u64)],
    off: &[(StackId, u64)],
    dict: &SessionDictionary,
) -> Result<FlameGraph, FlameError> {
    let metrics: Vec<String> = dict.metrics().descs().iter().map(|m| m.id.clone()).collect();
    let mut paths = StackPaths::new();
    let mut builder = FlameBuilder::new(&metrics);
    for &(sid, metric, period) in samples {
        let m = metrics
            .iter()
            .position(|id| id == metric)
            .ok_or_else(|| FlameError::UnknownMetric(metric.to_string()))?;
        let path = paths.resolve(sid, dict)?;
        builder.add_sample(&path, m, period);
    }
    for &(sid, duration) in off {
        let path = paths.resolve(sid, dict)?;
        builder.add_off(&path, duration);
    }
    Ok(builder.finish(&paths))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Hot,
    Cold,
}

/// One block of a flame chart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChartSpan {
    pub t_start: Timestamp,
    pub duration_ns: u64,
    pub sid: StackId,
    pub channel: Channel,
}

#[derive(Debug, Clone, Copy)]
struct OpenSpan {
    span: ChartSpan,
    covered_end: Timestamp,
}

/// Streaming flame chart construction for one thread.
///
/// Spans of each channel are emitted in start order once they can no longer
/// grow. A new span merges into the open one of its channel when the stack
/// is the same and it starts no later than `merge_slack_ns` after the open
/// span's end; merged durations add up.
#[derive(Debug, Clone)]
pub struct ChronBuilder {
    slack: u64,
    open: [Option<OpenSpan>; 2],
}

impl ChronBuilder {
    pub fn new(merge_slack_ns: u64) -> Self {
        ChronBuilder {
            slack: merge_slack_ns,
            open: [None, None],
        }
    }

    pub fn push(&mut self, span: ChartSpan, mut emit: impl FnMut(ChartSpan)) {
        let slot = &mut self.open[span.channel as usize];
        let end = span.t_start.saturating_add(span.duration_ns);
        if let Some(open) = slot {
            if open.span.sid == span.sid
                && span.t_start >= open.span.t_start
                && span.t_start <= open.covered_end.saturating_add(self.slack)
            {
                open.span.duration_ns += span.duration_ns;
                open.covered_end = open.covered_end.max(end);
                return;
            }
            emit(open.span);
        }
        *slot = Some(OpenSpan {
            span,
            covered_end: end,
        });
    }

    pub fn finish(self, mut emit: impl FnMut(ChartSpan)) {
        for open in self.open.into_iter().flatten() {
            emit(open.span);
        }
    }
}

/// Merges per-channel span sequences (each sorted by start) into one
/// sequence sorted by start, hot before cold on ties.
pub fn merge_channels(
    hot: impl IntoIterator<Item = ChartSpan>,
    cold: impl IntoIterator<Item = ChartSpan>,
) -> impl Iterator<Item = ChartSpan> {
    let mut hot = hot.into_iter().peekable();
    let mut cold = cold.into_iter().peekable();
    std::iter::from_fn(move || match (hot.peek(), cold.peek()) {
        (Some(h), Some(c)) => {
            if h.t_start <= c.t_start {
                hot.next()
            } else {
                cold.next()
            }
        }
        (Some(_), None) => hot.next(),
        (None, _) => cold.next(),
    })
}

/// Builds the flame chart of one thread from its wall-time samples
/// `(t, period, sid)` and its off-CPU intervals, both sorted by time.
pub fn chronological(
    samples: &[(Timestamp, u64, StackId)],
    off: &[OffInterval],
    merge_slack_ns: u64,
) -> Vec<ChartSpan> {
    let mut builder = ChronBuilder::new(merge_slack_ns);
    let mut hot = Vec::new();
    let mut cold = Vec::new();
    let mut sink = |s: ChartSpan| match s.channel {
        Channel::Hot => hot.push(s),
        Channel::Cold => cold.push(s),
    };
    for &(t, period, sid) in samples {
        builder.push(
            ChartSpan {
                t_start: t,
                duration_ns: period,
                sid,
                channel: Channel::Hot,
            },
            &mut sink,
        );
    }
    for iv in off {
        builder.push(
            ChartSpan {
                t_start: iv.start,
                duration_ns: iv.duration(),
                sid: iv.sid,
                channel: Channel::Cold,
            },
            &mut sink,
        );
    }
    builder.finish(&mut sink);
    merge_channels(hot, cold).collect()
}
