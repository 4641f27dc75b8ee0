//! On-disk session bundles.
//!
//! A bundle is a plain directory:
//!
//! ```text
//! <session>/
//!   manifest.json
//!   tree.json
//!   stacks.json
//!   timeline/<tid>.json
//!   flame/<tid>/walltime_hotcold.json
//!   flame/<tid>/<metric>.json        one per non-walltime metric
//!   chron/<tid>.json
//!   roofline.json                    optional
//! ```
//!
//! Bundles are written into a dot-prefixed staging directory and renamed
//! into place, so a reader never observes a partial bundle. All documents
//! are flat (no nesting deeper than a few levels) and serialized with
//! sorted maps, so the same session always produces the same bytes.

pub mod roofline;
pub mod spill;

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envcheck::CheckReport;
use crate::flame::{merge_channels, ChartSpan, Channel, FlameGraph, FlameNode, FrameKey};
use crate::model::{is_safe_name, FrameDef, FrameId, MetricDesc, StackDef, StackId, Tid, Timestamp, WALLTIME};
use crate::timeline::{ActivitySegment, ThreadTimeline};
use crate::tree::{Forest, ProcessNode};

pub use roofline::{parse_roofline, RooflineData, RooflineError};
pub use spill::{SpillBuffer, SpillRecord};

pub const FORMAT_VERSION: u32 = 1;
/// File stem of the wall-time flame graph with hot and cold channels.
pub const HOTCOLD: &str = "walltime_hotcold";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TREE_FILE: &str = "tree.json";
pub const STACKS_FILE: &str = "stacks.json";
pub const ROOFLINE_FILE: &str = "roofline.json";
/// At most this many errors are kept in a manifest; `error_count` has the
/// total.
pub const MAX_LOGGED_ERRORS: usize = 1000;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("no manifest.json in bundle")]
    MissingManifest,
    #[error("bundle format version {found} is not supported")]
    VersionMismatch { found: u64 },
    #[error("{file} is corrupt: {reason}")]
    CorruptFile { file: String, reason: String },
    #[error("{0} not found in bundle")]
    NotFound(String),
}

/// One recorded ingest problem. `position` is the 1-based line number of
/// the offending record in the stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoggedError {
    pub position: u64,
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub orphan_switch_in: u64,
    pub nested_switch_out: u64,
    pub reorder_overflow: u64,
    pub skipped_lines: u64,
    pub dropped_events: u64,
    pub filtered_off_intervals: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub session_id: String,
    /// Nanoseconds since the Unix epoch at t=0.
    pub wall_start: u64,
    pub command: String,
    pub hostname: String,
    pub metrics: Vec<MetricDesc>,
    pub duration_ns: u64,
    pub thread_count: usize,
    /// The stream ended without an End record.
    pub truncated: bool,
    /// Strict mode stopped at the first error (see `error_log`).
    pub aborted: bool,
    pub error_count: u64,
    pub error_log: Vec<LoggedError>,
    /// Records received per event type.
    pub event_counts: BTreeMap<String, u64>,
    pub counters: Counters,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub check_report: Option<CheckReport>,
}

impl Manifest {
    /// The metrics that get their own flame graph file.
    pub fn flame_projections(&self) -> Vec<String> {
        std::iter::once(HOTCOLD.to_string())
            .chain(self.metrics.iter().filter(|m| m.id != WALLTIME).map(|m| m.id.clone()))
            .collect()
    }
}

/// The frames and stacks a bundle refers to.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StackTable {
    pub frames: BTreeMap<FrameId, FrameDef>,
    pub stacks: BTreeMap<StackId, Vec<FrameId>>,
}

impl StackTable {
    /// Frames of `sid`, leaf first.
    pub fn resolve(&self, sid: StackId) -> Option<Vec<&FrameDef>> {
        self.stacks
            .get(&sid)?
            .iter()
            .map(|fid| self.frames.get(fid))
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct StacksDoc {
    frames: Vec<FrameDef>,
    stacks: Vec<StackDef>,
}

#[derive(Serialize, Deserialize)]
struct TreeHead {
    roots: Vec<Tid>,
}

#[derive(Deserialize)]
struct TreeDoc {
    roots: Vec<Tid>,
    nodes: Vec<ProcessNode>,
}

#[derive(Serialize)]
struct TimelineHead {
    tid: Tid,
    spawn_t: Timestamp,
    exit_t: Timestamp,
}

#[derive(Serialize)]
struct FlameHead<'a> {
    tid: Tid,
    projection: &'a str,
    metrics: &'a [String],
}

#[derive(Serialize, Deserialize)]
struct FlameNodeDoc {
    function: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    module: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    parent: Option<usize>,
    values: BTreeMap<String, u64>,
    hot_ns: u64,
    cold_ns: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    line_hist: BTreeMap<String, BTreeMap<u32, u64>>,
}

#[derive(Deserialize)]
struct FlameDoc {
    tid: Tid,
    metrics: Vec<String>,
    nodes: Vec<FlameNodeDoc>,
}

#[derive(Serialize)]
struct ChronHead {
    tid: Tid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThreadChart {
    pub tid: Tid,
    pub spans: Vec<ChartSpan>,
}

fn node_doc(n: &FlameNode) -> FlameNodeDoc {
    FlameNodeDoc {
        function: n.key.function.clone(),
        file: n.key.file.clone(),
        module: n.key.module.clone(),
        parent: n.parent,
        values: n.values.clone(),
        hot_ns: n.hot_ns,
        cold_ns: n.cold_ns,
        line_hist: n.line_hist.clone(),
    }
}

fn graph_from_doc(doc: FlameDoc, file: &str) -> Result<FlameGraph, StoreError> {
    let corrupt = |reason: &str| StoreError::CorruptFile {
        file: file.to_string(),
        reason: reason.to_string(),
    };
    if doc.nodes.is_empty() || doc.nodes[0].parent.is_some() {
        return Err(corrupt("missing root node"));
    }
    let mut nodes: Vec<FlameNode> = Vec::with_capacity(doc.nodes.len());
    for (idx, n) in doc.nodes.into_iter().enumerate() {
        if idx > 0 {
            match n.parent {
                Some(p) if p < idx => nodes[p].children.push(idx),
                _ => return Err(corrupt("node parent must precede it")),
            }
        }
        nodes.push(FlameNode {
            key: FrameKey {
                function: n.function,
                file: n.file,
                module: n.module,
            },
            parent: n.parent,
            children: Vec::new(),
            values: n.values,
            hot_ns: n.hot_ns,
            cold_ns: n.cold_ns,
            line_hist: n.line_hist,
        });
    }
    Ok(FlameGraph {
        metrics: doc.metrics,
        nodes,
    })
}

/// Writes `{<head fields>, "<key>": [ items one per line ]}`.
fn stream_doc<W: Write, H: Serialize, T: Serialize>(
    w: &mut W,
    head: &H,
    key: &str,
    items: impl IntoIterator<Item = io::Result<T>>,
) -> io::Result<()> {
    let mut open = serde_json::to_string(head)?;
    debug_assert!(open.ends_with('}'));
    open.pop();
    if open.len() > 1 {
        open.push(',');
    }
    write!(w, "{open}\"{key}\":[")?;
    let mut first = true;
    for item in items {
        let item = item?;
        w.write_all(if first { b"\n" } else { b",\n" })?;
        serde_json::to_writer(&mut *w, &item)?;
        first = false;
    }
    w.write_all(b"\n]}\n")
}

fn create(path: &Path) -> io::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_pretty<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()
}

fn write_tree(path: &Path, tree: &Forest) -> io::Result<()> {
    let mut w = create(path)?;
    stream_doc(
        &mut w,
        &TreeHead {
            roots: tree.roots.clone(),
        },
        "nodes",
        tree.nodes.values().map(Ok),
    )?;
    w.flush()
}

fn write_stacks(path: &Path, stacks: &StackTable) -> io::Result<()> {
    let mut w = create(path)?;
    w.write_all(b"{\"frames\":[")?;
    for (i, f) in stacks.frames.values().enumerate() {
        w.write_all(if i == 0 { b"\n" } else { b",\n" })?;
        serde_json::to_writer(&mut w, f)?;
    }
    w.write_all(b"\n],\"stacks\":[")?;
    for (i, (&sid, frames)) in stacks.stacks.iter().enumerate() {
        w.write_all(if i == 0 { b"\n" } else { b",\n" })?;
        serde_json::to_writer(
            &mut w,
            &StackDef {
                sid,
                frames: frames.clone(),
            },
        )?;
    }
    w.write_all(b"\n]}\n")?;
    w.flush()
}

fn write_flame(path: &Path, tid: Tid, projection: &str, graph: &FlameGraph) -> io::Result<()> {
    let mut w = create(path)?;
    stream_doc(
        &mut w,
        &FlameHead {
            tid,
            projection,
            metrics: &graph.metrics,
        },
        "nodes",
        graph.nodes.iter().map(|n| Ok(node_doc(n))),
    )?;
    w.flush()
}

fn write_timeline(
    path: &Path,
    head: TimelineHead,
    segments: impl IntoIterator<Item = io::Result<ActivitySegment>>,
) -> io::Result<()> {
    let mut w = create(path)?;
    stream_doc(&mut w, &head, "segments", segments)?;
    w.flush()
}

fn write_chart(path: &Path, tid: Tid, spans: impl IntoIterator<Item = io::Result<ChartSpan>>) -> io::Result<()> {
    let mut w = create(path)?;
    stream_doc(&mut w, &ChronHead { tid }, "spans", spans)?;
    w.flush()
}

/// Projections written for each thread, in file order.
pub fn flame_projections(graph: &FlameGraph) -> Vec<(String, FlameGraph)> {
    let mut out = vec![(HOTCOLD.to_string(), graph.project_hotcold())];
    for m in graph.metrics.iter().filter(|m| *m != WALLTIME) {
        out.push((m.clone(), graph.project_metric(m)));
    }
    out
}

/// Per-thread output of the pipeline. Segments and chart spans may live
/// partly on disk.
#[derive(Debug)]
pub struct FinishedThread {
    pub spawn_t: Timestamp,
    pub exit_t: Timestamp,
    pub flame: FlameGraph,
    pub records: SpillBuffer,
}

impl FinishedThread {
    fn chart(&self) -> io::Result<impl Iterator<Item = io::Result<ChartSpan>> + '_> {
        // Both channels are sorted; errors are surfaced in place.
        let hot = self.records.spans(Channel::Hot)?;
        let cold = self.records.spans(Channel::Cold)?;
        let err: std::rc::Rc<std::cell::RefCell<Option<io::Error>>> = Default::default();
        let (e1, e2, e3) = (err.clone(), err.clone(), err);
        let hot = hot.map_while(move |r| r.map_err(|e| *e1.borrow_mut() = Some(e)).ok());
        let cold = cold.map_while(move |r| r.map_err(|e| *e2.borrow_mut() = Some(e)).ok());
        let mut merged = merge_channels(hot, cold);
        Ok(std::iter::from_fn(move || match merged.next() {
            Some(s) => Some(Ok(s)),
            None => e3.borrow_mut().take().map(Err),
        }))
    }
}

/// Everything the pipeline produced for one session, ready to be written.
#[derive(Debug)]
pub struct FinishedSession {
    pub manifest: Manifest,
    pub tree: Forest,
    pub stacks: StackTable,
    pub threads: BTreeMap<Tid, FinishedThread>,
    pub roofline: Option<RooflineData>,
}

impl FinishedSession {
    /// Writes all bundle files into `dir`, which must exist.
    pub fn write_to(&self, dir: &Path) -> io::Result<()> {
        write_pretty(&dir.join(MANIFEST_FILE), &self.manifest)?;
        write_tree(&dir.join(TREE_FILE), &self.tree)?;
        write_stacks(&dir.join(STACKS_FILE), &self.stacks)?;
        if let Some(r) = &self.roofline {
            write_pretty(&dir.join(ROOFLINE_FILE), r)?;
        }
        fs::create_dir_all(dir.join("timeline"))?;
        fs::create_dir_all(dir.join("chron"))?;
        fs::create_dir_all(dir.join("flame"))?;
        for (&tid, th) in &self.threads {
            write_timeline(
                &dir.join("timeline").join(format!("{tid}.json")),
                TimelineHead {
                    tid,
                    spawn_t: th.spawn_t,
                    exit_t: th.exit_t,
                },
                th.records.segments()?,
            )?;
            write_chart(&dir.join("chron").join(format!("{tid}.json")), tid, th.chart()?)?;
            let fdir = dir.join("flame").join(tid.to_string());
            fs::create_dir_all(&fdir)?;
            for (name, graph) in flame_projections(&th.flame) {
                write_flame(&fdir.join(format!("{name}.json")), tid, &name, &graph)?;
            }
        }
        Ok(())
    }

    /// The bundle as it will read back from disk.
    pub fn to_bundle(&self) -> io::Result<SessionBundle> {
        let mut timelines = BTreeMap::new();
        let mut flames = BTreeMap::new();
        let mut charts = BTreeMap::new();
        for (&tid, th) in &self.threads {
            timelines.insert(
                tid,
                ThreadTimeline {
                    tid,
                    spawn_t: th.spawn_t,
                    exit_t: th.exit_t,
                    segments: th.records.segments()?.collect::<io::Result<_>>()?,
                },
            );
            flames.insert(tid, flame_projections(&th.flame).into_iter().collect());
            charts.insert(
                tid,
                ThreadChart {
                    tid,
                    spans: th.chart()?.collect::<io::Result<_>>()?,
                },
            );
        }
        Ok(SessionBundle {
            manifest: self.manifest.clone(),
            tree: self.tree.clone(),
            stacks: self.stacks.clone(),
            timelines,
            flames,
            charts,
            roofline: self.roofline.clone(),
        })
    }
}

/// A fully materialized bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionBundle {
    pub manifest: Manifest,
    pub tree: Forest,
    pub stacks: StackTable,
    pub timelines: BTreeMap<Tid, ThreadTimeline>,
    /// Per thread, projection name (see [`HOTCOLD`]) to graph.
    pub flames: BTreeMap<Tid, BTreeMap<String, FlameGraph>>,
    pub charts: BTreeMap<Tid, ThreadChart>,
    pub roofline: Option<RooflineData>,
}

fn read_json<T: DeserializeOwned>(dir: &Path, rel: &str) -> Result<T, StoreError> {
    let bytes = match fs::read(dir.join(rel)) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(StoreError::NotFound(rel.to_string())),
        Err(e) => return Err(e.into()),
    };
    serde_json::from_slice(&bytes).map_err(|e| StoreError::CorruptFile {
        file: rel.to_string(),
        reason: e.to_string(),
    })
}

/// Reads the manifest of the bundle at `dir`, checking its version.
pub fn read_manifest(dir: &Path) -> Result<Manifest, StoreError> {
    match fs::read(dir.join(MANIFEST_FILE)) {
        Ok(bytes) => parse_manifest(&bytes),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Err(StoreError::MissingManifest),
        Err(e) => Err(e.into()),
    }
}

/// Parses manifest bytes, checking the format version before the rest.
pub fn parse_manifest(bytes: &[u8]) -> Result<Manifest, StoreError> {
    let corrupt = |reason: String| StoreError::CorruptFile {
        file: MANIFEST_FILE.into(),
        reason,
    };
    let value: serde_json::Value = serde_json::from_slice(bytes).map_err(|e| corrupt(e.to_string()))?;
    match value.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => return Err(StoreError::VersionMismatch { found: v }),
        None => return Err(corrupt("format_version missing".into())),
    }
    serde_json::from_value(value).map_err(|e| corrupt(e.to_string()))
}

/// On-demand access to the files of one bundle.
#[derive(Debug, Clone)]
pub struct BundleReader {
    dir: PathBuf,
    pub manifest: Manifest,
}

impl BundleReader {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        let manifest = read_manifest(&dir)?;
        Ok(BundleReader { dir, manifest })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn tree(&self) -> Result<Forest, StoreError> {
        let doc: TreeDoc = read_json(&self.dir, TREE_FILE)?;
        let nodes = doc.nodes.into_iter().map(|n| (n.tid, n)).collect();
        Ok(Forest::from_parts(doc.roots, nodes))
    }

    pub fn stacks(&self) -> Result<StackTable, StoreError> {
        let doc: StacksDoc = read_json(&self.dir, STACKS_FILE)?;
        Ok(StackTable {
            frames: doc.frames.into_iter().map(|f| (f.fid, f)).collect(),
            stacks: doc.stacks.into_iter().map(|s| (s.sid, s.frames)).collect(),
        })
    }

    /// Tids that have a timeline file, ascending.
    pub fn thread_ids(&self) -> Result<Vec<Tid>, StoreError> {
        let mut tids = Vec::new();
        let dir = self.dir.join("timeline");
        if !dir.exists() {
            return Ok(tids);
        }
        for entry in fs::read_dir(dir)? {
            let name = entry?.file_name();
            if let Some(tid) = name
                .to_str()
                .and_then(|n| n.strip_suffix(".json"))
                .and_then(|n| n.parse::<Tid>().ok())
            {
                tids.push(tid);
            }
        }
        tids.sort_unstable();
        Ok(tids)
    }

    pub fn timeline(&self, tid: Tid) -> Result<ThreadTimeline, StoreError> {
        read_json(&self.dir, &format!("timeline/{tid}.json"))
    }

    pub fn chart(&self, tid: Tid) -> Result<ThreadChart, StoreError> {
        read_json(&self.dir, &format!("chron/{tid}.json"))
    }

    /// `projection` is [`HOTCOLD`] or a non-walltime metric id.
    pub fn flame(&self, tid: Tid, projection: &str) -> Result<FlameGraph, StoreError> {
        if !is_safe_name(projection) {
            return Err(StoreError::NotFound(projection.to_string()));
        }
        let rel = format!("flame/{tid}/{projection}.json");
        let doc: FlameDoc = read_json(&self.dir, &rel)?;
        if doc.tid != tid {
            return Err(StoreError::CorruptFile {
                file: rel,
                reason: "tid does not match file name".into(),
            });
        }
        graph_from_doc(doc, &rel)
    }

    pub fn roofline(&self) -> Result<Option<RooflineData>, StoreError> {
        match fs::read(self.dir.join(ROOFLINE_FILE)) {
            Ok(bytes) => parse_roofline(&bytes).map(Some).map_err(|e| StoreError::CorruptFile {
                file: ROOFLINE_FILE.into(),
                reason: e.to_string(),
            }),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Reads every file of the bundle.
    pub fn load_all(&self) -> Result<SessionBundle, StoreError> {
        let mut timelines = BTreeMap::new();
        let mut flames = BTreeMap::new();
        let mut charts = BTreeMap::new();
        let projections = self.manifest.flame_projections();
        for tid in self.thread_ids()? {
            timelines.insert(tid, self.timeline(tid)?);
            charts.insert(tid, self.chart(tid)?);
            let mut per = BTreeMap::new();
            for p in &projections {
                per.insert(p.clone(), self.flame(tid, p)?);
            }
            flames.insert(tid, per);
        }
        Ok(SessionBundle {
            manifest: self.manifest.clone(),
            tree: self.tree()?,
            stacks: self.stacks()?,
            timelines,
            flames,
            charts,
            roofline: self.roofline()?,
        })
    }
}

/// Loads the bundle at `dir` completely.
pub fn load(dir: &Path) -> Result<SessionBundle, StoreError> {
    BundleReader::open(dir)?.load_all()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SessionEntry {
    /// Directory name; may differ from the session id after a collision.
    pub name: String,
    pub manifest: Manifest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SkippedEntry {
    pub name: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SessionListing {
    pub sessions: Vec<SessionEntry>,
    pub skipped: Vec<SkippedEntry>,
}

/// Lists the bundles under `root`, sorted by wall start (then directory
/// name). Hidden
/// entries (staging directories) are ignored; unreadable bundles are
/// reported in `skipped`.
pub fn list_sessions(root: &Path) -> io::Result<SessionListing> {
    let mut listing = SessionListing::default();
    let mut names = Vec::new();
    for entry in fs::read_dir(root)? {
        let entry = entry?;
        if !entry.file_type()?.is_dir() {
            continue;
        }
        match entry.file_name().into_string() {
            Ok(name) if !name.starts_with('.') => names.push(name),
            _ => {}
        }
    }
    names.sort();
    for name in names {
        match read_manifest(&root.join(&name)) {
            Ok(manifest) => listing.sessions.push(SessionEntry { name, manifest }),
            Err(e) => listing.skipped.push(SkippedEntry {
                name,
                reason: e.to_string(),
            }),
        }
    }
    listing
        .sessions
        .sort_by(|a, b| a.manifest.wall_start.cmp(&b.manifest.wall_start).then_with(|| a.name.cmp(&b.name)));
    Ok(listing)
}

/// A staging directory for one in-progress session.
#[derive(Debug)]
pub struct Staging {
    path: PathBuf,
}

impl Staging {
    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Where spill files of this session go; removed at commit.
    pub fn spill_dir(&self) -> PathBuf {
        self.path.join(".spill")
    }
}

/// The output directory shared by all sessions of a server.
#[derive(Debug)]
pub struct OutputRoot {
    root: PathBuf,
    counter: AtomicU64,
    names: Mutex<HashSet<String>>,
}

impl OutputRoot {
    pub fn new(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(OutputRoot {
            root,
            counter: AtomicU64::new(0),
            names: Mutex::new(HashSet::new()),
        })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn begin(&self) -> io::Result<Staging> {
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        let path = self.root.join(format!(".staging-{}-{n}", std::process::id()));
        fs::create_dir_all(path.join(".spill"))?;
        Ok(Staging { path })
    }

    /// Writes `session` into `staging` and moves it into place under its
    /// session id, adding a `-N` suffix if that name is taken. Returns the
    /// final directory.
    pub fn commit(&self, staging: Staging, session: &FinishedSession) -> io::Result<PathBuf> {
        let result = session
            .write_to(&staging.path)
            .and_then(|()| fs::remove_dir_all(staging.spill_dir()))
            .and_then(|()| self.publish(&staging.path, &session.manifest.session_id));
        if result.is_err() {
            let _ = fs::remove_dir_all(&staging.path);
        }
        result
    }

    /// Discards an unfinished session.
    pub fn abandon(&self, staging: Staging) {
        let _ = fs::remove_dir_all(&staging.path);
    }

    fn publish(&self, from: &Path, session_id: &str) -> io::Result<PathBuf> {
        let base = if is_safe_name(session_id) { session_id } else { "session" };
        // Held across the rename so two sessions never race for a name.
        let mut names = self.names.lock().unwrap_or_else(|e| e.into_inner());
        let mut n = 0u32;
        loop {
            let name = if n == 0 { base.to_string() } else { format!("{base}-{n}") };
            let target = self.root.join(&name);
            if !names.contains(&name) && !target.exists() {
                fs::rename(from, &target)?;
                names.insert(name);
                return Ok(target);
            }
            n += 1;
        }
    }
}
