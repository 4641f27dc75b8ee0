//! Domain vocabulary shared by every stage of the pipeline.
//!
//! Timestamps are nanoseconds since session start. Frames arrive already
//! symbolicated, so the server never needs the profiled binaries. Stacks are
//! dictionary encoded: a [`StackDef`] lists frame ids leaf-first and every
//! sample or switch refers to a stack by id.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Nanoseconds since session start.
pub type Timestamp = u64;
/// Thread id, unique within a session.
pub type Tid = u32;
/// Process id.
pub type Pid = u32;
/// Frame dictionary id.
pub type FrameId = u64;
/// Stack dictionary id.
pub type StackId = u64;

/// Id of the mandatory wall-clock metric.
pub const WALLTIME: &str = "walltime";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Time,
    Count,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Time => "time",
            MetricKind::Count => "count",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "time" => Some(MetricKind::Time),
            "count" => Some(MetricKind::Count),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricDesc {
    pub id: String,
    pub kind: MetricKind,
    pub unit: String,
}

impl MetricDesc {
    pub fn walltime() -> Self {
        MetricDesc {
            id: WALLTIME.to_string(),
            kind: MetricKind::Time,
            unit: "ns".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionHeader {
    pub version: u32,
    pub session_id: String,
    /// Wall-clock start of the session, nanoseconds since the Unix epoch.
    pub wall_start: u64,
    pub command: String,
    pub hostname: String,
    pub metrics: Vec<MetricDesc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameDef {
    pub fid: FrameId,
    pub function: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<u32>,
    /// Binary or shared object the frame belongs to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub module: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackDef {
    pub sid: StackId,
    /// Frame ids, leaf (innermost) first.
    pub frames: Vec<FrameId>,
}

/// Index of a metric in the session header's metric list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MetricRef(pub u16);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwitchOut {
    pub tid: Tid,
    pub t: Timestamp,
    pub sid: StackId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwitchIn {
    pub tid: Tid,
    pub t: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Spawn {
    /// 0 denotes the profiled root command.
    pub parent_tid: Tid,
    pub pid: Pid,
    pub tid: Tid,
    pub t: Timestamp,
    pub sid: Option<StackId>,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exec {
    pub tid: Tid,
    pub t: Timestamp,
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Exit {
    pub tid: Tid,
    pub t: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct End {
    pub t: Timestamp,
}

/// One record of the collector to server stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventRecord {
    Header(SessionHeader),
    Frame(FrameDef),
    Stack(StackDef),
    Sample(Sample),
    SwitchOut(SwitchOut),
    SwitchIn(SwitchIn),
    Spawn(Spawn),
    Exec(Exec),
    Exit(Exit),
    End(End),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub tid: Tid,
    pub pid: Pid,
    pub t: Timestamp,
    pub metric_id: String,
    pub period: u64,
    pub sid: StackId,
}

impl EventRecord {
    /// Wire type tag.
    pub fn type_tag(&self) -> &'static str {
        match self {
            EventRecord::Header(_) => "header",
            EventRecord::Frame(_) => "frame",
            EventRecord::Stack(_) => "stack",
            EventRecord::Sample(_) => "sample",
            EventRecord::SwitchOut(_) => "switch_out",
            EventRecord::SwitchIn(_) => "switch_in",
            EventRecord::Spawn(_) => "spawn",
            EventRecord::Exec(_) => "exec",
            EventRecord::Exit(_) => "exit",
            EventRecord::End(_) => "end",
        }
    }

    /// Timestamp of the record; dictionary records and the header carry none.
    pub fn timestamp(&self) -> Option<Timestamp> {
        match self {
            EventRecord::Header(_) | EventRecord::Frame(_) | EventRecord::Stack(_) => None,
            EventRecord::Sample(s) => Some(s.t),
            EventRecord::SwitchOut(s) => Some(s.t),
            EventRecord::SwitchIn(s) => Some(s.t),
            EventRecord::Spawn(s) => Some(s.t),
            EventRecord::Exec(e) => Some(e.t),
            EventRecord::Exit(e) => Some(e.t),
            EventRecord::End(e) => Some(e.t),
        }
    }

    pub fn is_dictionary(&self) -> bool {
        matches!(self, EventRecord::Frame(_) | EventRecord::Stack(_))
    }
}

/// All wire type tags, in canonical order.
pub const EVENT_TYPES: [&str; 10] = [
    "header",
    "frame",
    "stack",
    "sample",
    "switch_out",
    "switch_in",
    "spawn",
    "exec",
    "exit",
    "end",
];

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum ValidationError {
    #[error("stack {sid} references undefined frame {fid}")]
    UndefinedFrame { sid: StackId, fid: FrameId },
    #[error("undefined stack {0}")]
    UndefinedStack(StackId),
    #[error("unknown metric '{0}'")]
    UnknownMetric(String),
    #[error("conflicting redefinition of {kind} {id}")]
    DuplicateDefinition { kind: String, id: u64 },
    #[error("session header misplaced")]
    HeaderMisplaced,
    #[error("record after end of session")]
    RecordAfterEnd,
    #[error("invalid field '{field}': {reason}")]
    InvalidField { field: String, reason: String },
}

impl ValidationError {
    pub fn code(&self) -> &'static str {
        match self {
            ValidationError::UndefinedFrame { .. } => "UndefinedFrame",
            ValidationError::UndefinedStack(_) => "UndefinedStack",
            ValidationError::UnknownMetric(_) => "UnknownMetric",
            ValidationError::DuplicateDefinition { .. } => "DuplicateDefinition",
            ValidationError::HeaderMisplaced => "HeaderMisplaced",
            ValidationError::RecordAfterEnd => "RecordAfterEnd",
            ValidationError::InvalidField { .. } => "InvalidField",
        }
    }
}

fn invalid(field: &str, reason: impl Into<String>) -> ValidationError {
    ValidationError::InvalidField {
        field: field.to_string(),
        reason: reason.into(),
    }
}

/// Whether `s` can be used as a file or directory name inside a bundle.
///
/// Session ids and metric ids end up in paths, so they are limited to a
/// conservative character set.
pub fn is_safe_name(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= 128
        && s != "."
        && s != ".."
        && !s.starts_with('.')
        && s
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.'))
}

/// Checks the header-level invariants: metric ids unique and path safe,
/// exactly one time metric and it is `walltime`.
pub fn validate_header(header: &SessionHeader) -> Result<(), ValidationError> {
    if !is_safe_name(&header.session_id) {
        return Err(invalid("session_id", "must match [A-Za-z0-9._-]+"));
    }
    let mut seen = std::collections::HashSet::new();
    let mut time_metrics = 0;
    for m in &header.metrics {
        if !is_safe_name(&m.id) || m.id == "walltime_hotcold" {
            return Err(invalid("metrics", format!("bad metric id '{}'", m.id)));
        }
        if !seen.insert(m.id.as_str()) {
            return Err(invalid("metrics", format!("duplicate metric id '{}'", m.id)));
        }
        if m.kind == MetricKind::Time {
            if m.id != WALLTIME {
                return Err(invalid("metrics", format!("time metric must be '{WALLTIME}'")));
            }
            time_metrics += 1;
        }
    }
    if time_metrics != 1 {
        return Err(invalid("metrics", format!("exactly one '{WALLTIME}' time metric required")));
    }
    if header.metrics.len() > u16::MAX as usize {
        return Err(invalid("metrics", "too many metrics"));
    }
    Ok(())
}

/// Maps metric ids to dense indices, in header order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MetricTable {
    metrics: Vec<MetricDesc>,
    by_id: HashMap<String, MetricRef>,
}

impl MetricTable {
    pub fn new(metrics: &[MetricDesc]) -> Self {
        let by_id = metrics
            .iter()
            .enumerate()
            .map(|(i, m)| (m.id.clone(), MetricRef(i as u16)))
            .collect();
        MetricTable {
            metrics: metrics.to_vec(),
            by_id,
        }
    }

    pub fn lookup(&self, id: &str) -> Option<MetricRef> {
        self.by_id.get(id).copied()
    }

    pub fn desc(&self, r: MetricRef) -> &MetricDesc {
        &self.metrics[r.0 as usize]
    }

    pub fn id(&self, r: MetricRef) -> &str {
        &self.metrics[r.0 as usize].id
    }

    pub fn walltime(&self) -> Option<MetricRef> {
        self.lookup(WALLTIME)
    }

    pub fn len(&self) -> usize {
        self.metrics.len()
    }

    pub fn is_empty(&self) -> bool {
        self.metrics.is_empty()
    }

    pub fn descs(&self) -> &[MetricDesc] {
        &self.metrics
    }
}

/// Session-scoped knowledge needed to validate records: the header, the
/// frame and stack dictionaries, and whether `end` has been seen.
#[derive(Debug, Clone, Default)]
pub struct SessionDictionary {
    header: Option<SessionHeader>,
    metrics: MetricTable,
    frames: HashMap<FrameId, FrameDef>,
    stacks: HashMap<StackId, Vec<FrameId>>,
    ended: bool,
}

impl SessionDictionary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn header(&self) -> Option<&SessionHeader> {
        self.header.as_ref()
    }

    pub fn metrics(&self) -> &MetricTable {
        &self.metrics
    }

    pub fn frame(&self, fid: FrameId) -> Option<&FrameDef> {
        self.frames.get(&fid)
    }

    pub fn stack(&self, sid: StackId) -> Option<&[FrameId]> {
        self.stacks.get(&sid).map(Vec::as_slice)
    }

    pub fn has_stack(&self, sid: StackId) -> bool {
        self.stacks.contains_key(&sid)
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn stack_count(&self) -> usize {
        self.stacks.len()
    }

    /// Resolves a stack id to its frames, leaf first.
    pub fn resolve(&self, sid: StackId) -> Option<Vec<&FrameDef>> {
        self.stacks
            .get(&sid)?
            .iter()
            .map(|fid| self.frames.get(fid))
            .collect()
    }

    /// Validates `record` against the current state without changing it.
    pub fn validate(&self, record: &EventRecord) -> Result<(), ValidationError> {
        validate_record(record, self)
    }

    /// Validates and, on success, records any definitions `record` carries.
    pub fn accept(&mut self, record: &EventRecord) -> Result<(), ValidationError> {
        validate_record(record, self)?;
        match record {
            EventRecord::Header(h) => {
                self.metrics = MetricTable::new(&h.metrics);
                self.header = Some(h.clone());
            }
            EventRecord::Frame(f) => {
                self.frames.entry(f.fid).or_insert_with(|| f.clone());
            }
            EventRecord::Stack(s) => {
                self.stacks.entry(s.sid).or_insert_with(|| s.frames.clone());
            }
            EventRecord::End(_) => self.ended = true,
            _ => {}
        }
        Ok(())
    }
}

fn check_tid(field: &str, tid: Tid) -> Result<(), ValidationError> {
    if tid == 0 {
        return Err(invalid(field, "thread id 0 is reserved"));
    }
    Ok(())
}

/// Checks one record against the session state.
///
/// Dictionary records must be internally valid and consistent with earlier
/// definitions (identical re-definition is accepted). Timestamped records
/// must reference known stacks and metrics.
pub fn validate_record(
    record: &EventRecord,
    state: &SessionDictionary,
) -> Result<(), ValidationError> {
    if let EventRecord::Header(h) = record {
        if state.header.is_some() {
            return Err(ValidationError::HeaderMisplaced);
        }
        return validate_header(h);
    }
    if state.header.is_none() {
        return Err(ValidationError::HeaderMisplaced);
    }
    if state.ended {
        return Err(ValidationError::RecordAfterEnd);
    }
    let known_stack = |sid: StackId| {
        if state.stacks.contains_key(&sid) {
            Ok(())
        } else {
            Err(ValidationError::UndefinedStack(sid))
        }
    };
    match record {
        EventRecord::Header(_) => unreachable!(),
        EventRecord::Frame(f) => {
            if f.fid == 0 {
                return Err(invalid("fid", "must be positive"));
            }
            if f.function.is_empty() {
                return Err(invalid("function", "must be non-empty"));
            }
            match state.frames.get(&f.fid) {
                Some(existing) if existing != f => Err(ValidationError::DuplicateDefinition {
                    kind: "frame".into(),
                    id: f.fid,
                }),
                _ => Ok(()),
            }
        }
        EventRecord::Stack(s) => {
            if s.sid == 0 {
                return Err(invalid("sid", "must be positive"));
            }
            if s.frames.is_empty() {
                return Err(invalid("frames", "must be non-empty"));
            }
            if let Some(&fid) = s.frames.iter().find(|fid| !state.frames.contains_key(fid)) {
                return Err(ValidationError::UndefinedFrame { sid: s.sid, fid });
            }
            match state.stacks.get(&s.sid) {
                Some(existing) if existing != &s.frames => {
                    Err(ValidationError::DuplicateDefinition {
                        kind: "stack".into(),
                        id: s.sid,
                    })
                }
                _ => Ok(()),
            }
        }
        EventRecord::Sample(s) => {
            check_tid("tid", s.tid)?;
            if state.metrics.lookup(&s.metric_id).is_none() {
                return Err(ValidationError::UnknownMetric(s.metric_id.clone()));
            }
            known_stack(s.sid)
        }
        EventRecord::SwitchOut(s) => {
            check_tid("tid", s.tid)?;
            known_stack(s.sid)
        }
        EventRecord::SwitchIn(s) => check_tid("tid", s.tid),
        EventRecord::Spawn(s) => {
            check_tid("tid", s.tid)?;
            if s.parent_tid == s.tid {
                return Err(invalid("parent_tid", "a thread cannot spawn itself"));
            }
            match s.sid {
                Some(sid) => known_stack(sid),
                None => Ok(()),
            }
        }
        EventRecord::Exec(e) => check_tid("tid", e.tid),
        EventRecord::Exit(e) => check_tid("tid", e.tid),
        EventRecord::End(_) => Ok(()),
    }
}
