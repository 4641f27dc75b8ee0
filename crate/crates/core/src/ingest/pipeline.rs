//! Dispatch of time-ordered events into the per-thread builders.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::PathBuf;
use std::sync::Arc;

use thiserror::Error;

use crate::flame::{ChartSpan, Channel, ChronBuilder, FlameBuilder, FlameError, StackPath, StackPaths};
use crate::model::{EventRecord, MetricTable, SessionDictionary, StackId, Tid, Timestamp, ValidationError, WALLTIME};
use crate::store::{Counters, FinishedThread, SpillBuffer, SpillRecord, StackTable};
use crate::timeline::{OffInterval, PairStep, SegmentBuilder, SwitchEvent, SwitchPairer, TimelineError};
use crate::tree::{Forest, TreeError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Timeline(#[from] TimelineError),
    #[error("spill i/o failed: {0}")]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    pub fn code(&self) -> &'static str {
        match self {
            PipelineError::Validation(e) => e.code(),
            PipelineError::Tree(e) => e.code(),
            PipelineError::Timeline(_) => "NestedSwitchOut",
            PipelineError::Io(_) => "SpillFailed",
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub strict: bool,
    /// Off-CPU intervals shorter than this are dropped.
    pub min_off_ns: u64,
    /// Gap tolerated when merging adjacent chart spans.
    pub merge_slack_ns: u64,
    /// Directory for spill files; `None` keeps everything in memory.
    pub spill_dir: Option<PathBuf>,
    /// Records per thread kept in memory before spilling.
    pub spill_threshold: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            strict: false,
            min_off_ns: 0,
            merge_slack_ns: 0,
            spill_dir: None,
            spill_threshold: 1024,
        }
    }
}

struct ThreadState {
    pairer: SwitchPairer,
    segments: Option<SegmentBuilder>,
    cursor: Timestamp,
    chron: Option<ChronBuilder>,
    flame: FlameBuilder,
    records: SpillBuffer,
    /// End of the timeline once the thread is closed.
    closed_at: Option<Timestamp>,
}

impl ThreadState {
    fn spill(&mut self, rec: SpillRecord) -> std::io::Result<()> {
        self.records.push(rec)
    }
}

/// Stateful builder for one session. Events must be fed in time order
/// (out-of-order events are tolerated but flagged by the caller).
pub struct Pipeline {
    cfg: PipelineConfig,
    metrics: Vec<String>,
    walltime: Option<usize>,
    tree: Forest,
    paths: StackPaths,
    threads: HashMap<Tid, ThreadState>,
    referenced: BTreeSet<StackId>,
    pub counters: Counters,
    /// Warnings raised in lenient mode (nested switch-outs).
    pending_warnings: Vec<PipelineError>,
}

fn unresolvable(e: FlameError) -> PipelineError {
    match e {
        FlameError::UnresolvableStack(sid) => ValidationError::UndefinedStack(sid).into(),
        other => ValidationError::InvalidField {
            field: "sid".into(),
            reason: other.to_string(),
        }
        .into(),
    }
}

impl Pipeline {
    pub fn new(metrics: &MetricTable, cfg: PipelineConfig) -> Self {
        let ids: Vec<String> = metrics.descs().iter().map(|m| m.id.clone()).collect();
        Pipeline {
            walltime: ids.iter().position(|m| m == WALLTIME),
            metrics: ids,
            cfg,
            tree: Forest::new(),
            paths: StackPaths::new(),
            threads: HashMap::new(),
            referenced: BTreeSet::new(),
            counters: Counters::default(),
            pending_warnings: Vec::new(),
        }
    }

    pub fn tree(&self) -> &Forest {
        &self.tree
    }

    /// Warnings produced by the last `apply` in lenient mode.
    pub fn take_warnings(&mut self) -> Vec<PipelineError> {
        std::mem::take(&mut self.pending_warnings)
    }

    fn path(&mut self, sid: StackId, dict: &SessionDictionary) -> Result<Arc<StackPath>, PipelineError> {
        let p = self.paths.resolve(sid, dict).map_err(unresolvable)?;
        self.referenced.insert(sid);
        Ok(p)
    }

    fn start_threads(&mut self, created: Vec<Tid>) {
        for tid in created {
            let start = self.tree.start_of(tid).unwrap_or(0);
            let records = match &self.cfg.spill_dir {
                Some(dir) => SpillBuffer::on_disk(dir.join(format!("{tid}.bin")), self.cfg.spill_threshold),
                None => SpillBuffer::in_memory(),
            };
            self.threads.insert(
                tid,
                ThreadState {
                    pairer: SwitchPairer::new(),
                    segments: Some(SegmentBuilder::new(start)),
                    cursor: start,
                    chron: Some(ChronBuilder::new(self.cfg.merge_slack_ns)),
                    flame: FlameBuilder::new(&self.metrics),
                    records,
                    closed_at: None,
                },
            );
        }
    }

    fn thread(&mut self, tid: Tid) -> &mut ThreadState {
        self.threads.get_mut(&tid).expect("thread state exists for every node")
    }

    fn chron_push(th: &mut ThreadState, span: ChartSpan) -> std::io::Result<()> {
        let mut out = Vec::new();
        if let Some(chron) = &mut th.chron {
            chron.push(span, |s| out.push(s));
        }
        for s in out {
            th.spill(SpillRecord::Span(s))?;
        }
        Ok(())
    }

    fn off_interval(&mut self, tid: Tid, iv: OffInterval, dict: &SessionDictionary) -> Result<(), PipelineError> {
        let path = self.path(iv.sid, dict)?;
        let min_off = self.cfg.min_off_ns;
        let th = self.thread(tid);
        // Intervals can only move forward; anything before the cursor came
        // from an out-of-order event and is clipped.
        let iv = OffInterval {
            start: iv.start.max(th.cursor),
            ..iv
        };
        if iv.end <= iv.start {
            return Ok(());
        }
        if iv.duration() < min_off {
            self.counters.filtered_off_intervals += 1;
            return Ok(());
        }
        let mut segs = Vec::with_capacity(2);
        if let Some(b) = &mut th.segments {
            b.push_off(&iv, |s| segs.push(s));
        }
        th.cursor = iv.end;
        for s in segs {
            th.spill(SpillRecord::Segment(s))?;
        }
        th.flame.add_off(&path, iv.duration());
        Self::chron_push(
            th,
            ChartSpan {
                t_start: iv.start,
                duration_ns: iv.duration(),
                sid: iv.sid,
                channel: Channel::Cold,
            },
        )?;
        Ok(())
    }

    fn close_thread(&mut self, tid: Tid, end: Timestamp, dict: &SessionDictionary) -> Result<(), PipelineError> {
        let pending = {
            let th = self.thread(tid);
            if th.closed_at.is_some() {
                return Ok(());
            }
            th.pairer.close(end)
        };
        if let Some(iv) = pending {
            self.off_interval(tid, iv, dict)?;
        }
        let th = self.thread(tid);
        let end = end.max(th.cursor);
        th.closed_at = Some(end);
        let mut out = Vec::new();
        if let Some(b) = th.segments.take() {
            b.finish(end, |s| out.push(SpillRecord::Segment(s)));
        }
        if let Some(c) = th.chron.take() {
            c.finish(|s| out.push(SpillRecord::Span(s)));
        }
        for r in out {
            th.spill(r)?;
        }
        Ok(())
    }

    /// Applies one timestamped record. On error nothing observable has
    /// changed except possibly the creation of implicit nodes.
    pub fn apply(&mut self, record: &EventRecord, dict: &SessionDictionary) -> Result<(), PipelineError> {
        match record {
            EventRecord::Sample(s) => {
                let path = self.path(s.sid, dict)?;
                let metric = self
                    .metrics
                    .iter()
                    .position(|m| *m == s.metric_id)
                    .ok_or_else(|| ValidationError::UnknownMetric(s.metric_id.clone()))?;
                let created = self.tree.observe(s.tid, Some(s.pid), s.t)?;
                self.start_threads(created);
                let hot = Some(metric) == self.walltime;
                let th = self.thread(s.tid);
                th.flame.add_sample(&path, metric, s.period);
                if hot {
                    Self::chron_push(
                        th,
                        ChartSpan {
                            t_start: s.t,
                            duration_ns: s.period,
                            sid: s.sid,
                            channel: Channel::Hot,
                        },
                    )?;
                }
            }
            EventRecord::SwitchOut(e) => {
                self.path(e.sid, dict)?;
                let created = self.tree.observe(e.tid, None, e.t)?;
                self.start_threads(created);
                let strict = self.cfg.strict;
                match self.thread(e.tid).pairer.push(e.tid, SwitchEvent::Out { t: e.t, sid: e.sid }, strict)? {
                    PairStep::Nested(iv) => {
                        self.counters.nested_switch_out += 1;
                        self.pending_warnings.push(
                            TimelineError::NestedSwitchOut {
                                tid: e.tid,
                                t: e.t,
                                pending_since: iv.start,
                            }
                            .into(),
                        );
                        self.off_interval(e.tid, iv, dict)?;
                    }
                    PairStep::Pending | PairStep::OrphanIn | PairStep::Closed(_) => {}
                }
            }
            EventRecord::SwitchIn(e) => {
                let created = self.tree.observe(e.tid, None, e.t)?;
                self.start_threads(created);
                let strict = self.cfg.strict;
                match self.thread(e.tid).pairer.push(e.tid, SwitchEvent::In { t: e.t }, strict)? {
                    PairStep::Closed(iv) => self.off_interval(e.tid, iv, dict)?,
                    PairStep::OrphanIn => self.counters.orphan_switch_in += 1,
                    PairStep::Pending | PairStep::Nested(_) => {}
                }
            }
            EventRecord::Spawn(e) => {
                if let Some(sid) = e.sid {
                    self.path(sid, dict)?;
                }
                let created = self.tree.apply_spawn(e)?;
                self.start_threads(created);
            }
            EventRecord::Exec(e) => {
                let created = self.tree.apply_exec(e)?;
                self.start_threads(created);
            }
            EventRecord::Exit(e) => {
                let created = self.tree.apply_exit(e)?;
                self.start_threads(created);
                self.close_thread(e.tid, e.t, dict)?;
            }
            EventRecord::Header(_) | EventRecord::Frame(_) | EventRecord::Stack(_) | EventRecord::End(_) => {}
        }
        Ok(())
    }

    /// Closes every open thread at `session_end` and hands over the results.
    pub fn finish(
        mut self,
        session_end: Timestamp,
        dict: &SessionDictionary,
    ) -> Result<(Forest, StackTable, BTreeMap<Tid, FinishedThread>), PipelineError> {
        for tid in self.tree.finalize(session_end) {
            let end = self.tree.get(tid).and_then(|n| n.exit_t).unwrap_or(session_end);
            self.close_thread(tid, end, dict)?;
        }
        let mut threads = BTreeMap::new();
        let mut states: Vec<(Tid, ThreadState)> = self.threads.drain().collect();
        states.sort_unstable_by_key(|(tid, _)| *tid);
        for (tid, th) in states {
            let node = self.tree.get(tid).expect("every thread has a node");
            threads.insert(
                tid,
                FinishedThread {
                    spawn_t: node.spawn_t.unwrap_or(0),
                    exit_t: th.closed_at.or(node.exit_t).unwrap_or(session_end),
                    flame: th.flame.finish(&self.paths),
                    records: th.records,
                },
            );
        }
        let mut stacks = StackTable::default();
        for node in self.tree.nodes.values() {
            if let Some(sid) = node.spawn_sid {
                self.referenced.insert(sid);
            }
        }
        for &sid in &self.referenced {
            if let Some(frames) = dict.stack(sid) {
                for fid in frames {
                    if let Some(f) = dict.frame(*fid) {
                        stacks.frames.insert(*fid, f.clone());
                    }
                }
                stacks.stacks.insert(sid, frames.to_vec());
            }
        }
        Ok((self.tree, stacks, threads))
    }
}
