//! Per-session assembly of the event stream.
//!
//! Each connection is one session: a header line, then any mix of
//! dictionary and timestamped records, then `end`. Dictionary records take
//! effect on arrival; timestamped records pass through a bounded reorder
//! buffer and are validated again when they leave it, so that a sample may
//! arrive before the stack it uses.

pub mod listener;
pub mod pipeline;
pub mod reorder;

use std::collections::BTreeMap;
use std::io::{self, BufRead};
use std::path::PathBuf;

use thiserror::Error;

use crate::envcheck::CheckReport;
use crate::model::{EventRecord, SessionDictionary, SessionHeader, Timestamp, ValidationError, EVENT_TYPES};
use crate::protocol::{decode_event, handshake, ProtocolError, MAX_LINE_BYTES};
use crate::store::{Counters, FinishedSession, LoggedError, Manifest, OutputRoot, RooflineData, FORMAT_VERSION, MAX_LOGGED_ERRORS};

pub use listener::{IngestServer, ServerHandle, SessionReport};
pub use pipeline::{Pipeline, PipelineConfig, PipelineError};
pub use reorder::{reorder, ReorderBuffer, DEFAULT_REORDER_CAPACITY};

#[derive(Debug, Clone)]
pub struct IngestConfig {
    /// Abort a session at its first error (default) instead of skipping.
    pub strict: bool,
    pub reorder_capacity: usize,
    pub min_off_ns: u64,
    pub merge_slack_ns: u64,
    pub spill_threshold: usize,
    /// Stored in every manifest produced with this configuration.
    pub check_report: Option<CheckReport>,
    pub roofline: Option<RooflineData>,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            strict: true,
            reorder_capacity: DEFAULT_REORDER_CAPACITY,
            min_off_ns: 0,
            merge_slack_ns: 0,
            spill_threshold: 1024,
            check_report: None,
            roofline: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("handshake failed: {0}")]
    HandshakeFailed(ProtocolError),
    #[error("stream ended before the end record; bundle written to {}", bundle.display())]
    StreamTruncated { bundle: PathBuf },
    #[error("session aborted at line {position}: {message}; bundle written to {}", bundle.display())]
    StrictModeAbort {
        position: u64,
        code: String,
        message: String,
        bundle: PathBuf,
    },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// A session that completed normally.
#[derive(Debug, Clone)]
pub struct SessionOutcome {
    pub session_id: String,
    pub bundle: PathBuf,
}

/// What the caller should do after feeding a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Ended,
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Running,
    Ended,
    Aborted,
}

/// Errors of one session, with the first [`MAX_LOGGED_ERRORS`] kept.
#[derive(Debug, Default)]
struct ErrorLog {
    entries: Vec<LoggedError>,
    count: u64,
}

impl ErrorLog {
    fn push(&mut self, position: u64, code: &str, message: String) {
        self.count += 1;
        if self.entries.len() < MAX_LOGGED_ERRORS {
            self.entries.push(LoggedError {
                position,
                code: code.to_string(),
                message,
            });
        }
    }
}

/// Event sequence positions are 1-based line numbers; the header is line 1.
pub struct SessionAssembler {
    cfg: IngestConfig,
    dict: SessionDictionary,
    buffer: ReorderBuffer<(u64, EventRecord)>,
    pipeline: Pipeline,
    event_counts: BTreeMap<String, u64>,
    errors: ErrorLog,
    position: u64,
    max_t: Timestamp,
    end_t: Option<Timestamp>,
    state: State,
    extra: Counters,
}

impl SessionAssembler {
    /// Starts a session from an already accepted header.
    pub fn new(header: SessionHeader, cfg: IngestConfig, spill_dir: Option<PathBuf>) -> Self {
        let mut dict = SessionDictionary::new();
        let header_record = EventRecord::Header(header);
        dict.accept(&header_record)
            .expect("header was validated by the handshake");
        let pipeline = Pipeline::new(
            dict.metrics(),
            PipelineConfig {
                strict: cfg.strict,
                min_off_ns: cfg.min_off_ns,
                merge_slack_ns: cfg.merge_slack_ns,
                spill_dir,
                spill_threshold: cfg.spill_threshold,
            },
        );
        let mut event_counts: BTreeMap<String, u64> = EVENT_TYPES.iter().map(|t| (t.to_string(), 0)).collect();
        *event_counts.get_mut("header").expect("known tag") += 1;
        SessionAssembler {
            buffer: ReorderBuffer::new(cfg.reorder_capacity),
            cfg,
            dict,
            pipeline,
            event_counts,
            errors: ErrorLog::default(),
            position: 1,
            max_t: 0,
            end_t: None,
            state: State::Running,
            extra: Counters::default(),
        }
    }

    pub fn is_running(&self) -> bool {
        self.state == State::Running
    }

    /// Records an error; returns true if the session must stop.
    fn fail(&mut self, position: u64, code: &str, message: String) -> bool {
        self.errors.push(position, code, message);
        if self.cfg.strict {
            self.state = State::Aborted;
            let dropped = self.buffer.discard();
            self.extra.dropped_events += dropped as u64;
        }
        self.cfg.strict
    }

    fn flow(&self) -> Flow {
        match self.state {
            State::Running => Flow::Continue,
            State::Ended => Flow::Ended,
            State::Aborted => Flow::Aborted,
        }
    }

    /// Feeds one raw line (with or without its LF).
    pub fn feed_line(&mut self, line: &[u8]) -> Flow {
        if !self.is_running() {
            return self.flow();
        }
        self.position += 1;
        match decode_event(line) {
            Ok(record) => self.accept(record),
            Err(e) => {
                self.extra.skipped_lines += 1;
                self.fail(self.position, e.code(), e.to_string());
                self.flow()
            }
        }
    }

    /// A line longer than the protocol limit was skipped.
    pub fn feed_oversize(&mut self, len: usize) -> Flow {
        if !self.is_running() {
            return self.flow();
        }
        self.position += 1;
        self.extra.skipped_lines += 1;
        let e = ProtocolError::OversizeRecord { len };
        self.fail(self.position, e.code(), e.to_string());
        self.flow()
    }

    /// Feeds one decoded record as if it were the next line.
    pub fn feed(&mut self, record: EventRecord) -> Flow {
        if !self.is_running() {
            return self.flow();
        }
        self.position += 1;
        self.accept(record)
    }

    fn accept(&mut self, record: EventRecord) -> Flow {
        let position = self.position;
        *self.event_counts.entry(record.type_tag().to_string()).or_insert(0) += 1;
        if record.is_dictionary() || matches!(record, EventRecord::Header(_)) {
            if let Err(e) = self.dict.accept(&record) {
                self.extra.dropped_events += 1;
                self.fail(position, e.code(), e.to_string());
            }
            return self.flow();
        }
        if let EventRecord::End(end) = record {
            if let Err(e) = self.dict.validate(&record) {
                self.fail(position, e.code(), e.to_string());
                return self.flow();
            }
            self.drain();
            if !self.is_running() {
                return self.flow();
            }
            if end.t < self.max_t {
                let msg = format!("end at {} precedes events up to {}", end.t, self.max_t);
                if self.fail(position, "TimestampAfterEnd", msg) {
                    return self.flow();
                }
            }
            self.dict
                .accept(&record)
                .expect("end was validated above");
            self.end_t = Some(end.t);
            self.state = State::Ended;
            return self.flow();
        }
        // Undefined stacks are checked again when the event is released.
        match self.dict.validate(&record) {
            Ok(()) | Err(ValidationError::UndefinedStack(_)) => {}
            Err(e) => {
                self.extra.dropped_events += 1;
                self.fail(position, e.code(), e.to_string());
                return self.flow();
            }
        }
        let t = record.timestamp().unwrap_or(0);
        let mut released = Vec::new();
        self.buffer.push(t, (position, record), |t, item, overflowed| released.push((t, item, overflowed)));
        for (t, (pos, rec), overflowed) in released {
            if !self.is_running() {
                break;
            }
            self.emit(t, pos, rec, overflowed);
        }
        self.flow()
    }

    fn drain(&mut self) {
        let mut released = Vec::new();
        self.buffer.drain(|t, item, _| released.push((t, item)));
        for (t, (pos, rec)) in released {
            if !self.is_running() {
                self.extra.dropped_events += 1;
                continue;
            }
            self.emit(t, pos, rec, false);
        }
    }

    fn emit(&mut self, t: Timestamp, position: u64, record: EventRecord, overflowed: bool) {
        if overflowed {
            self.extra.reorder_overflow += 1;
            self.errors.push(
                position,
                "ReorderOverflow",
                format!("event at {t} arrived after later events were released"),
            );
        }
        if let Err(e) = self.dict.validate(&record) {
            self.extra.dropped_events += 1;
            self.fail(position, e.code(), e.to_string());
            return;
        }
        match self.pipeline.apply(&record, &self.dict) {
            Ok(()) => {
                self.max_t = self.max_t.max(t);
                for w in self.pipeline.take_warnings() {
                    self.errors.push(position, w.code(), w.to_string());
                }
            }
            Err(e) => {
                self.extra.dropped_events += 1;
                self.fail(position, e.code(), e.to_string());
            }
        }
    }

    /// First logged error, if the session was aborted.
    pub fn abort_reason(&self) -> Option<&LoggedError> {
        (self.state == State::Aborted)
            .then(|| self.errors.entries.iter().rev().find(|e| e.code != "ReorderOverflow"))
            .flatten()
    }

    /// Closes the session. A session that is still running is truncated:
    /// buffered events are released and the end is the last event seen.
    pub fn finish(mut self) -> io::Result<FinishedSession> {
        let truncated = self.state == State::Running;
        if truncated {
            self.drain();
        }
        let session_end = match self.end_t {
            Some(t) => t.max(self.max_t),
            None => self.max_t,
        };
        let header = self.dict.header().expect("header accepted").clone();
        let pc = self.pipeline.counters.clone();
        let (tree, stacks, threads) = match self.pipeline.finish(session_end, &self.dict) {
            Ok(parts) => parts,
            Err(PipelineError::Io(e)) => return Err(e),
            Err(e) => return Err(io::Error::other(e.to_string())),
        };
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            session_id: header.session_id.clone(),
            wall_start: header.wall_start,
            command: header.command.clone(),
            hostname: header.hostname.clone(),
            metrics: header.metrics.clone(),
            duration_ns: session_end,
            thread_count: tree.len(),
            truncated,
            aborted: self.state == State::Aborted,
            error_count: self.errors.count,
            error_log: self.errors.entries,
            event_counts: self.event_counts,
            counters: Counters {
                orphan_switch_in: pc.orphan_switch_in,
                nested_switch_out: pc.nested_switch_out,
                filtered_off_intervals: pc.filtered_off_intervals,
                ..self.extra
            },
            check_report: self.cfg.check_report.clone(),
        };
        Ok(FinishedSession {
            manifest,
            tree,
            stacks,
            threads,
            roofline: self.cfg.roofline.clone(),
        })
    }
}

/// Result of one bounded line read.
#[derive(Debug, PartialEq, Eq)]
pub enum LineRead {
    Eof,
    /// A complete line (LF stripped) is in the buffer.
    Line,
    /// The line exceeded the limit and was skipped; its length is given.
    TooLong(usize),
}

/// Reads one LF-terminated line into `buf` without ever holding more than
/// `limit` bytes. A final line without LF is returned as a line.
pub fn read_bounded_line<R: BufRead + ?Sized>(reader: &mut R, buf: &mut Vec<u8>, limit: usize) -> io::Result<LineRead> {
    buf.clear();
    let mut total = 0usize;
    let mut seen_any = false;
    loop {
        let chunk = match reader.fill_buf() {
            Ok(c) => c,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e),
        };
        if chunk.is_empty() {
            return Ok(match (seen_any, total > limit) {
                (false, _) => LineRead::Eof,
                (true, true) => LineRead::TooLong(total),
                (true, false) => LineRead::Line,
            });
        }
        seen_any = true;
        let (take, done) = match chunk.iter().position(|&b| b == b'\n') {
            Some(i) => (i, true),
            None => (chunk.len(), false),
        };
        if total + take <= limit {
            buf.extend_from_slice(&chunk[..take]);
        } else {
            buf.clear();
        }
        total += take;
        reader.consume(if done { take + 1 } else { take });
        if done {
            return Ok(if total > limit { LineRead::TooLong(total) } else { LineRead::Line });
        }
    }
}

/// Drives one session from `reader` to completion and writes its bundle.
pub fn accept_session<R: BufRead>(mut reader: R, cfg: &IngestConfig, out: &OutputRoot) -> Result<SessionOutcome, IngestError> {
    let mut line = Vec::with_capacity(256);
    let header = match read_bounded_line(&mut reader, &mut line, MAX_LINE_BYTES)? {
        LineRead::Eof => return Err(IngestError::HandshakeFailed(ProtocolError::MissingField("type".into()))),
        LineRead::TooLong(len) => return Err(IngestError::HandshakeFailed(ProtocolError::OversizeRecord { len })),
        LineRead::Line => handshake(&line).map_err(IngestError::HandshakeFailed)?,
    };
    let staging = out.begin()?;
    let mut session = SessionAssembler::new(header, cfg.clone(), Some(staging.spill_dir()));
    loop {
        let flow = match read_bounded_line(&mut reader, &mut line, MAX_LINE_BYTES) {
            Ok(LineRead::Line) => session.feed_line(&line),
            Ok(LineRead::TooLong(len)) => session.feed_oversize(len),
            // A broken connection is treated like EOF.
            Ok(LineRead::Eof) | Err(_) => break,
        };
        if flow != Flow::Continue {
            break;
        }
    }
    let abort = session.abort_reason().cloned();
    let finished = match session.finish() {
        Ok(f) => f,
        Err(e) => {
            out.abandon(staging);
            return Err(e.into());
        }
    };
    let session_id = finished.manifest.session_id.clone();
    let truncated = finished.manifest.truncated;
    let bundle = out.commit(staging, &finished)?;
    if let Some(err) = abort {
        return Err(IngestError::StrictModeAbort {
            position: err.position,
            code: err.code,
            message: err.message,
            bundle,
        });
    }
    if truncated {
        return Err(IngestError::StreamTruncated { bundle });
    }
    Ok(SessionOutcome { session_id, bundle })
}

/// Runs a whole in-memory session (header first) without touching disk.
pub fn assemble(records: impl IntoIterator<Item = EventRecord>, cfg: &IngestConfig) -> Result<FinishedSession, IngestError> {
    let mut iter = records.into_iter();
    let header = match iter.next() {
        Some(EventRecord::Header(h)) => {
            crate::model::validate_header(&h).map_err(|e| IngestError::HandshakeFailed(ProtocolError::InvalidHeader(e.to_string())))?;
            h
        }
        _ => return Err(IngestError::HandshakeFailed(ProtocolError::HeaderMisplaced)),
    };
    let mut session = SessionAssembler::new(header, cfg.clone(), None);
    for r in iter {
        if session.feed(r) != Flow::Continue {
            break;
        }
    }
    Ok(session.finish()?)
}
