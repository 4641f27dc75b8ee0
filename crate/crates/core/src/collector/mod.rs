//! The profiled-machine side: adapters that produce a session's event
//! stream and deliver it to a sink, usually the server's TCP port.

#[cfg(feature = "live")]
pub mod live;
pub mod perf;
pub mod script;

use std::collections::BTreeMap;
use std::io::{self, BufWriter, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::process::{Child, Command};
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

use crate::envcheck::{AbortProfiling, CheckRegistry, CheckReport, KnobReader, Policy};
use crate::model::{EventRecord, Timestamp};
use crate::protocol::{encode_event, ProtocolError};

pub use script::{render, ScriptParseError, ScriptReader, TraceScript};

#[derive(Debug, Error)]
pub enum CollectorError {
    #[error(transparent)]
    Script(#[from] ScriptParseError),
    #[error("cannot reach server at {addr}: {source}")]
    ServerUnreachable { addr: String, source: io::Error },
    #[error("adapter '{0}' is not available on this platform or build")]
    AdapterUnavailable(String),
    #[error(transparent)]
    EnvCheckFailed(#[from] AbortProfiling),
    #[error("cannot launch command: {0}")]
    CommandFailed(io::Error),
    #[error("event stream failed: {0}")]
    Sink(#[from] io::Error),
    #[error("record could not be encoded: {0}")]
    Encode(#[from] ProtocolError),
}

/// Consumer of an ordered event stream.
pub trait EventSink {
    fn send(&mut self, record: &EventRecord) -> Result<(), CollectorError>;

    /// Called once after the last record.
    fn finish(&mut self) -> Result<(), CollectorError> {
        Ok(())
    }
}

impl EventSink for Vec<EventRecord> {
    fn send(&mut self, record: &EventRecord) -> Result<(), CollectorError> {
        self.push(record.clone());
        Ok(())
    }
}

/// Encodes records onto a byte stream in wire format.
pub struct WireSink<W: Write> {
    out: BufWriter<W>,
}

impl<W: Write> WireSink<W> {
    pub fn new(out: W) -> Self {
        WireSink {
            out: BufWriter::new(out),
        }
    }

    pub fn into_inner(self) -> io::Result<W> {
        self.out.into_inner().map_err(|e| e.into_error())
    }
}

impl<W: Write> EventSink for WireSink<W> {
    fn send(&mut self, record: &EventRecord) -> Result<(), CollectorError> {
        self.out.write_all(encode_event(record)?.as_bytes())?;
        Ok(())
    }

    fn finish(&mut self) -> Result<(), CollectorError> {
        self.out.flush()?;
        Ok(())
    }
}

/// Connects to the server, failing with [`CollectorError::ServerUnreachable`].
pub fn connect(addr: &str) -> Result<WireSink<TcpStream>, CollectorError> {
    let unreachable = |source| CollectorError::ServerUnreachable {
        addr: addr.to_string(),
        source,
    };
    let addrs: Vec<_> = addr.to_socket_addrs().map_err(unreachable)?.collect();
    let mut last = io::Error::new(io::ErrorKind::AddrNotAvailable, "no address");
    for a in addrs {
        match TcpStream::connect_timeout(&a, Duration::from_secs(5)) {
            Ok(s) => return Ok(WireSink::new(s)),
            Err(e) => last = e,
        }
    }
    Err(unreachable(last))
}

/// Closes the write half so the server sees EOF.
pub fn close(sink: WireSink<TcpStream>) -> Result<(), CollectorError> {
    let stream = sink.into_inner()?;
    stream.shutdown(Shutdown::Write)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Speed {
    #[default]
    AsFastAsPossible,
    /// Sleep between events to honor their timestamp deltas.
    RealTime,
}

/// Records delivered, by event type.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct EmissionReport {
    pub counts: BTreeMap<String, u64>,
}

impl EmissionReport {
    pub fn count(&self, tag: &str) -> u64 {
        self.counts.get(tag).copied().unwrap_or(0)
    }

    pub fn samples(&self) -> u64 {
        self.count("sample")
    }

    pub fn spawns(&self) -> u64 {
        self.count("spawn")
    }

    fn note(&mut self, r: &EventRecord) {
        *self.counts.entry(r.type_tag().to_string()).or_insert(0) += 1;
    }
}

struct Pacer {
    speed: Speed,
    last: Option<Timestamp>,
}

impl Pacer {
    fn wait(&mut self, r: &EventRecord) {
        let Some(t) = r.timestamp() else { return };
        if self.speed == Speed::RealTime {
            if let Some(last) = self.last {
                if t > last {
                    std::thread::sleep(Duration::from_nanos(t - last));
                }
            }
        }
        self.last = Some(self.last.map_or(t, |l| l.max(t)));
    }
}

/// Delivers a script's records to `sink` in script order.
pub fn replay(script: &TraceScript, sink: &mut dyn EventSink, speed: Speed) -> Result<EmissionReport, CollectorError> {
    let mut report = EmissionReport::default();
    let mut pacer = Pacer { speed, last: None };
    for r in &script.records {
        pacer.wait(r);
        sink.send(r)?;
        report.note(r);
    }
    sink.finish()?;
    Ok(report)
}

/// Result of running an adapter.
#[derive(Debug, Clone)]
pub struct AdapterRun {
    pub session_id: String,
    /// Exit code of the profiled command, if one was run and exited
    /// normally.
    pub exit_code: Option<i32>,
    pub report: EmissionReport,
}

/// A producer of one session's event stream.
pub trait CollectorAdapter {
    fn name(&self) -> &str;

    /// Runs `command` (if any) while streaming the session into `sink`.
    /// The header goes first and the end record last, after the command
    /// has exited.
    fn run(&mut self, command: &[String], sink: &mut dyn EventSink) -> Result<AdapterRun, CollectorError>;
}

fn spawn_command(command: &[String]) -> Result<Option<Child>, CollectorError> {
    match command.split_first() {
        None => Ok(None),
        Some((prog, args)) => Command::new(prog)
            .args(args)
            .spawn()
            .map(Some)
            .map_err(CollectorError::CommandFailed),
    }
}

fn wait_command(child: Option<Child>) -> Result<Option<i32>, CollectorError> {
    match child {
        None => Ok(None),
        Some(mut c) => Ok(c.wait().map_err(CollectorError::CommandFailed)?.code()),
    }
}

/// Streams a TraceScript; a given command runs alongside and the end
/// record is held back until it exits.
pub struct ReplayAdapter {
    pub script: TraceScript,
    pub speed: Speed,
}

impl CollectorAdapter for ReplayAdapter {
    fn name(&self) -> &str {
        "replay"
    }

    fn run(&mut self, command: &[String], sink: &mut dyn EventSink) -> Result<AdapterRun, CollectorError> {
        let session_id = self.script.header().map(|h| h.session_id.clone()).unwrap_or_default();
        let child = spawn_command(command)?;
        let mut report = EmissionReport::default();
        let mut pacer = Pacer {
            speed: self.speed,
            last: None,
        };
        let (body, end) = match self.script.records.split_last() {
            Some((last @ EventRecord::End(_), body)) => (body, Some(last)),
            _ => (&self.script.records[..], None),
        };
        let streamed = (|| {
            for r in body {
                pacer.wait(r);
                sink.send(r)?;
                report.note(r);
            }
            Ok::<_, CollectorError>(())
        })();
        let exit_code = wait_command(child)?;
        streamed?;
        if let Some(end) = end {
            sink.send(end)?;
            report.note(end);
        }
        sink.finish()?;
        Ok(AdapterRun {
            session_id,
            exit_code,
            report,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterChoice {
    Replay,
    Live,
}

impl AdapterChoice {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "replay" => Some(AdapterChoice::Replay),
            "live" => Some(AdapterChoice::Live),
            _ => None,
        }
    }

    pub fn is_available(self) -> bool {
        match self {
            AdapterChoice::Replay => true,
            AdapterChoice::Live => cfg!(all(feature = "live", target_os = "linux")),
        }
    }
}

pub struct ProfileRequest<'a> {
    pub command: Vec<String>,
    pub server: String,
    pub adapter: Box<dyn CollectorAdapter + 'a>,
    pub knobs: &'a dyn KnobReader,
    pub checks: &'a CheckRegistry,
    /// Run even if an environment check fails.
    pub force: bool,
}

#[derive(Debug, Clone)]
pub struct ProfileOutcome {
    pub session_id: String,
    pub exit_code: Option<i32>,
    pub report: EmissionReport,
    pub checks: CheckReport,
}

/// Checks the environment, connects to the server and runs the adapter.
///
/// The connection is made before the command is launched, so an
/// unreachable server never leaves a half-profiled run behind.
pub fn run_profile(mut req: ProfileRequest<'_>) -> Result<ProfileOutcome, CollectorError> {
    let policy = if req.force { Policy::Warn } else { Policy::Abort };
    let checks = req.checks.run_all(req.knobs, policy)?;
    let mut sink = connect(&req.server)?;
    let run = req.adapter.run(&req.command, &mut sink)?;
    close(sink)?;
    Ok(ProfileOutcome {
        session_id: run.session_id,
        exit_code: run.exit_code,
        report: run.report,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envcheck::{FixtureKnobs, MAX_STACK_KNOB, NUMA_BALANCING_KNOB};

    const SCRIPT: &str = "session s 0 c h\nframe 1 main\nstack 1 1\n\
        spawn 0 1 1 0 - a\nspawn 1 1 2 1 - b\n\
        sample 1 1 2 walltime 1 1\nsample 1 1 3 walltime 1 1\nsample 1 1 4 walltime 1 1\n\
        sample 1 1 5 walltime 1 1\nsample 1 1 6 walltime 1 1\nsample 2 1 7 walltime 1 1\n\
        sample 2 1 8 walltime 1 1\nsample 2 1 9 walltime 1 1\nsample 2 1 10 walltime 1 1\n\
        sample 2 1 11 walltime 1 1\n";

    #[test]
    fn replay_counts_per_type() {
        let script = TraceScript::parse(SCRIPT).unwrap();
        let mut out: Vec<EventRecord> = Vec::new();
        let report = replay(&script, &mut out, Speed::AsFastAsPossible).unwrap();
        assert_eq!(report.samples(), 10);
        assert_eq!(report.spawns(), 2);
        assert_eq!(out, script.records);
    }

    #[test]
    fn real_time_replay_delivers_the_same_records() {
        let script = TraceScript::parse("session s 0 c h\nframe 1 f\nstack 1 1\nsample 1 1 1000000 walltime 1 1\n").unwrap();
        let mut a: Vec<EventRecord> = Vec::new();
        let mut b: Vec<EventRecord> = Vec::new();
        replay(&script, &mut a, Speed::AsFastAsPossible).unwrap();
        replay(&script, &mut b, Speed::RealTime).unwrap();
        assert_eq!(a, b);
    }

    fn good_knobs() -> FixtureKnobs {
        FixtureKnobs::default()
            .with(MAX_STACK_KNOB, "1024")
            .with(NUMA_BALANCING_KNOB, "0")
    }

    #[test]
    fn unreachable_server_is_reported_before_launch() {
        // Bind then drop to get a port nobody listens on.
        let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let knobs = good_knobs();
        let checks = CheckRegistry::default();
        let marker = tempfile::tempdir().unwrap();
        let touched = marker.path().join("ran");
        let err = run_profile(ProfileRequest {
            command: vec!["touch".into(), touched.display().to_string()],
            server: format!("127.0.0.1:{port}"),
            adapter: Box::new(ReplayAdapter {
                script: TraceScript::parse(SCRIPT).unwrap(),
                speed: Speed::AsFastAsPossible,
            }),
            knobs: &knobs,
            checks: &checks,
            force: false,
        })
        .unwrap_err();
        assert!(matches!(err, CollectorError::ServerUnreachable { .. }), "{err}");
        assert!(!touched.exists());
    }

    #[test]
    fn failing_check_without_force_aborts() {
        let knobs = good_knobs().with(NUMA_BALANCING_KNOB, "1");
        let checks = CheckRegistry::default();
        let err = run_profile(ProfileRequest {
            command: vec![],
            server: "127.0.0.1:9".into(),
            adapter: Box::new(ReplayAdapter {
                script: TraceScript::parse(SCRIPT).unwrap(),
                speed: Speed::AsFastAsPossible,
            }),
            knobs: &knobs,
            checks: &checks,
            force: false,
        })
        .unwrap_err();
        let CollectorError::EnvCheckFailed(abort) = err else { panic!("{err}") };
        assert!(abort.to_string().contains("numa"), "{abort}");
    }

    #[test]
    fn live_adapter_availability_matches_build() {
        assert!(AdapterChoice::Replay.is_available());
        assert_eq!(AdapterChoice::Live.is_available(), cfg!(all(feature = "live", target_os = "linux")));
    }
}
