//! Live adapter: records the command with an external `perf` binary and
//! translates its script output. Linux only.

use std::process::{Command, Stdio};

use super::perf::{first_pid, PerfScriptTranslator, PerfSession};
use super::{AdapterRun, CollectorAdapter, CollectorError, EmissionReport, EventSink};
use crate::model::EventRecord;

const TRACEPOINTS: &str = "sched:sched_switch,sched:sched_process_fork,sched:sched_process_exec,sched:sched_process_exit";

pub struct LiveAdapter {
    pub perf: String,
    pub session_id: String,
    pub hostname: String,
    pub wall_start: u64,
    /// Extra perf events recorded as count metrics.
    pub count_events: Vec<String>,
    /// Sampling frequency in Hz.
    pub frequency: u32,
}

impl CollectorAdapter for LiveAdapter {
    fn name(&self) -> &str {
        "live"
    }

    fn run(&mut self, command: &[String], sink: &mut dyn EventSink) -> Result<AdapterRun, CollectorError> {
        if !cfg!(target_os = "linux") {
            return Err(CollectorError::AdapterUnavailable("live".into()));
        }
        let dir = std::env::temp_dir().join(format!("tracelens-live-{}", std::process::id()));
        std::fs::create_dir_all(&dir).map_err(CollectorError::CommandFailed)?;
        let data = dir.join("perf.data");
        let mut record = Command::new(&self.perf);
        record
            .arg("record")
            .arg("-g")
            .arg("-F")
            .arg(self.frequency.to_string())
            .arg("-e")
            .arg("cpu-clock")
            .arg("-e")
            .arg(TRACEPOINTS)
            .arg("--switch-events");
        for e in &self.count_events {
            record.arg("-e").arg(e);
        }
        let status = record
            .arg("-o")
            .arg(&data)
            .arg("--")
            .args(command)
            .status()
            .map_err(|_| CollectorError::AdapterUnavailable("live".into()))?;
        let output = Command::new(&self.perf)
            .args(["script", "--show-switch-events", "-F", "comm,pid,tid,time,period,event,ip,sym,dso,trace", "-i"])
            .arg(&data)
            .stderr(Stdio::null())
            .output()
            .map_err(CollectorError::CommandFailed)?;
        let _ = std::fs::remove_dir_all(&dir);
        let text = String::from_utf8_lossy(&output.stdout);
        let session = PerfSession {
            session_id: self.session_id.clone(),
            wall_start: self.wall_start,
            command: command.join(" "),
            hostname: self.hostname.clone(),
            count_events: self.count_events.clone(),
            root_pid: first_pid(&text).unwrap_or(1),
        };
        let mut report = EmissionReport::default();
        let mut failure: Option<CollectorError> = None;
        let mut emit = |r: EventRecord| {
            if failure.is_none() {
                report.note(&r);
                if let Err(e) = sink.send(&r) {
                    failure = Some(e);
                }
            }
        };
        let mut tr = PerfScriptTranslator::new(session, &mut emit);
        for line in text.lines() {
            tr.feed_line(line, &mut emit);
        }
        tr.finish(&mut emit);
        if let Some(e) = failure {
            return Err(e);
        }
        sink.finish()?;
        Ok(AdapterRun {
            session_id: self.session_id.clone(),
            exit_code: status.code(),
            report,
        })
    }
}
