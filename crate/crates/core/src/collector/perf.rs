//! Translation of `perf script` text output into session records.
//!
//! Expected input is what `perf script -F comm,pid,tid,time,period,event,ip,sym,dso,trace`
//! prints for a recording made with call graphs: one header line per
//! event, followed by its call chain (leaf first, one frame per line) and
//! a blank line.
//!
//! ```text
//! work  4242/4243  1234.500000:     250000 cpu-clock:
//!             55d0c0de1234 compute+0x14 (/usr/bin/work)
//!             55d0c0de0100 main+0x20 (/usr/bin/work)
//!
//! ```
//!
//! `cpu-clock`/`task-clock` become wall-time samples; `sched:sched_switch`
//! gives the switch-out of `prev_pid` (with its stack) and, when the
//! incoming task is known to be off-CPU, the switch-in of `next_pid`;
//! `PERF_RECORD_SWITCH IN` lines also count as switch-ins. Fork, exec and
//! exit tracepoints drive the thread tree. Symbolication is whatever perf
//! printed; frames are keyed by (symbol, module).

use std::collections::{HashMap, HashSet};
use std::sync::LazyLock;

use regex::Regex;

use crate::model::*;

static HEADER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^\s*(?P<comm>.*?)\s+(?P<pid>\d+)/(?P<tid>\d+)\s+(?:\[\d+\]\s+)?(?P<secs>\d+)\.(?P<frac>\d+):\s+(?:(?P<period>\d+)\s+)?(?P<event>[\w:.-]+):?\s*(?P<rest>.*)$")
        .expect("valid regex")
});

static FRAME: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^\s+[0-9a-fA-F]+\s+(?P<sym>.+?)(?:\+0x[0-9a-fA-F]+)?\s+\((?P<dso>[^()]*)\)\s*$").expect("valid regex")
});

/// Session-level facts the translator cannot learn from perf output.
#[derive(Debug, Clone)]
pub struct PerfSession {
    pub session_id: String,
    pub wall_start: u64,
    pub command: String,
    pub hostname: String,
    /// Count metrics to keep, by perf event name; must be safe names.
    pub count_events: Vec<String>,
    /// Pid of the profiled command, emitted as the root spawn.
    pub root_pid: Pid,
}

struct PendingSpawn {
    parent: Tid,
    t: Timestamp,
    sid: Option<StackId>,
    name: String,
}

struct Event {
    comm: String,
    pid: Pid,
    tid: Tid,
    t_abs: u64,
    period: Option<u64>,
    name: String,
    rest: String,
    frames: Vec<(String, String)>,
}

/// Line-by-line translator. Records are handed to `emit` in a valid
/// order: header first, definitions before use, end last.
pub struct PerfScriptTranslator {
    session: PerfSession,
    base: Option<u64>,
    frames: HashMap<(String, String), FrameId>,
    stacks: HashMap<Vec<FrameId>, StackId>,
    current: Option<Event>,
    known: HashSet<Tid>,
    off_cpu: HashSet<Tid>,
    exited: HashSet<Tid>,
    pending: HashMap<Tid, PendingSpawn>,
    max_t: Timestamp,
    /// Lines or events that could not be used.
    pub skipped: u64,
}

fn parse_time(secs: &str, frac: &str) -> Option<u64> {
    let s: u64 = secs.parse().ok()?;
    let mut digits = frac.to_string();
    digits.truncate(9);
    while digits.len() < 9 {
        digits.push('0');
    }
    s.checked_mul(1_000_000_000)?.checked_add(digits.parse().ok()?)
}

fn field<'a>(rest: &'a str, key: &str) -> Option<&'a str> {
    rest.split_whitespace()
        .find_map(|kv| kv.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
}

impl PerfScriptTranslator {
    pub fn new(session: PerfSession, emit: &mut dyn FnMut(EventRecord)) -> Self {
        let mut metrics = vec![MetricDesc::walltime()];
        for e in &session.count_events {
            if is_safe_name(e) && e != WALLTIME {
                metrics.push(MetricDesc {
                    id: e.clone(),
                    kind: MetricKind::Count,
                    unit: "events".into(),
                });
            }
        }
        emit(EventRecord::Header(SessionHeader {
            version: crate::protocol::PROTOCOL_VERSION,
            session_id: session.session_id.clone(),
            wall_start: session.wall_start,
            command: session.command.clone(),
            hostname: session.hostname.clone(),
            metrics,
        }));
        let root = session.root_pid;
        let name = session
            .command
            .split_whitespace()
            .next()
            .map(|c| c.rsplit('/').next().unwrap_or(c).to_string())
            .unwrap_or_else(|| "command".into());
        emit(EventRecord::Spawn(Spawn {
            parent_tid: 0,
            pid: root,
            tid: root,
            t: 0,
            sid: None,
            name,
        }));
        PerfScriptTranslator {
            session,
            base: None,
            frames: HashMap::new(),
            stacks: HashMap::new(),
            current: None,
            known: HashSet::from([root]),
            off_cpu: HashSet::new(),
            exited: HashSet::new(),
            pending: HashMap::new(),
            max_t: 0,
            skipped: 0,
        }
    }

    pub fn feed_line(&mut self, line: &str, emit: &mut dyn FnMut(EventRecord)) {
        let line = line.trim_end_matches(['\n', '\r']);
        if line.trim().is_empty() {
            self.flush(emit);
            return;
        }
        if self.current.is_some() {
            if let Some(c) = FRAME.captures(line) {
                let ev = self.current.as_mut().expect("checked");
                ev.frames.push((c["sym"].to_string(), c["dso"].to_string()));
                return;
            }
        }
        match HEADER.captures(line) {
            Some(c) => {
                self.flush(emit);
                let (Ok(pid), Ok(tid), Some(t_abs)) = (c["pid"].parse(), c["tid"].parse(), parse_time(&c["secs"], &c["frac"]))
                else {
                    self.skipped += 1;
                    return;
                };
                self.current = Some(Event {
                    comm: c["comm"].trim().to_string(),
                    pid,
                    tid,
                    t_abs,
                    period: c.name("period").and_then(|p| p.as_str().parse().ok()),
                    name: c["event"].trim_end_matches(':').to_string(),
                    rest: c["rest"].to_string(),
                    frames: Vec::new(),
                });
            }
            None => self.skipped += 1,
        }
    }

    fn stack(&mut self, frames: &[(String, String)], emit: &mut dyn FnMut(EventRecord)) -> StackId {
        let unknown = [("[unknown]".to_string(), "[unknown]".to_string())];
        let frames = if frames.is_empty() { &unknown[..] } else { frames };
        let mut fids = Vec::with_capacity(frames.len());
        for (sym, dso) in frames {
            let next = self.frames.len() as FrameId + 1;
            let fid = *self.frames.entry((sym.clone(), dso.clone())).or_insert_with(|| {
                emit(EventRecord::Frame(FrameDef {
                    fid: next,
                    function: if sym.is_empty() { "[unknown]".into() } else { sym.clone() },
                    file: None,
                    line: None,
                    module: (!dso.is_empty()).then(|| dso.clone()),
                }));
                next
            });
            fids.push(fid);
        }
        let next = self.stacks.len() as StackId + 1;
        *self.stacks.entry(fids.clone()).or_insert_with(|| {
            emit(EventRecord::Stack(StackDef { sid: next, frames: fids }));
            next
        })
    }

    /// Makes `tid` known, emitting its delayed spawn with the pid now seen.
    fn touch(&mut self, tid: Tid, pid: Pid, emit: &mut dyn FnMut(EventRecord)) -> bool {
        if self.exited.contains(&tid) {
            return false;
        }
        if let Some(p) = self.pending.remove(&tid) {
            emit(EventRecord::Spawn(Spawn {
                parent_tid: p.parent,
                pid,
                tid,
                t: p.t,
                sid: p.sid,
                name: p.name,
            }));
        }
        self.known.insert(tid);
        true
    }

    fn flush(&mut self, emit: &mut dyn FnMut(EventRecord)) {
        let Some(ev) = self.current.take() else { return };
        let base = *self.base.get_or_insert(ev.t_abs);
        let t = ev.t_abs.saturating_sub(base);
        self.max_t = self.max_t.max(t);
        match ev.name.as_str() {
            "cpu-clock" | "task-clock" => {
                if !self.touch(ev.tid, ev.pid, emit) {
                    return;
                }
                let sid = self.stack(&ev.frames, emit);
                emit(EventRecord::Sample(Sample {
                    tid: ev.tid,
                    pid: ev.pid,
                    t,
                    metric_id: WALLTIME.into(),
                    period: ev.period.unwrap_or(1),
                    sid,
                }));
            }
            "sched:sched_switch" => {
                let prev: Option<Tid> = field(&ev.rest, "prev_pid").and_then(|v| v.parse().ok());
                let next: Option<Tid> = field(&ev.rest, "next_pid").and_then(|v| v.parse().ok());
                if let Some(prev) = prev.filter(|&p| p != 0) {
                    if self.touch(prev, ev.pid, emit) && self.off_cpu.insert(prev) {
                        let sid = self.stack(&ev.frames, emit);
                        emit(EventRecord::SwitchOut(SwitchOut { tid: prev, t, sid }));
                    }
                }
                if let Some(next) = next.filter(|n| self.off_cpu.contains(n)) {
                    self.off_cpu.remove(&next);
                    emit(EventRecord::SwitchIn(SwitchIn { tid: next, t }));
                }
            }
            "PERF_RECORD_SWITCH" | "PERF_RECORD_SWITCH_CPU_WIDE" => {
                if ev.rest.split_whitespace().next() == Some("IN") && self.off_cpu.remove(&ev.tid) {
                    emit(EventRecord::SwitchIn(SwitchIn { tid: ev.tid, t }));
                }
            }
            "sched:sched_process_fork" => {
                let parent: Option<Tid> = field(&ev.rest, "pid").and_then(|v| v.parse().ok());
                let child: Option<Tid> = field(&ev.rest, "child_pid").and_then(|v| v.parse().ok());
                let (Some(parent), Some(child)) = (parent, child) else {
                    self.skipped += 1;
                    return;
                };
                if child == 0 || self.known.contains(&child) || !self.touch(parent, ev.pid, emit) {
                    self.skipped += 1;
                    return;
                }
                let sid = self.stack(&ev.frames, emit);
                self.pending.insert(
                    child,
                    PendingSpawn {
                        parent,
                        t,
                        sid: Some(sid),
                        name: field(&ev.rest, "child_comm").unwrap_or(&ev.comm).to_string(),
                    },
                );
            }
            "sched:sched_process_exec" => {
                let tid: Tid = field(&ev.rest, "pid").and_then(|v| v.parse().ok()).unwrap_or(ev.tid);
                if !self.touch(tid, ev.pid, emit) {
                    return;
                }
                let file = field(&ev.rest, "filename").unwrap_or(&ev.comm);
                let name = file.rsplit('/').next().unwrap_or(file).to_string();
                emit(EventRecord::Exec(Exec { tid, t, name }));
            }
            "sched:sched_process_exit" => {
                let tid: Tid = field(&ev.rest, "pid").and_then(|v| v.parse().ok()).unwrap_or(ev.tid);
                if tid == 0 || !self.touch(tid, ev.pid, emit) {
                    return;
                }
                if self.off_cpu.remove(&tid) {
                    emit(EventRecord::SwitchIn(SwitchIn { tid, t }));
                }
                self.exited.insert(tid);
                emit(EventRecord::Exit(Exit { tid, t }));
            }
            other => {
                if self.session.count_events.iter().any(|e| e == other) && is_safe_name(other) && other != WALLTIME {
                    if !self.touch(ev.tid, ev.pid, emit) {
                        return;
                    }
                    let sid = self.stack(&ev.frames, emit);
                    emit(EventRecord::Sample(Sample {
                        tid: ev.tid,
                        pid: ev.pid,
                        t,
                        metric_id: other.to_string(),
                        period: ev.period.unwrap_or(1),
                        sid,
                    }));
                } else {
                    self.skipped += 1;
                }
            }
        }
    }

    /// Flushes the last event, spawns never followed by activity, and the
    /// end record.
    pub fn finish(mut self, emit: &mut dyn FnMut(EventRecord)) {
        self.flush(emit);
        let mut pending: Vec<_> = self.pending.drain().collect();
        pending.sort_by_key(|(tid, p)| (p.t, *tid));
        for (tid, p) in pending {
            emit(EventRecord::Spawn(Spawn {
                parent_tid: p.parent,
                pid: tid,
                tid,
                t: p.t,
                sid: p.sid,
                name: p.name,
            }));
        }
        emit(EventRecord::End(End { t: self.max_t }));
    }
}

/// Pid of the first event in `perf script` output; the profiled command.
pub fn first_pid(text: &str) -> Option<Pid> {
    text.lines()
        .find_map(|l| HEADER.captures(l))
        .and_then(|c| c["pid"].parse().ok())
}

/// Translates a complete `perf script` output.
pub fn translate(text: &str, session: PerfSession) -> Vec<EventRecord> {
    let mut out = Vec::new();
    let mut emit = |r| out.push(r);
    let mut tr = PerfScriptTranslator::new(session, &mut emit);
    for line in text.lines() {
        tr.feed_line(line, &mut emit);
    }
    tr.finish(&mut emit);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{assemble, IngestConfig};

    const OUTPUT: &str = "\
work  100/100  10.000000000:    1000000 cpu-clock:
\t    55d0c0de1234 compute+0x14 (/usr/bin/work)
\t    55d0c0de0100 main+0x20 (/usr/bin/work)

work  100/100  10.000500000:          1 sched:sched_process_fork: comm=work pid=100 child_comm=work child_pid=101
\t    7f0000001000 clone3+0x2 (/usr/lib/libc.so.6)
\t    55d0c0de0100 main+0x20 (/usr/bin/work)

work  100/101  10.001000000:    1000000 cpu-clock:
\t    55d0c0de2000 worker+0x1 (/usr/bin/work)

work  100/101  10.002000000:          1 sched:sched_switch: prev_comm=work prev_pid=101 prev_prio=120 prev_state=S ==> next_comm=swapper/1 next_pid=0 next_prio=120
\t    ffffffff81000000 schedule+0x0 ([kernel.kallsyms])
\t    55d0c0de2000 worker+0x1 (/usr/bin/work)

work  100/101  10.004000000: PERF_RECORD_SWITCH IN

work  100/101  10.005000000:          1 sched:sched_process_exit: comm=work pid=101 prio=120

work  100/100  10.006000000:          7 page-faults:
\t    55d0c0de1234 compute+0x14 (/usr/bin/work)

garbage line
";

    fn session() -> PerfSession {
        PerfSession {
            session_id: "live".into(),
            wall_start: 0,
            command: "/usr/bin/work --x".into(),
            hostname: "h".into(),
            count_events: vec!["page-faults".into()],
            root_pid: 100,
        }
    }

    #[test]
    fn translates_to_a_clean_session() {
        let records = translate(OUTPUT, session());
        let finished = assemble(records.clone(), &IngestConfig::default()).unwrap();
        assert_eq!(finished.manifest.error_count, 0, "{:?}", finished.manifest.error_log);
        let tree = &finished.tree;
        assert_eq!(tree.roots, [100]);
        assert_eq!(tree.get(100).unwrap().children, [101]);
        assert!(tree.is_thread(101));
        assert_eq!(tree.get(101).unwrap().exit_t, Some(5_000_000));
        let th = &finished.threads[&101];
        assert_eq!(th.flame.root().cold_ns, 2_000_000);
        assert_eq!(finished.threads[&100].flame.root().value("page-faults"), 7);
        let EventRecord::Spawn(root) = &records[1] else { panic!() };
        assert_eq!(root.name, "work");
    }

    #[test]
    fn garbage_is_skipped_not_fatal() {
        let mut emit_count = 0;
        let mut emit = |_r: EventRecord| emit_count += 1;
        let mut tr = PerfScriptTranslator::new(session(), &mut emit);
        tr.feed_line("\u{0}\u{1} nonsense", &mut emit);
        tr.feed_line("   deadbeef lonely (frame)", &mut emit);
        assert_eq!(tr.skipped, 2);
        tr.finish(&mut emit);
        assert_eq!(emit_count, 3);
    }

    #[test]
    fn first_pid_is_the_first_event() {
        assert_eq!(first_pid(OUTPUT), Some(100));
        assert_eq!(first_pid("nothing here"), None);
    }

    #[test]
    fn time_parsing() {
        assert_eq!(parse_time("1", "5"), Some(1_500_000_000));
        assert_eq!(parse_time("0", "0000000019"), Some(1));
    }
}
