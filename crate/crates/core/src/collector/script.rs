//! TraceScript: a line-oriented text form of a session.
//!
//! ```text
//! # comments start with '#'
//! session <session_id> <wall_start> <command> <hostname>
//! metric <id> <time|count> <unit>
//! frame <fid> <function> [<file> [<line> [<module>]]]    '-' = absent
//! stack <sid> <fid>...                                   leaf first
//! spawn <parent_tid> <pid> <tid> <t> <sid|-> <name>
//! exec <tid> <t> <name>
//! exit <tid> <t>
//! sample <tid> <pid> <t> <metric_id> <period> <sid>
//! switch_out <tid> <t> <sid>
//! switch_in <tid> <t>
//! end <t>                                                optional
//! ```
//!
//! Arguments are separated by whitespace; a token containing spaces is
//! written in double quotes with `\"` and `\\` escapes. `session` comes
//! first and `metric` lines follow it; `walltime` is always present and
//! is added if not declared. Without an `end` line the session ends at the
//! largest timestamp in the script.

use std::fmt::Write as _;
use std::io::BufRead;

use thiserror::Error;

use crate::model::*;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {reason}")]
pub struct ScriptParseError {
    pub line: usize,
    pub reason: String,
}

fn err(line: usize, reason: impl Into<String>) -> ScriptParseError {
    ScriptParseError {
        line,
        reason: reason.into(),
    }
}

/// Splits a line into tokens, honoring quotes and trailing comments.
pub fn tokenize(line: &str) -> Result<Vec<String>, String> {
    Ok(tokenize_marked(line)?.into_iter().map(|(t, _)| t).collect())
}

/// Like [`tokenize`], also telling whether each token was quoted.
fn tokenize_marked(line: &str) -> Result<Vec<(String, bool)>, String> {
    let mut out = Vec::new();
    let mut chars = line.chars().peekable();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        match chars.peek() {
            None | Some('#') => return Ok(out),
            Some('"') => {
                chars.next();
                let mut tok = String::new();
                loop {
                    match chars.next() {
                        None => return Err("unterminated quote".into()),
                        Some('"') => break,
                        Some('\\') => match chars.next() {
                            Some(c @ ('"' | '\\')) => tok.push(c),
                            Some('n') => tok.push('\n'),
                            _ => return Err("invalid escape in quoted token".into()),
                        },
                        Some(c) => tok.push(c),
                    }
                }
                if chars.peek().is_some_and(|c| !c.is_whitespace()) {
                    return Err("quoted token must be followed by whitespace".into());
                }
                out.push((tok, true));
            }
            Some(_) => {
                let mut tok = String::new();
                while let Some(&c) = chars.peek() {
                    if c.is_whitespace() {
                        break;
                    }
                    tok.push(c);
                    chars.next();
                }
                out.push((tok, false));
            }
        }
    }
}

/// Quotes `s` if it would not survive tokenizing as a bare word.
pub fn quote(s: &str) -> String {
    let bare = !s.is_empty()
        && !s.starts_with('"')
        && !s.starts_with('#')
        && s != "-"
        && !s.chars().any(|c| c.is_whitespace() || c == '\\');
    if bare {
        return s.to_string();
    }
    let mut q = String::with_capacity(s.len() + 2);
    q.push('"');
    for c in s.chars() {
        match c {
            '"' => q.push_str("\\\""),
            '\\' => q.push_str("\\\\"),
            '\n' => q.push_str("\\n"),
            c => q.push(c),
        }
    }
    q.push('"');
    q
}

struct Args<'a> {
    line: usize,
    directive: &'a str,
    toks: &'a [String],
    /// Bare `-` tokens, meaning "absent".
    absent: &'a [bool],
}

impl Args<'_> {
    fn opt_str(&self, i: usize) -> Option<String> {
        match self.toks.get(i) {
            Some(t) if !self.absent[i] => Some(t.clone()),
            _ => None,
        }
    }

    fn exact(&self, n: usize) -> Result<(), ScriptParseError> {
        if self.toks.len() != n {
            return Err(err(
                self.line,
                format!("{} takes {n} arguments, got {}", self.directive, self.toks.len()),
            ));
        }
        Ok(())
    }

    fn num<T: std::str::FromStr>(&self, i: usize, what: &str) -> Result<T, ScriptParseError> {
        self.toks[i]
            .parse()
            .map_err(|_| err(self.line, format!("{what} must be a non-negative integer, got '{}'", self.toks[i])))
    }
}

/// Streaming parser; yields validated records in script order.
pub struct ScriptReader<R> {
    input: R,
    line_no: usize,
    dict: SessionDictionary,
    header: Option<SessionHeader>,
    metrics: Vec<MetricDesc>,
    header_sent: bool,
    max_t: Timestamp,
    queued: std::collections::VecDeque<EventRecord>,
    done: bool,
    failed: bool,
}

impl<R: BufRead> ScriptReader<R> {
    pub fn new(input: R) -> Self {
        ScriptReader {
            input,
            line_no: 0,
            dict: SessionDictionary::new(),
            header: None,
            metrics: Vec::new(),
            header_sent: false,
            max_t: 0,
            queued: Default::default(),
            done: false,
            failed: false,
        }
    }

    fn emit(&mut self, rec: EventRecord) -> Result<(), ScriptParseError> {
        if !self.header_sent {
            self.send_header()?;
        }
        self.dict.accept(&rec).map_err(|e| err(self.line_no, e.to_string()))?;
        if let Some(t) = rec.timestamp() {
            self.max_t = self.max_t.max(t);
        }
        self.queued.push_back(rec);
        Ok(())
    }

    fn send_header(&mut self) -> Result<(), ScriptParseError> {
        let Some(mut header) = self.header.take() else {
            return Err(err(self.line_no.max(1), "script must start with a session line"));
        };
        let mut metrics = std::mem::take(&mut self.metrics);
        if !metrics.iter().any(|m| m.id == WALLTIME) {
            metrics.insert(0, MetricDesc::walltime());
        }
        header.metrics = metrics;
        let rec = EventRecord::Header(header);
        self.dict.accept(&rec).map_err(|e| err(self.line_no, e.to_string()))?;
        self.header_sent = true;
        self.queued.push_back(rec);
        Ok(())
    }

    fn directive(&mut self, marked: &[(String, bool)]) -> Result<(), ScriptParseError> {
        let line = self.line_no;
        let toks: Vec<String> = marked.iter().map(|(t, _)| t.clone()).collect();
        let absent: Vec<bool> = marked.iter().skip(1).map(|(t, q)| !q && t == "-").collect();
        let a = Args {
            line,
            directive: &toks[0],
            toks: &toks[1..],
            absent: &absent,
        };
        match toks[0].as_str() {
            "session" => {
                if self.header.is_some() || self.header_sent {
                    return Err(err(line, "duplicate session line"));
                }
                a.exact(4)?;
                self.header = Some(SessionHeader {
                    version: crate::protocol::PROTOCOL_VERSION,
                    session_id: a.toks[0].clone(),
                    wall_start: a.num(1, "wall_start")?,
                    command: a.toks[2].clone(),
                    hostname: a.toks[3].clone(),
                    metrics: Vec::new(),
                });
            }
            "metric" => {
                if self.header_sent {
                    return Err(err(line, "metric lines must precede all records"));
                }
                if self.header.is_none() {
                    return Err(err(line, "script must start with a session line"));
                }
                a.exact(3)?;
                let kind = MetricKind::parse(&a.toks[1])
                    .ok_or_else(|| err(line, format!("metric kind must be time or count, got '{}'", a.toks[1])))?;
                self.metrics.push(MetricDesc {
                    id: a.toks[0].clone(),
                    kind,
                    unit: a.toks[2].clone(),
                });
            }
            "frame" => {
                if a.toks.len() < 2 || a.toks.len() > 5 {
                    return Err(err(line, "frame takes 2 to 5 arguments"));
                }
                let line_no = match a.opt_str(3) {
                    Some(_) => Some(a.num(3, "line")?),
                    None => None,
                };
                self.emit(EventRecord::Frame(FrameDef {
                    fid: a.num(0, "fid")?,
                    function: a.toks[1].clone(),
                    file: a.opt_str(2),
                    line: line_no,
                    module: a.opt_str(4),
                }))?;
            }
            "stack" => {
                if a.toks.len() < 2 {
                    return Err(err(line, "stack needs an id and at least one frame"));
                }
                let frames = (1..a.toks.len()).map(|i| a.num(i, "fid")).collect::<Result<_, _>>()?;
                self.emit(EventRecord::Stack(StackDef {
                    sid: a.num(0, "sid")?,
                    frames,
                }))?;
            }
            "spawn" => {
                a.exact(6)?;
                let sid = match a.opt_str(4) {
                    Some(_) => Some(a.num(4, "sid")?),
                    None => None,
                };
                self.emit(EventRecord::Spawn(Spawn {
                    parent_tid: a.num(0, "parent_tid")?,
                    pid: a.num(1, "pid")?,
                    tid: a.num(2, "tid")?,
                    t: a.num(3, "t")?,
                    sid,
                    name: a.toks[5].clone(),
                }))?;
            }
            "exec" => {
                a.exact(3)?;
                self.emit(EventRecord::Exec(Exec {
                    tid: a.num(0, "tid")?,
                    t: a.num(1, "t")?,
                    name: a.toks[2].clone(),
                }))?;
            }
            "exit" => {
                a.exact(2)?;
                self.emit(EventRecord::Exit(Exit {
                    tid: a.num(0, "tid")?,
                    t: a.num(1, "t")?,
                }))?;
            }
            "sample" => {
                a.exact(6)?;
                self.emit(EventRecord::Sample(Sample {
                    tid: a.num(0, "tid")?,
                    pid: a.num(1, "pid")?,
                    t: a.num(2, "t")?,
                    metric_id: a.toks[3].clone(),
                    period: a.num(4, "period")?,
                    sid: a.num(5, "sid")?,
                }))?;
            }
            "switch_out" => {
                a.exact(3)?;
                self.emit(EventRecord::SwitchOut(SwitchOut {
                    tid: a.num(0, "tid")?,
                    t: a.num(1, "t")?,
                    sid: a.num(2, "sid")?,
                }))?;
            }
            "switch_in" => {
                a.exact(2)?;
                self.emit(EventRecord::SwitchIn(SwitchIn {
                    tid: a.num(0, "tid")?,
                    t: a.num(1, "t")?,
                }))?;
            }
            "end" => {
                a.exact(1)?;
                let t: Timestamp = a.num(0, "t")?;
                if t < self.max_t {
                    return Err(err(line, format!("end {t} precedes earlier timestamp {}", self.max_t)));
                }
                self.emit(EventRecord::End(End { t }))?;
                self.done = true;
            }
            other => return Err(err(line, format!("unknown directive '{other}'"))),
        }
        Ok(())
    }

    fn step(&mut self) -> Result<(), ScriptParseError> {
        let mut raw = String::new();
        loop {
            raw.clear();
            let n = self
                .input
                .read_line(&mut raw)
                .map_err(|e| err(self.line_no + 1, format!("read failed: {e}")))?;
            if n == 0 {
                if !self.header_sent {
                    self.send_header()?;
                }
                let t = self.max_t;
                self.emit(EventRecord::End(End { t }))?;
                self.done = true;
                return Ok(());
            }
            self.line_no += 1;
            let toks = tokenize_marked(&raw).map_err(|r| err(self.line_no, r))?;
            if toks.is_empty() {
                continue;
            }
            if self.done {
                return Err(err(self.line_no, "nothing may follow the end line"));
            }
            self.directive(&toks)?;
            if !self.queued.is_empty() || self.done {
                return Ok(());
            }
        }
    }
}

impl<R: BufRead> Iterator for ScriptReader<R> {
    type Item = Result<EventRecord, ScriptParseError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if let Some(r) = self.queued.pop_front() {
                return Some(Ok(r));
            }
            if self.failed {
                return None;
            }
            if self.done {
                // Anything after `end` is an error.
                let mut rest = String::new();
                loop {
                    rest.clear();
                    match self.input.read_line(&mut rest) {
                        Ok(0) | Err(_) => return None,
                        Ok(_) => {
                            self.line_no += 1;
                            match tokenize(&rest) {
                                Ok(t) if t.is_empty() => continue,
                                _ => {
                                    self.failed = true;
                                    return Some(Err(err(self.line_no, "nothing may follow the end line")));
                                }
                            }
                        }
                    }
                }
            }
            if let Err(e) = self.step() {
                self.failed = true;
                return Some(Err(e));
            }
        }
    }
}

/// A parsed, validated script.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceScript {
    pub records: Vec<EventRecord>,
}

impl TraceScript {
    pub fn parse(text: &str) -> Result<Self, ScriptParseError> {
        Ok(TraceScript {
            records: ScriptReader::new(text.as_bytes()).collect::<Result<_, _>>()?,
        })
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self, ScriptParseError> {
        let file = std::fs::File::open(path).map_err(|e| err(0, format!("cannot open {}: {e}", path.display())))?;
        Ok(TraceScript {
            records: ScriptReader::new(std::io::BufReader::new(file)).collect::<Result<_, _>>()?,
        })
    }

    pub fn header(&self) -> Option<&SessionHeader> {
        match self.records.first() {
            Some(EventRecord::Header(h)) => Some(h),
            _ => None,
        }
    }
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "-".to_string(), |v| quote(&v.to_string()))
}

/// Renders records as a script that parses back to the same records.
pub fn render(records: &[EventRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let _ = match r {
            EventRecord::Header(h) => {
                let _ = writeln!(
                    out,
                    "session {} {} {} {}",
                    quote(&h.session_id),
                    h.wall_start,
                    quote(&h.command),
                    quote(&h.hostname)
                );
                for m in &h.metrics {
                    let _ = writeln!(out, "metric {} {} {}", quote(&m.id), m.kind.as_str(), quote(&m.unit));
                }
                Ok(())
            }
            EventRecord::Frame(f) => writeln!(
                out,
                "frame {} {} {} {} {}",
                f.fid,
                quote(&f.function),
                opt(&f.file),
                opt(&f.line),
                opt(&f.module)
            ),
            EventRecord::Stack(s) => writeln!(
                out,
                "stack {} {}",
                s.sid,
                s.frames.iter().map(u64::to_string).collect::<Vec<_>>().join(" ")
            ),
            EventRecord::Spawn(e) => writeln!(
                out,
                "spawn {} {} {} {} {} {}",
                e.parent_tid,
                e.pid,
                e.tid,
                e.t,
                opt(&e.sid),
                quote(&e.name)
            ),
            EventRecord::Exec(e) => writeln!(out, "exec {} {} {}", e.tid, e.t, quote(&e.name)),
            EventRecord::Exit(e) => writeln!(out, "exit {} {}", e.tid, e.t),
            EventRecord::Sample(s) => writeln!(
                out,
                "sample {} {} {} {} {} {}",
                s.tid,
                s.pid,
                s.t,
                quote(&s.metric_id),
                s.period,
                s.sid
            ),
            EventRecord::SwitchOut(e) => writeln!(out, "switch_out {} {} {}", e.tid, e.t, e.sid),
            EventRecord::SwitchIn(e) => writeln!(out, "switch_in {} {}", e.tid, e.t),
            EventRecord::End(e) => writeln!(out, "end {}", e.t),
        };
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCRIPT: &str = r#"
# two threads
session demo 1700000000000000000 "work --fast" host1
metric page-faults count faults
frame 1 main main.c 10 work
frame 2 "do work" - - -
stack 1 1
stack 2 2 1
spawn 0 100 100 0 - work
spawn 100 100 101 5 2 work
sample 100 100 10 walltime 10 1
sample 101 100 12 walltime 10 2
sample 101 100 13 page-faults 3 2
switch_out 101 20 2
switch_in 101 30
exit 101 40
"#;

    #[test]
    fn parses_records_in_order() {
        let s = TraceScript::parse(SCRIPT).unwrap();
        let h = s.header().unwrap();
        assert_eq!(h.command, "work --fast");
        assert_eq!(h.metrics[0].id, WALLTIME);
        assert_eq!(h.metrics[1].id, "page-faults");
        assert_eq!(s.records.last(), Some(&EventRecord::End(End { t: 40 })));
        let EventRecord::Frame(f) = &s.records[2] else { panic!() };
        assert_eq!(f.function, "do work");
        assert_eq!(f.file, None);
    }

    #[test]
    fn render_round_trips() {
        let s = TraceScript::parse(SCRIPT).unwrap();
        let again = TraceScript::parse(&render(&s.records)).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn undefined_sid_names_the_line() {
        let e = TraceScript::parse("session s 0 c h\nframe 1 f\nsample 1 1 0 walltime 1 9\n").unwrap_err();
        assert_eq!(e.line, 3);
        assert!(e.reason.contains("undefined stack 9"), "{e}");
    }

    #[test]
    fn header_only_script_is_header_and_end() {
        let s = TraceScript::parse("session s 0 c h\n").unwrap();
        assert_eq!(s.records.len(), 2);
        assert!(matches!(s.records[1], EventRecord::End(End { t: 0 })));
    }

    #[test]
    fn rejects_structure_errors() {
        assert_eq!(TraceScript::parse("frame 1 f\n").unwrap_err().line, 1);
        assert_eq!(TraceScript::parse("session s 0 c h\nend 5\nexit 1 2\n").unwrap_err().line, 3);
        assert_eq!(TraceScript::parse("session s 0 c h\nbogus\n").unwrap_err().line, 2);
        assert_eq!(TraceScript::parse("session s 0 c h\nframe 1 \"open\n").unwrap_err().line, 2);
        assert_eq!(TraceScript::parse("session s 0 c h\nexit x 2\n").unwrap_err().line, 2);
    }

    #[test]
    fn tokenizer_handles_quotes_and_comments() {
        assert_eq!(tokenize(r#"a "b c" d # e"#).unwrap(), ["a", "b c", "d"]);
        assert_eq!(tokenize(r#""x\"y\\z""#).unwrap(), [r#"x"y\z"#]);
        assert_eq!(quote("-"), "\"-\"");
        assert_eq!(tokenize(&quote("a b")).unwrap(), ["a b"]);
    }
}
