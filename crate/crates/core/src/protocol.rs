//! Wire format v1: one JSON object per line, LF terminated.
//!
//! The encoder is canonical: keys appear as `type` followed by the record's
//! fields in declaration order, optional fields are omitted when absent and
//! no insignificant whitespace is emitted. The decoder is total: any byte
//! string yields either a record or a classified [`ProtocolError`].

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::model::{
    validate_header, End, EventRecord, Exec, Exit, FrameDef, MetricDesc, MetricKind, Sample,
    SessionHeader, Spawn, StackDef, SwitchIn, SwitchOut,
};

/// The only protocol version this server speaks.
pub const PROTOCOL_VERSION: u32 = 1;

/// Maximum encoded line length, excluding the LF terminator.
pub const MAX_LINE_BYTES: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum ProtocolError {
    #[error("malformed record: {0}")]
    MalformedSyntax(String),
    #[error("unknown event type '{0}'")]
    UnknownEventType(String),
    #[error("missing field '{0}'")]
    MissingField(String),
    #[error("field '{field}' has the wrong type (expected {expected})")]
    WrongFieldType { field: String, expected: String },
    #[error("record of {len} bytes exceeds the {MAX_LINE_BYTES}-byte line limit")]
    OversizeRecord { len: usize },
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u64),
    #[error("first record must be the session header")]
    HeaderMisplaced,
    #[error("invalid session header: {0}")]
    InvalidHeader(String),
}

impl ProtocolError {
    /// Stable error name, used in manifests and API bodies.
    pub fn code(&self) -> &'static str {
        match self {
            ProtocolError::MalformedSyntax(_) => "MalformedSyntax",
            ProtocolError::UnknownEventType(_) => "UnknownEventType",
            ProtocolError::MissingField(_) => "MissingField",
            ProtocolError::WrongFieldType { .. } => "WrongFieldType",
            ProtocolError::OversizeRecord { .. } => "OversizeRecord",
            ProtocolError::UnsupportedVersion(_) => "UnsupportedVersion",
            ProtocolError::HeaderMisplaced => "HeaderMisplaced",
            ProtocolError::InvalidHeader(_) => "InvalidHeader",
        }
    }
}

struct ObjectWriter {
    buf: String,
    first: bool,
}

impl ObjectWriter {
    fn new(type_tag: &str) -> Self {
        let mut w = ObjectWriter {
            buf: String::with_capacity(96),
            first: true,
        };
        w.buf.push('{');
        w.str("type", type_tag);
        w
    }

    fn key(&mut self, key: &str) {
        if !self.first {
            self.buf.push(',');
        }
        self.first = false;
        self.buf.push('"');
        self.buf.push_str(key);
        self.buf.push_str("\":");
    }

    fn str(&mut self, key: &str, value: &str) {
        self.key(key);
        push_json_string(&mut self.buf, value);
    }

    fn opt_str(&mut self, key: &str, value: Option<&str>) {
        if let Some(v) = value {
            self.str(key, v);
        }
    }

    fn num(&mut self, key: &str, value: u64) {
        self.key(key);
        self.buf.push_str(&value.to_string());
    }

    fn opt_num(&mut self, key: &str, value: Option<u64>) {
        if let Some(v) = value {
            self.num(key, v);
        }
    }

    fn raw(&mut self, key: &str, json: &str) {
        self.key(key);
        self.buf.push_str(json);
    }

    fn finish(mut self) -> String {
        self.buf.push_str("}\n");
        self.buf
    }
}

fn push_json_string(buf: &mut String, s: &str) {
    // serde_json escapes control characters, so no raw LF can appear.
    buf.push_str(&serde_json::to_string(s).expect("strings always serialize"));
}

fn metrics_json(metrics: &[MetricDesc]) -> String {
    let mut out = String::from("[");
    for (i, m) in metrics.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str("{\"id\":");
        push_json_string(&mut out, &m.id);
        out.push_str(",\"kind\":");
        push_json_string(&mut out, m.kind.as_str());
        out.push_str(",\"unit\":");
        push_json_string(&mut out, &m.unit);
        out.push('}');
    }
    out.push(']');
    out
}

/// Encodes one record as a canonical wire line, including the trailing LF.
pub fn encode_event(e: &EventRecord) -> Result<String, ProtocolError> {
    let mut w = ObjectWriter::new(e.type_tag());
    match e {
        EventRecord::Header(h) => {
            w.num("version", h.version as u64);
            w.str("session_id", &h.session_id);
            w.num("wall_start", h.wall_start);
            w.str("command", &h.command);
            w.str("hostname", &h.hostname);
            w.raw("metrics", &metrics_json(&h.metrics));
        }
        EventRecord::Frame(f) => {
            w.num("fid", f.fid);
            w.str("function", &f.function);
            w.opt_str("file", f.file.as_deref());
            w.opt_num("line", f.line.map(u64::from));
            w.opt_str("module", f.module.as_deref());
        }
        EventRecord::Stack(s) => {
            w.num("sid", s.sid);
            let frames: Vec<String> = s.frames.iter().map(u64::to_string).collect();
            w.raw("frames", &format!("[{}]", frames.join(",")));
        }
        EventRecord::Sample(s) => {
            w.num("tid", s.tid as u64);
            w.num("pid", s.pid as u64);
            w.num("t", s.t);
            w.str("metric_id", &s.metric_id);
            w.num("period", s.period);
            w.num("sid", s.sid);
        }
        EventRecord::SwitchOut(s) => {
            w.num("tid", s.tid as u64);
            w.num("t", s.t);
            w.num("sid", s.sid);
        }
        EventRecord::SwitchIn(s) => {
            w.num("tid", s.tid as u64);
            w.num("t", s.t);
        }
        EventRecord::Spawn(s) => {
            w.num("parent_tid", s.parent_tid as u64);
            w.num("pid", s.pid as u64);
            w.num("tid", s.tid as u64);
            w.num("t", s.t);
            w.opt_num("sid", s.sid);
            w.str("name", &s.name);
        }
        EventRecord::Exec(x) => {
            w.num("tid", x.tid as u64);
            w.num("t", x.t);
            w.str("name", &x.name);
        }
        EventRecord::Exit(x) => {
            w.num("tid", x.tid as u64);
            w.num("t", x.t);
        }
        EventRecord::End(x) => {
            w.num("t", x.t);
        }
    }
    let line = w.finish();
    if line.len() - 1 > MAX_LINE_BYTES {
        return Err(ProtocolError::OversizeRecord { len: line.len() - 1 });
    }
    Ok(line)
}

struct Fields<'a>(&'a Map<String, Value>);

fn wrong(field: &str, expected: &str) -> ProtocolError {
    ProtocolError::WrongFieldType {
        field: field.to_string(),
        expected: expected.to_string(),
    }
}

impl<'a> Fields<'a> {
    fn get(&self, field: &str) -> Option<&'a Value> {
        match self.0.get(field) {
            None | Some(Value::Null) => None,
            Some(v) => Some(v),
        }
    }

    fn required(&self, field: &str) -> Result<&'a Value, ProtocolError> {
        self.get(field)
            .ok_or_else(|| ProtocolError::MissingField(field.to_string()))
    }

    fn u64_of(field: &str, v: &Value) -> Result<u64, ProtocolError> {
        v.as_u64().ok_or_else(|| wrong(field, "unsigned 64-bit integer"))
    }

    fn u64(&self, field: &str) -> Result<u64, ProtocolError> {
        Self::u64_of(field, self.required(field)?)
    }

    fn u32(&self, field: &str) -> Result<u32, ProtocolError> {
        let v = self.required(field)?;
        v.as_u64()
            .and_then(|n| u32::try_from(n).ok())
            .ok_or_else(|| wrong(field, "unsigned 32-bit integer"))
    }

    fn opt_u64(&self, field: &str) -> Result<Option<u64>, ProtocolError> {
        self.get(field).map(|v| Self::u64_of(field, v)).transpose()
    }

    fn opt_u32(&self, field: &str) -> Result<Option<u32>, ProtocolError> {
        self.get(field)
            .map(|v| {
                v.as_u64()
                    .and_then(|n| u32::try_from(n).ok())
                    .ok_or_else(|| wrong(field, "unsigned 32-bit integer"))
            })
            .transpose()
    }

    fn string(&self, field: &str) -> Result<String, ProtocolError> {
        match self.required(field)? {
            Value::String(s) => Ok(s.clone()),
            _ => Err(wrong(field, "string")),
        }
    }

    fn opt_string(&self, field: &str) -> Result<Option<String>, ProtocolError> {
        match self.get(field) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(_) => Err(wrong(field, "string")),
        }
    }
}

fn decode_metrics(v: &Value) -> Result<Vec<MetricDesc>, ProtocolError> {
    let items = v.as_array().ok_or_else(|| wrong("metrics", "array"))?;
    items
        .iter()
        .map(|item| {
            let obj = item
                .as_object()
                .ok_or_else(|| wrong("metrics", "array of objects"))?;
            let f = Fields(obj);
            let kind = f.string("kind")?;
            Ok(MetricDesc {
                id: f.string("id")?,
                kind: MetricKind::parse(&kind).ok_or_else(|| wrong("kind", "\"time\" or \"count\""))?,
                unit: f.string("unit")?,
            })
        })
        .collect()
}

/// Decodes one wire line. A single trailing LF is accepted and ignored.
pub fn decode_event(line: &[u8]) -> Result<EventRecord, ProtocolError> {
    let body = line.strip_suffix(b"\n").unwrap_or(line);
    if body.len() > MAX_LINE_BYTES {
        return Err(ProtocolError::OversizeRecord { len: body.len() });
    }
    if body.contains(&b'\n') {
        return Err(ProtocolError::MalformedSyntax("raw newline inside record".into()));
    }
    let text = std::str::from_utf8(body)
        .map_err(|e| ProtocolError::MalformedSyntax(format!("invalid UTF-8: {e}")))?;
    let value: Value = serde_json::from_str(text)
        .map_err(|e| ProtocolError::MalformedSyntax(e.to_string()))?;
    let Value::Object(obj) = value else {
        return Err(ProtocolError::MalformedSyntax("not an object".into()));
    };
    let f = Fields(&obj);
    let type_tag = match f.required("type")? {
        Value::String(s) => s.as_str(),
        _ => return Err(wrong("type", "string")),
    };
    let record = match type_tag {
        "header" => EventRecord::Header(SessionHeader {
            version: f.u32("version")?,
            session_id: f.string("session_id")?,
            wall_start: f.u64("wall_start")?,
            command: f.string("command")?,
            hostname: f.string("hostname")?,
            metrics: decode_metrics(f.required("metrics")?)?,
        }),
        "frame" => EventRecord::Frame(FrameDef {
            fid: f.u64("fid")?,
            function: f.string("function")?,
            file: f.opt_string("file")?,
            line: f.opt_u32("line")?,
            module: f.opt_string("module")?,
        }),
        "stack" => {
            let frames = f
                .required("frames")?
                .as_array()
                .ok_or_else(|| wrong("frames", "array"))?
                .iter()
                .map(|v| Fields::u64_of("frames", v))
                .collect::<Result<Vec<_>, _>>()?;
            EventRecord::Stack(StackDef {
                sid: f.u64("sid")?,
                frames,
            })
        }
        "sample" => EventRecord::Sample(Sample {
            tid: f.u32("tid")?,
            pid: f.u32("pid")?,
            t: f.u64("t")?,
            metric_id: f.string("metric_id")?,
            period: f.u64("period")?,
            sid: f.u64("sid")?,
        }),
        "switch_out" => EventRecord::SwitchOut(SwitchOut {
            tid: f.u32("tid")?,
            t: f.u64("t")?,
            sid: f.u64("sid")?,
        }),
        "switch_in" => EventRecord::SwitchIn(SwitchIn {
            tid: f.u32("tid")?,
            t: f.u64("t")?,
        }),
        "spawn" => EventRecord::Spawn(Spawn {
            parent_tid: f.u32("parent_tid")?,
            pid: f.u32("pid")?,
            tid: f.u32("tid")?,
            t: f.u64("t")?,
            sid: f.opt_u64("sid")?,
            name: f.string("name")?,
        }),
        "exec" => EventRecord::Exec(Exec {
            tid: f.u32("tid")?,
            t: f.u64("t")?,
            name: f.string("name")?,
        }),
        "exit" => EventRecord::Exit(Exit {
            tid: f.u32("tid")?,
            t: f.u64("t")?,
        }),
        "end" => EventRecord::End(End { t: f.u64("t")? }),
        other => return Err(ProtocolError::UnknownEventType(other.to_string())),
    };
    Ok(record)
}

/// Processes the first line of a connection: it must be a v1 session header.
pub fn handshake(greeting: &[u8]) -> Result<SessionHeader, ProtocolError> {
    match decode_event(greeting)? {
        EventRecord::Header(h) => {
            if h.version != PROTOCOL_VERSION {
                return Err(ProtocolError::UnsupportedVersion(h.version as u64));
            }
            validate_header(&h).map_err(|e| ProtocolError::InvalidHeader(e.to_string()))?;
            Ok(h)
        }
        _ => Err(ProtocolError::HeaderMisplaced),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::WALLTIME;

    fn header(version: u32) -> EventRecord {
        EventRecord::Header(SessionHeader {
            version,
            session_id: "demo".into(),
            wall_start: 17,
            command: "./work".into(),
            hostname: "box".into(),
            metrics: vec![MetricDesc::walltime()],
        })
    }

    #[test]
    fn frame_encodes_exact_fields() {
        let e = EventRecord::Frame(FrameDef {
            fid: 1,
            function: "main".into(),
            file: Some("main.c".into()),
            line: Some(10),
            module: Some("a.out".into()),
        });
        assert_eq!(
            encode_event(&e).unwrap(),
            "{\"type\":\"frame\",\"fid\":1,\"function\":\"main\",\"file\":\"main.c\",\"line\":10,\"module\":\"a.out\"}\n"
        );
    }

    #[test]
    fn end_encodes_t() {
        let e = EventRecord::End(End { t: 1000 });
        assert_eq!(encode_event(&e).unwrap(), "{\"type\":\"end\",\"t\":1000}\n");
    }

    #[test]
    fn header_encoding_is_canonical() {
        assert_eq!(
            encode_event(&header(1)).unwrap(),
            "{\"type\":\"header\",\"version\":1,\"session_id\":\"demo\",\"wall_start\":17,\"command\":\"./work\",\"hostname\":\"box\",\"metrics\":[{\"id\":\"walltime\",\"kind\":\"time\",\"unit\":\"ns\"}]}\n"
        );
    }

    #[test]
    fn oversize_record_is_rejected() {
        let e = EventRecord::Sample(Sample {
            tid: 1,
            pid: 1,
            t: 0,
            metric_id: "x".repeat(2 << 20),
            period: 1,
            sid: 1,
        });
        assert!(matches!(encode_event(&e), Err(ProtocolError::OversizeRecord { .. })));
    }

    #[test]
    fn decodes_exit() {
        assert_eq!(
            decode_event(br#"{"type":"exit","tid":42,"t":900}"#),
            Ok(EventRecord::Exit(Exit { tid: 42, t: 900 }))
        );
    }

    #[test]
    fn classifies_malformed_input() {
        assert!(matches!(decode_event(b"not a record"), Err(ProtocolError::MalformedSyntax(_))));
        assert!(matches!(decode_event(b"[1,2]"), Err(ProtocolError::MalformedSyntax(_))));
        assert!(matches!(decode_event(b"\xff\xfe"), Err(ProtocolError::MalformedSyntax(_))));
        assert!(matches!(
            decode_event(b"{\"type\":\"end\",\n\"t\":1}"),
            Err(ProtocolError::MalformedSyntax(_))
        ));
    }

    #[test]
    fn classifies_unknown_type() {
        assert_eq!(
            decode_event(br#"{"type":"warp_drive"}"#),
            Err(ProtocolError::UnknownEventType("warp_drive".into()))
        );
    }

    #[test]
    fn classifies_field_errors() {
        assert_eq!(
            decode_event(br#"{"type":"exit","tid":42}"#),
            Err(ProtocolError::MissingField("t".into()))
        );
        assert!(matches!(
            decode_event(br#"{"type":"exit","tid":-1,"t":3}"#),
            Err(ProtocolError::WrongFieldType { .. })
        ));
        assert!(matches!(
            decode_event(br#"{"type":"exit","tid":4294967296,"t":3}"#),
            Err(ProtocolError::WrongFieldType { .. })
        ));
        assert_eq!(decode_event(br#"{"t":3}"#), Err(ProtocolError::MissingField("type".into())));
    }

    #[test]
    fn null_optional_fields_read_as_absent() {
        let e = decode_event(br#"{"type":"frame","fid":2,"function":"f","file":null}"#).unwrap();
        let EventRecord::Frame(f) = e else { panic!() };
        assert_eq!(f.file, None);
    }

    #[test]
    fn handshake_negotiates_version() {
        let v1 = encode_event(&header(1)).unwrap();
        assert_eq!(handshake(v1.as_bytes()).unwrap().metrics[0].id, WALLTIME);
        let v2 = encode_event(&header(2)).unwrap();
        assert_eq!(handshake(v2.as_bytes()), Err(ProtocolError::UnsupportedVersion(2)));
        let sample = br#"{"type":"sample","tid":1,"pid":1,"t":0,"metric_id":"walltime","period":1,"sid":1}"#;
        assert_eq!(handshake(sample), Err(ProtocolError::HeaderMisplaced));
    }
}
