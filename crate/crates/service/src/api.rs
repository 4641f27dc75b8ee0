//! The read-only analysis API, independent of any HTTP stack.
//!
//! [`Api::get`] maps a request target (path plus query) to a status code
//! and a JSON body. Responses depend only on the bundles on disk, so the
//! same request always yields the same bytes.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use percent_encoding::percent_decode_str;
use serde::Serialize;
use serde_json::{json, Value};

use tracelens_core::flame::FlameGraph;
use tracelens_core::model::{is_safe_name, FrameDef, Tid, WALLTIME};
use tracelens_core::sourcemap::{fetch, FetchError, ResolveError, SourceRoot};
use tracelens_core::store::{list_sessions, BundleReader, StoreError, HOTCOLD, MANIFEST_FILE, ROOFLINE_FILE};
use tracelens_core::timeline::downsample;

pub const API_PREFIX: &str = "/api/v1";
/// Timelines with more segments than this are downsampled.
pub const DEFAULT_EXACT_THRESHOLD: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct ApiResponse {
    pub status: u16,
    pub body: Value,
}

impl ApiResponse {
    fn ok(body: Value) -> Self {
        ApiResponse { status: 200, body }
    }

    fn error(status: u16, code: &str, message: impl Into<String>) -> Self {
        ApiResponse {
            status,
            body: json!({ "error_code": code, "message": message.into() }),
        }
    }

    fn not_found(code: &str, message: impl Into<String>) -> Self {
        Self::error(404, code, message)
    }

    fn bad_request(code: &str, message: impl Into<String>) -> Self {
        Self::error(400, code, message)
    }

    /// The body as sent on the wire.
    pub fn body_text(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.body).expect("json values serialize");
        s.push('\n');
        s
    }
}

type Reply = Result<ApiResponse, ApiResponse>;

#[derive(Debug, Clone)]
pub struct ApiConfig {
    /// A directory of bundles, or a single bundle.
    pub results: PathBuf,
    pub source_root: Option<SourceRoot>,
    pub exact_threshold: usize,
}

impl ApiConfig {
    pub fn new(results: impl Into<PathBuf>) -> Self {
        ApiConfig {
            results: results.into(),
            source_root: None,
            exact_threshold: DEFAULT_EXACT_THRESHOLD,
        }
    }
}

pub struct Api {
    cfg: ApiConfig,
    readers: RwLock<HashMap<String, Arc<BundleReader>>>,
    flames: RwLock<HashMap<(String, Tid, String), Arc<FlameGraph>>>,
}

fn store_error(e: StoreError) -> ApiResponse {
    match e {
        StoreError::NotFound(what) => ApiResponse::not_found("NotFound", format!("{what} not found")),
        other => ApiResponse::error(500, "BundleUnreadable", other.to_string()),
    }
}

#[derive(Serialize)]
struct FrameOut<'a> {
    function: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    file: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    line: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    module: Option<&'a str>,
}

fn frame_out(f: &FrameDef) -> FrameOut<'_> {
    FrameOut {
        function: &f.function,
        file: f.file.as_deref(),
        line: f.line,
        module: f.module.as_deref(),
    }
}

/// Splits a node path: slash-separated, percent-encoded function names
/// from the root. The empty path is the root itself.
pub fn parse_node_path(raw: &str) -> Result<Vec<String>, String> {
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    raw.split('/')
        .enumerate()
        .map(|(i, seg)| {
            if seg.is_empty() {
                return Err(format!("segment {} is empty", i + 1));
            }
            // The decoder passes malformed escapes through; reject them.
            let well_formed = seg
                .split('%')
                .skip(1)
                .all(|rest| rest.len() >= 2 && rest.as_bytes()[..2].iter().all(u8::is_ascii_hexdigit));
            if !well_formed {
                return Err(format!("bad percent escape in segment {}", i + 1));
            }
            percent_decode_str(seg)
                .decode_utf8()
                .map(|name| name.into_owned())
                .map_err(|_| format!("segment {} is not UTF-8", i + 1))
        })
        .collect()
}

struct Query(Vec<(String, String)>);

impl Query {
    fn parse(q: &str) -> Self {
        Query(form_urlencoded::parse(q.as_bytes()).into_owned().collect())
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.0.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn required(&self, key: &str) -> Result<&str, ApiResponse> {
        self.get(key)
            .ok_or_else(|| ApiResponse::bad_request("BadRequest", format!("missing query parameter '{key}'")))
    }
}

impl Api {
    pub fn new(cfg: ApiConfig) -> Self {
        Api {
            cfg,
            readers: RwLock::default(),
            flames: RwLock::default(),
        }
    }

    pub fn config(&self) -> &ApiConfig {
        &self.cfg
    }

    /// `results` is itself a bundle rather than a directory of bundles.
    fn single_bundle(&self) -> Option<String> {
        if self.cfg.results.join(MANIFEST_FILE).is_file() {
            self.cfg
                .results
                .canonicalize()
                .ok()?
                .file_name()?
                .to_str()
                .map(str::to_string)
        } else {
            None
        }
    }

    fn bundle_dir(&self, id: &str) -> Option<PathBuf> {
        if !is_safe_name(id) {
            return None;
        }
        match self.single_bundle() {
            Some(name) if name == id => Some(self.cfg.results.clone()),
            Some(_) => None,
            None => Some(self.cfg.results.join(id)),
        }
    }

    fn reader(&self, id: &str) -> Result<Arc<BundleReader>, ApiResponse> {
        if let Some(r) = self.readers.read().unwrap_or_else(|e| e.into_inner()).get(id) {
            return Ok(r.clone());
        }
        let unknown = || ApiResponse::not_found("UnknownSession", format!("no session '{id}'"));
        let dir = self.bundle_dir(id).ok_or_else(unknown)?;
        let reader = match BundleReader::open(dir) {
            Ok(r) => Arc::new(r),
            Err(StoreError::MissingManifest) => return Err(unknown()),
            Err(e) => return Err(store_error(e)),
        };
        self.readers
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(id.to_string(), reader.clone());
        Ok(reader)
    }

    fn flame(&self, id: &str, reader: &BundleReader, tid: Tid, projection: &str) -> Result<Arc<FlameGraph>, ApiResponse> {
        let key = (id.to_string(), tid, projection.to_string());
        if let Some(g) = self.flames.read().unwrap_or_else(|e| e.into_inner()).get(&key) {
            return Ok(g.clone());
        }
        let g = Arc::new(reader.flame(tid, projection).map_err(store_error)?);
        self.flames.write().unwrap_or_else(|e| e.into_inner()).insert(key, g.clone());
        Ok(g)
    }

    /// Handles `GET <target>`, where target is the path with an optional
    /// `?query`.
    pub fn get(&self, target: &str) -> ApiResponse {
        let (path, query) = target.split_once('?').unwrap_or((target, ""));
        let query = Query::parse(query);
        let Some(rest) = path.strip_prefix(API_PREFIX) else {
            return ApiResponse::not_found("NotFound", format!("no endpoint {path}"));
        };
        let segs: Vec<&str> = rest.trim_end_matches('/').split('/').skip(1).collect();
        let reply = match segs.as_slice() {
            ["sessions"] => self.sessions(),
            ["sessions", id, "tree"] => self.tree(id),
            ["sessions", id, "roofline"] => self.roofline(id),
            ["sessions", id, "source"] => self.source(id, &query),
            ["sessions", id, "threads", tid, rest @ ..] => self.thread(id, tid, rest, &query),
            _ => Err(ApiResponse::not_found("NotFound", format!("no endpoint {path}"))),
        };
        reply.unwrap_or_else(|e| e)
    }

    fn sessions(&self) -> Reply {
        if let Some(name) = self.single_bundle() {
            let manifest = self.reader(&name)?.manifest.clone();
            return Ok(ApiResponse::ok(json!({
                "sessions": [session_entry(&name, &manifest, &self.cfg.results)],
                "skipped": [],
            })));
        }
        let listing = list_sessions(&self.cfg.results)
            .map_err(|e| ApiResponse::error(500, "ResultsUnreadable", e.to_string()))?;
        let sessions: Vec<Value> = listing
            .sessions
            .iter()
            .map(|s| session_entry(&s.name, &s.manifest, &self.cfg.results.join(&s.name)))
            .collect();
        Ok(ApiResponse::ok(json!({ "sessions": sessions, "skipped": listing.skipped })))
    }

    fn tree(&self, id: &str) -> Reply {
        let reader = self.reader(id)?;
        let tree = reader.tree().map_err(store_error)?;
        let nodes: Vec<Value> = tree
            .preorder()
            .into_iter()
            .filter_map(|tid| tree.get(tid))
            .map(|n| {
                let mut v = serde_json::to_value(n).expect("nodes serialize");
                let obj = v.as_object_mut().expect("node is an object");
                obj.insert("name".into(), json!(n.name()));
                obj.insert("is_thread".into(), json!(tree.is_thread(n.tid)));
                obj.insert("has_spawn_stack".into(), json!(n.spawn_sid.is_some()));
                v
            })
            .collect();
        Ok(ApiResponse::ok(json!({
            "session": id,
            "thread_count": reader.manifest.thread_count,
            "roots": tree.roots,
            "nodes": nodes,
        })))
    }

    fn roofline(&self, id: &str) -> Reply {
        let reader = self.reader(id)?;
        match reader.roofline().map_err(store_error)? {
            Some(r) => Ok(ApiResponse::ok(serde_json::to_value(r).expect("roofline serializes"))),
            None => Err(ApiResponse::not_found("NoRoofline", format!("session '{id}' has no roofline data"))),
        }
    }

    fn source(&self, id: &str, query: &Query) -> Reply {
        self.reader(id)?;
        let file = query.required("file")?;
        let root = self
            .cfg
            .source_root
            .as_ref()
            .ok_or_else(|| ApiResponse::not_found("SourceUnavailable", "no source root configured"))?;
        let path = root.resolve(file).map_err(|e| match e {
            ResolveError::EscapesRoot => ApiResponse::bad_request("PathEscapesRoot", format!("'{file}' is outside the source root")),
            ResolveError::NotFound | ResolveError::NotAFile => {
                ApiResponse::not_found("SourceNotFound", format!("'{file}' not found under the source root"))
            }
        })?;
        let text = fetch(&path).map_err(|e| match e {
            FetchError::TooLarge => ApiResponse::error(413, "SourceTooLarge", e.to_string()),
            FetchError::Io(e) => ApiResponse::not_found("SourceNotFound", e.to_string()),
        })?;
        Ok(ApiResponse::ok(json!({
            "file": file,
            "line_count": text.line_count,
            "lossy": text.lossy,
            "lines": text.lines,
        })))
    }

    fn thread(&self, id: &str, tid: &str, rest: &[&str], query: &Query) -> Reply {
        let reader = self.reader(id)?;
        let tid: Tid = tid
            .parse()
            .map_err(|_| ApiResponse::bad_request("BadRequest", format!("'{tid}' is not a thread id")))?;
        let tree = reader.tree().map_err(store_error)?;
        let node = tree
            .get(tid)
            .ok_or_else(|| ApiResponse::not_found("UnknownThread", format!("no thread {tid} in session '{id}'")))?;
        match rest {
            ["timeline"] => self.timeline(&reader, tid, query),
            ["flame"] => self.flame_view(id, &reader, tid, query),
            ["flame", "search"] => self.search(id, &reader, tid, query),
            ["lines"] => self.lines(id, &reader, tid, query),
            ["spawnstack"] => {
                let sid = node
                    .spawn_sid
                    .ok_or_else(|| ApiResponse::not_found("NoSpawnStack", format!("thread {tid} has no spawning stack")))?;
                let stacks = reader.stacks().map_err(store_error)?;
                let frames = stacks
                    .resolve(sid)
                    .ok_or_else(|| ApiResponse::error(500, "BundleUnreadable", format!("stack {sid} missing from bundle")))?;
                let frames: Vec<_> = frames.into_iter().map(frame_out).collect();
                Ok(ApiResponse::ok(json!({ "tid": tid, "sid": sid, "frames": frames })))
            }
            _ => Err(ApiResponse::not_found("NotFound", "no such thread endpoint")),
        }
    }

    fn timeline(&self, reader: &BundleReader, tid: Tid, query: &Query) -> Reply {
        let tl = reader.timeline(tid).map_err(store_error)?;
        let bucket_ns = match query.get("bucket_ns") {
            None => None,
            Some(s) => match s.parse::<u64>() {
                Ok(n) if n > 0 => Some(n),
                _ => return Err(ApiResponse::bad_request("BadRequest", "bucket_ns must be a positive integer")),
            },
        };
        let mut body = json!({
            "tid": tid,
            "spawn_t": tl.spawn_t,
            "exit_t": tl.exit_t,
            "on_ns": tl.on_ns(),
            "off_ns": tl.off_ns(),
            "segment_count": tl.segments.len(),
        });
        let obj = body.as_object_mut().expect("object");
        if tl.segments.len() <= self.cfg.exact_threshold {
            obj.insert("mode".into(), json!("exact"));
            obj.insert("segments".into(), json!(tl.segments));
        } else {
            let span = tl.exit_t.saturating_sub(tl.spawn_t).max(1);
            let bucket_ns = bucket_ns.unwrap_or_else(|| span.div_ceil(self.cfg.exact_threshold as u64).max(1));
            obj.insert("mode".into(), json!("buckets"));
            obj.insert("bucket_ns".into(), json!(bucket_ns));
            obj.insert("buckets".into(), json!(downsample(&tl.segments, bucket_ns)));
        }
        Ok(ApiResponse::ok(body))
    }

    /// The stored projection holding `metric`.
    fn projection(&self, reader: &BundleReader, query: &Query) -> Result<(String, &'static str), ApiResponse> {
        let metric = query.get("metric").unwrap_or(WALLTIME).to_string();
        if !reader.manifest.metrics.iter().any(|m| m.id == metric) {
            return Err(ApiResponse::not_found("UnknownMetric", format!("session has no metric '{metric}'")));
        }
        let projection = if metric == WALLTIME { HOTCOLD } else { "" };
        Ok((metric, projection))
    }

    fn graph(&self, id: &str, reader: &BundleReader, tid: Tid, query: &Query) -> Result<(String, Arc<FlameGraph>), ApiResponse> {
        let (metric, projection) = self.projection(reader, query)?;
        let name = if projection.is_empty() { metric.as_str() } else { projection };
        let g = self.flame(id, reader, tid, name)?;
        Ok((metric, g))
    }

    fn flame_view(&self, id: &str, reader: &BundleReader, tid: Tid, query: &Query) -> Reply {
        match query.get("mode").unwrap_or("aggregated") {
            "aggregated" => {
                let (metric, g) = self.graph(id, reader, tid, query)?;
                let hotcold = metric == WALLTIME;
                let nodes: Vec<Value> = g
                    .nodes
                    .iter()
                    .enumerate()
                    .map(|(idx, n)| {
                        let mut v = json!({
                            "id": idx,
                            "function": n.key.function,
                            "parent": n.parent,
                            "children": n.children,
                            "value": n.value(&metric),
                            "self_value": g.self_value(idx, &metric),
                        });
                        let obj = v.as_object_mut().expect("object");
                        if let Some(f) = &n.key.file {
                            obj.insert("file".into(), json!(f));
                        }
                        if let Some(m) = &n.key.module {
                            obj.insert("module".into(), json!(m));
                        }
                        if hotcold {
                            obj.insert("hot_ns".into(), json!(n.hot_ns));
                            obj.insert("cold_ns".into(), json!(n.cold_ns));
                        }
                        v
                    })
                    .collect();
                Ok(ApiResponse::ok(json!({
                    "tid": tid,
                    "metric": metric,
                    "mode": "aggregated",
                    "nodes": nodes,
                })))
            }
            "chronological" => {
                let (metric, _) = self.projection(reader, query)?;
                if metric != WALLTIME {
                    return Err(ApiResponse::bad_request(
                        "UnsupportedMode",
                        "chronological mode is only available for walltime",
                    ));
                }
                let chart = reader.chart(tid).map_err(store_error)?;
                let stacks = reader.stacks().map_err(store_error)?;
                let mut used: std::collections::BTreeMap<String, Vec<FrameOut>> = Default::default();
                for s in &chart.spans {
                    if let Some(frames) = stacks.resolve(s.sid) {
                        used.entry(s.sid.to_string())
                            .or_insert_with(|| frames.into_iter().rev().map(frame_out).collect());
                    }
                }
                Ok(ApiResponse::ok(json!({
                    "tid": tid,
                    "metric": metric,
                    "mode": "chronological",
                    "spans": chart.spans,
                    "stacks": used,
                })))
            }
            other => Err(ApiResponse::bad_request(
                "BadRequest",
                format!("mode must be 'aggregated' or 'chronological', not '{other}'"),
            )),
        }
    }

    fn search(&self, id: &str, reader: &BundleReader, tid: Tid, query: &Query) -> Reply {
        let q = query.required("q")?;
        let (metric, g) = self.graph(id, reader, tid, query)?;
        let result = g
            .search(q)
            .map_err(|e| ApiResponse::bad_request("InvalidPattern", e.to_string()))?;
        let fraction = result.channels.get(&metric).map(|c| c.fraction).unwrap_or(0.0);
        Ok(ApiResponse::ok(json!({
            "tid": tid,
            "metric": metric,
            "q": q,
            "fraction": fraction,
            "matches": result.matches,
            "channels": result.channels,
        })))
    }

    fn lines(&self, id: &str, reader: &BundleReader, tid: Tid, query: &Query) -> Reply {
        let raw = query.required("node")?;
        let path = parse_node_path(raw).map_err(|e| ApiResponse::error(422, "MalformedNodePath", e))?;
        let (metric, g) = self.graph(id, reader, tid, query)?;
        let idx = g
            .find_path(&path)
            .ok_or_else(|| ApiResponse::not_found("NoSuchNode", format!("no node '{raw}' in the {metric} flame graph")))?;
        let node = &g.nodes[idx];
        let lines: Vec<Value> = g
            .line_breakdown(idx, &metric)
            .map_err(|e| ApiResponse::not_found("UnknownMetric", e.to_string()))?
            .into_iter()
            .map(|(line, value)| json!({ "line": line, "value": value }))
            .collect();
        Ok(ApiResponse::ok(json!({
            "tid": tid,
            "metric": metric,
            "path": path,
            "function": node.key.function,
            "file": node.key.file,
            "value": node.value(&metric),
            "lines": lines,
        })))
    }
}

fn session_entry(name: &str, manifest: &tracelens_core::store::Manifest, dir: &Path) -> Value {
    let general: Vec<&str> = if dir.join(ROOFLINE_FILE).is_file() { vec!["roofline"] } else { vec![] };
    json!({ "id": name, "manifest": manifest, "general_analyses": general })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn node_paths() {
        assert_eq!(parse_node_path("").unwrap(), Vec::<String>::new());
        assert_eq!(parse_node_path("main/a%2Fb/c").unwrap(), ["main", "a/b", "c"]);
        assert_eq!(parse_node_path("std%3A%3Avec").unwrap(), ["std::vec"]);
        assert!(parse_node_path("main//a").is_err());
        assert!(parse_node_path("a/").is_err());
        assert!(parse_node_path("%zz").is_err());
        assert!(parse_node_path("%4").is_err());
        assert!(parse_node_path("%ff").is_err());
    }

    #[test]
    fn unknown_routes_are_404() {
        let dir = tempfile::tempdir().unwrap();
        let api = Api::new(ApiConfig::new(dir.path()));
        assert_eq!(api.get("/api/v1/nope").status, 404);
        assert_eq!(api.get("/elsewhere").status, 404);
        assert_eq!(api.get("/api/v1/sessions/x/tree").status, 404);
        assert_eq!(api.get("/api/v1/sessions/..%2f/tree").status, 404);
        let r = api.get("/api/v1/sessions");
        assert_eq!(r.status, 200);
        assert_eq!(r.body["sessions"], json!([]));
    }
}
