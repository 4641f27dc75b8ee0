//! The `tracelens` command line.

use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Arc};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use tracelens_core::collector::{
    run_profile, AdapterChoice, CollectorAdapter, CollectorError, ProfileOutcome, ProfileRequest, ReplayAdapter, Speed,
    TraceScript,
};
use tracelens_core::envcheck::{render_text, CheckRegistry, ProcFs, DEFAULT_REQUIRED_DEPTH};
use tracelens_core::ingest::{IngestConfig, IngestError, IngestServer, SessionReport, DEFAULT_REORDER_CAPACITY};
use tracelens_core::sourcemap::SourceRoot;
use tracelens_core::store::{parse_roofline, OutputRoot, RooflineData};

use crate::api::{Api, ApiConfig, DEFAULT_EXACT_THRESHOLD};
use crate::http;

pub const DEFAULT_LISTEN: &str = "127.0.0.1:5971";
pub const LISTEN_ENV: &str = "TRACELENS_LISTEN";
/// Exit code for command-line usage errors.
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, Parser)]
#[command(name = "tracelens", version, about = "Profile programs and explore the results")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Profile a command and write a session bundle.
    Profile(ProfileArgs),
    /// Run the ingest server that turns collector streams into bundles.
    Serve(ServeArgs),
    /// Serve the analysis API and UI over a results directory.
    Analyse(AnalyseArgs),
    /// Check kernel settings that affect stack capture.
    Check(CheckArgs),
    /// Stream a TraceScript as a session, without running a command.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
struct IngestArgs {
    /// Skip and count invalid records instead of aborting the session.
    #[arg(long)]
    lenient: bool,
    /// Drop off-CPU intervals shorter than this many nanoseconds.
    #[arg(long, default_value_t = 0)]
    min_off_ns: u64,
    /// Merge same-stack flame chart spans separated by at most this gap.
    #[arg(long, default_value_t = 0)]
    merge_slack_ns: u64,
    /// Events held back to repair out-of-order delivery.
    #[arg(long, default_value_t = DEFAULT_REORDER_CAPACITY)]
    reorder_capacity: usize,
    /// Roofline ceilings (JSON) to store alongside each session.
    #[arg(long)]
    roofline: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ProfileArgs {
    /// Event source: `replay` (needs --script) or `live`.
    #[arg(long)]
    adapter: Option<String>,
    /// TraceScript to stream with the replay adapter.
    #[arg(long)]
    script: Option<PathBuf>,
    /// Pace replayed events by their timestamps.
    #[arg(long)]
    realtime: bool,
    /// Send the session to a server on another machine instead of an
    /// embedded one.
    #[arg(long, value_name = "HOST:PORT")]
    server: Option<String>,
    /// Where the embedded server writes bundles.
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Profile even if an environment check fails.
    #[arg(long)]
    force: bool,
    /// Minimum acceptable perf_event_max_stack.
    #[arg(long, default_value_t = DEFAULT_REQUIRED_DEPTH)]
    max_stack_depth: u64,
    /// Root under which /proc is read.
    #[arg(long, default_value = "/")]
    proc_root: PathBuf,
    /// Sampling frequency of the live adapter, in Hz.
    #[arg(long, default_value_t = 999)]
    frequency: u32,
    /// Extra perf events recorded as count metrics by the live adapter.
    #[arg(long = "count-event")]
    count_events: Vec<String>,
    #[command(flatten)]
    ingest: IngestArgs,
    /// The command to profile, after `--` (or `----`).
    #[arg(last = true)]
    command: Vec<String>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, env = LISTEN_ENV, default_value = DEFAULT_LISTEN)]
    listen: String,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    #[command(flatten)]
    ingest: IngestArgs,
}

#[derive(Debug, Args)]
struct AnalyseArgs {
    /// A results directory or a single session bundle.
    path: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 5972)]
    port: u16,
    /// Enables the code preview for files under this directory.
    #[arg(long)]
    source_root: Option<PathBuf>,
    /// Prefix removed from recorded file names before looking them up.
    #[arg(long)]
    path_strip: Option<String>,
    /// Accept absolute recorded paths that point into the source root.
    #[arg(long)]
    allow_absolute_paths: bool,
    /// Timelines with more segments than this are downsampled.
    #[arg(long, default_value_t = DEFAULT_EXACT_THRESHOLD)]
    exact_threshold: usize,
    /// Directory of a built web UI to serve at `/`.
    #[arg(long)]
    ui_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CheckArgs {
    #[arg(long, default_value = "/")]
    proc_root: PathBuf,
    #[arg(long, default_value_t = DEFAULT_REQUIRED_DEPTH)]
    max_stack_depth: u64,
    /// Exit with 2 when a knob cannot be read.
    #[arg(long)]
    strict_unknown: bool,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    script: PathBuf,
    #[arg(long)]
    realtime: bool,
    #[arg(long, value_name = "HOST:PORT")]
    server: Option<String>,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    #[command(flatten)]
    ingest: IngestArgs,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Collector(#[from] CollectorError),
    #[error("cannot bind {addr}: {source}")]
    BindFailure { addr: String, source: std::io::Error },
    #[error("no such path: {}", .0.display())]
    NoSuchPath(PathBuf),
    #[error("session failed: {0}")]
    Session(#[from] IngestError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("invalid roofline file {}: {reason}", path.display())]
    Roofline { path: PathBuf, reason: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            _ => 1,
        }
    }
}

/// Rewrites the first `----` into `--`, the separator before the
/// profiled command.
fn normalize_args(args: impl IntoIterator<Item = OsString>) -> Vec<OsString> {
    let mut seen = false;
    args.into_iter()
        .map(|a| {
            if !seen && (a == "----" || a == "--") {
                seen = true;
                OsString::from("--")
            } else {
                a
            }
        })
        .collect()
}

/// Runs the CLI and returns the process exit code.
pub fn run(args: impl IntoIterator<Item = OsString>) -> i32 {
    let cli = match Cli::try_parse_from(normalize_args(args)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
        }
    };
    let result = match cli.command {
        Command::Profile(a) => profile(a),
        Command::Serve(a) => serve(a),
        Command::Analyse(a) => analyse(a),
        Command::Check(a) => Ok(check(a)),
        Command::Replay(a) => replay(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("tracelens: {e}");
            if let CliError::Collector(CollectorError::EnvCheckFailed(_)) = e {
                eprintln!("tracelens: run `tracelens check` for details, or pass --force to profile anyway");
            }
            e.exit_code()
        }
    }
}

fn ingest_config(a: &IngestArgs) -> Result<IngestConfig, CliError> {
    Ok(IngestConfig {
        strict: !a.lenient,
        reorder_capacity: a.reorder_capacity,
        min_off_ns: a.min_off_ns,
        merge_slack_ns: a.merge_slack_ns,
        roofline: a.roofline.as_deref().map(read_roofline).transpose()?,
        ..IngestConfig::default()
    })
}

fn read_roofline(path: &Path) -> Result<RooflineData, CliError> {
    let bytes = std::fs::read(path)?;
    parse_roofline(&bytes).map_err(|e| CliError::Roofline {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn load_script(path: &Path) -> Result<TraceScript, CliError> {
    Ok(TraceScript::from_file(path).map_err(CollectorError::from)?)
}

/// An ingest server on an ephemeral loopback port, for the duration of
/// one profiling run.
struct Embedded {
    addr: SocketAddr,
    handle: tracelens_core::ingest::ServerHandle,
    reports: mpsc::Receiver<SessionReport>,
    thread: std::thread::JoinHandle<std::io::Result<()>>,
}

impl Embedded {
    fn start(out: &Path, cfg: IngestConfig) -> Result<Self, CliError> {
        let root = Arc::new(OutputRoot::new(out)?);
        let server = IngestServer::bind("127.0.0.1:0", cfg, root).map_err(|source| CliError::BindFailure {
            addr: "127.0.0.1:0".into(),
            source,
        })?;
        let (tx, reports) = mpsc::channel();
        let addr = server.local_addr();
        let handle = server.handle();
        let thread = std::thread::spawn(move || {
            server.run(move |r| {
                let _ = tx.send(r);
            })
        });
        Ok(Embedded {
            addr,
            handle,
            reports,
            thread,
        })
    }

    /// Waits for the session (if the run got as far as connecting) and
    /// stops the server.
    fn finish(self, connected: bool) -> Option<SessionReport> {
        let report = if connected {
            self.reports.recv_timeout(Duration::from_secs(600)).ok()
        } else {
            None
        };
        self.handle.shutdown();
        let _ = self.thread.join();
        report.or_else(|| self.reports.try_recv().ok())
    }
}

fn report_session(report: Option<SessionReport>) -> Result<(), CliError> {
    match report.map(|r| r.result) {
        Some(Ok(outcome)) => {
            println!("session {} written to {}", outcome.session_id, outcome.bundle.display());
            Ok(())
        }
        Some(Err(e)) => Err(e.into()),
        None => Err(CliError::Io(std::io::Error::other("the session never reached the server"))),
    }
}

fn run_session(
    server: Option<String>,
    out: &Path,
    mut cfg: IngestConfig,
    checks: &CheckRegistry,
    knobs: &ProcFs,
    force: bool,
    command: Vec<String>,
    adapter: Box<dyn CollectorAdapter>,
) -> Result<ProfileOutcome, CliError> {
    let request = |server: String| ProfileRequest {
        command,
        server,
        adapter,
        knobs,
        checks,
        force,
    };
    match server {
        Some(addr) => {
            let outcome = run_profile(request(addr.clone()))?;
            println!("session {} sent to {addr}", outcome.session_id);
            Ok(outcome)
        }
        None => {
            cfg.check_report = Some(checks.report(knobs));
            let embedded = Embedded::start(out, cfg)?;
            let result = run_profile(request(embedded.addr.to_string()));
            let connected = !matches!(
                result,
                Err(CollectorError::EnvCheckFailed(_) | CollectorError::ServerUnreachable { .. })
            );
            let report = embedded.finish(connected);
            let outcome = result?;
            report_session(report)?;
            Ok(outcome)
        }
    }
}

fn profile(a: ProfileArgs) -> Result<i32, CliError> {
    let choice = match a.adapter.as_deref() {
        None if a.script.is_some() => AdapterChoice::Replay,
        None => AdapterChoice::Live,
        Some(s) => AdapterChoice::parse(s).ok_or_else(|| CliError::Usage(format!("unknown adapter '{s}' (expected replay or live)")))?,
    };
    if a.command.is_empty() && a.script.is_none() {
        return Err(CliError::Usage("nothing to profile: give a command after `--` or a --script".into()));
    }
    if !choice.is_available() {
        return Err(CollectorError::AdapterUnavailable(format!("{choice:?}").to_lowercase()).into());
    }
    let speed = if a.realtime { Speed::RealTime } else { Speed::AsFastAsPossible };
    let adapter: Box<dyn CollectorAdapter> = match choice {
        AdapterChoice::Replay => {
            let script = a
                .script
                .as_deref()
                .ok_or_else(|| CliError::Usage("the replay adapter needs --script".into()))?;
            Box::new(ReplayAdapter {
                script: load_script(script)?,
                speed,
            })
        }
        AdapterChoice::Live => live_adapter(&a)?,
    };
    // A replayed script does not depend on the kernel's stack capture, so
    // failed checks are reported but do not stop it.
    let force = a.force || choice == AdapterChoice::Replay;
    let checks = CheckRegistry::standard(a.max_stack_depth);
    let knobs = ProcFs::new(&a.proc_root);
    let cfg = ingest_config(&a.ingest)?;
    let outcome = run_session(a.server.clone(), &a.out, cfg, &checks, &knobs, force, a.command.clone(), adapter)?;
    for failed in outcome.checks.failures() {
        eprintln!("tracelens: warning: environment check {} failed: {}", failed.check_id, failed.remedy);
    }
    match outcome.exit_code {
        Some(0) | None => Ok(0),
        Some(code) => {
            eprintln!("tracelens: profiled command exited with status {code}");
            Ok(code)
        }
    }
}

#[cfg(feature = "live")]
fn live_adapter(a: &ProfileArgs) -> Result<Box<dyn CollectorAdapter>, CliError> {
    use tracelens_core::collector::live::LiveAdapter;
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .unwrap_or_default();
    let hostname = std::fs::read_to_string("/proc/sys/kernel/hostname")
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|_| "localhost".into());
    Ok(Box::new(LiveAdapter {
        perf: "perf".into(),
        session_id: format!("session-{}", now.as_secs()),
        hostname,
        wall_start: now.as_nanos() as u64,
        count_events: a.count_events.clone(),
        frequency: a.frequency,
    }))
}

#[cfg(not(feature = "live"))]
fn live_adapter(_: &ProfileArgs) -> Result<Box<dyn CollectorAdapter>, CliError> {
    Err(CollectorError::AdapterUnavailable("live".into()).into())
}

fn replay(a: ReplayArgs) -> Result<i32, CliError> {
    let script = load_script(&a.script)?;
    let speed = if a.realtime { Speed::RealTime } else { Speed::AsFastAsPossible };
    let cfg = ingest_config(&a.ingest)?;
    let checks = CheckRegistry::standard(DEFAULT_REQUIRED_DEPTH);
    let knobs = ProcFs::default();
    run_session(
        a.server.clone(),
        &a.out,
        cfg,
        &checks,
        &knobs,
        true,
        Vec::new(),
        Box::new(ReplayAdapter { script, speed }),
    )?;
    Ok(0)
}

fn serve(a: ServeArgs) -> Result<i32, CliError> {
    let cfg = ingest_config(&a.ingest)?;
    let root = Arc::new(OutputRoot::new(&a.out)?);
    let server = IngestServer::bind(a.listen.as_str(), cfg, root).map_err(|source| CliError::BindFailure {
        addr: a.listen.clone(),
        source,
    })?;
    println!("listening on {}", server.local_addr());
    println!("writing sessions to {}", a.out.display());
    let handle = server.handle();
    std::thread::spawn(move || {
        if let Ok(rt) = tokio::runtime::Builder::new_current_thread().enable_all().build() {
            rt.block_on(http::interrupted());
            eprintln!("tracelens: interrupted, finalizing open sessions");
            handle.shutdown();
        }
    });
    server.run(|report| match report.result {
        Ok(o) => println!("session {} written to {}", o.session_id, o.bundle.display()),
        Err(e) => eprintln!("tracelens: session from {:?}: {e}", report.peer),
    })?;
    Ok(0)
}

fn analyse(a: AnalyseArgs) -> Result<i32, CliError> {
    if !a.path.exists() {
        return Err(CliError::NoSuchPath(a.path));
    }
    let source_root = match &a.source_root {
        None => None,
        Some(p) => Some(
            SourceRoot::new(p)
                .map_err(|_| CliError::NoSuchPath(p.clone()))?
                .allow_absolute(a.allow_absolute_paths)
                .strip_prefix(a.path_strip.clone()),
        ),
    };
    let ui_dir = match &a.ui_dir {
        None => None,
        Some(p) => Some(SourceRoot::new(p).map_err(|_| CliError::NoSuchPath(p.clone()))?),
    };
    let api = Arc::new(Api::new(ApiConfig {
        results: a.path.clone(),
        source_root,
        exact_threshold: a.exact_threshold,
    }));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let addr = format!("{}:{}", a.host, a.port);
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|source| CliError::BindFailure { addr, source })?;
        let local = listener.local_addr()?;
        println!("http://{local}/");
        http::serve(listener, http::router(api, ui_dir), http::interrupted()).await?;
        Ok(0)
    })
}

fn check(a: CheckArgs) -> i32 {
    let report = CheckRegistry::standard(a.max_stack_depth).report(&ProcFs::new(&a.proc_root));
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        print!("{}", render_text(&report));
    }
    report.exit_code(a.strict_unknown)
}
