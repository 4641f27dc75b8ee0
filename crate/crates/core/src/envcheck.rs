//! Pre-flight checks for kernel settings that silently break profiled
//! stacks.

use std::collections::HashMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_STACK_KNOB: &str = "/proc/sys/kernel/perf_event_max_stack";
pub const NUMA_BALANCING_KNOB: &str = "/proc/sys/kernel/numa_balancing";

/// Default minimum for `kernel.perf_event_max_stack`.
pub const DEFAULT_REQUIRED_DEPTH: u64 = 1024;

/// Source of kernel knob values, keyed by their `/proc` path.
pub trait KnobReader {
    /// Returns the knob's text content, or `None` when it cannot be read.
    fn read(&self, path: &str) -> Option<String>;
}

/// Reads knobs from the proc filesystem mounted under `root` (normally `/`).
#[derive(Debug, Clone)]
pub struct ProcFs {
    root: PathBuf,
}

impl ProcFs {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ProcFs { root: root.into() }
    }
}

impl Default for ProcFs {
    fn default() -> Self {
        ProcFs::new("/")
    }
}

impl KnobReader for ProcFs {
    fn read(&self, path: &str) -> Option<String> {
        std::fs::read_to_string(self.root.join(path.trim_start_matches('/'))).ok()
    }
}

/// In-memory knob values, for tests and dry runs.
#[derive(Debug, Clone, Default)]
pub struct FixtureKnobs(pub HashMap<String, String>);

impl FixtureKnobs {
    pub fn with(mut self, path: &str, value: &str) -> Self {
        self.0.insert(path.to_string(), value.to_string());
        self
    }
}

impl KnobReader for FixtureKnobs {
    fn read(&self, path: &str) -> Option<String> {
        self.0.get(path).cloned()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CheckStatus {
    Pass,
    Fail,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResult {
    pub check_id: String,
    pub status: CheckStatus,
    pub observed: String,
    pub expected: String,
    pub remedy: String,
}

/// One pre-flight check. Implementations must be pure functions of the
/// reader.
pub trait EnvCheck: Send + Sync {
    fn id(&self) -> &str;
    fn run(&self, reader: &dyn KnobReader) -> CheckResult;
}

fn read_int(reader: &dyn KnobReader, path: &str) -> Result<i64, Option<String>> {
    let raw = reader.read(path).ok_or(None)?;
    let trimmed = raw.trim();
    trimmed.parse::<i64>().map_err(|_| Some(trimmed.to_string()))
}

fn unknown(check_id: &str, observed: Option<String>, expected: String, path: &str) -> CheckResult {
    CheckResult {
        check_id: check_id.to_string(),
        status: CheckStatus::Unknown,
        observed: observed.unwrap_or_default(),
        expected,
        remedy: format!("could not read an integer from {path}; verify the setting manually"),
    }
}

#[derive(Debug, Clone)]
pub struct MaxStackCheck {
    pub required_depth: u64,
}

impl EnvCheck for MaxStackCheck {
    fn id(&self) -> &str {
        "perf_event_max_stack"
    }

    fn run(&self, reader: &dyn KnobReader) -> CheckResult {
        check_max_stack(reader, self.required_depth)
    }
}

pub fn check_max_stack(reader: &dyn KnobReader, required_depth: u64) -> CheckResult {
    let id = "perf_event_max_stack";
    let expected = format!(">= {required_depth}");
    match read_int(reader, MAX_STACK_KNOB) {
        Err(observed) => unknown(id, observed, expected, MAX_STACK_KNOB),
        Ok(v) => {
            let pass = v >= 0 && v as u64 >= required_depth;
            CheckResult {
                check_id: id.to_string(),
                status: if pass { CheckStatus::Pass } else { CheckStatus::Fail },
                observed: v.to_string(),
                expected,
                remedy: if pass {
                    String::new()
                } else {
                    format!(
                        "stacks deeper than {v} frames are truncated; raise the limit with \
                         `sysctl -w kernel.perf_event_max_stack={required_depth}`"
                    )
                },
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct NumaBalancingCheck;

impl EnvCheck for NumaBalancingCheck {
    fn id(&self) -> &str {
        "numa_balancing"
    }

    fn run(&self, reader: &dyn KnobReader) -> CheckResult {
        check_numa_balancing(reader)
    }
}

pub fn check_numa_balancing(reader: &dyn KnobReader) -> CheckResult {
    let id = "numa_balancing";
    let expected = "0".to_string();
    match read_int(reader, NUMA_BALANCING_KNOB) {
        Err(observed) => unknown(id, observed, expected, NUMA_BALANCING_KNOB),
        Ok(v) => {
            let pass = v == 0;
            CheckResult {
                check_id: id.to_string(),
                status: if pass { CheckStatus::Pass } else { CheckStatus::Fail },
                observed: v.to_string(),
                expected,
                remedy: if pass {
                    String::new()
                } else {
                    "NUMA memory balancing is active and breaks profiled stacks; disable it \
                     with `sysctl -w kernel.numa_balancing=0`"
                        .to_string()
                },
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    /// Refuse to profile when any check fails.
    #[default]
    Abort,
    /// Report failures and carry on.
    Warn,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckReport {
    pub required_depth: u64,
    pub results: Vec<CheckResult>,
}

impl CheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.results.iter().filter(|r| r.status == CheckStatus::Fail)
    }

    pub fn has_failures(&self) -> bool {
        self.failures().next().is_some()
    }

    pub fn has_unknown(&self) -> bool {
        self.results.iter().any(|r| r.status == CheckStatus::Unknown)
    }

    /// Exit code of the `check` command: 1 on any failure, 2 on any unknown
    /// when `strict_unknown`, else 0.
    pub fn exit_code(&self, strict_unknown: bool) -> i32 {
        if self.has_failures() {
            1
        } else if strict_unknown && self.has_unknown() {
            2
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("profiling aborted, failed environment checks: {}", failed_ids(failures))]
pub struct AbortProfiling {
    pub failures: Vec<CheckResult>,
    pub report: CheckReport,
}

fn failed_ids(failures: &[CheckResult]) -> String {
    failures.iter().map(|f| f.check_id.as_str()).collect::<Vec<_>>().join(", ")
}

/// The set of checks run before profiling.
pub struct CheckRegistry {
    required_depth: u64,
    checks: Vec<Box<dyn EnvCheck>>,
}

impl CheckRegistry {
    /// The built-in checks.
    pub fn standard(required_depth: u64) -> Self {
        CheckRegistry {
            required_depth,
            checks: vec![
                Box::new(MaxStackCheck { required_depth }),
                Box::new(NumaBalancingCheck),
            ],
        }
    }

    pub fn register(&mut self, check: Box<dyn EnvCheck>) {
        self.checks.push(check);
    }

    pub fn report(&self, reader: &dyn KnobReader) -> CheckReport {
        CheckReport {
            required_depth: self.required_depth,
            results: self.checks.iter().map(|c| c.run(reader)).collect(),
        }
    }

    /// Runs every check. Under [`Policy::Abort`] any failure refuses
    /// profiling; unknown results never do.
    pub fn run_all(&self, reader: &dyn KnobReader, policy: Policy) -> Result<CheckReport, AbortProfiling> {
        let report = self.report(reader);
        if policy == Policy::Abort && report.has_failures() {
            return Err(AbortProfiling {
                failures: report.failures().cloned().collect(),
                report,
            });
        }
        Ok(report)
    }
}

impl Default for CheckRegistry {
    fn default() -> Self {
        CheckRegistry::standard(DEFAULT_REQUIRED_DEPTH)
    }
}

/// Runs the standard checks.
pub fn run_all(reader: &dyn KnobReader, policy: Policy) -> Result<CheckReport, AbortProfiling> {
    CheckRegistry::default().run_all(reader, policy)
}

/// Renders a report for terminals.
pub fn render_text(report: &CheckReport) -> String {
    let mut out = String::new();
    for r in &report.results {
        let status = match r.status {
            CheckStatus::Pass => "PASS",
            CheckStatus::Fail => "FAIL",
            CheckStatus::Unknown => "UNKNOWN",
        };
        let observed = if r.observed.is_empty() { "-" } else { r.observed.as_str() };
        out.push_str(&format!(
            "{status:<8} {:<22} observed {observed}, expected {}\n",
            r.check_id, r.expected
        ));
        if !r.remedy.is_empty() {
            out.push_str(&format!("         {}\n", r.remedy));
        }
    }
    out
}
