//! Build, run and coverage machinery behind [`ExecBackend`].
//!
//! Every candidate gets a [`Scratch`] workspace; backends never write under
//! the project root.

mod command;
pub mod lcov;
mod mock;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU32, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coverage::{CoverageMap, DEFAULT_INTEGRATION_THRESHOLD};
use crate::llm::LlmSettings;

pub use command::CommandBackend;
pub use mock::{MockBackend, MockBehavior, MockRun, MockScript};

pub const DEFAULT_FLAKY_RUNS: u32 = 5;
const EXCERPT_LIMIT: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Command,
    Mock,
}

/// Backend section of the project manifest. Per-target commands override
/// the command templates here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub build_command: String,
    /// Must contain `{test_name}`.
    pub test_command: String,
    /// Artifact path relative to the workspace; may contain `{test_name}`.
    pub coverage_artifact: String,
    pub flaky_runs: u32,
    /// Directory for scratch workspaces; the system temp dir when unset.
    pub workdir: Option<PathBuf>,
    pub timeout_s: u64,
    pub mock_script: Option<PathBuf>,
    /// Off-target share at which a delta is reported as integration-like.
    pub integration_threshold: f64,
    pub llm: LlmSettings,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Command,
            build_command: String::new(),
            test_command: String::new(),
            coverage_artifact: String::new(),
            flaky_runs: DEFAULT_FLAKY_RUNS,
            workdir: None,
            timeout_s: 300,
            mock_script: None,
            integration_threshold: DEFAULT_INTEGRATION_THRESHOLD,
            llm: LlmSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecStatus {
    Ok,
    BuildFailed,
    TestFailed,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecOutcome {
    pub status: ExecStatus,
    pub stdout_excerpt: String,
    pub stderr_excerpt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<CoverageMap>,
}

impl ExecOutcome {
    pub fn ok() -> Self {
        Self::with_status(ExecStatus::Ok)
    }

    pub fn with_status(status: ExecStatus) -> Self {
        Self {
            status,
            stdout_excerpt: String::new(),
            stderr_excerpt: String::new(),
            coverage: None,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == ExecStatus::Ok
    }
}

/// Infrastructure failures, as opposed to a candidate failing a filter.
#[derive(Debug, Error)]
pub enum ExecError {
    #[error("failed to launch `{command}`: {message}")]
    Launch { command: String, message: String },
    #[error("scratch workspace: {0}")]
    Scratch(String),
    #[error("coverage artifact {0} missing")]
    ArtifactMissing(PathBuf),
    #[error("coverage artifact {path} malformed at line {line}: {message}")]
    ArtifactMalformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("instrumented run of `{test}` did not pass ({status:?})")]
    CoverageRunFailed { test: String, status: ExecStatus },
    #[error("mock script: {0}")]
    Script(String),
}

/// What a backend needs to stage one candidate class.
#[derive(Debug, Clone)]
pub struct CandidateSpec<'a> {
    /// Unique per candidate; names the scratch workspace.
    pub candidate_id: &'a str,
    pub target_id: &'a str,
    /// Root-relative path of the test class being replaced.
    pub test_class: &'a str,
    pub class_text: &'a str,
    /// The test under evaluation, or `None` when staging an unmodified class
    /// to measure the baseline.
    pub new_test: Option<&'a str>,
    pub build_command: &'a str,
    pub test_command: &'a str,
    pub coverage_artifact: &'a str,
}

/// A staged candidate. Dropping it removes the workspace.
#[derive(Debug)]
pub struct Scratch {
    pub candidate_id: String,
    pub target_id: String,
    pub test_class: String,
    pub new_test: Option<String>,
    pub build_command: String,
    pub test_command: String,
    pub coverage_artifact: String,
    dir: Option<tempfile::TempDir>,
    runs: AtomicU32,
}

impl Scratch {
    fn from_spec(spec: &CandidateSpec, dir: Option<tempfile::TempDir>) -> Self {
        Self {
            candidate_id: spec.candidate_id.to_string(),
            target_id: spec.target_id.to_string(),
            test_class: spec.test_class.to_string(),
            new_test: spec.new_test.map(str::to_string),
            build_command: spec.build_command.to_string(),
            test_command: spec.test_command.to_string(),
            coverage_artifact: spec.coverage_artifact.to_string(),
            dir,
            runs: AtomicU32::new(0),
        }
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_ref().map(|d| d.path())
    }

    /// Index of the next run on this workspace, starting at 0.
    fn next_run(&self) -> u32 {
        self.runs.fetch_add(1, Ordering::SeqCst)
    }
}

pub trait ExecBackend: Send + Sync {
    /// Whether build/run calls for different candidates may overlap.
    fn parallel_safe(&self) -> bool;

    fn prepare(&self, spec: &CandidateSpec) -> Result<Scratch, ExecError>;

    fn build(&self, scratch: &Scratch) -> Result<ExecOutcome, ExecError>;

    fn run_test(&self, scratch: &Scratch, test_name: &str) -> Result<ExecOutcome, ExecError>;

    /// Runs only `test_name` with instrumentation and returns what it covered.
    fn measure_coverage(
        &self,
        scratch: &Scratch,
        test_name: &str,
    ) -> Result<CoverageMap, ExecError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reliability {
    /// Passed every run.
    Reliable,
    FailedFirstRun,
    /// Passed at least once, then failed.
    Flaky,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepeatedRun {
    pub outcomes: Vec<ExecOutcome>,
    /// Runs not executed because an earlier one failed.
    pub skipped: u32,
}

impl RepeatedRun {
    pub fn classify(&self) -> Reliability {
        match self.outcomes.iter().position(|o| !o.is_ok()) {
            None => Reliability::Reliable,
            Some(0) => Reliability::FailedFirstRun,
            Some(_) => Reliability::Flaky,
        }
    }
}

/// Runs `test_name` up to `runs` times, stopping at the first failure.
pub fn run_repeated<B: ExecBackend + ?Sized>(
    backend: &B,
    scratch: &Scratch,
    test_name: &str,
    runs: u32,
) -> Result<RepeatedRun, ExecError> {
    let runs = runs.max(1);
    let mut outcomes = Vec::with_capacity(runs as usize);
    for _ in 0..runs {
        let outcome = backend.run_test(scratch, test_name)?;
        let failed = !outcome.is_ok();
        outcomes.push(outcome);
        if failed {
            break;
        }
    }
    let skipped = runs - outcomes.len() as u32;
    Ok(RepeatedRun { outcomes, skipped })
}

fn excerpt(bytes: &[u8]) -> String {
    let text = String::from_utf8_lossy(bytes);
    if text.len() <= EXCERPT_LIMIT {
        return text.into_owned();
    }
    let mut start = text.len() - EXCERPT_LIMIT;
    while !text.is_char_boundary(start) {
        start += 1;
    }
    format!("…{}", &text[start..])
}
