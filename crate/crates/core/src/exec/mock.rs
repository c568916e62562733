use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{CandidateSpec, ExecBackend, ExecError, ExecOutcome, ExecStatus, Scratch};
use crate::coverage::CoverageMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MockRun {
    Pass,
    Fail,
    Timeout,
}

/// Scripted behaviour for one test name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockBehavior {
    /// Whether a class containing this test as the candidate builds.
    pub build: bool,
    pub build_stderr: String,
    /// Outcome of each successive run; the last entry repeats. Empty means
    /// every run passes.
    pub runs: Vec<MockRun>,
    pub coverage: CoverageMap,
}

impl Default for MockBehavior {
    fn default() -> Self {
        Self {
            build: true,
            build_stderr: String::new(),
            runs: Vec::new(),
            coverage: CoverageMap::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockScript {
    /// Used for tests with no entry of their own.
    pub default: MockBehavior,
    pub tests: BTreeMap<String, MockBehavior>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Invocations {
    pub builds: usize,
    pub runs: usize,
    pub coverage: usize,
}

impl Invocations {
    pub fn total(&self) -> usize {
        self.builds + self.runs + self.coverage
    }
}

/// In-memory backend driven by a [`MockScript`]; behaviour is looked up by
/// the candidate test's name.
#[derive(Debug, Default)]
pub struct MockBackend {
    script: MockScript,
    calls: Mutex<BTreeMap<String, Invocations>>,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        Self {
            script,
            calls: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ExecError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExecError::Script(format!("{}: {e}", path.display())))?;
        let script = serde_json::from_str(&text)
            .map_err(|e| ExecError::Script(format!("{}: {e}", path.display())))?;
        Ok(Self::new(script))
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }

    fn behavior(&self, test: &str) -> &MockBehavior {
        self.script.tests.get(test).unwrap_or(&self.script.default)
    }

    fn count(&self, test: &str, bump: impl FnOnce(&mut Invocations)) {
        let mut calls = self.calls.lock().unwrap_or_else(|e| e.into_inner());
        bump(calls.entry(test.to_string()).or_default());
    }

    pub fn invocations(&self, test: &str) -> Invocations {
        let calls = self.calls.lock().unwrap_or_else(|e| e.into_inner());
        calls.get(test).copied().unwrap_or_default()
    }

    pub fn total_invocations(&self) -> usize {
        let calls = self.calls.lock().unwrap_or_else(|e| e.into_inner());
        calls.values().map(Invocations::total).sum()
    }
}

impl ExecBackend for MockBackend {
    fn parallel_safe(&self) -> bool {
        true
    }

    fn prepare(&self, spec: &CandidateSpec) -> Result<Scratch, ExecError> {
        Ok(Scratch::from_spec(spec, None))
    }

    fn build(&self, scratch: &Scratch) -> Result<ExecOutcome, ExecError> {
        let Some(test) = scratch.new_test.as_deref() else {
            return Ok(ExecOutcome::ok());
        };
        self.count(test, |c| c.builds += 1);
        let behavior = self.behavior(test);
        if behavior.build {
            Ok(ExecOutcome::ok())
        } else {
            let mut outcome = ExecOutcome::with_status(ExecStatus::BuildFailed);
            outcome.stderr_excerpt = behavior.build_stderr.clone();
            Ok(outcome)
        }
    }

    fn run_test(&self, scratch: &Scratch, test_name: &str) -> Result<ExecOutcome, ExecError> {
        self.count(test_name, |c| c.runs += 1);
        let index = scratch.next_run() as usize;
        let runs = &self.behavior(test_name).runs;
        let run = runs
            .get(index)
            .or(runs.last())
            .copied()
            .unwrap_or(MockRun::Pass);
        Ok(ExecOutcome::with_status(match run {
            MockRun::Pass => ExecStatus::Ok,
            MockRun::Fail => ExecStatus::TestFailed,
            MockRun::Timeout => ExecStatus::Timeout,
        }))
    }

    fn measure_coverage(
        &self,
        _scratch: &Scratch,
        test_name: &str,
    ) -> Result<CoverageMap, ExecError> {
        self.count(test_name, |c| c.coverage += 1);
        Ok(self.behavior(test_name).coverage.clone())
    }
}
