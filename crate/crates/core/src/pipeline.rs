//! The filtration cascade: generation, extraction, dedup, build, pass/flaky
//! and coverage, under a fixed (evaluation) or accumulating (deployment)
//! baseline, plus ensemble accounting and one optional re-prompt round.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{BuildTarget, MethodSpan, ProjectManifest};
use crate::coverage::{self, same_file, CoverageDelta, CoverageMap, LineSet};
use crate::dialect::{
    extract_candidates, parse_test_class, reassemble, DialectConfig, DialectError, TestCase,
    TestClassSource,
};
use crate::exec::{run_repeated, CandidateSpec, ExecBackend, ExecError, ExecStatus, Reliability};
use crate::llm::{prompt_sha256, LlmConfig, LlmProvider};
use crate::promptkit::{PromptError, PromptTemplate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    NoParse,
    Duplicate,
    BuildFailed,
    FailedFirstRun,
    Flaky,
    NoCoverageGain,
    Accepted,
    /// Infrastructure failure; outside the funnel.
    InfraError,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::NoParse,
        Stage::Duplicate,
        Stage::BuildFailed,
        Stage::FailedFirstRun,
        Stage::Flaky,
        Stage::NoCoverageGain,
        Stage::Accepted,
        Stage::InfraError,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::NoParse => "no_parse",
            Stage::Duplicate => "duplicate",
            Stage::BuildFailed => "build_failed",
            Stage::FailedFirstRun => "failed_first_run",
            Stage::Flaky => "flaky",
            Stage::NoCoverageGain => "no_coverage_gain",
            Stage::Accepted => "accepted",
            Stage::InfraError => "infra_error",
        }
    }

    pub fn parse(text: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.as_str() == text)
    }

    pub fn is_funnel(self) -> bool {
        self != Stage::InfraError
    }

    /// The candidate was built successfully.
    pub fn built(self) -> bool {
        matches!(
            self,
            Stage::FailedFirstRun | Stage::Flaky | Stage::NoCoverageGain | Stage::Accepted
        )
    }

    /// Passed its first run.
    pub fn passed(self) -> bool {
        matches!(self, Stage::Flaky | Stage::NoCoverageGain | Stage::Accepted)
    }

    /// Passed every run.
    pub fn non_flaky(self) -> bool {
        matches!(self, Stage::NoCoverageGain | Stage::Accepted)
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Evaluation,
    Deployment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Origin {
    pub model_id: String,
    pub prompt_name: String,
    pub temperature: f64,
    pub sample_index: u32,
    pub request_id: String,
    /// Produced by a follow-up prompt rather than the template itself.
    pub reprompt: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HintFlags {
    pub missing_assertion: bool,
    pub todo_marker: bool,
    pub integration_like: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub stage_reached: Stage,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateTest {
    pub candidate_id: String,
    pub target_id: String,
    /// Root-relative path of the test class the candidate extends.
    pub test_class_path: String,
    /// Absent when nothing could be parsed from the response.
    pub test: Option<TestCase>,
    pub origin: Origin,
    pub verdict: FilterVerdict,
    pub delta: Option<CoverageDelta>,
    pub hint_flags: HintFlags,
    /// Runs not executed after an early failure.
    pub skipped_runs: u32,
}

impl CandidateTest {
    pub fn stage(&self) -> Stage {
        self.verdict.stage_reached
    }

    /// Passed every filter but carries no assertion; reported as a test
    /// need rather than recommended.
    pub fn is_diverted(&self) -> bool {
        self.stage() == Stage::Accepted && self.hint_flags.missing_assertion
    }

    pub fn is_recommended(&self) -> bool {
        self.stage() == Stage::Accepted && !self.hint_flags.missing_assertion
    }

    pub fn body_hash(&self) -> Option<String> {
        self.test.as_ref().map(body_hash)
    }
}

pub fn body_hash(test: &TestCase) -> String {
    prompt_sha256(&test.normalized_body)
}

pub fn classify_hints(test: &TestCase, dialect: &DialectConfig) -> HintFlags {
    HintFlags {
        missing_assertion: !test.has_assertion(dialect),
        todo_marker: test.has_todo(dialect),
        integration_like: false,
    }
}

/// Follow-up prompt for an accepted candidate whose delta covers part, but
/// not all, of `method`.
pub fn detect_reprompt(
    candidate: &CandidateTest,
    class_under_test: &str,
    method: &MethodSpan,
    prompt: &str,
) -> Option<String> {
    if candidate.stage() != Stage::Accepted || method.lines.is_empty() {
        return None;
    }
    let delta = candidate.delta.as_ref()?;
    let covered: LineSet = delta
        .newly_covered
        .iter()
        .filter(|(file, _)| same_file(file, class_under_test))
        .flat_map(|(_, lines)| lines.intersection(&method.lines).copied())
        .collect();
    if covered.is_empty() || covered.len() == method.lines.len() {
        return None;
    }
    let uncovered = method.lines.len() - covered.len();
    let noun = if uncovered == 1 { "line" } else { "lines" };
    Some(format!(
        "{prompt}\n\n{uncovered} {noun} of the method {} remain uncovered; write additional test cases for {} that cover them.",
        method.name, method.name
    ))
}

// ---------------------------------------------------------------------------
// State

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TargetState {
    /// Hashes of normalized bodies already seen.
    pub registry: BTreeSet<String>,
    /// Working baseline coverage.
    pub baseline: CoverageMap,
    pub accepted: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    pub targets: BTreeMap<String, TargetState>,
}

impl PipelineState {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let err = |message: String| PipelineError::State {
            path: path.to_path_buf(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| err(e.to_string()))
    }

    /// Writes through a temporary file so a crash never leaves a torn state.
    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let err = |message: String| PipelineError::State {
            path: path.to_path_buf(),
            message,
        };
        let text = serde_json::to_string_pretty(self).map_err(|e| err(e.to_string()))?;
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, text + "\n").map_err(|e| err(e.to_string()))?;
        std::fs::rename(&tmp, path).map_err(|e| err(e.to_string()))
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Dialect { path: PathBuf, source: DialectError },
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("baseline of {test_class} does not build ({status:?}): {stderr}")]
    BaselineBuild {
        test_class: String,
        status: ExecStatus,
        stderr: String,
    },
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error("state file {path}: {message}")]
    State { path: PathBuf, message: String },
}

// ---------------------------------------------------------------------------
// Inputs

/// A parsed test class together with what its prompts and coverage
/// classification need.
#[derive(Debug, Clone)]
pub struct TestClassInput {
    pub path: String,
    pub source: TestClassSource,
    /// Root-relative path and text of the class under test.
    pub class_under_test: Option<(String, String)>,
    pub method_spans: Vec<MethodSpan>,
}

impl TestClassInput {
    pub fn load(
        manifest: &ProjectManifest,
        target: &BuildTarget,
        path: &Path,
    ) -> Result<Self, PipelineError> {
        let read = |p: &Path| {
            std::fs::read_to_string(p).map_err(|e| PipelineError::Io {
                path: p.to_path_buf(),
                message: e.to_string(),
            })
        };
        let text = read(path)?;
        let mut source = parse_test_class(&text, &manifest.dialect).map_err(|source| {
            PipelineError::Dialect {
                path: path.to_path_buf(),
                source,
            }
        })?;
        let rel = manifest.relative(path);
        source.path = PathBuf::from(&rel);
        let class_under_test = match target.class_under_test(path) {
            Some(cut) => Some((manifest.relative(cut), read(cut)?)),
            None => None,
        };
        let method_spans = class_under_test
            .as_ref()
            .and_then(|(cut, _)| target.method_spans.get(cut).cloned())
            .unwrap_or_default();
        Ok(Self {
            path: rel,
            source,
            class_under_test,
            method_spans,
        })
    }
}

/// Result of one trial: one (template, config) pair against one class.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trial {
    pub candidates: Vec<CandidateTest>,
    /// Free-text observations: skipped prompts, re-prompt results.
    pub notes: Vec<String>,
}

impl Trial {
    pub fn infra_errors(&self) -> usize {
        self.candidates
            .iter()
            .filter(|c| c.stage() == Stage::InfraError)
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contribution {
    pub model_id: String,
    pub prompt_name: String,
    pub accepted: usize,
    /// Accepted tests whose body no other (model, prompt) pair produced.
    pub unique: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EnsembleResult {
    pub candidates: Vec<CandidateTest>,
    pub contributions: Vec<Contribution>,
    pub notes: Vec<String>,
}

impl EnsembleResult {
    pub fn infra_errors(&self) -> usize {
        self.candidates
            .iter()
            .filter(|c| c.stage() == Stage::InfraError)
            .count()
    }
}

/// Per-(model, prompt) accepted and unique counts over recommended
/// candidates, in order of first appearance.
pub fn unique_contributions(candidates: &[CandidateTest]) -> Vec<Contribution> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    let mut bodies: BTreeMap<(String, String), Vec<String>> = BTreeMap::new();
    for candidate in candidates {
        let pair = (
            candidate.origin.model_id.clone(),
            candidate.origin.prompt_name.clone(),
        );
        if !pairs.contains(&pair) {
            pairs.push(pair.clone());
        }
        if let (true, Some(hash)) = (candidate.is_recommended(), candidate.body_hash()) {
            bodies.entry(pair).or_default().push(hash);
        }
    }
    let mut owners: BTreeMap<&str, BTreeSet<&(String, String)>> = BTreeMap::new();
    for (pair, hashes) in &bodies {
        for hash in hashes {
            owners.entry(hash.as_str()).or_default().insert(pair);
        }
    }
    pairs
        .into_iter()
        .map(|pair| {
            let hashes = bodies.get(&pair).map(Vec::as_slice).unwrap_or_default();
            let unique = hashes
                .iter()
                .filter(|h| owners[h.as_str()].len() == 1)
                .count();
            Contribution {
                model_id: pair.0,
                prompt_name: pair.1,
                accepted: hashes.len(),
                unique,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Pipeline

pub struct Pipeline<'a> {
    pub target: &'a BuildTarget,
    pub dialect: &'a DialectConfig,
    pub backend: &'a dyn ExecBackend,
    pub provider: &'a dyn LlmProvider,
    pub flaky_runs: u32,
    pub integration_threshold: f64,
}

struct PromptRun<'p> {
    prompt_name: &'p str,
    prompt: &'p str,
    config: &'p LlmConfig,
    /// Id of the candidate that triggered this follow-up prompt.
    parent: Option<&'p str>,
}

impl<'a> Pipeline<'a> {
    pub fn new(
        manifest: &'a ProjectManifest,
        target: &'a BuildTarget,
        backend: &'a dyn ExecBackend,
        provider: &'a dyn LlmProvider,
    ) -> Self {
        Self {
            target,
            dialect: &manifest.dialect,
            backend,
            provider,
            flaky_runs: manifest.backend.flaky_runs,
            integration_threshold: manifest.backend.integration_threshold,
        }
    }

    fn spec<'s>(
        &'s self,
        id: &'s str,
        class: &'s str,
        text: &'s str,
        test: Option<&'s str>,
    ) -> CandidateSpec<'s> {
        CandidateSpec {
            candidate_id: id,
            target_id: &self.target.id,
            test_class: class,
            class_text: text,
            new_test: test,
            build_command: &self.target.build_command,
            test_command: &self.target.test_command,
            coverage_artifact: &self.target.coverage_artifact,
        }
    }

    /// Baseline coverage and dedup registry of the existing tests: each
    /// original class is built in scratch and each of its tests measured
    /// on its own.
    pub fn compute_baseline(
        &self,
        classes: &[TestClassInput],
    ) -> Result<TargetState, PipelineError> {
        let mut state = TargetState::default();
        for (index, class) in classes.iter().enumerate() {
            let id = format!("baseline-{index}");
            let scratch =
                self.backend
                    .prepare(&self.spec(&id, &class.path, &class.source.raw_text, None))?;
            let built = self.backend.build(&scratch)?;
            if !built.is_ok() {
                return Err(PipelineError::BaselineBuild {
                    test_class: class.path.clone(),
                    status: built.status,
                    stderr: built.stderr_excerpt,
                });
            }
            for test in &class.source.test_cases {
                state.registry.insert(body_hash(test));
                let covered = match self.backend.measure_coverage(&scratch, &test.name) {
                    Ok(map) => map,
                    // An existing test that fails contributes no coverage.
                    Err(ExecError::CoverageRunFailed { .. }) => continue,
                    Err(e) => return Err(e.into()),
                };
                state.baseline.merge(&covered);
            }
        }
        Ok(state)
    }

    /// Existing bodies of `classes` merged into a loaded state, so a state
    /// file never hides tests added since it was written.
    pub fn refresh_registry(state: &mut TargetState, classes: &[TestClassInput]) {
        for class in classes {
            state
                .registry
                .extend(class.source.test_cases.iter().map(body_hash));
        }
    }

    pub fn run_trial(
        &self,
        class: &TestClassInput,
        template: &PromptTemplate,
        config: &LlmConfig,
        mode: RunMode,
        state: &mut TargetState,
    ) -> Trial {
        let mut trial = Trial::default();
        let cut_text = class
            .class_under_test
            .as_ref()
            .map(|(_, text)| text.as_str());
        let prompt = match template.render(&class.source.raw_text, cut_text) {
            Ok(prompt) => prompt,
            Err(e @ PromptError::MissingClassUnderTest(_)) => {
                trial
                    .notes
                    .push(format!("{}: skipped {}: {e}", class.path, template.name));
                return trial;
            }
            Err(e) => {
                trial.notes.push(format!("{}: {e}", class.path));
                return trial;
            }
        };
        let run = PromptRun {
            prompt_name: &template.name,
            prompt: &prompt,
            config,
            parent: None,
        };
        self.run_prompt(class, &run, mode, state, &mut HashSet::new(), &mut trial);
        trial
    }

    /// `seen` holds the bodies this trial has already produced, including
    /// those of its re-prompt round.
    fn run_prompt(
        &self,
        class: &TestClassInput,
        run: &PromptRun,
        mode: RunMode,
        state: &mut TargetState,
        seen: &mut HashSet<String>,
        trial: &mut Trial,
    ) {
        let origin = |sample_index: u32, request_id: &str| Origin {
            model_id: run.config.model_id.clone(),
            prompt_name: run.prompt_name.to_string(),
            temperature: run.config.temperature,
            sample_index,
            request_id: request_id.to_string(),
            reprompt: run.parent.is_some(),
        };
        let id_seed = format!(
            "{}\u{0}{}\u{0}{}\u{0}{}\u{0}{}\u{0}{}",
            self.target.id,
            class.path,
            run.config.model_id,
            run.prompt_name,
            run.config.temperature_label(),
            run.parent.unwrap_or("")
        );
        let new_id = |sample: u32, k: usize| {
            format!(
                "c{}",
                &prompt_sha256(&format!("{id_seed}\u{0}{sample}\u{0}{k}"))[..12]
            )
        };
        let blank = |id: String, origin: Origin, stage: Stage, detail: String| CandidateTest {
            candidate_id: id,
            target_id: self.target.id.clone(),
            test_class_path: class.path.clone(),
            test: None,
            origin,
            verdict: FilterVerdict {
                stage_reached: stage,
                detail,
            },
            delta: None,
            hint_flags: HintFlags::default(),
            skipped_runs: 0,
        };

        let generation = match self.provider.generate(run.prompt, run.config) {
            Ok(g) => g,
            Err(e) => {
                trial.candidates.push(blank(
                    new_id(0, 0),
                    origin(0, ""),
                    Stage::InfraError,
                    e.to_string(),
                ));
                return;
            }
        };

        for (sample, response) in generation.responses.iter().enumerate() {
            let sample = sample as u32;
            let origin = origin(sample, &generation.request_id);
            let extraction = match extract_candidates(&class.source, response, self.dialect) {
                Ok(x) if x.is_empty() => Err("response adds no test case".to_string()),
                Ok(x) => Ok(x),
                Err(e) => Err(e.to_string()),
            };
            let extraction = match extraction {
                Ok(x) => x,
                Err(detail) => {
                    trial.candidates.push(blank(
                        new_id(sample, 0),
                        origin.clone(),
                        Stage::NoParse,
                        detail,
                    ));
                    continue;
                }
            };

            let mut k = 0;
            for copy in extraction.renamed_copies {
                let mut c = blank(
                    new_id(sample, k),
                    origin.clone(),
                    Stage::Duplicate,
                    "same body as an existing test".to_string(),
                );
                c.hint_flags = classify_hints(&copy, self.dialect);
                c.test = Some(copy);
                trial.candidates.push(c);
                k += 1;
            }
            for test in extraction.new_tests {
                let mut c = blank(
                    new_id(sample, k),
                    origin.clone(),
                    Stage::NoParse,
                    String::new(),
                );
                k += 1;
                c.hint_flags = classify_hints(&test, self.dialect);
                let hash = body_hash(&test);
                c.test = Some(test);
                if state.registry.contains(&hash) || !seen.insert(hash.clone()) {
                    c.verdict = FilterVerdict {
                        stage_reached: Stage::Duplicate,
                        detail: "body seen before".to_string(),
                    };
                    trial.candidates.push(c);
                    continue;
                }
                match self.filter(class, &mut c, mode, state, &hash) {
                    Ok(()) => {}
                    Err(e) => {
                        c.verdict = FilterVerdict {
                            stage_reached: Stage::InfraError,
                            detail: e.to_string(),
                        };
                        trial.candidates.push(c);
                        return;
                    }
                }
                let follow_up = if run.parent.is_none() && c.is_recommended() {
                    self.follow_up(class, &c, run.prompt, &mut trial.notes)
                } else {
                    None
                };
                let parent_id = c.candidate_id.clone();
                trial.candidates.push(c);
                if let Some(prompt) = follow_up {
                    let before = trial.candidates.len();
                    let round = PromptRun {
                        prompt_name: run.prompt_name,
                        prompt: &prompt,
                        config: run.config,
                        parent: Some(&parent_id),
                    };
                    self.run_prompt(class, &round, mode, state, seen, trial);
                    if !trial.candidates[before..]
                        .iter()
                        .any(CandidateTest::is_recommended)
                    {
                        trial.notes.push(format!(
                            "{}: re-prompt after {parent_id} yielded no accepted test",
                            class.path
                        ));
                    }
                    if trial.candidates[before..]
                        .iter()
                        .any(|c| c.stage() == Stage::InfraError)
                    {
                        return;
                    }
                }
            }
        }
    }

    /// Build, pass/flaky and coverage gates for a candidate that passed
    /// dedup. Sets the verdict; `Err` means infrastructure failure.
    fn filter(
        &self,
        class: &TestClassInput,
        c: &mut CandidateTest,
        mode: RunMode,
        state: &mut TargetState,
        hash: &str,
    ) -> Result<(), PipelineError> {
        let test = c.test.as_ref().expect("candidate has a test");
        let verdict = |stage, detail: String| FilterVerdict {
            stage_reached: stage,
            detail,
        };
        let class_text = match reassemble(&class.source, std::slice::from_ref(test)) {
            Ok(text) => text,
            Err(e) => {
                c.verdict = verdict(Stage::Duplicate, e.to_string());
                return Ok(());
            }
        };
        let scratch = self.backend.prepare(&self.spec(
            &c.candidate_id,
            &class.path,
            &class_text,
            Some(&test.name),
        ))?;

        let built = self.backend.build(&scratch)?;
        if !built.is_ok() {
            let detail = match built.status {
                ExecStatus::Timeout => "build timed out".to_string(),
                _ => built.stderr_excerpt,
            };
            c.verdict = verdict(Stage::BuildFailed, detail);
            return Ok(());
        }

        let runs = run_repeated(self.backend, &scratch, &test.name, self.flaky_runs)?;
        c.skipped_runs = runs.skipped;
        let failure = |runs: &crate::exec::RepeatedRun| {
            let last = runs.outcomes.last().expect("at least one run");
            format!(
                "run {} of {}: {:?}: {}",
                runs.outcomes.len(),
                self.flaky_runs.max(1),
                last.status,
                last.stderr_excerpt
            )
        };
        match runs.classify() {
            Reliability::FailedFirstRun => {
                c.verdict = verdict(Stage::FailedFirstRun, failure(&runs));
                return Ok(());
            }
            Reliability::Flaky => {
                c.verdict = verdict(Stage::Flaky, failure(&runs));
                return Ok(());
            }
            Reliability::Reliable => {}
        }

        let covered = match self.backend.measure_coverage(&scratch, &test.name) {
            Ok(map) => map,
            Err(ExecError::CoverageRunFailed { status, .. }) => {
                c.verdict = verdict(Stage::Flaky, format!("instrumented run: {status:?}"));
                return Ok(());
            }
            Err(e) => return Err(e.into()),
        };
        let cut = class
            .class_under_test
            .as_ref()
            .map(|(path, _)| path.as_str());
        let delta = coverage::delta(&covered, &state.baseline, cut);
        c.hint_flags.integration_like = delta.is_integration_like(self.integration_threshold);
        if delta.is_empty() {
            c.verdict = verdict(Stage::NoCoverageGain, String::new());
        } else {
            let detail = if c.hint_flags.missing_assertion {
                "no assertion; reported as a test need".to_string()
            } else {
                String::new()
            };
            c.verdict = verdict(Stage::Accepted, detail);
            if mode == RunMode::Deployment && !c.hint_flags.missing_assertion {
                state.baseline.merge(&covered);
                state.registry.insert(hash.to_string());
                state.accepted.push(c.candidate_id.clone());
            }
        }
        c.delta = Some(delta);
        Ok(())
    }

    fn follow_up(
        &self,
        class: &TestClassInput,
        c: &CandidateTest,
        prompt: &str,
        notes: &mut Vec<String>,
    ) -> Option<String> {
        let Some((cut, _)) = &class.class_under_test else {
            notes.push(format!(
                "{}: no class under test mapped; re-prompt skipped",
                class.path
            ));
            return None;
        };
        if class.method_spans.is_empty() {
            notes.push(format!(
                "{}: no method spans for {cut}; re-prompt skipped",
                class.path
            ));
            return None;
        }
        let delta = c.delta.as_ref()?;
        let touched: LineSet = delta
            .newly_covered
            .iter()
            .filter(|(file, _)| same_file(file, cut))
            .flat_map(|(_, lines)| lines.iter().copied())
            .collect();
        let method = class
            .method_spans
            .iter()
            .find(|m| !m.lines.is_disjoint(&touched))?;
        detect_reprompt(c, cut, method, prompt)
    }

    /// Runs every (config, template) pair in declared order. Evaluation
    /// trials run on up to `jobs` threads against copies of `state`;
    /// deployment trials run in order against the shared working state.
    pub fn ensemble_run(
        &self,
        class: &TestClassInput,
        templates: &[PromptTemplate],
        configs: &[LlmConfig],
        mode: RunMode,
        state: &mut TargetState,
        jobs: usize,
    ) -> EnsembleResult {
        let work: Vec<(&LlmConfig, &PromptTemplate)> = configs
            .iter()
            .flat_map(|config| templates.iter().map(move |template| (config, template)))
            .collect();
        let jobs = if self.backend.parallel_safe() {
            jobs.max(1)
        } else {
            1
        };

        let trials: Vec<Trial> = if mode == RunMode::Deployment || jobs == 1 || work.len() < 2 {
            work.iter()
                .map(|(config, template)| self.run_trial(class, template, config, mode, state))
                .collect()
        } else {
            let next = AtomicUsize::new(0);
            let slots: Mutex<Vec<Option<Trial>>> = Mutex::new(vec![None; work.len()]);
            std::thread::scope(|scope| {
                for _ in 0..jobs.min(work.len()) {
                    let mut local = state.clone();
                    let (next, slots, work) = (&next, &slots, &work);
                    scope.spawn(move || loop {
                        let i = next.fetch_add(1, Ordering::SeqCst);
                        let Some((config, template)) = work.get(i) else {
                            break;
                        };
                        let trial = self.run_trial(class, template, config, mode, &mut local);
                        slots.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(trial);
                    });
                }
            });
            slots
                .into_inner()
                .unwrap_or_else(|e| e.into_inner())
                .into_iter()
                .map(Option::unwrap_or_default)
                .collect()
        };

        let mut result = EnsembleResult::default();
        for trial in trials {
            result.candidates.extend(trial.candidates);
            result.notes.extend(trial.notes);
        }
        result.contributions = unique_contributions(&result.candidates);
        result
    }
}
