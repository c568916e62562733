//! Trial telemetry, funnel and success-rate aggregation, Sankey export and
//! one-test improvement diffs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coverage::{format_ranges, CoverageDelta, CoverageMap};
use crate::dialect::{parse_test_class, reassemble, DialectConfig, DialectError, TestClassSource};
use crate::pipeline::{CandidateTest, EnsembleResult, HintFlags, Origin, RunMode, Stage};

pub const MACHINE_MARKER: &str = "[testgen: machine-generated]";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("unknown group field `{0}` (expected temperature, model_id, platform_tag or platform_tag,model_id)")]
    UnknownGroupField(String),
    #[error("candidate {id} has stage {stage}; only accepted candidates get a diff")]
    NotAccepted { id: String, stage: Stage },
    #[error("candidate {0} carries no test")]
    MissingTest(String),
    #[error(transparent)]
    Dialect(#[from] DialectError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{path} line {line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

fn io_error(path: &Path, err: impl std::fmt::Display) -> ReportError {
    ReportError::Io {
        path: path.to_path_buf(),
        message: err.to_string(),
    }
}

// ---------------------------------------------------------------------------
// Records

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub timestamp: String,
    pub target_id: String,
    pub test_class_path: String,
    pub model_id: String,
    pub prompt_name: String,
    pub temperature: f64,
    pub sample_index: u32,
    pub stage_reached: Stage,
    pub total_new_lines: u64,
    pub new_files_count: usize,
    pub extended_files_count: usize,
    pub hint_flags: HintFlags,
    pub mode: RunMode,
    #[serde(default)]
    pub platform_tag: Option<String>,
    #[serde(default)]
    pub candidate_id: String,
    #[serde(default)]
    pub reprompt: bool,
}

pub fn now_timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl TrialRecord {
    pub fn from_candidate(
        c: &CandidateTest,
        mode: RunMode,
        platform_tag: Option<&str>,
        timestamp: String,
    ) -> Self {
        let delta = c.delta.as_ref();
        Self {
            timestamp,
            target_id: c.target_id.clone(),
            test_class_path: c.test_class_path.clone(),
            model_id: c.origin.model_id.clone(),
            prompt_name: c.origin.prompt_name.clone(),
            temperature: c.origin.temperature,
            sample_index: c.origin.sample_index,
            stage_reached: c.stage(),
            total_new_lines: delta.map_or(0, |d| d.total_new_lines),
            new_files_count: delta.map_or(0, |d| d.new_files.len()),
            extended_files_count: delta.map_or(0, |d| d.extended_files.len()),
            hint_flags: c.hint_flags,
            mode,
            platform_tag: platform_tag.map(str::to_string),
            candidate_id: c.candidate_id.clone(),
            reprompt: c.origin.reprompt,
        }
    }

    fn temperature_label(&self) -> String {
        format!("{:.1}", self.temperature)
    }
}

/// Append-only JSON Lines log. Each record goes out in a single write.
pub struct TelemetryLog {
    path: PathBuf,
    file: Mutex<File>,
}

impl TelemetryLog {
    pub fn open(path: &Path) -> Result<Self, ReportError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| io_error(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file: Mutex::new(file),
        })
    }

    pub fn append(&self, record: &TrialRecord) -> Result<(), ReportError> {
        let mut line = serde_json::to_string(record).map_err(|e| io_error(&self.path, e))?;
        line.push('\n');
        let mut file = self.file.lock().unwrap_or_else(|e| e.into_inner());
        file.write_all(line.as_bytes())
            .map_err(|e| io_error(&self.path, e))?;
        file.flush().map_err(|e| io_error(&self.path, e))
    }
}

pub fn read_records(path: &Path) -> Result<Vec<TrialRecord>, ReportError> {
    let file = File::open(path).map_err(|e| io_error(path, e))?;
    let mut records = Vec::new();
    for (index, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_error(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| ReportError::Malformed {
            path: path.to_path_buf(),
            line: index + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Rates

/// `successes / total` in hundredths, rounded half-up in exact integer
/// arithmetic. `None` for an empty denominator.
pub fn rate_hundredths(successes: u64, total: u64) -> Option<u64> {
    (total > 0).then(|| (200 * successes + total) / (2 * total))
}

pub fn format_rate(successes: u64, total: u64) -> String {
    match rate_hundredths(successes, total) {
        Some(h) => format!("{}.{:02}", h / 100, h % 100),
        None => "-".to_string(),
    }
}

// ---------------------------------------------------------------------------
// Funnel

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    TestCase,
    TestClass,
}

impl Level {
    pub fn parse(text: &str) -> Option<Level> {
        match text {
            "test_case" | "test-case" | "case" => Some(Level::TestCase),
            "test_class" | "test-class" | "class" => Some(Level::TestClass),
            _ => None,
        }
    }
}

/// Cumulative funnel stages: each counts units reaching at least that point.
pub const FUNNEL_STAGES: [&str; 5] = ["generated", "built", "passed", "non_flaky", "accepted"];

fn reaches(stage: Stage, funnel_stage: &str) -> bool {
    match funnel_stage {
        "generated" => stage.is_funnel(),
        "built" => stage.built(),
        "passed" => stage.passed(),
        "non_flaky" => stage.non_flaky(),
        "accepted" => stage == Stage::Accepted,
        _ => false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunnelStats {
    pub level: Level,
    /// Candidates (test-case level) or test classes (test-class level).
    pub total: u64,
    /// Units reaching each of [`FUNNEL_STAGES`], in order.
    pub reached: Vec<(String, u64)>,
    /// Candidates by terminal stage; test-case level only.
    pub terminal: BTreeMap<String, u64>,
    pub infra_errors: u64,
}

impl FunnelStats {
    pub fn count(&self, stage: &str) -> u64 {
        self.reached
            .iter()
            .find(|(s, _)| s == stage)
            .map_or(0, |(_, n)| *n)
    }

    /// Exact fraction of units reaching `stage`; `None` when empty.
    pub fn fraction(&self, stage: &str) -> Option<f64> {
        (self.total > 0).then(|| self.count(stage) as f64 / self.total as f64)
    }

    pub fn success_rate(&self) -> Option<f64> {
        self.fraction("accepted")
    }

    pub fn render(&self) -> String {
        let unit = match self.level {
            Level::TestCase => "test cases",
            Level::TestClass => "test classes",
        };
        let mut out = format!("funnel over {} {unit}\n", self.total);
        let width = FUNNEL_STAGES.iter().map(|s| s.len()).max().unwrap_or(0);
        for (stage, n) in &self.reached {
            let _ = writeln!(
                out,
                "{stage:<width$}  {n:>8}  {}",
                format_rate(*n, self.total)
            );
        }
        if !self.terminal.is_empty() {
            out.push_str("terminal stages\n");
            for (stage, n) in &self.terminal {
                let _ = writeln!(out, "{stage:<18}  {n:>8}");
            }
        }
        let _ = writeln!(
            out,
            "success rate  {}",
            format_rate(self.count("accepted"), self.total)
        );
        if self.infra_errors > 0 {
            let _ = writeln!(out, "infra errors  {}", self.infra_errors);
        }
        out
    }
}

pub fn funnel_stats(records: &[TrialRecord], level: Level) -> FunnelStats {
    let funnel: Vec<&TrialRecord> = records
        .iter()
        .filter(|r| r.stage_reached.is_funnel())
        .collect();
    let infra_errors = (records.len() - funnel.len()) as u64;
    match level {
        Level::TestCase => {
            let reached = FUNNEL_STAGES
                .iter()
                .map(|s| {
                    (
                        s.to_string(),
                        funnel
                            .iter()
                            .filter(|r| reaches(r.stage_reached, s))
                            .count() as u64,
                    )
                })
                .collect();
            let mut terminal = BTreeMap::new();
            for r in &funnel {
                *terminal
                    .entry(r.stage_reached.as_str().to_string())
                    .or_insert(0) += 1;
            }
            FunnelStats {
                level,
                total: funnel.len() as u64,
                reached,
                terminal,
                infra_errors,
            }
        }
        Level::TestClass => {
            let mut classes: BTreeMap<(&str, &str), Vec<Stage>> = BTreeMap::new();
            for r in &funnel {
                classes
                    .entry((r.target_id.as_str(), r.test_class_path.as_str()))
                    .or_default()
                    .push(r.stage_reached);
            }
            let reached = FUNNEL_STAGES
                .iter()
                .map(|s| {
                    let n = classes
                        .values()
                        .filter(|stages| stages.iter().any(|st| reaches(*st, s)))
                        .count();
                    (s.to_string(), n as u64)
                })
                .collect();
            FunnelStats {
                level,
                total: classes.len() as u64,
                reached,
                terminal: BTreeMap::new(),
                infra_errors,
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Success tables

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    Temperature,
    ModelId,
    PlatformTag,
    PlatformTagModelId,
}

impl GroupBy {
    pub fn parse(text: &str) -> Result<GroupBy, ReportError> {
        let key: String = text.chars().filter(|c| !"() ".contains(*c)).collect();
        match key.as_str() {
            "temperature" => Ok(GroupBy::Temperature),
            "model_id" => Ok(GroupBy::ModelId),
            "platform_tag" => Ok(GroupBy::PlatformTag),
            "platform_tag,model_id" | "platform_tag+model_id" => Ok(GroupBy::PlatformTagModelId),
            _ => Err(ReportError::UnknownGroupField(text.to_string())),
        }
    }

    fn columns(self) -> Vec<&'static str> {
        match self {
            GroupBy::Temperature => vec!["temperature"],
            GroupBy::ModelId => vec!["model_id"],
            GroupBy::PlatformTag => vec!["platform_tag"],
            GroupBy::PlatformTagModelId => vec!["platform_tag", "model_id"],
        }
    }

    fn key(self, r: &TrialRecord) -> Vec<String> {
        let platform = || r.platform_tag.clone().unwrap_or_else(|| "-".to_string());
        match self {
            GroupBy::Temperature => vec![r.temperature_label()],
            GroupBy::ModelId => vec![r.model_id.clone()],
            GroupBy::PlatformTag => vec![platform()],
            GroupBy::PlatformTagModelId => vec![platform(), r.model_id.clone()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuccessRow {
    pub group: Vec<String>,
    pub successful: u64,
    pub total: u64,
    /// Rate in hundredths, rounded half-up.
    pub rate_hundredths: Option<u64>,
}

impl SuccessRow {
    pub fn rate(&self) -> String {
        format_rate(self.successful, self.total)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuccessTable {
    pub columns: Vec<String>,
    pub rows: Vec<SuccessRow>,
}

impl SuccessTable {
    pub fn render(&self) -> String {
        let mut header: Vec<String> = self.columns.clone();
        header.extend([
            "successful".to_string(),
            "total".to_string(),
            "rate".to_string(),
        ]);
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut cells = r.group.clone();
                cells.extend([r.successful.to_string(), r.total.to_string(), r.rate()]);
                cells
            })
            .collect();
        render_grid(&header, &body)
    }
}

fn render_grid(header: &[String], body: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(String::len).collect();
    for row in body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        padded.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(header);
    for row in body {
        out.push_str(&line(row));
    }
    out
}

/// Successful (accepted) and total trials per group. Infrastructure-error
/// rows are not trials with an outcome and are left out.
pub fn success_table(records: &[TrialRecord], group_by: &str) -> Result<SuccessTable, ReportError> {
    let group_by = GroupBy::parse(group_by)?;
    let mut groups: BTreeMap<Vec<String>, (u64, u64)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.stage_reached.is_funnel()) {
        let entry = groups.entry(group_by.key(r)).or_default();
        entry.1 += 1;
        if r.stage_reached == Stage::Accepted {
            entry.0 += 1;
        }
    }
    let mut rows: Vec<SuccessRow> = groups
        .into_iter()
        .map(|(group, (successful, total))| SuccessRow {
            group,
            successful,
            total,
            rate_hundredths: rate_hundredths(successful, total),
        })
        .collect();
    match group_by {
        GroupBy::Temperature => rows.sort_by(|a, b| {
            let t = |r: &SuccessRow| r.group[0].parse::<f64>().unwrap_or(f64::NAN);
            t(b).total_cmp(&t(a))
        }),
        GroupBy::PlatformTagModelId => {
            rows.sort_by(|a, b| (&a.group[1], &a.group[0]).cmp(&(&b.group[1], &b.group[0])))
        }
        _ => {}
    }
    Ok(SuccessTable {
        columns: group_by.columns().into_iter().map(str::to_string).collect(),
        rows,
    })
}

// ---------------------------------------------------------------------------
// Sankey

fn percent(n: u64, total: u64) -> String {
    // Hundredths of a percent, rounded half-up.
    let scaled = (20_000 * n + total) / (2 * total);
    let text = format!("{}.{:02}", scaled / 100, scaled % 100);
    text.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Flow rows `source [amount] target`, amounts as percentages of all
/// candidates. Zero flows are omitted.
pub fn sankey_export(records: &[TrialRecord]) -> String {
    let stages: Vec<Stage> = records
        .iter()
        .map(|r| r.stage_reached)
        .filter(|s| s.is_funnel())
        .collect();
    let total = stages.len() as u64;
    if total == 0 {
        return String::new();
    }
    let count = |f: &dyn Fn(Stage) -> bool| stages.iter().filter(|s| f(**s)).count() as u64;
    let flows: [(&str, u64, &str); 10] = [
        ("generated", count(&|s| s == Stage::NoParse), "no_parse"),
        ("generated", count(&|s| s == Stage::Duplicate), "duplicate"),
        (
            "generated",
            count(&|s| s == Stage::BuildFailed),
            "build_failed",
        ),
        ("generated", count(&Stage::built), "built"),
        ("built", count(&|s| s == Stage::FailedFirstRun), "failed"),
        ("built", count(&Stage::passed), "passed"),
        ("passed", count(&|s| s == Stage::Flaky), "flaky"),
        ("passed", count(&Stage::non_flaky), "non_flaky"),
        (
            "non_flaky",
            count(&|s| s == Stage::NoCoverageGain),
            "no_gain",
        ),
        ("non_flaky", count(&|s| s == Stage::Accepted), "improves"),
    ];
    let mut out = String::new();
    for (source, n, target) in flows {
        if n > 0 {
            let _ = writeln!(out, "{source} [{}] {target}", percent(n, total));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Diffs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementDiff {
    pub diff_id: String,
    pub target_id: String,
    pub test_class_path: String,
    pub test_name: String,
    pub origin: Origin,
    #[serde(skip)]
    pub new_class_text: String,
    #[serde(skip)]
    pub unified_diff: String,
    pub summary: String,
    pub total_new_lines: u64,
    pub newly_covered: CoverageMap,
    pub new_files: BTreeSet<String>,
    pub extended_files: BTreeSet<String>,
    pub integration_like: bool,
}

fn plural(n: u64, word: &str) -> String {
    if n == 1 {
        format!("{n} {word}")
    } else {
        format!("{n} {word}s")
    }
}

fn file_list(files: &BTreeSet<String>) -> String {
    if files.is_empty() {
        "none".to_string()
    } else {
        files.iter().cloned().collect::<Vec<_>>().join(", ")
    }
}

/// Tool-generated description of one accepted test; numbers come straight
/// from `delta`.
pub fn diff_summary(
    test_name: &str,
    test_class_path: &str,
    retained: usize,
    delta: &CoverageDelta,
    integration_like: bool,
) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{MACHINE_MARKER}");
    let _ = writeln!(out, "Adds test `{test_name}` to {test_class_path}.");
    let _ = writeln!(out, "Total new lines covered: {}", delta.total_new_lines);
    let _ = writeln!(out, "Newly covered lines by file:");
    for (file, lines) in delta.newly_covered.iter() {
        let _ = writeln!(
            out,
            "{file}: +{} ({})",
            plural(lines.len() as u64, "line"),
            format_ranges(lines)
        );
    }
    let _ = writeln!(out, "New files: {}", file_list(&delta.new_files));
    let _ = writeln!(out, "Extended files: {}", file_list(&delta.extended_files));
    let _ = writeln!(
        out,
        "All {} of the class are retained verbatim; no existing test is removed or modified.",
        plural(retained as u64, "existing test")
    );
    if integration_like {
        let share = delta
            .off_target_fraction
            .value()
            .map(|f| format!("{:.0}%", f * 100.0))
            .unwrap_or_else(|| "most".to_string());
        let _ = writeln!(out, "WARNING: integration-like test.");
        let _ = writeln!(
            out,
            "{share} of the new lines lie outside the class under test; this may be an integration test rather than a unit test."
        );
    }
    out
}

pub fn emit_diff(
    accepted: &CandidateTest,
    original: &TestClassSource,
    delta: &CoverageDelta,
) -> Result<ImprovementDiff, ReportError> {
    if accepted.stage() != Stage::Accepted {
        return Err(ReportError::NotAccepted {
            id: accepted.candidate_id.clone(),
            stage: accepted.stage(),
        });
    }
    let test = accepted
        .test
        .as_ref()
        .ok_or_else(|| ReportError::MissingTest(accepted.candidate_id.clone()))?;
    let new_class_text = reassemble(original, std::slice::from_ref(test))?;
    let path = &accepted.test_class_path;
    let unified_diff =
        similar::TextDiff::from_lines(original.raw_text.as_str(), new_class_text.as_str())
            .unified_diff()
            .context_radius(3)
            .header(&format!("a/{path}"), &format!("b/{path}"))
            .to_string();
    let integration_like = accepted.hint_flags.integration_like;
    Ok(ImprovementDiff {
        diff_id: accepted.candidate_id.clone(),
        target_id: accepted.target_id.clone(),
        test_class_path: path.clone(),
        test_name: test.name.clone(),
        origin: accepted.origin.clone(),
        summary: diff_summary(
            &test.name,
            path,
            original.test_cases.len(),
            delta,
            integration_like,
        ),
        new_class_text,
        unified_diff,
        total_new_lines: delta.total_new_lines,
        newly_covered: delta.newly_covered.clone(),
        new_files: delta.new_files.clone(),
        extended_files: delta.extended_files.clone(),
        integration_like,
    })
}

/// Checks that `diff` keeps every original test byte-identical and adds
/// exactly the one named test.
pub fn verify_diff(
    diff: &ImprovementDiff,
    original: &TestClassSource,
    dialect: &DialectConfig,
) -> Result<bool, ReportError> {
    let parsed = parse_test_class(&diff.new_class_text, dialect)?;
    let retained = original.test_cases.iter().all(|o| {
        parsed.test_cases.iter().any(|p| {
            p.name == o.name && parsed.raw_text[p.span.clone()] == original.raw_text[o.span.clone()]
        })
    });
    let added: Vec<_> = parsed
        .test_cases
        .iter()
        .filter(|p| !original.test_cases.iter().any(|o| o.name == p.name))
        .collect();
    Ok(retained && added.len() == 1 && added[0].name == diff.test_name)
}

/// Writes `<diff_id>.diff` (unified diff plus summary) and `<diff_id>.json`
/// (the sidecar) into `dir`.
pub fn write_diff(dir: &Path, diff: &ImprovementDiff) -> Result<(PathBuf, PathBuf), ReportError> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let patch = dir.join(format!("{}.diff", diff.diff_id));
    let summary: String = diff.summary.lines().map(|l| format!("# {l}\n")).collect();
    std::fs::write(&patch, summary + &diff.unified_diff).map_err(|e| io_error(&patch, e))?;
    let sidecar = dir.join(format!("{}.json", diff.diff_id));
    let json = serde_json::to_string_pretty(diff).map_err(|e| io_error(&sidecar, e))?;
    std::fs::write(&sidecar, json + "\n").map_err(|e| io_error(&sidecar, e))?;
    Ok((patch, sidecar))
}

/// Report section for accepted candidates diverted for lacking an assertion.
pub fn render_hints(candidates: &[CandidateTest]) -> String {
    let mut out = String::new();
    for c in candidates.iter().filter(|c| c.is_diverted()) {
        let Some(test) = &c.test else { continue };
        let lines = c.delta.as_ref().map_or(0, |d| d.total_new_lines);
        let _ = writeln!(
            out,
            "## {} in {} (+{}){}",
            test.name,
            c.test_class_path,
            plural(lines, "line"),
            if c.hint_flags.todo_marker {
                " [TODO]"
            } else {
                ""
            }
        );
        let _ = writeln!(
            out,
            "This test adds coverage but asserts nothing; consider adding a suitable assertion."
        );
        let _ = writeln!(out, "{}", test.render().trim_end());
        out.push('\n');
    }
    if out.is_empty() {
        out
    } else {
        format!("{MACHINE_MARKER}\n# Test need hints\n\n{out}")
    }
}

pub fn render_contributions(result: &EnsembleResult) -> String {
    let header: Vec<String> = ["model_id", "prompt_name", "accepted", "unique"]
        .map(String::from)
        .to_vec();
    let body: Vec<Vec<String>> = result
        .contributions
        .iter()
        .map(|c| {
            vec![
                c.model_id.clone(),
                c.prompt_name.clone(),
                c.accepted.to_string(),
                c.unique.to_string(),
            ]
        })
        .collect();
    render_grid(&header, &body)
}
