//! `testgen` command line: `extend`, `eval`, `report` and `corpus-scan`.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;

use testgen_core::corpus::{self, BuildTarget, CorpusError, ProjectManifest};
use testgen_core::exec::{BackendKind, CommandBackend, ExecBackend, MockBackend};
use testgen_core::llm::{
    sweep_configs, HttpProvider, LlmConfig, LlmProvider, ProviderKind, Recorder, ReplayProvider,
    StubProvider,
};
use testgen_core::pipeline::{
    unique_contributions, EnsembleResult, Pipeline, PipelineState, RunMode, TestClassInput,
};
use testgen_core::promptkit::{PromptTemplate, TemplateSet, EXTEND_COVERAGE_NAME};
use testgen_core::telemetry::{
    emit_diff, funnel_stats, now_timestamp, read_records, render_contributions, render_hints,
    sankey_export, success_table, write_diff, Level, TelemetryLog, TrialRecord,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INFRA: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "testgen",
    version,
    about = "Extend unit-test classes with generated tests that provably add coverage"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Deployment run: accumulate the baseline and write one diff per accepted test.
    Extend(RunArgs),
    /// Evaluation run against a fixed baseline; writes telemetry and tables only.
    Eval(RunArgs),
    /// Aggregate an existing telemetry file.
    Report(ReportArgs),
    /// Draft a manifest from a directory of `*Test` files.
    CorpusScan(ScanArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Evaluation,
    Deployment,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Restrict to these build targets.
    #[arg(long = "target")]
    pub targets: Vec<String>,
    /// Model id; repeat to run an ensemble. Defaults to the manifest's default model.
    #[arg(long = "llm")]
    pub llms: Vec<String>,
    /// Prompt template name, or `all`. Defaults to extend_coverage.
    #[arg(long = "prompt")]
    pub prompts: Vec<String>,
    #[arg(long, conflicts_with = "temp_sweep")]
    pub temp: Option<f64>,
    /// Sweep temperature from 0.0 to 1.0 in steps of 0.1.
    #[arg(long)]
    pub temp_sweep: bool,
    /// Must agree with the subcommand when given.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, default_value = "testgen-out")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Executions required to call a test non-flaky. Defaults to the manifest value.
    #[arg(long)]
    pub runs: Option<u32>,
    /// Nonzero seeds shuffle the order of test classes.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub telemetry: PathBuf,
    /// temperature, model_id, platform_tag or platform_tag,model_id; repeatable.
    #[arg(long = "group-by")]
    pub group_by: Vec<String>,
    /// test_case or test_class.
    #[arg(long)]
    pub level: Option<String>,
}

#[derive(Debug, Args)]
pub struct ScanArgs {
    pub dir: PathBuf,
    /// Where to write the drafted manifest.
    #[arg(long)]
    pub manifest: PathBuf,
}

/// Distinguishes usage and manifest problems (exit 2) from everything else.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(message: impl Into<String>) -> anyhow::Error {
    UsageError(message.into()).into()
}

pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    run_cli_with(args, &mut std::io::stdout(), &mut std::io::stderr())
}

pub fn run_cli_with<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(stderr, "{}", e.render());
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli, stdout, stderr) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                EXIT_USAGE
            } else {
                EXIT_INFRA
            }
        }
    }
}

fn execute(cli: Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    match cli.command {
        Command::Extend(args) => run(args, RunMode::Deployment, stdout, stderr),
        Command::Eval(args) => run(args, RunMode::Evaluation, stdout, stderr),
        Command::Report(args) => report(args, stdout),
        Command::CorpusScan(args) => scan(args, stdout),
    }
}

fn load_manifest(path: &Path) -> Result<ProjectManifest> {
    corpus::load_manifest(path).map_err(|e| match e {
        CorpusError::Io { .. }
        | CorpusError::Json { .. }
        | CorpusError::SchemaError(_)
        | CorpusError::MissingFile(_) => usage(e.to_string()),
        other => other.into(),
    })
}

/// What a run will iterate over once flags and manifest defaults are merged.
pub struct Plan {
    pub mode: RunMode,
    pub targets: Vec<BuildTarget>,
    pub templates: Vec<PromptTemplate>,
    pub configs: Vec<LlmConfig>,
    pub flaky_runs: u32,
}

pub fn plan(args: &RunArgs, mode: RunMode, manifest: &ProjectManifest) -> Result<Plan> {
    if let Some(requested) = args.mode {
        let requested = match requested {
            ModeArg::Evaluation => RunMode::Evaluation,
            ModeArg::Deployment => RunMode::Deployment,
        };
        if requested != mode {
            return Err(usage(
                format!("--mode {requested:?} contradicts the subcommand, which implies {mode:?}")
                    .to_lowercase(),
            ));
        }
    }
    if args.jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    if args.runs == Some(0) {
        return Err(usage("--runs must be at least 1"));
    }
    if let Some(t) = args.temp {
        if !(0.0..=2.0).contains(&t) {
            return Err(usage(format!("--temp {t} is outside 0.0..=2.0")));
        }
    }

    let targets = if args.targets.is_empty() {
        manifest.targets.clone()
    } else {
        let mut chosen = Vec::new();
        for id in &args.targets {
            let target = manifest
                .target(id)
                .ok_or_else(|| usage(format!("--target {id}: no such target in the manifest")))?;
            chosen.push(target.clone());
        }
        chosen
    };

    let set = TemplateSet::with_custom(manifest.prompts.clone());
    let names: Vec<String> = if args.prompts.is_empty() {
        vec![EXTEND_COVERAGE_NAME.to_string()]
    } else {
        args.prompts.clone()
    };
    let mut templates: Vec<PromptTemplate> = Vec::new();
    for name in &names {
        if name == "all" {
            templates.extend(set.all().iter().cloned());
        } else {
            let template = set
                .get(name)
                .map_err(|e| usage(format!("--prompt {name}: {e}")))?;
            templates.push(template.clone());
        }
    }
    let mut seen = std::collections::HashSet::new();
    templates.retain(|t| seen.insert(t.name.clone()));

    let settings = &manifest.backend.llm;
    let models = if args.llms.is_empty() {
        vec![settings.default_model.clone()]
    } else {
        args.llms.clone()
    };
    let mut configs = Vec::new();
    for model in &models {
        let base = settings
            .config_for(model)
            .with_temperature(args.temp.unwrap_or(0.0));
        configs.extend(sweep_configs(&base, args.temp_sweep));
    }

    Ok(Plan {
        mode,
        targets,
        templates,
        configs,
        flaky_runs: args.runs.unwrap_or(manifest.backend.flaky_runs),
    })
}

fn provider(manifest: &ProjectManifest) -> Result<Box<dyn LlmProvider>> {
    let settings = &manifest.backend.llm;
    let inner: Box<dyn LlmProvider> = match settings.provider {
        ProviderKind::Http => Box::new(HttpProvider::new(settings.http.clone())),
        ProviderKind::Stub => {
            let path = settings
                .stub_script
                .as_deref()
                .context("backend.llm.stub_script is not set")?;
            Box::new(StubProvider::load(path).map_err(|e| usage(e.to_string()))?)
        }
        ProviderKind::Replay => {
            let path = settings
                .cassette
                .as_deref()
                .context("backend.llm.cassette is not set")?;
            if settings.record {
                return Err(usage(
                    "backend.llm.record needs a live provider (http or stub), not replay",
                ));
            }
            Box::new(ReplayProvider::load(path).map_err(|e| usage(e.to_string()))?)
        }
    };
    if settings.record {
        let path = settings
            .cassette
            .as_deref()
            .context("backend.llm.cassette is not set")?;
        return Ok(Box::new(Recorder::new(inner, path)?));
    }
    Ok(inner)
}

fn backend(manifest: &ProjectManifest) -> Result<Box<dyn ExecBackend>> {
    let config = &manifest.backend;
    Ok(match config.kind {
        BackendKind::Command => Box::new(CommandBackend::new(
            &manifest.root,
            config.workdir.as_deref(),
            Duration::from_secs(config.timeout_s),
        )?),
        BackendKind::Mock => {
            let path = config
                .mock_script
                .as_deref()
                .context("backend.mock_script is not set")?;
            Box::new(MockBackend::load(path).map_err(|e| usage(e.to_string()))?)
        }
    })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(
    args: RunArgs,
    mode: RunMode,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<i32> {
    let manifest = load_manifest(&args.manifest)?;
    let plan = plan(&args, mode, &manifest)?;
    let provider = provider(&manifest)?;
    let backend = backend(&manifest)?;

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let telemetry = TelemetryLog::open(&args.out.join("telemetry.jsonl"))?;
    let state_path = args.out.join("state.json");
    let mut state = match mode {
        RunMode::Deployment if state_path.exists() => PipelineState::load(&state_path)?,
        _ => PipelineState::default(),
    };

    let mut all = EnsembleResult::default();
    let mut records = Vec::new();
    let mut diffs = 0usize;
    let mut infra = 0usize;
    let mut rng = StdRng::seed_from_u64(args.seed);

    for target in &plan.targets {
        let mut pipeline = Pipeline::new(&manifest, target, backend.as_ref(), provider.as_ref());
        pipeline.flaky_runs = plan.flaky_runs;
        let mut classes = Vec::new();
        for path in &target.test_class_paths {
            classes.push(
                TestClassInput::load(&manifest, target, path).map_err(|e| usage(e.to_string()))?,
            );
        }
        if args.seed != 0 {
            classes.shuffle(&mut rng);
        }

        let mut target_state = match state.targets.remove(&target.id) {
            Some(mut loaded) => {
                Pipeline::refresh_registry(&mut loaded, &classes);
                loaded
            }
            None => match pipeline.compute_baseline(&classes) {
                Ok(s) => s,
                Err(e) => {
                    infra += 1;
                    let _ = writeln!(stderr, "error: target {}: {e}", target.id);
                    continue;
                }
            },
        };

        let platform_tag = manifest.platform_tag_for(target);
        for class in &classes {
            let result = pipeline.ensemble_run(
                class,
                &plan.templates,
                &plan.configs,
                mode,
                &mut target_state,
                args.jobs,
            );
            for candidate in &result.candidates {
                let record = TrialRecord::from_candidate(
                    candidate,
                    mode,
                    platform_tag.as_deref(),
                    now_timestamp(),
                );
                telemetry.append(&record)?;
                records.push(record);
            }
            if mode == RunMode::Deployment {
                for candidate in result.candidates.iter().filter(|c| c.is_recommended()) {
                    let delta = candidate
                        .delta
                        .as_ref()
                        .expect("accepted candidates carry a delta");
                    let diff = emit_diff(candidate, &class.source, delta)?;
                    write_diff(&args.out.join("diffs"), &diff)?;
                    diffs += 1;
                }
            }
            for note in &result.notes {
                let _ = writeln!(stderr, "note: {note}");
            }
            infra += result.infra_errors();
            all.candidates.extend(result.candidates);
            all.notes.extend(result.notes);
        }

        if mode == RunMode::Deployment {
            state.targets.insert(target.id.clone(), target_state);
            state.save(&state_path)?;
        }
    }

    all.contributions = unique_contributions(&all.candidates);
    write_file(
        &args.out.join("contributions.txt"),
        &render_contributions(&all),
    )?;
    write_file(
        &args.out.join("notes.txt"),
        &all.notes
            .iter()
            .map(|n| format!("{n}\n"))
            .collect::<String>(),
    )?;
    let hints = render_hints(&all.candidates);
    if !hints.is_empty() {
        write_file(&args.out.join("hints.md"), &hints)?;
    }
    let case = funnel_stats(&records, Level::TestCase);
    let class = funnel_stats(&records, Level::TestClass);
    if mode == RunMode::Evaluation {
        write_file(&args.out.join("funnel_test_case.txt"), &case.render())?;
        write_file(&args.out.join("funnel_test_class.txt"), &class.render())?;
        write_file(&args.out.join("sankey.txt"), &sankey_export(&records))?;
        let mut groups = vec!["temperature", "model_id"];
        if records.iter().any(|r| r.platform_tag.is_some()) {
            groups.extend(["platform_tag", "platform_tag,model_id"]);
        }
        for group in groups {
            let table = success_table(&records, group)?;
            write_file(
                &args
                    .out
                    .join(format!("success_by_{}.txt", group.replace(',', "_"))),
                &table.render(),
            )?;
        }
    }

    writeln!(stdout, "{}", class.render().trim_end())?;
    writeln!(stdout, "{}", case.render().trim_end())?;
    if mode == RunMode::Deployment {
        writeln!(stdout, "diffs written: {diffs}")?;
    }
    if infra > 0 {
        writeln!(stderr, "{infra} infrastructure error(s); see telemetry")?;
        return Ok(EXIT_INFRA);
    }
    Ok(EXIT_OK)
}

fn report(args: ReportArgs, stdout: &mut dyn Write) -> Result<i32> {
    let records = read_records(&args.telemetry).map_err(|e| usage(e.to_string()))?;
    let levels: Vec<Level> = match &args.level {
        Some(text) => vec![Level::parse(text)
            .ok_or_else(|| usage(format!("--level {text}: expected test_case or test_class")))?],
        None if args.group_by.is_empty() => vec![Level::TestClass, Level::TestCase],
        None => Vec::new(),
    };
    let groups: Vec<String> = if args.group_by.is_empty() && args.level.is_none() {
        vec!["temperature".to_string()]
    } else {
        args.group_by.clone()
    };
    let mut sections = Vec::new();
    for group in &groups {
        let table =
            success_table(&records, group).map_err(|e| usage(format!("--group-by: {e}")))?;
        sections.push(table.render());
    }
    for level in levels {
        sections.push(funnel_stats(&records, level).render());
    }
    if args.group_by.is_empty() && args.level.is_none() {
        sections.push(sankey_export(&records));
    }
    write!(stdout, "{}", sections.join("\n"))?;
    Ok(EXIT_OK)
}

fn scan(args: ScanArgs, stdout: &mut dyn Write) -> Result<i32> {
    if !args.dir.is_dir() {
        return Err(usage(format!("{} is not a directory", args.dir.display())));
    }
    let value = corpus::scan(&args.dir, &Default::default())?;
    let targets = value["targets"].as_array().map_or(0, Vec::len);
    let text = serde_json::to_string_pretty(&value)? + "\n";
    write_file(&args.manifest, &text)?;
    writeln!(
        stdout,
        "wrote {} with {targets} target(s); fill in build_command, test_command and coverage_artifact",
        args.manifest.display()
    )?;
    Ok(EXIT_OK)
}
