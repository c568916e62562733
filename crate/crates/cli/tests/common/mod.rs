//! Synthetic projects for the CLI tests: classes, a scripted stub model and
//! a scripted mock backend, all written into a temporary directory.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};

use testgen_core::corpus::{load_manifest, ProjectManifest};
use testgen_core::coverage::CoverageMap;
use testgen_core::exec::{MockBackend, MockBehavior, MockRun, MockScript};
use testgen_core::llm::{
    LlmConfig, PromptMatcher, ProviderKind, StubProvider, StubRule, StubScript,
};
use testgen_core::pipeline::{EnsembleResult, Pipeline, RunMode, TestClassInput};
use testgen_core::promptkit::{builtin, PromptTemplate};

pub fn toy_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/toy")
}

pub fn write(dir: &Path, rel: &str, text: &str) -> PathBuf {
    let path = dir.join(rel);
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    fs::write(&path, text).unwrap();
    path
}

/// Runs the CLI in-process and returns (exit code, stdout, stderr).
pub fn cli(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("testgen").chain(args.iter().copied());
    let code = testgen_cli::run_cli_with(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

/// Telemetry lines with the timestamp field removed.
pub fn telemetry_without_timestamps(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|line| {
            let mut v: Value = serde_json::from_str(line).unwrap();
            v.as_object_mut().unwrap().remove("timestamp");
            v
        })
        .collect()
}

/// Every file under `dir`, keyed by relative path.
pub fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(dir)
                    .unwrap()
                    .to_string_lossy()
                    .replace('\\', "/");
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Scenario

/// What the mock backend does with one generated test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fate {
    BuildFails,
    FailsFirstRun,
    /// Passes `n` runs, then fails.
    FlakyAfter(usize),
    /// Passes but covers only baseline lines.
    NoGain,
    /// Passes and covers one extra line of the class under test.
    Gains(u32),
}

impl Fate {
    pub fn accepted(self) -> bool {
        matches!(self, Fate::Gains(_))
    }
}

#[derive(Debug, Clone)]
pub struct Item {
    pub name: String,
    /// Second name under which the same body may be emitted.
    pub alt_name: String,
    pub statements: Vec<String>,
    pub fate: Fate,
    pub asserts: bool,
}

impl Item {
    /// The test function. `variant` re-spaces the body without changing
    /// its normalized form.
    pub fn render(&self, alt: bool, variant: bool) -> String {
        let name = if alt { &self.alt_name } else { &self.name };
        let mut out = format!("    @Test\n    fun {name}() {{\n");
        for s in &self.statements {
            if variant {
                out.push_str(&format!("\n            {}\n", s.replacen(", ", ",   ", 1)));
            } else {
                out.push_str(&format!("        {s}\n"));
            }
        }
        out.push_str("    }\n");
        out
    }

    /// Whether an accepted candidate of this item counts as a recommended test.
    pub fn recommended(&self) -> bool {
        self.fate.accepted() && self.asserts
    }
}

#[derive(Debug, Clone)]
pub struct ClassSpec {
    pub name: String,
    pub subject: String,
    pub existing: Vec<Item>,
    pub items: Vec<Item>,
}

impl ClassSpec {
    pub fn test_path(&self) -> String {
        format!("tests/{}.kt", self.name)
    }

    pub fn cut_path(&self) -> String {
        format!("src/{}.kt", self.subject)
    }

    pub fn text(&self) -> String {
        let mut out = format!(
            "package synthetic\n\nimport org.junit.Test\n\nclass {} {{\n",
            self.name
        );
        for (i, t) in self.existing.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(&t.render(false, false));
        }
        out.push_str("}\n");
        out
    }

    pub fn cut_text(&self) -> String {
        let mut out = format!("class {} {{\n", self.subject);
        for line in 1..=40 {
            out.push_str(&format!("    fun f{line}() = {line}\n"));
        }
        out.push_str("}\n");
        out
    }

    /// The model's reply: the original class with `picks` appended.
    pub fn response(&self, picks: &[Pick]) -> String {
        let mut body = self.text();
        body.truncate(body.trim_end().len() - 1);
        for p in picks {
            let item = &self.items[p.item];
            body.push('\n');
            body.push_str(&item.render(p.alt, p.variant));
        }
        body.push_str("}\n");
        format!("Here is the extended class:\n\n```kotlin\n{body}```\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pick {
    pub item: usize,
    pub alt: bool,
    pub variant: bool,
}

impl Pick {
    pub fn plain(item: usize) -> Self {
        Self {
            item,
            alt: false,
            variant: false,
        }
    }
}

/// Key of one trial: (class index, model id, template name).
pub type TrialKey = (usize, String, String);

#[derive(Debug, Clone)]
pub struct Scenario {
    pub classes: Vec<ClassSpec>,
    pub models: Vec<String>,
    pub templates: Vec<String>,
    pub picks: BTreeMap<TrialKey, Vec<Pick>>,
}

fn item(class: usize, index: usize, prefix: &str, fate: Fate, asserts: bool) -> Item {
    let name = format!("{prefix}{class}x{index}");
    let call = format!("S{class}().f{}()", index + 1);
    let statements = if asserts {
        vec![format!("assertEquals({}, {call})", index + 1)]
    } else {
        vec![
            format!("val r = {call}"),
            "// TODO: assert on r".to_string(),
        ]
    };
    Item {
        alt_name: format!("{name}Alt"),
        name,
        statements,
        fate,
        asserts,
    }
}

fn class_spec(c: usize, items: Vec<Item>) -> ClassSpec {
    ClassSpec {
        name: format!("S{c}Test"),
        subject: format!("S{c}"),
        existing: vec![item(c, 0, "existing", Fate::NoGain, true)],
        items,
    }
}

impl Scenario {
    /// `n` classes with one candidate each: the first `improving` gain
    /// coverage, the next `reliable - improving` pass without gain, the next
    /// `built - reliable` alternate between failing the first run and being
    /// flaky, and the rest do not build.
    pub fn funnel(n: usize, built: usize, reliable: usize, improving: usize) -> Self {
        let classes = (0..n)
            .map(|c| {
                let fate = if c < improving {
                    Fate::Gains(2)
                } else if c < reliable {
                    Fate::NoGain
                } else if c < built {
                    if (c - reliable) % 2 == 0 {
                        Fate::FailsFirstRun
                    } else {
                        Fate::FlakyAfter(2)
                    }
                } else {
                    Fate::BuildFails
                };
                class_spec(c, vec![item(c, 1, "gen", fate, true)])
            })
            .collect();
        let mut s = Self {
            classes,
            models: vec!["LLM2".into()],
            templates: vec!["extend_coverage".into()],
            picks: BTreeMap::new(),
        };
        for c in 0..n {
            s.picks.insert(
                (c, "LLM2".into(), "extend_coverage".into()),
                vec![Pick::plain(0)],
            );
        }
        s
    }

    /// Random pools of candidates per class and random picks per trial.
    pub fn random(
        seed: u64,
        classes: usize,
        pool: usize,
        models: &[&str],
        templates: &[&str],
    ) -> Self {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut specs = Vec::new();
        for c in 0..classes {
            let items = (0..pool)
                .map(|k| {
                    let fate = match rng.gen_range(0..10) {
                        0 => Fate::BuildFails,
                        1 => Fate::FailsFirstRun,
                        2 => Fate::FlakyAfter(rng.gen_range(1..5)),
                        3 | 4 => Fate::NoGain,
                        _ => Fate::Gains(2 + k as u32),
                    };
                    item(c, k + 1, "gen", fate, rng.gen_range(0..10) != 0)
                })
                .collect();
            specs.push(class_spec(c, items));
        }
        let mut picks = BTreeMap::new();
        for c in 0..classes {
            for m in models {
                for t in templates {
                    let mut chosen = Vec::new();
                    for k in 0..pool {
                        if rng.gen_bool(0.35) {
                            chosen.push(Pick {
                                item: k,
                                alt: rng.gen_bool(0.3),
                                variant: rng.gen_bool(0.3),
                            });
                        }
                    }
                    picks.insert((c, m.to_string(), t.to_string()), chosen);
                }
            }
        }
        Self {
            classes: specs,
            models: models.iter().map(|m| m.to_string()).collect(),
            templates: templates.iter().map(|t| t.to_string()).collect(),
            picks,
        }
    }

    pub fn mock_script(&self) -> MockScript {
        let mut script = MockScript::default();
        for class in &self.classes {
            let cut = class.cut_path();
            let covers = |lines: &[u32]| CoverageMap::from_files([(cut.clone(), lines.to_vec())]);
            for t in &class.existing {
                script.tests.insert(
                    t.name.clone(),
                    MockBehavior {
                        coverage: covers(&[1]),
                        ..MockBehavior::default()
                    },
                );
            }
            for item in &class.items {
                let behavior = match item.fate {
                    Fate::BuildFails => MockBehavior {
                        build: false,
                        build_stderr: format!("error: unresolved reference in {}", item.name),
                        ..MockBehavior::default()
                    },
                    Fate::FailsFirstRun => MockBehavior {
                        runs: vec![MockRun::Fail],
                        ..MockBehavior::default()
                    },
                    Fate::FlakyAfter(n) => {
                        let mut runs = vec![MockRun::Pass; n];
                        runs.push(MockRun::Fail);
                        MockBehavior {
                            runs,
                            coverage: covers(&[1]),
                            ..MockBehavior::default()
                        }
                    }
                    Fate::NoGain => MockBehavior {
                        coverage: covers(&[1]),
                        ..MockBehavior::default()
                    },
                    Fate::Gains(line) => MockBehavior {
                        coverage: covers(&[1, line]),
                        ..MockBehavior::default()
                    },
                };
                script.tests.insert(item.name.clone(), behavior.clone());
                script.tests.insert(item.alt_name.clone(), behavior);
            }
        }
        script
    }

    pub fn template(name: &str) -> PromptTemplate {
        builtin(name).unwrap()
    }

    pub fn stub_script(&self) -> StubScript {
        let mut rules = Vec::new();
        for ((c, model, template), picks) in &self.picks {
            let class = &self.classes[*c];
            let prompt = Self::template(template)
                .render(&class.text(), Some(&class.cut_text()))
                .unwrap();
            rules.push(StubRule {
                matcher: PromptMatcher::Exact(prompt),
                model_id: Some(model.clone()),
                temperature: None,
                responses: vec![class.response(picks)],
            });
        }
        StubScript { rules }
    }

    /// Writes sources, scripts and a manifest whose model section is `llm`.
    pub fn write(&self, dir: &Path, llm: Value) -> PathBuf {
        for class in &self.classes {
            write(dir, &class.test_path(), &class.text());
            write(dir, &class.cut_path(), &class.cut_text());
        }
        write(
            dir,
            "mock.json",
            &serde_json::to_string_pretty(&self.mock_script()).unwrap(),
        );
        write(
            dir,
            "stub.json",
            &serde_json::to_string_pretty(&self.stub_script()).unwrap(),
        );
        let manifest = json!({
            "root": ".",
            "platform_tag": "synthetic",
            "backend": {"kind": "mock", "mock_script": "mock.json", "llm": llm},
            "targets": [{
                "id": "synthetic",
                "test_classes": self.classes.iter().map(ClassSpec::test_path).collect::<Vec<_>>(),
                "class_under_test": self.classes.iter()
                    .map(|c| (c.test_path(), Value::String(c.cut_path())))
                    .collect::<serde_json::Map<_, _>>(),
            }]
        });
        write(
            dir,
            "manifest.json",
            &serde_json::to_string_pretty(&manifest).unwrap(),
        )
    }

    pub fn stub_llm() -> Value {
        json!({"provider": "stub", "stub_script": "stub.json", "default_model": "LLM2"})
    }

    pub fn configs(&self) -> Vec<LlmConfig> {
        self.models
            .iter()
            .map(|m| LlmConfig::new(m.clone(), ProviderKind::Stub))
            .collect()
    }

    pub fn templates(&self) -> Vec<PromptTemplate> {
        self.templates.iter().map(|t| Self::template(t)).collect()
    }

    /// Runs every class through the pipeline in-process.
    pub fn run(
        &self,
        dir: &Path,
        mode: RunMode,
        jobs: usize,
    ) -> (Vec<EnsembleResult>, MockBackend) {
        let manifest_path = self.write(dir, Self::stub_llm());
        let manifest: ProjectManifest = load_manifest(&manifest_path).unwrap();
        let backend = MockBackend::new(self.mock_script());
        let provider = StubProvider::new(self.stub_script());
        let target = &manifest.targets[0];
        let pipeline = Pipeline::new(&manifest, target, &backend, &provider);
        let classes: Vec<_> = target
            .test_class_paths
            .iter()
            .map(|p| TestClassInput::load(&manifest, target, p).unwrap())
            .collect();
        let mut state = pipeline.compute_baseline(&classes).unwrap();
        let (templates, configs) = (self.templates(), self.configs());
        let results = classes
            .iter()
            .map(|class| pipeline.ensemble_run(class, &templates, &configs, mode, &mut state, jobs))
            .collect();
        (results, backend)
    }

    /// Evaluation-mode (accepted, unique) per (model, template), derived from
    /// the script alone: a pick is accepted iff its item's fate gains
    /// coverage, and unique iff no other pair accepted the same item.
    pub fn expected_contributions(&self) -> BTreeMap<(String, String), (usize, usize)> {
        let mut accepted: BTreeMap<(String, String), BTreeSet<(usize, usize)>> = BTreeMap::new();
        for m in &self.models {
            for t in &self.templates {
                accepted.entry((m.clone(), t.clone())).or_default();
            }
        }
        for ((c, m, t), picks) in &self.picks {
            let set = accepted.entry((m.clone(), t.clone())).or_default();
            for p in picks {
                if self.classes[*c].items[p.item].recommended() {
                    set.insert((*c, p.item));
                }
            }
        }
        accepted
            .iter()
            .map(|(pair, set)| {
                let unique = set
                    .iter()
                    .filter(|i| {
                        accepted
                            .iter()
                            .all(|(other, s)| other == pair || !s.contains(i))
                    })
                    .count();
                (pair.clone(), (set.len(), unique))
            })
            .collect()
    }
}
