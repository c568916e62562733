//! The project under improvement: build targets, their test classes and
//! classes under test, loaded from an explicit JSON manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::coverage::LineSet;
use crate::dialect::{parse_test_class, DialectConfig, DialectError, TestCase};
use crate::exec::{BackendConfig, BackendKind};
use crate::llm::ProviderKind;
use crate::promptkit::PromptTemplate;

const TOP_KEYS: &[&str] = &[
    "root",
    "platform_tag",
    "dialect",
    "backend",
    "prompts",
    "targets",
];
const BACKEND_KEYS: &[&str] = &[
    "kind",
    "build_command",
    "test_command",
    "coverage_artifact",
    "flaky_runs",
    "workdir",
    "timeout_s",
    "mock_script",
    "integration_threshold",
    "llm",
];
const LLM_KEYS: &[&str] = &[
    "provider",
    "default_model",
    "max_tokens",
    "samples_per_prompt",
    "endpoint",
    "api_key_env",
    "timeout_s",
    "max_attempts",
    "backoff_ms",
    "stub_script",
    "cassette",
    "record",
];
const DIALECT_KEYS: &[&str] = &[
    "test_marker",
    "class_keyword",
    "function_keyword",
    "assertion_tokens",
    "todo_token",
];
const TARGET_KEYS: &[&str] = &[
    "id",
    "test_classes",
    "class_under_test",
    "build_command",
    "test_command",
    "coverage_artifact",
    "method_spans",
    "platform_tag",
];

/// Line span of one method of a class under test, used to decide whether a
/// partially covered method deserves a follow-up prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodSpan {
    pub name: String,
    pub lines: LineSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildTarget {
    pub id: String,
    /// Absolute paths, in manifest order.
    pub test_class_paths: Vec<PathBuf>,
    /// Test class path to class-under-test path, both absolute.
    pub class_under_test_paths: BTreeMap<PathBuf, PathBuf>,
    pub build_command: String,
    pub test_command: String,
    pub coverage_artifact: String,
    /// Keyed by root-relative class-under-test path.
    pub method_spans: BTreeMap<String, Vec<MethodSpan>>,
    pub platform_tag: Option<String>,
}

impl BuildTarget {
    pub fn class_under_test(&self, test_class: &Path) -> Option<&Path> {
        self.class_under_test_paths
            .get(test_class)
            .map(PathBuf::as_path)
    }
}

#[derive(Debug, Clone)]
pub struct ProjectManifest {
    pub manifest_path: PathBuf,
    pub root: PathBuf,
    pub targets: Vec<BuildTarget>,
    pub dialect: DialectConfig,
    pub backend: BackendConfig,
    pub platform_tag: Option<String>,
    pub prompts: Vec<PromptTemplate>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaIssue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for SchemaIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

fn join_lines<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(|i| format!("\n  {i}")).collect()
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{path} is not valid JSON: {message}")]
    Json { path: PathBuf, message: String },
    #[error("manifest has {} problem(s):{}", .0.len(), join_lines(.0))]
    SchemaError(Vec<SchemaIssue>),
    #[error("manifest references missing file(s):{}", join_lines(&.0.iter().map(|p| p.display()).collect::<Vec<_>>()))]
    MissingFile(Vec<PathBuf>),
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: DialectError },
}

impl ProjectManifest {
    /// Path relative to the project root, with `/` separators. Used as the
    /// stable key in telemetry, state and scratch workspaces.
    pub fn relative(&self, path: &Path) -> String {
        let rel = path.strip_prefix(&self.root).unwrap_or(path);
        rel.components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/")
    }

    pub fn target(&self, id: &str) -> Option<&BuildTarget> {
        self.targets.iter().find(|t| t.id == id)
    }

    pub fn platform_tag_for(&self, target: &BuildTarget) -> Option<String> {
        target
            .platform_tag
            .clone()
            .or_else(|| self.platform_tag.clone())
    }

    /// Every existing test case of `target`, in class order then source order.
    pub fn baseline_tests(
        &self,
        target: &BuildTarget,
    ) -> Result<Vec<(PathBuf, TestCase)>, CorpusError> {
        let mut out = Vec::new();
        for path in &target.test_class_paths {
            let text = read(path)?;
            let source =
                parse_test_class(&text, &self.dialect).map_err(|source| CorpusError::Parse {
                    path: path.clone(),
                    source,
                })?;
            out.extend(source.test_cases.into_iter().map(|t| (path.clone(), t)));
        }
        Ok(out)
    }
}

fn read(path: &Path) -> Result<String, CorpusError> {
    std::fs::read_to_string(path).map_err(|e| CorpusError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Lexically resolves `.` and `..` so equal paths compare equal.
fn clean(path: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for component in path.components() {
        match component {
            Component::CurDir => {}
            Component::ParentDir => {
                if !out.pop() {
                    out.push("..");
                }
            }
            other => out.push(other.as_os_str()),
        }
    }
    out
}

fn absolute(base: &Path, path: &Path) -> PathBuf {
    let joined = if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    };
    clean(&std::path::absolute(&joined).unwrap_or(joined))
}

pub fn load_manifest(path: &Path) -> Result<ProjectManifest, CorpusError> {
    let text = read(path)?;
    let value: Value = serde_json::from_str(&text).map_err(|e| CorpusError::Json {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let base = absolute(Path::new("."), path.parent().unwrap_or(Path::new(".")));
    manifest_from_value(&value, &base, &absolute(Path::new("."), path))
}

/// Validates and resolves an already-parsed manifest. Relative paths are
/// resolved against `base`.
pub fn manifest_from_value(
    value: &Value,
    base: &Path,
    manifest_path: &Path,
) -> Result<ProjectManifest, CorpusError> {
    let mut v = Validator::default();
    let Some(top) = v.object(value, "$") else {
        return Err(CorpusError::SchemaError(v.issues));
    };
    v.known_keys(top, "$", TOP_KEYS);
    let root_rel = v
        .opt_string(top, "$", "root")
        .unwrap_or_else(|| ".".to_string());
    let platform_tag = v.opt_string(top, "$", "platform_tag");

    let dialect = match top.get("dialect") {
        None => DialectConfig::default(),
        Some(d) => {
            if let Some(obj) = v.object(d, "dialect") {
                v.known_keys(obj, "dialect", DIALECT_KEYS);
            }
            v.typed(d, "dialect").unwrap_or_default()
        }
    };

    let backend = match top.get("backend") {
        None => BackendConfig::default(),
        Some(b) => {
            if let Some(obj) = v.object(b, "backend") {
                v.known_keys(obj, "backend", BACKEND_KEYS);
                if let Some(llm) = obj.get("llm").and_then(|l| v.object(l, "backend.llm")) {
                    v.known_keys(llm, "backend.llm", LLM_KEYS);
                }
            }
            v.typed::<BackendConfig>(b, "backend").unwrap_or_default()
        }
    };
    if backend.flaky_runs < 1 {
        v.issue("backend.flaky_runs", "must be at least 1");
    }
    if backend.timeout_s < 1 {
        v.issue("backend.timeout_s", "must be at least 1");
    }
    if !(backend.integration_threshold > 0.0 && backend.integration_threshold <= 1.0) {
        v.issue("backend.integration_threshold", "must be in (0, 1]");
    }
    if backend.kind == BackendKind::Mock && backend.mock_script.is_none() {
        v.issue("backend.mock_script", "required when kind is mock");
    }
    if backend.llm.samples_per_prompt < 1 {
        v.issue("backend.llm.samples_per_prompt", "must be at least 1");
    }
    match backend.llm.provider {
        ProviderKind::Stub if backend.llm.stub_script.is_none() => {
            v.issue("backend.llm.stub_script", "required when provider is stub")
        }
        ProviderKind::Replay if backend.llm.cassette.is_none() => {
            v.issue("backend.llm.cassette", "required when provider is replay")
        }
        _ if backend.llm.record && backend.llm.cassette.is_none() => {
            v.issue("backend.llm.cassette", "required when record is set")
        }
        _ => {}
    }

    let mut prompts = Vec::new();
    if let Some(list) = top.get("prompts") {
        for (i, item) in v.array(list, "prompts").iter().enumerate() {
            let at = format!("prompts[{i}]");
            let Some(obj) = v.object(item, &at) else {
                continue;
            };
            v.known_keys(obj, &at, &["name", "template_text"]);
            let name = v.req_string(obj, &at, "name");
            let text = v.req_string(obj, &at, "template_text");
            if let (Some(name), Some(text)) = (name, text) {
                if prompts.iter().any(|p: &PromptTemplate| p.name == name) {
                    v.issue(
                        &format!("{at}.name"),
                        format!("duplicate template `{name}`"),
                    );
                }
                match PromptTemplate::custom(&name, &text) {
                    Ok(t) => prompts.push(t),
                    Err(e) => v.issue(&at, e.to_string()),
                }
            }
        }
    }

    let root = absolute(base, Path::new(&root_rel));
    let mut targets = Vec::new();
    match top.get("targets") {
        None => v.issue("$.targets", "required"),
        Some(list) => {
            let items = v.array(list, "targets");
            if items.is_empty() && list.is_array() {
                v.issue("targets", "must list at least one target");
            }
            let mut ids = BTreeSet::new();
            let mut owners: BTreeMap<PathBuf, String> = BTreeMap::new();
            for (i, item) in items.iter().enumerate() {
                if let Some(t) = target(&mut v, item, i, &root, &backend) {
                    if !ids.insert(t.id.clone()) {
                        v.issue(
                            &format!("targets[{i}].id"),
                            format!("duplicate id `{}`", t.id),
                        );
                    }
                    for (j, path) in t.test_class_paths.iter().enumerate() {
                        if let Some(owner) = owners.insert(path.clone(), t.id.clone()) {
                            v.issue(
                                &format!("targets[{i}].test_classes[{j}]"),
                                format!("already belongs to target `{owner}`"),
                            );
                        }
                    }
                    targets.push(t);
                }
            }
        }
    }
    if !v.issues.is_empty() {
        return Err(CorpusError::SchemaError(v.issues));
    }

    let mut backend = backend;
    let resolve = |p: &mut Option<PathBuf>| {
        if let Some(path) = p.as_mut() {
            *path = absolute(base, path);
        }
    };
    resolve(&mut backend.workdir);
    resolve(&mut backend.mock_script);
    resolve(&mut backend.llm.stub_script);
    resolve(&mut backend.llm.cassette);

    let mut required: Vec<PathBuf> = Vec::new();
    for t in &targets {
        required.extend(t.test_class_paths.iter().cloned());
        required.extend(t.class_under_test_paths.values().cloned());
    }
    if backend.kind == BackendKind::Mock {
        required.extend(backend.mock_script.clone());
    }
    match backend.llm.provider {
        ProviderKind::Stub => required.extend(backend.llm.stub_script.clone()),
        ProviderKind::Replay if !backend.llm.record => {
            required.extend(backend.llm.cassette.clone())
        }
        _ => {}
    }
    let mut missing: Vec<PathBuf> = required.into_iter().filter(|p| !p.is_file()).collect();
    missing.dedup();
    if !missing.is_empty() {
        return Err(CorpusError::MissingFile(missing));
    }

    Ok(ProjectManifest {
        manifest_path: manifest_path.to_path_buf(),
        root,
        targets,
        dialect,
        backend,
        platform_tag,
        prompts,
    })
}

fn target(
    v: &mut Validator,
    item: &Value,
    index: usize,
    root: &Path,
    backend: &BackendConfig,
) -> Option<BuildTarget> {
    let at = format!("targets[{index}]");
    let obj = v.object(item, &at)?;
    v.known_keys(obj, &at, TARGET_KEYS);
    let id = v.req_string(obj, &at, "id");
    if id.as_deref() == Some("") {
        v.issue(&format!("{at}.id"), "must not be empty");
    }

    let mut rel_classes = Vec::new();
    match obj.get("test_classes") {
        None => v.issue(&format!("{at}.test_classes"), "required"),
        Some(list) => {
            let path = format!("{at}.test_classes");
            let items = v.array(list, &path);
            if list.is_array() && items.is_empty() {
                v.issue(&path, "must list at least one test class");
            }
            for (j, entry) in items.iter().enumerate() {
                match entry.as_str() {
                    Some(s) if !s.is_empty() => rel_classes.push(s.to_string()),
                    _ => v.issue(&format!("{path}[{j}]"), "must be a non-empty string"),
                }
            }
        }
    }
    let test_class_paths: Vec<PathBuf> = rel_classes
        .iter()
        .map(|p| absolute(root, Path::new(p)))
        .collect();
    for (j, path) in test_class_paths.iter().enumerate() {
        if test_class_paths[..j].contains(path) {
            v.issue(&format!("{at}.test_classes[{j}]"), "listed twice");
        }
    }

    let mut class_under_test_paths = BTreeMap::new();
    if let Some(map) = obj.get("class_under_test") {
        let path = format!("{at}.class_under_test");
        if let Some(map) = v.object(map, &path) {
            for (key, value) in map {
                let key_path = absolute(root, Path::new(key));
                if !test_class_paths.contains(&key_path) {
                    v.issue(
                        &format!("{path}.{key}"),
                        "is not one of the target's test_classes",
                    );
                }
                match value.as_str() {
                    Some(s) if !s.is_empty() => {
                        class_under_test_paths.insert(key_path, absolute(root, Path::new(s)));
                    }
                    _ => v.issue(&format!("{path}.{key}"), "must be a non-empty string"),
                }
            }
        }
    }

    let mut command = |field: &str, fallback: &str| -> String {
        let own = v.opt_string(obj, &at, field);
        let value = own.unwrap_or_else(|| fallback.to_string());
        if backend.kind == BackendKind::Command && value.trim().is_empty() {
            v.issue(
                &format!("{at}.{field}"),
                "required (set it on the target or in backend)",
            );
        }
        value
    };
    let build_command = command("build_command", &backend.build_command);
    let test_command = command("test_command", &backend.test_command);
    let coverage_artifact = command("coverage_artifact", &backend.coverage_artifact);
    if backend.kind == BackendKind::Command
        && !test_command.is_empty()
        && !test_command.contains("{test_name}")
    {
        v.issue(
            &format!("{at}.test_command"),
            "must contain the {test_name} placeholder",
        );
    }

    let mut method_spans = BTreeMap::new();
    if let Some(spans) = obj.get("method_spans") {
        let path = format!("{at}.method_spans");
        if let Some(map) = v.object(spans, &path) {
            for (file, list) in map {
                let file_path = format!("{path}.{file}");
                let mut parsed = Vec::new();
                for (k, span) in v.array(list, &file_path).iter().enumerate() {
                    if let Some(s) = method_span(v, span, &format!("{file_path}[{k}]")) {
                        parsed.push(s);
                    }
                }
                let key = absolute(root, Path::new(file));
                let key = key
                    .strip_prefix(root)
                    .unwrap_or(&key)
                    .to_string_lossy()
                    .replace('\\', "/");
                method_spans.insert(key, parsed);
            }
        }
    }

    let platform_tag = v.opt_string(obj, &at, "platform_tag");
    Some(BuildTarget {
        id: id?,
        test_class_paths,
        class_under_test_paths,
        build_command,
        test_command,
        coverage_artifact,
        method_spans,
        platform_tag,
    })
}

fn method_span(v: &mut Validator, value: &Value, at: &str) -> Option<MethodSpan> {
    let obj = v.object(value, at)?;
    v.known_keys(obj, at, &["name", "lines", "start", "end"]);
    let name = v.req_string(obj, at, "name")?;
    if let Some(lines) = obj.get("lines") {
        let lines: Option<LineSet> = v.typed(lines, &format!("{at}.lines"));
        return lines.map(|lines| MethodSpan { name, lines });
    }
    let start = obj.get("start").and_then(Value::as_u64);
    let end = obj.get("end").and_then(Value::as_u64);
    match (start, end) {
        (Some(s), Some(e)) if s >= 1 && s <= e && e <= u64::from(u32::MAX) => Some(MethodSpan {
            name,
            lines: (s as u32..=e as u32).collect(),
        }),
        _ => {
            v.issue(at, "needs `lines` or positive integers `start` <= `end`");
            None
        }
    }
}

#[derive(Default)]
struct Validator {
    issues: Vec<SchemaIssue>,
}

impl Validator {
    fn issue(&mut self, path: &str, message: impl Into<String>) {
        let path = if path == "$" || path.starts_with("$.") {
            path.to_string()
        } else {
            format!("$.{path}")
        };
        self.issues.push(SchemaIssue {
            path,
            message: message.into(),
        });
    }

    fn object<'a>(&mut self, value: &'a Value, path: &str) -> Option<&'a Map<String, Value>> {
        let obj = value.as_object();
        if obj.is_none() {
            self.issue(path, "must be an object");
        }
        obj
    }

    /// The array's items; empty (with an issue recorded) for non-arrays.
    fn array<'a>(&mut self, value: &'a Value, path: &str) -> &'a [Value] {
        match value.as_array() {
            Some(list) => list,
            None => {
                self.issue(path, "must be an array");
                &[]
            }
        }
    }

    fn known_keys(&mut self, obj: &Map<String, Value>, path: &str, known: &[&str]) {
        for key in obj.keys() {
            if !known.contains(&key.as_str()) {
                self.issue(&format!("{path}.{key}"), "unknown field");
            }
        }
    }

    fn opt_string(&mut self, obj: &Map<String, Value>, path: &str, key: &str) -> Option<String> {
        match obj.get(key)? {
            Value::String(s) => Some(s.clone()),
            _ => {
                self.issue(&format!("{path}.{key}"), "must be a string");
                None
            }
        }
    }

    fn req_string(&mut self, obj: &Map<String, Value>, path: &str, key: &str) -> Option<String> {
        if !obj.contains_key(key) {
            self.issue(&format!("{path}.{key}"), "required");
            return None;
        }
        self.opt_string(obj, path, key)
    }

    fn typed<T: serde::de::DeserializeOwned>(&mut self, value: &Value, path: &str) -> Option<T> {
        match serde_json::from_value(value.clone()) {
            Ok(t) => Some(t),
            Err(e) => {
                self.issue(path, e.to_string());
                None
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Scan

const SKIPPED_DIRS: &[&str] = &["target", "node_modules", "build", "out"];

fn is_test_stem(stem: &str) -> bool {
    stem.len() > 4 && (stem.ends_with("Test") || stem.ends_with("Tests"))
}

fn walk(dir: &Path, files: &mut Vec<PathBuf>) -> std::io::Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let name = entry.file_name().to_string_lossy().into_owned();
        let path = entry.path();
        let kind = entry.file_type()?;
        if kind.is_dir() {
            if !name.starts_with('.') && !SKIPPED_DIRS.contains(&name.as_str()) {
                walk(&path, files)?;
            }
        } else if kind.is_file() {
            files.push(path);
        }
    }
    Ok(())
}

/// Drafts a manifest for `dir`: one target per directory holding `*Test`
/// files that parse as test classes, with a class-under-test mapping where
/// exactly one `Foo.<ext>` matches `FooTest.<ext>`. Commands are left empty
/// for the user to fill in.
pub fn scan(dir: &Path, dialect: &DialectConfig) -> Result<Value, CorpusError> {
    let io = |e: std::io::Error| CorpusError::Io {
        path: dir.to_path_buf(),
        message: e.to_string(),
    };
    let mut files = Vec::new();
    walk(dir, &mut files).map_err(io)?;
    let rel = |p: &Path| -> String {
        p.strip_prefix(dir)
            .unwrap_or(p)
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/")
    };

    let mut by_dir: BTreeMap<String, Vec<&PathBuf>> = BTreeMap::new();
    for file in &files {
        let stem = file
            .file_stem()
            .map(|s| s.to_string_lossy())
            .unwrap_or_default();
        if !is_test_stem(&stem) {
            continue;
        }
        let Ok(text) = std::fs::read_to_string(file) else {
            continue;
        };
        if parse_test_class(&text, dialect).is_err() {
            continue;
        }
        let parent = file.parent().map(rel).unwrap_or_default();
        by_dir.entry(parent).or_default().push(file);
    }

    let mut targets = Vec::new();
    for (parent, classes) in by_dir {
        let mut cut = Map::new();
        for class in &classes {
            let stem = class.file_stem().unwrap_or_default().to_string_lossy();
            let subject = stem.trim_end_matches('s').trim_end_matches("Test");
            let wanted = match class.extension() {
                Some(ext) => format!("{subject}.{}", ext.to_string_lossy()),
                None => subject.to_string(),
            };
            let matches: Vec<_> = files
                .iter()
                .filter(|f| {
                    f.file_name()
                        .map(|n| n.to_string_lossy() == wanted)
                        .unwrap_or(false)
                })
                .collect();
            if let [only] = matches.as_slice() {
                cut.insert(rel(class), Value::String(rel(only)));
            }
        }
        let id = if parent.is_empty() {
            "root".to_string()
        } else {
            parent
        };
        targets.push(json!({
            "id": id,
            "test_classes": classes.iter().map(|c| rel(c)).collect::<Vec<_>>(),
            "class_under_test": cut,
            "build_command": "",
            "test_command": "",
            "coverage_artifact": "",
        }));
    }

    Ok(json!({
        "root": dir.to_string_lossy(),
        "dialect": dialect,
        "backend": {"kind": "command"},
        "targets": targets,
    }))
}
