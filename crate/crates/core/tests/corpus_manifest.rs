use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;
use testgen_core::corpus::{load_manifest, scan, CorpusError};
use testgen_core::dialect::DialectConfig;

fn write(dir: &Path, rel: &str, text: &str) -> PathBuf {
    let path = dir.join(rel);
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    fs::write(&path, text).unwrap();
    path
}

fn class(name: &str, tests: &[&str]) -> String {
    let mut out = format!("package demo\n\nimport org.junit.Test\n\nclass {name} {{\n");
    for t in tests {
        out.push_str(&format!(
            "\n    @Test\n    fun {t}() {{\n        if (ready) {{ go() }}\n        assertTrue(\"{t}\".isNotEmpty())\n    }}\n"
        ));
    }
    out.push_str("\n    private fun helper() {\n        println(\"not a test\")\n    }\n}\n");
    out
}

fn mock_backend() -> serde_json::Value {
    json!({"kind": "mock", "mock_script": "mock.json"})
}

fn write_manifest(dir: &Path, manifest: serde_json::Value) -> PathBuf {
    write(dir, "mock.json", "{}");
    write(
        dir,
        "testgen.json",
        &serde_json::to_string_pretty(&manifest).unwrap(),
    )
}

#[test]
fn minimal_manifest_loads_with_absolute_paths() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "src/test/FooTest.kt", &class("FooTest", &["a"]));
    let path = write_manifest(
        dir.path(),
        json!({
            "backend": mock_backend(),
            "targets": [{"id": "foo", "test_classes": ["src/test/FooTest.kt"]}]
        }),
    );
    let m = load_manifest(&path).unwrap();
    assert_eq!(m.targets.len(), 1);
    let t = &m.targets[0];
    assert_eq!(t.id, "foo");
    assert!(t.test_class_paths[0].is_absolute());
    assert!(t.test_class_paths[0].exists());
    assert_eq!(m.relative(&t.test_class_paths[0]), "src/test/FooTest.kt");
    assert_eq!(m.backend.flaky_runs, 5);
    assert_eq!(m.dialect, DialectConfig::default());
}

#[test]
fn nonexistent_test_class_is_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_manifest(
        dir.path(),
        json!({
            "backend": mock_backend(),
            "targets": [{"id": "foo", "test_classes": ["GhostTest.kt"]}]
        }),
    );
    match load_manifest(&path) {
        Err(CorpusError::MissingFile(paths)) => {
            assert_eq!(paths, [dir.path().join("GhostTest.kt")]);
        }
        other => panic!("expected MissingFile, got {other:?}"),
    }
}

#[test]
fn test_class_in_two_targets_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "ATest.kt", &class("ATest", &["a"]));
    let path = write_manifest(
        dir.path(),
        json!({
            "backend": mock_backend(),
            "targets": [
                {"id": "x", "test_classes": ["ATest.kt"]},
                {"id": "y", "test_classes": ["./ATest.kt"]}
            ]
        }),
    );
    assert!(matches!(
        load_manifest(&path),
        Err(CorpusError::SchemaError(_))
    ));
}

#[test]
fn targets_sharing_a_directory_have_disjoint_baselines() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "pkg/ATest.kt", &class("ATest", &["a1", "a2"]));
    write(
        dir.path(),
        "pkg/BTest.kt",
        &class("BTest", &["b1", "b2", "b3"]),
    );
    let path = write_manifest(
        dir.path(),
        json!({
            "backend": mock_backend(),
            "targets": [
                {"id": "left", "test_classes": ["pkg/ATest.kt"]},
                {"id": "right", "test_classes": ["pkg/BTest.kt"]}
            ]
        }),
    );
    let m = load_manifest(&path).unwrap();
    let names = |id: &str| -> BTreeSet<String> {
        m.baseline_tests(m.target(id).unwrap())
            .unwrap()
            .into_iter()
            .map(|(p, t)| format!("{}::{}", m.relative(&p), t.name))
            .collect()
    };
    let (left, right) = (names("left"), names("right"));
    assert_eq!(left.len(), 2);
    assert_eq!(right.len(), 3);
    assert!(left.is_disjoint(&right));
}

#[test]
fn baseline_counts() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "ATest.kt", &class("ATest", &["a1", "a2"]));
    write(dir.path(), "BTest.kt", &class("BTest", &["b1", "b2", "b3"]));
    write(dir.path(), "empty/EmptyTest.kt", &class("EmptyTest", &[]));
    let path = write_manifest(
        dir.path(),
        json!({
            "backend": mock_backend(),
            "targets": [
                {"id": "ab", "test_classes": ["ATest.kt", "BTest.kt"]},
                {"id": "empty", "test_classes": ["empty/EmptyTest.kt"]}
            ]
        }),
    );
    let m = load_manifest(&path).unwrap();
    let ab = m.baseline_tests(m.target("ab").unwrap()).unwrap();
    let order: Vec<_> = ab.iter().map(|(_, t)| t.name.as_str()).collect();
    assert_eq!(order, ["a1", "a2", "b1", "b2", "b3"]);
    assert!(m
        .baseline_tests(m.target("empty").unwrap())
        .unwrap()
        .is_empty());
}

#[test]
fn baseline_parse_error_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "BadTest.kt",
        "class BadTest {\n    @Test\n    fun x() {\n",
    );
    let path = write_manifest(
        dir.path(),
        json!({"backend": mock_backend(), "targets": [{"id": "t", "test_classes": ["BadTest.kt"]}]}),
    );
    let m = load_manifest(&path).unwrap();
    match m.baseline_tests(&m.targets[0]) {
        Err(CorpusError::Parse { path, .. }) => assert!(path.ends_with("BadTest.kt")),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

/// Line-based oracle: every `fun` that directly follows an `@Test` line
/// (possibly after further annotations) in a `*Test.kt` file of `dir`.
fn scan_oracle(dir: &Path) -> BTreeSet<(String, String)> {
    let mut out = BTreeSet::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let file = path.file_name().unwrap().to_string_lossy().to_string();
        if !file.ends_with("Test.kt") {
            continue;
        }
        let mut armed = false;
        for line in fs::read_to_string(&path).unwrap().lines() {
            let line = line.trim();
            if line == "@Test" {
                armed = true;
            } else if armed && line.starts_with("fun ") {
                let name = line["fun ".len()..].split('(').next().unwrap().to_string();
                out.insert((file.clone(), name));
                armed = false;
            } else if !line.starts_with('@') {
                armed = false;
            }
        }
    }
    out
}

#[test]
fn baseline_matches_directory_scan_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let pkg = dir.path().join("feed");
    write(
        &pkg,
        "StoryTest.kt",
        &class("StoryTest", &["rendersTitle", "hidesEmpty", "tracksView"]),
    );
    write(
        &pkg,
        "ReelTest.kt",
        &class("ReelTest", &["plays", "pauses"]),
    );
    write(
        &pkg,
        "CommentTest.kt",
        "class CommentTest {\n    @Test\n    @Ignore\n    fun ignoredButStillATest() {\n        val s = \"}\"\n    }\n\n    fun notATest() {}\n}\n",
    );
    write(&pkg, "Story.kt", "class Story { fun title() = \"t\" }\n");

    let drafted = scan(dir.path(), &DialectConfig::default()).unwrap();
    let targets = drafted["targets"].as_array().unwrap();
    assert_eq!(targets.len(), 1);
    assert_eq!(targets[0]["id"], "feed");
    assert_eq!(
        targets[0]["class_under_test"]["feed/StoryTest.kt"],
        "feed/Story.kt"
    );

    let mut manifest = drafted.clone();
    manifest["root"] = json!(".");
    manifest["backend"] = mock_backend();
    let path = write_manifest(dir.path(), manifest);
    let m = load_manifest(&path).unwrap();

    let found: BTreeSet<_> = m
        .baseline_tests(&m.targets[0])
        .unwrap()
        .into_iter()
        .map(|(p, t)| (p.file_name().unwrap().to_string_lossy().to_string(), t.name))
        .collect();
    let oracle = scan_oracle(&pkg);
    assert_eq!(oracle.len(), 6);
    assert_eq!(found, oracle);
}

#[test]
fn scan_is_deterministic_and_skips_build_dirs() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "a/XTest.kt", &class("XTest", &["x"]));
    write(dir.path(), "b/YTests.kt", &class("YTests", &["y"]));
    write(dir.path(), "build/ZTest.kt", &class("ZTest", &["z"]));
    write(dir.path(), ".hidden/HTest.kt", &class("HTest", &["h"]));
    write(dir.path(), "a/BrokenTest.kt", "class BrokenTest {");
    let first = scan(dir.path(), &DialectConfig::default()).unwrap();
    let second = scan(dir.path(), &DialectConfig::default()).unwrap();
    assert_eq!(first, second);
    let ids: Vec<_> = first["targets"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| t["id"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(ids, ["a", "b"]);
    assert_eq!(first["targets"][0]["test_classes"], json!(["a/XTest.kt"]));
}
