//! Property suites shared by the core property tests and the acceptance run.

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

use testgen_core::coverage::{self, CoverageMap};
use testgen_core::dialect::{
    extract_new_tests, normalize, parse_test_class, reassemble, DialectConfig, TestCase,
};
use testgen_core::exec::{
    lcov, run_repeated, CandidateSpec, ExecBackend, MockBackend, MockBehavior, MockRun, MockScript,
    Reliability,
};

pub const CASES: u32 = 1000;

fn check<S: Strategy>(
    name: &str,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let mut runner = TestRunner::new(Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&strategy, test)
        .map_err(|e| format!("{name}: {e}"))
}

// ---------------------------------------------------------------------------
// Dialect fixtures

const STATEMENTS: &[&str] = &[
    "assertEquals(1, f(1))",
    "val s = \"}{ not a brace\"",
    "val c = '}'",
    "// closing } in a comment",
    "/* { block comment */ g()",
    "if (x > 0) { y() } else { z() }",
    "list.forEach { item -> check(item) }",
    "val t = \"${a.b { 1 }}\"",
    "assertTrue(ok)",
    "TODO(\"later\")",
    "val m = mapOf(1 to { 2 })",
    "",
];

const PREAMBLES: &[&str] = &[
    "",
    "package a.b\n\n",
    "package a.b\n\nimport org.junit.Test\nimport kotlin.test.*\n\n",
    "// header comment with { brace\n",
];

#[derive(Debug, Clone)]
enum Member {
    Test {
        annotations: Vec<&'static str>,
        statements: Vec<&'static str>,
    },
    Helper(Vec<&'static str>),
    Field,
}

fn statements() -> impl Strategy<Value = Vec<&'static str>> {
    prop::collection::vec(prop::sample::select(STATEMENTS), 0..5)
}

fn member() -> impl Strategy<Value = Member> {
    prop_oneof![
        4 => (
            prop::collection::vec(prop::sample::select(&["@Ignore", "@Suppress(\"x\")"][..]), 0..2),
            statements()
        )
            .prop_map(|(annotations, statements)| Member::Test { annotations, statements }),
        1 => statements().prop_map(Member::Helper),
        1 => Just(Member::Field),
    ]
}

#[derive(Debug, Clone)]
struct Fixture {
    preamble: &'static str,
    indent: &'static str,
    members: Vec<Member>,
    trailer: &'static str,
}

fn fixture() -> impl Strategy<Value = Fixture> {
    (
        prop::sample::select(PREAMBLES),
        prop::sample::select(&["    ", "  ", "\t"][..]),
        prop::collection::vec(member(), 0..6),
        prop::sample::select(&["", "\n", "\n\n// trailing\n"][..]),
    )
        .prop_map(|(preamble, indent, members, trailer)| Fixture {
            preamble,
            indent,
            members,
            trailer,
        })
}

fn render_function<S: AsRef<str>>(
    out: &mut String,
    indent: &str,
    prefix: &str,
    name: &str,
    statements: &[S],
) {
    out.push_str(&format!("{indent}{prefix}fun {name}() {{\n"));
    for s in statements {
        out.push_str(&format!("{indent}{indent}{}\n", s.as_ref()));
    }
    out.push_str(&format!("{indent}}}\n"));
}

/// Renders the fixture and returns the expected test names in order.
fn render_fixture(f: &Fixture, name_prefix: &str) -> (String, Vec<String>) {
    let mut out = String::from(f.preamble);
    out.push_str("class GeneratedTest {\n");
    let mut names = Vec::new();
    for (i, m) in f.members.iter().enumerate() {
        match m {
            Member::Test {
                annotations,
                statements,
            } => {
                let name = format!("{name_prefix}{i}");
                out.push('\n');
                out.push_str(&format!("{}@Test\n", f.indent));
                for a in annotations {
                    out.push_str(&format!("{}{a}\n", f.indent));
                }
                let mut body: Vec<String> = statements.iter().map(|s| s.to_string()).collect();
                // Keeps bodies pairwise distinct.
                body.push(format!("mark(\"{name}\")"));
                render_function(&mut out, f.indent, "", &name, &body);
                names.push(name);
            }
            Member::Helper(statements) => {
                out.push('\n');
                render_function(
                    &mut out,
                    f.indent,
                    "private ",
                    &format!("helper{i}"),
                    statements,
                );
            }
            Member::Field => {
                out.push_str(&format!("{}private val field{i} = Fixture()\n", f.indent))
            }
        }
    }
    out.push('}');
    out.push_str(f.trailer);
    (out, names)
}

fn signature(cases: &[TestCase]) -> Vec<(String, String)> {
    cases
        .iter()
        .map(|t| (t.name.clone(), t.normalized_body.clone()))
        .collect()
}

pub fn parse_then_reassemble_empty_is_identity() -> Result<(), String> {
    check("parse_then_reassemble_empty_is_identity", fixture(), |f| {
        let (text, names) = render_fixture(&f, "test");
        let parsed = parse_test_class(&text, &DialectConfig::default()).unwrap();
        let parsed_names: Vec<_> = parsed.test_names().map(str::to_string).collect();
        prop_assert_eq!(parsed_names, names);
        prop_assert_eq!(parsed.segments().concat(), text.clone());
        prop_assert_eq!(reassemble(&parsed, &[]).unwrap(), text);
        Ok(())
    })
}

pub fn insertion_is_monotone() -> Result<(), String> {
    check(
        "insertion_is_monotone",
        (fixture(), fixture()),
        |(orig, extra)| {
            let cfg = DialectConfig::default();
            let (text, _) = render_fixture(&orig, "test");
            let (extra_text, _) = render_fixture(&extra, "added");
            let original = parse_test_class(&text, &cfg).unwrap();
            let added = parse_test_class(&extra_text, &cfg).unwrap().test_cases;

            let merged = reassemble(&original, &added).unwrap();
            let reparsed = parse_test_class(&merged, &cfg).unwrap();

            let mut expected = signature(&original.test_cases);
            expected.extend(signature(&added));
            prop_assert_eq!(signature(&reparsed.test_cases), expected);
            Ok(())
        },
    )
}

pub fn extraction_never_returns_original_bodies() -> Result<(), String> {
    check(
        "extraction_never_returns_original_bodies",
        (fixture(), fixture()),
        |(orig, response)| {
            let cfg = DialectConfig::default();
            let (text, _) = render_fixture(&orig, "test");
            // Same prefix, so some response tests repeat original bodies verbatim.
            let (response_text, _) = render_fixture(&response, "test");
            let original = parse_test_class(&text, &cfg).unwrap();
            let originals: BTreeSet<_> = original
                .test_cases
                .iter()
                .map(|t| t.normalized_body.clone())
                .collect();
            for t in extract_new_tests(&original, &response_text, &cfg).unwrap() {
                prop_assert!(!originals.contains(&t.normalized_body));
            }
            Ok(())
        },
    )
}

pub fn normalize_is_idempotent() -> Result<(), String> {
    check("normalize_is_idempotent", "[ \t\na-z{}();\"]{0,80}", |s| {
        let once = normalize(&s);
        prop_assert_eq!(normalize(&once), once);
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Coverage algebra against a set-of-pairs oracle

type Pairs = BTreeSet<(String, u32)>;

fn raw_map() -> impl Strategy<Value = BTreeMap<String, Vec<u32>>> {
    prop::collection::btree_map(
        prop::sample::select(&["a.kt", "b.kt", "c.kt", "d.kt", "e.kt"][..]).prop_map(String::from),
        prop::collection::vec(1u32..40, 0..12),
        0..5,
    )
}

fn to_map(raw: &BTreeMap<String, Vec<u32>>) -> CoverageMap {
    CoverageMap::from_files(raw.iter().map(|(f, l)| (f.clone(), l.clone())))
}

fn to_pairs(raw: &BTreeMap<String, Vec<u32>>) -> Pairs {
    raw.iter()
        .flat_map(|(f, ls)| ls.iter().map(move |l| (f.clone(), *l)))
        .collect()
}

fn map_pairs(map: &CoverageMap) -> Pairs {
    map.iter()
        .flat_map(|(f, ls)| ls.iter().map(move |l| (f.to_string(), *l)))
        .collect()
}

fn files_of(p: &Pairs) -> BTreeSet<String> {
    p.iter().map(|(f, _)| f.clone()).collect()
}

pub fn union_matches_oracle() -> Result<(), String> {
    check(
        "union_matches_oracle",
        (raw_map(), raw_map(), raw_map()),
        |(a, b, c)| {
            let maps = [to_map(&a), to_map(&b), to_map(&c)];
            let expected: Pairs = to_pairs(&a)
                .into_iter()
                .chain(to_pairs(&b))
                .chain(to_pairs(&c))
                .collect();
            let u = coverage::union(maps.iter());
            prop_assert_eq!(map_pairs(&u), expected);
            prop_assert!(u.iter().all(|(_, ls)| !ls.is_empty()));
            Ok(())
        },
    )
}

pub fn delta_matches_oracle() -> Result<(), String> {
    check(
        "delta_matches_oracle",
        (raw_map(), raw_map()),
        |(cand, base)| {
            let (cp, bp) = (to_pairs(&cand), to_pairs(&base));
            let d = coverage::delta(&to_map(&cand), &to_map(&base), Some("a.kt"));

            let newly: Pairs = cp.difference(&bp).cloned().collect();
            prop_assert_eq!(map_pairs(&d.newly_covered), newly.clone());
            prop_assert_eq!(d.total_new_lines, newly.len() as u64);
            prop_assert_eq!(d.is_empty(), newly.is_empty());

            let base_files = files_of(&bp);
            let touched = files_of(&newly);
            let new_files: BTreeSet<_> = touched
                .iter()
                .filter(|f| !base_files.contains(*f))
                .cloned()
                .collect();
            let extended: BTreeSet<_> = touched
                .iter()
                .filter(|f| base_files.contains(*f))
                .cloned()
                .collect();
            prop_assert_eq!(&d.new_files, &new_files);
            prop_assert_eq!(&d.extended_files, &extended);
            prop_assert!(d.new_files.is_disjoint(&d.extended_files));
            let keys: BTreeSet<_> = d.new_files.union(&d.extended_files).cloned().collect();
            prop_assert_eq!(keys, touched);

            let on_cut = newly.iter().filter(|(f, _)| f == "a.kt").count() as u64;
            prop_assert_eq!(d.on_class_under_test, on_cut);
            let frac = d.off_target_fraction.value().unwrap();
            prop_assert!((0.0..=1.0).contains(&frac));
            Ok(())
        },
    )
}

pub fn delta_conserves_candidate() -> Result<(), String> {
    check(
        "delta_conserves_candidate",
        (raw_map(), raw_map()),
        |(cand, base)| {
            let (cm, bm) = (to_map(&cand), to_map(&base));
            let d = coverage::delta(&cm, &bm, None);
            let mut rebuilt = d.newly_covered.clone();
            rebuilt.merge(&cm.intersection(&bm));
            prop_assert_eq!(rebuilt, cm);
            Ok(())
        },
    )
}

pub fn larger_baseline_never_enlarges_delta() -> Result<(), String> {
    check(
        "larger_baseline_never_enlarges_delta",
        (raw_map(), raw_map(), raw_map()),
        |(cand, base, more)| {
            let cm = to_map(&cand);
            let small = to_map(&base);
            let mut large = small.clone();
            large.merge(&to_map(&more));
            let d_small = coverage::delta(&cm, &small, None);
            let d_large = coverage::delta(&cm, &large, None);
            prop_assert!(d_large.newly_covered.is_subset(&d_small.newly_covered));
            prop_assert!(d_large.total_new_lines <= d_small.total_new_lines);
            Ok(())
        },
    )
}

pub fn delta_against_empty_is_everything() -> Result<(), String> {
    check("delta_against_empty_is_everything", raw_map(), |cand| {
        let cm = to_map(&cand);
        let d = coverage::delta(&cm, &CoverageMap::new(), None);
        prop_assert_eq!(d.total_new_lines, cm.total_lines());
        prop_assert_eq!(d.total_new_lines, to_pairs(&cand).len() as u64);
        prop_assert!(d.extended_files.is_empty());
        Ok(())
    })
}

pub fn lcov_render_parse_roundtrip() -> Result<(), String> {
    check("lcov_render_parse_roundtrip", raw_map(), |cand| {
        let cm = to_map(&cand);
        prop_assert_eq!(lcov::parse(&lcov::render(&cm)).unwrap(), cm);
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Flakiness gate

fn run_outcome() -> impl Strategy<Value = MockRun> {
    prop_oneof![3 => Just(MockRun::Pass), 1 => Just(MockRun::Fail), 1 => Just(MockRun::Timeout)]
}

pub fn reliable_iff_every_run_passes() -> Result<(), String> {
    check(
        "reliable_iff_every_run_passes",
        (prop::collection::vec(run_outcome(), 0..8), 1u32..8),
        |(script, runs)| {
            let backend = MockBackend::new(MockScript {
                default: MockBehavior {
                    runs: script.clone(),
                    ..MockBehavior::default()
                },
                tests: BTreeMap::new(),
            });
            let scratch = backend
                .prepare(&CandidateSpec {
                    candidate_id: "c",
                    target_id: "t",
                    test_class: "T.kt",
                    class_text: "",
                    new_test: Some("x"),
                    build_command: "",
                    test_command: "",
                    coverage_artifact: "",
                })
                .unwrap();
            let result = run_repeated(&backend, &scratch, "x", runs).unwrap();

            // Outcome of run i, with the last scripted entry repeating.
            let nth = |i: usize| match script.as_slice() {
                [] => MockRun::Pass,
                s => s[i.min(s.len() - 1)],
            };
            let outcomes: Vec<_> = (0..runs as usize).map(nth).collect();
            let expected = match outcomes.iter().position(|o| *o != MockRun::Pass) {
                None => Reliability::Reliable,
                Some(0) => Reliability::FailedFirstRun,
                Some(_) => Reliability::Flaky,
            };
            prop_assert_eq!(result.classify(), expected);
            prop_assert_eq!(result.outcomes.len() as u32 + result.skipped, runs);
            prop_assert_eq!(backend.invocations("x").runs, result.outcomes.len());
            Ok(())
        },
    )
}

/// Every suite, by name.
#[allow(dead_code)]
pub const SUITES: &[(&str, fn() -> Result<(), String>)] = &[
    (
        "parse_then_reassemble_empty_is_identity",
        parse_then_reassemble_empty_is_identity,
    ),
    ("insertion_is_monotone", insertion_is_monotone),
    (
        "extraction_never_returns_original_bodies",
        extraction_never_returns_original_bodies,
    ),
    ("normalize_is_idempotent", normalize_is_idempotent),
    ("union_matches_oracle", union_matches_oracle),
    ("delta_matches_oracle", delta_matches_oracle),
    ("delta_conserves_candidate", delta_conserves_candidate),
    (
        "larger_baseline_never_enlarges_delta",
        larger_baseline_never_enlarges_delta,
    ),
    (
        "delta_against_empty_is_everything",
        delta_against_empty_is_everything,
    ),
    ("lcov_render_parse_roundtrip", lcov_render_parse_roundtrip),
    (
        "reliable_iff_every_run_passes",
        reliable_iff_every_run_passes,
    ),
];
