//! Line-coverage set algebra: maps, unions, baselines and deltas.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

pub type LineSet = BTreeSet<u32>;

/// File path → covered line numbers. Files with no covered lines are never
/// stored.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CoverageMap {
    entries: BTreeMap<String, LineSet>,
}

impl CoverageMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one covered line. Line 0 is not a valid line and is ignored.
    pub fn insert(&mut self, file: impl Into<String>, line: u32) {
        if line > 0 {
            self.entries.entry(file.into()).or_default().insert(line);
        }
    }

    pub fn extend_file(&mut self, file: impl Into<String>, lines: impl IntoIterator<Item = u32>) {
        let file = file.into();
        let mut lines = lines.into_iter().filter(|&l| l > 0).peekable();
        if lines.peek().is_some() {
            self.entries.entry(file).or_default().extend(lines);
        }
    }

    pub fn from_files<F, L>(files: impl IntoIterator<Item = (F, L)>) -> Self
    where
        F: Into<String>,
        L: IntoIterator<Item = u32>,
    {
        let mut map = Self::new();
        for (file, lines) in files {
            map.extend_file(file, lines);
        }
        map
    }

    pub fn lines(&self, file: &str) -> Option<&LineSet> {
        self.entries.get(file)
    }

    pub fn files(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &LineSet)> {
        self.entries.iter().map(|(f, l)| (f.as_str(), l))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_lines(&self) -> u64 {
        self.entries.values().map(|s| s.len() as u64).sum()
    }

    pub fn covers(&self, file: &str, line: u32) -> bool {
        self.entries.get(file).is_some_and(|s| s.contains(&line))
    }

    pub fn merge(&mut self, other: &CoverageMap) {
        for (file, lines) in &other.entries {
            self.entries
                .entry(file.clone())
                .or_default()
                .extend(lines.iter().copied());
        }
    }

    /// Per-file intersection.
    pub fn intersection(&self, other: &CoverageMap) -> CoverageMap {
        let mut out = CoverageMap::new();
        for (file, lines) in &self.entries {
            if let Some(theirs) = other.entries.get(file) {
                out.extend_file(file.clone(), lines.intersection(theirs).copied());
            }
        }
        out
    }

    /// Per-file set difference `self − other`.
    pub fn difference(&self, other: &CoverageMap) -> CoverageMap {
        let mut out = CoverageMap::new();
        for (file, lines) in &self.entries {
            match other.entries.get(file) {
                Some(theirs) => out.extend_file(file.clone(), lines.difference(theirs).copied()),
                None => out.extend_file(file.clone(), lines.iter().copied()),
            }
        }
        out
    }

    /// True when every covered line of `self` is covered by `other`.
    pub fn is_subset(&self, other: &CoverageMap) -> bool {
        self.entries.iter().all(|(file, lines)| {
            other
                .entries
                .get(file)
                .is_some_and(|theirs| lines.is_subset(theirs))
        })
    }
}

pub fn union<'a>(maps: impl IntoIterator<Item = &'a CoverageMap>) -> CoverageMap {
    let mut out = CoverageMap::new();
    for map in maps {
        out.merge(map);
    }
    out
}

/// Share of newly covered lines that fall outside the class under test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OffTargetFraction {
    Fraction(f64),
    /// No class-under-test mapping exists for the test class.
    Unclassified,
}

impl OffTargetFraction {
    pub fn value(&self) -> Option<f64> {
        match self {
            OffTargetFraction::Fraction(f) => Some(*f),
            OffTargetFraction::Unclassified => None,
        }
    }
}

impl Serialize for OffTargetFraction {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            OffTargetFraction::Fraction(f) => serializer.serialize_f64(*f),
            OffTargetFraction::Unclassified => serializer.serialize_str("unclassified"),
        }
    }
}

impl<'de> Deserialize<'de> for OffTargetFraction {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct FractionVisitor;

        impl Visitor<'_> for FractionVisitor {
            type Value = OffTargetFraction;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a number in [0, 1] or \"unclassified\"")
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Self::Value, E> {
                Ok(OffTargetFraction::Fraction(v))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Self::Value, E> {
                Ok(OffTargetFraction::Fraction(v as f64))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Self::Value, E> {
                Ok(OffTargetFraction::Fraction(v as f64))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Self::Value, E> {
                if v == "unclassified" {
                    Ok(OffTargetFraction::Unclassified)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }
        }

        deserializer.deserialize_any(FractionVisitor)
    }
}

/// Lines a candidate covers beyond a baseline, and where they land.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageDelta {
    pub newly_covered: CoverageMap,
    pub new_files: BTreeSet<String>,
    pub extended_files: BTreeSet<String>,
    pub total_new_lines: u64,
    pub on_class_under_test: u64,
    pub off_target_fraction: OffTargetFraction,
}

impl CoverageDelta {
    pub fn is_empty(&self) -> bool {
        self.total_new_lines == 0
    }

    /// Integration-like when the off-target share reaches `threshold`.
    /// Unclassified deltas are never flagged.
    pub fn is_integration_like(&self, threshold: f64) -> bool {
        !self.is_empty()
            && self
                .off_target_fraction
                .value()
                .is_some_and(|f| f >= threshold)
    }
}

pub const DEFAULT_INTEGRATION_THRESHOLD: f64 = 0.8;

/// Coverage-map keys are usually project-relative while manifests may name
/// the class under test differently rooted; a suffix match on a path
/// boundary ties them together.
pub fn same_file(coverage_key: &str, path: &str) -> bool {
    let a = coverage_key.trim_start_matches("./");
    let b = path.trim_start_matches("./");
    a == b || a.ends_with(&format!("/{b}")) || b.ends_with(&format!("/{a}"))
}

pub fn delta(
    candidate: &CoverageMap,
    baseline: &CoverageMap,
    class_under_test: Option<&str>,
) -> CoverageDelta {
    let newly_covered = candidate.difference(baseline);
    let mut new_files = BTreeSet::new();
    let mut extended_files = BTreeSet::new();
    for file in newly_covered.files() {
        if baseline.lines(file).is_some() {
            extended_files.insert(file.to_string());
        } else {
            new_files.insert(file.to_string());
        }
    }
    let total_new_lines = newly_covered.total_lines();
    let on_class_under_test = class_under_test.map_or(0, |cut| {
        newly_covered
            .iter()
            .filter(|(file, _)| same_file(file, cut))
            .map(|(_, lines)| lines.len() as u64)
            .sum()
    });
    let off_target_fraction = match class_under_test {
        None => OffTargetFraction::Unclassified,
        Some(_) if total_new_lines == 0 => OffTargetFraction::Fraction(0.0),
        Some(_) => {
            OffTargetFraction::Fraction(1.0 - on_class_under_test as f64 / total_new_lines as f64)
        }
    };
    CoverageDelta {
        newly_covered,
        new_files,
        extended_files,
        total_new_lines,
        on_class_under_test,
        off_target_fraction,
    }
}

/// Renders a line set as compact ranges: `1-3, 7, 9-10`.
pub fn format_ranges(lines: &LineSet) -> String {
    let mut parts = Vec::new();
    let mut iter = lines.iter().copied().peekable();
    while let Some(start) = iter.next() {
        let mut end = start;
        while iter.peek() == Some(&(end + 1)) {
            end = iter.next().unwrap();
        }
        if start == end {
            parts.push(start.to_string());
        } else {
            parts.push(format!("{start}-{end}"));
        }
    }
    parts.join(", ")
}
