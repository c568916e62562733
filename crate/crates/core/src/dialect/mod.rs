//! Test-class parsing, new-test extraction and class reassembly.
//!
//! The reference dialect is Kotlin/JUnit shaped: one top-level `class Name`
//! whose body holds functions declared as `fun name(...) { ... }`; a function
//! is a test case when its annotation block carries the test marker
//! (`@Test`). Marker, keywords and assertion vocabulary live in
//! [`DialectConfig`] so other JUnit-like dialects can be described.

mod lexer;

use std::collections::{HashMap, HashSet};
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use lexer::{classify, ByteClass};

const MODIFIERS: &[&str] = &[
    "public",
    "private",
    "protected",
    "internal",
    "open",
    "final",
    "abstract",
    "data",
    "sealed",
    "inner",
    "override",
    "suspend",
    "inline",
    "operator",
    "infix",
    "tailrec",
    "external",
    "static",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DialectConfig {
    pub test_marker: String,
    pub class_keyword: String,
    pub function_keyword: String,
    /// Identifiers that count as assertion calls.
    pub assertion_tokens: Vec<String>,
    pub todo_token: String,
}

impl Default for DialectConfig {
    fn default() -> Self {
        let assertion_tokens = [
            "assert",
            "assertEquals",
            "assertNotEquals",
            "assertTrue",
            "assertFalse",
            "assertNull",
            "assertNotNull",
            "assertSame",
            "assertNotSame",
            "assertThat",
            "assertThrows",
            "assertFailsWith",
            "assertContentEquals",
            "assertIs",
            "assertArrayEquals",
            "fail",
            "verify",
            "shouldBe",
        ];
        Self {
            test_marker: "@Test".to_string(),
            class_keyword: "class".to_string(),
            function_keyword: "fun".to_string(),
            assertion_tokens: assertion_tokens.iter().map(|s| s.to_string()).collect(),
            todo_token: "TODO".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum DialectError {
    #[error("unbalanced braces at line {line}, column {column}")]
    UnbalancedBraces {
        offset: usize,
        line: usize,
        column: usize,
    },
    #[error("no class declaration found")]
    NoClassFound,
    #[error("duplicate test name `{0}`")]
    DuplicateTestName(String),
    #[error("response contains no parseable class block")]
    NoParseableClass,
    #[error("test name `{0}` collides with another test in the class")]
    NameCollision(String),
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
}

/// One test function of a test class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub name: String,
    /// Trimmed annotation lines, including the test marker.
    pub annotation_lines: Vec<String>,
    /// Source text from the function's first modifier (or `fun`) through the
    /// closing brace of its body.
    pub body_text: String,
    /// Whitespace-normalized text of everything after the parameter list.
    /// The function name is not part of it, so renamed copies compare equal.
    pub normalized_body: String,
    /// Indentation of the declaration line.
    pub indent: String,
    /// Byte range within the parsed source, from the first annotation line
    /// through the end of the closing-brace line.
    #[serde(default)]
    pub span: Range<usize>,
    name_range: Range<usize>,
    block_start: usize,
}

impl TestCase {
    /// Code in the function body, with comments and literals blanked out.
    fn body_code(&self) -> String {
        let block = &self.body_text[self.block_start..];
        let classes = classify(block);
        block
            .char_indices()
            .map(|(i, c)| {
                if classes[i] == ByteClass::Code {
                    c
                } else {
                    ' '
                }
            })
            .collect()
    }

    pub fn has_assertion(&self, config: &DialectConfig) -> bool {
        let code = self.body_code();
        let found =
            identifiers(&code).any(|ident| config.assertion_tokens.iter().any(|t| t == ident));
        found
    }

    pub fn has_todo(&self, config: &DialectConfig) -> bool {
        self.body_text[self.block_start..].contains(&config.todo_token)
    }

    /// Copy of this test with the function renamed in its signature.
    pub fn renamed(&self, new_name: &str) -> TestCase {
        let mut body_text = String::with_capacity(self.body_text.len() + new_name.len());
        body_text.push_str(&self.body_text[..self.name_range.start]);
        body_text.push_str(new_name);
        body_text.push_str(&self.body_text[self.name_range.end..]);
        let shift = new_name.len() as isize - self.name_range.len() as isize;
        TestCase {
            name: new_name.to_string(),
            body_text,
            name_range: self.name_range.start..self.name_range.start + new_name.len(),
            block_start: (self.block_start as isize + shift) as usize,
            span: 0..0,
            ..self.clone()
        }
    }

    /// The text inserted for this test by [`reassemble`], without the leading
    /// blank line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for line in &self.annotation_lines {
            out.push_str(&self.indent);
            out.push_str(line);
            out.push('\n');
        }
        out.push_str(&self.indent);
        out.push_str(&self.body_text);
        out.push('\n');
        out
    }
}

/// A parsed test-class file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestClassSource {
    pub path: PathBuf,
    pub raw_text: String,
    pub class_name: String,
    /// Byte offset where new tests are inserted: the start of the line
    /// holding the class's closing brace, or the brace itself when other text
    /// precedes it on that line.
    pub insertion_point: usize,
    pub test_cases: Vec<TestCase>,
}

impl TestClassSource {
    pub fn header(&self) -> &str {
        &self.raw_text[..self.insertion_point]
    }

    pub fn trailer(&self) -> &str {
        &self.raw_text[self.insertion_point..]
    }

    /// Alternating gap and test-case slices; concatenated they reproduce
    /// `raw_text` exactly.
    pub fn segments(&self) -> Vec<&str> {
        let mut out = Vec::with_capacity(self.test_cases.len() * 2 + 1);
        let mut cursor = 0;
        for case in &self.test_cases {
            out.push(&self.raw_text[cursor..case.span.start]);
            out.push(&self.raw_text[case.span.clone()]);
            cursor = case.span.end;
        }
        out.push(&self.raw_text[cursor..]);
        out
    }

    pub fn test_names(&self) -> impl Iterator<Item = &str> {
        self.test_cases.iter().map(|t| t.name.as_str())
    }
}

/// Collapses whitespace runs to one space, trims every line and drops empty
/// lines.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for line in text.lines() {
        let mut words = line.split_whitespace().peekable();
        if words.peek().is_none() {
            continue;
        }
        if !out.is_empty() {
            out.push('\n');
        }
        for (i, word) in words.enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(word);
        }
    }
    out
}

pub fn parse_test_class(
    source_text: &str,
    config: &DialectConfig,
) -> Result<TestClassSource, DialectError> {
    Parser::new(source_text, config).parse(false)
}

pub fn parse_test_class_file(
    path: &Path,
    config: &DialectConfig,
) -> Result<TestClassSource, DialectError> {
    let text = std::fs::read_to_string(path).map_err(|e| DialectError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut parsed = parse_test_class(&text, config)?;
    parsed.path = path.to_path_buf();
    Ok(parsed)
}

/// Tests recovered from a model response, split by how they relate to the
/// original class.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Extraction {
    /// Tests whose normalized body matches no original test.
    pub new_tests: Vec<TestCase>,
    /// Tests that repeat an original test's body under a different name.
    pub renamed_copies: Vec<TestCase>,
}

impl Extraction {
    pub fn is_empty(&self) -> bool {
        self.new_tests.is_empty() && self.renamed_copies.is_empty()
    }
}

/// Test cases present in `llm_response_text` whose bodies are absent from
/// `original`. Names colliding with original tests get a numeric suffix.
pub fn extract_new_tests(
    original: &TestClassSource,
    llm_response_text: &str,
    config: &DialectConfig,
) -> Result<Vec<TestCase>, DialectError> {
    Ok(extract_candidates(original, llm_response_text, config)?.new_tests)
}

/// Like [`extract_new_tests`], but also reports copies of original tests that
/// the model renamed, which the pipeline treats as duplicates.
pub fn extract_candidates(
    original: &TestClassSource,
    llm_response_text: &str,
    config: &DialectConfig,
) -> Result<Extraction, DialectError> {
    let parsed = isolate_class(llm_response_text, config)?;

    let original_bodies: HashSet<&str> = original
        .test_cases
        .iter()
        .map(|t| t.normalized_body.as_str())
        .collect();
    let original_names: HashSet<&str> = original.test_names().collect();
    let mut taken: HashSet<String> = original_names.iter().map(|s| s.to_string()).collect();

    let mut extraction = Extraction::default();
    for case in parsed.test_cases {
        if original_bodies.contains(case.normalized_body.as_str()) {
            if !original_names.contains(case.name.as_str()) {
                extraction.renamed_copies.push(case);
            }
            continue;
        }
        let case = if taken.contains(&case.name) {
            let mut suffix = 2;
            while taken.contains(&format!("{}_{}", case.name, suffix)) {
                suffix += 1;
            }
            case.renamed(&format!("{}_{}", case.name, suffix))
        } else {
            case
        };
        taken.insert(case.name.clone());
        extraction.new_tests.push(case);
    }
    Ok(extraction)
}

/// Tries, in order: fenced blocks from longest to shortest, the whole
/// response, then the brace-balanced block starting at the first class
/// header line.
fn isolate_class(response: &str, config: &DialectConfig) -> Result<TestClassSource, DialectError> {
    let mut fences = fenced_blocks(response);
    fences.sort_by_key(|block| std::cmp::Reverse(block.len()));

    let mut attempts: Vec<&str> = fences;
    attempts.push(response);
    if let Some(block) = slice_class_block(response, config) {
        attempts.push(block);
    }
    attempts
        .into_iter()
        .find_map(|text| Parser::new(text, config).parse(true).ok())
        .ok_or(DialectError::NoParseableClass)
}

fn fenced_blocks(text: &str) -> Vec<&str> {
    let mut blocks = Vec::new();
    let mut open: Option<usize> = None;
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        if line.trim_start().starts_with("```") {
            match open.take() {
                Some(start) => blocks.push(&text[start..offset]),
                None => open = Some(offset + line.len()),
            }
        }
        offset += line.len();
    }
    if let Some(start) = open {
        blocks.push(&text[start..]);
    }
    blocks
}

fn slice_class_block<'a>(text: &'a str, config: &DialectConfig) -> Option<&'a str> {
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        if is_class_header_line(line, config) {
            let rest = &text[offset..];
            let classes = classify(rest);
            let mut depth = 0i64;
            for (i, b) in rest.bytes().enumerate() {
                if classes[i] != ByteClass::Code {
                    continue;
                }
                match b {
                    b'{' => depth += 1,
                    b'}' => {
                        depth -= 1;
                        if depth == 0 {
                            return Some(&rest[..=i]);
                        }
                    }
                    _ => {}
                }
            }
            return None;
        }
        offset += line.len();
    }
    None
}

fn is_class_header_line(line: &str, config: &DialectConfig) -> bool {
    let mut words = line.split_whitespace();
    for word in words.by_ref() {
        if word == config.class_keyword {
            return words
                .next()
                .and_then(|w| w.chars().next())
                .is_some_and(|c| c.is_alphabetic() || c == '_');
        }
        if !(MODIFIERS.contains(&word) || word.starts_with('@')) {
            return false;
        }
    }
    false
}

/// Inserts `accepted` before the class's closing brace, each preceded by a
/// blank line. With no accepted tests the original text is returned as is.
pub fn reassemble(
    original: &TestClassSource,
    accepted: &[TestCase],
) -> Result<String, DialectError> {
    let mut names: HashSet<&str> = original.test_names().collect();
    for case in accepted {
        if !names.insert(&case.name) {
            return Err(DialectError::NameCollision(case.name.clone()));
        }
    }
    if accepted.is_empty() {
        return Ok(original.raw_text.clone());
    }

    let mut out = String::with_capacity(
        original.raw_text.len()
            + accepted
                .iter()
                .map(|t| t.body_text.len() + 64)
                .sum::<usize>(),
    );
    out.push_str(original.header());
    if !out.is_empty() && !out.ends_with('\n') {
        out.push('\n');
    }
    for case in accepted {
        out.push('\n');
        out.push_str(&case.render());
    }
    out.push_str(original.trailer());
    Ok(out)
}

fn is_ident_start(b: u8) -> bool {
    b.is_ascii_alphabetic() || b == b'_'
}

fn is_ident_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_'
}

fn identifiers(code: &str) -> impl Iterator<Item = &str> {
    code.split(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
        .filter(|w| w.bytes().next().is_some_and(is_ident_start))
}

struct Parser<'a> {
    src: &'a str,
    bytes: &'a [u8],
    classes: Vec<ByteClass>,
    config: &'a DialectConfig,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str, config: &'a DialectConfig) -> Self {
        Self {
            src,
            bytes: src.as_bytes(),
            classes: classify(src),
            config,
        }
    }

    fn is_code(&self, i: usize) -> bool {
        self.classes[i] == ByteClass::Code
    }

    fn parse(&self, allow_duplicate_names: bool) -> Result<TestClassSource, DialectError> {
        let (depth, matching) = self.match_braces()?;
        let (class_name, open, close) = self.find_class(&depth)?;

        let line_start = self.line_start(close);
        let insertion_point = if self.src[line_start..close].trim().is_empty() {
            line_start
        } else {
            close
        };

        let class_depth = depth[open] + 1;
        let mut test_cases: Vec<TestCase> = Vec::new();
        let mut names = HashSet::new();
        let mut cursor = open + 1;
        for (start, end) in self.code_idents(open + 1, close) {
            if start < cursor
                || depth[start] != class_depth
                || &self.src[start..end] != self.config.function_keyword
            {
                continue;
            }
            if let Some(case) = self.test_function(start, close, class_depth, &depth, &matching) {
                if case.span.start < cursor {
                    continue;
                }
                if !names.insert(case.name.clone()) && !allow_duplicate_names {
                    return Err(DialectError::DuplicateTestName(case.name));
                }
                cursor = case.span.end;
                test_cases.push(case);
            }
        }

        Ok(TestClassSource {
            path: PathBuf::new(),
            raw_text: self.src.to_string(),
            class_name,
            insertion_point,
            test_cases,
        })
    }

    /// Brace depth before every byte, and the matching close for every open.
    fn match_braces(&self) -> Result<(Vec<u32>, HashMap<usize, usize>), DialectError> {
        let mut depth = Vec::with_capacity(self.bytes.len() + 1);
        let mut stack: Vec<usize> = Vec::new();
        let mut matching = HashMap::new();
        for (i, &b) in self.bytes.iter().enumerate() {
            if self.is_code(i) && b == b'}' {
                let open = stack.pop().ok_or_else(|| self.unbalanced(i))?;
                matching.insert(open, i);
            }
            depth.push(stack.len() as u32);
            if self.is_code(i) && b == b'{' {
                stack.push(i);
            }
        }
        depth.push(stack.len() as u32);
        match stack.first() {
            Some(&open) => Err(self.unbalanced(open)),
            None => Ok((depth, matching)),
        }
    }

    fn unbalanced(&self, offset: usize) -> DialectError {
        let before = &self.src[..offset];
        let line = before.matches('\n').count() + 1;
        let column = offset - self.line_start(offset) + 1;
        DialectError::UnbalancedBraces {
            offset,
            line,
            column,
        }
    }

    fn line_start(&self, offset: usize) -> usize {
        self.src[..offset].rfind('\n').map_or(0, |p| p + 1)
    }

    fn line_end(&self, offset: usize) -> usize {
        self.src[offset..]
            .find('\n')
            .map_or(self.src.len(), |p| offset + p + 1)
    }

    fn code_idents(&self, from: usize, to: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut i = from;
        while i < to {
            if self.is_code(i)
                && is_ident_start(self.bytes[i])
                && (i == 0 || !is_ident_byte(self.bytes[i - 1]))
            {
                let mut end = i + 1;
                while end < to && is_ident_byte(self.bytes[end]) {
                    end += 1;
                }
                out.push((i, end));
                i = end;
            } else {
                i += 1;
            }
        }
        out
    }

    fn next_code_byte(&self, from: usize, wanted: u8, limit: usize) -> Option<usize> {
        (from..limit).find(|&i| self.is_code(i) && self.bytes[i] == wanted)
    }

    /// The first top-level class declaration that has a body.
    fn find_class(&self, depth: &[u32]) -> Result<(String, usize, usize), DialectError> {
        let idents = self.code_idents(0, self.bytes.len());
        for (k, &(start, end)) in idents.iter().enumerate() {
            if depth[start] != 0 || &self.src[start..end] != self.config.class_keyword {
                continue;
            }
            if start >= 2 && &self.src[start - 2..start] == "::" {
                continue;
            }
            let prefix = &self.src[self.line_start(start)..start];
            if !prefix
                .split_whitespace()
                .all(|w| MODIFIERS.contains(&w) || w.starts_with('@'))
            {
                continue;
            }
            let Some(&(name_start, name_end)) = idents.get(k + 1) else {
                continue;
            };
            if !self.src[end..name_start].trim().is_empty() {
                continue;
            }
            let Some(open) = self.next_code_byte(name_end, b'{', self.bytes.len()) else {
                continue;
            };
            let interrupted =
                idents[k + 2..]
                    .iter()
                    .take_while(|&&(s, _)| s < open)
                    .any(|&(s, e)| {
                        let word = &self.src[s..e];
                        word == self.config.class_keyword || word == self.config.function_keyword
                    });
            if interrupted || depth[open] != 0 {
                continue;
            }
            let close = self.matching_close(open, depth);
            return Ok((self.src[name_start..name_end].to_string(), open, close));
        }
        Err(DialectError::NoClassFound)
    }

    fn matching_close(&self, open: usize, depth: &[u32]) -> usize {
        let level = depth[open];
        (open + 1..self.bytes.len())
            .find(|&i| self.is_code(i) && self.bytes[i] == b'}' && depth[i] == level)
            .expect("braces already verified balanced")
    }

    /// Builds a test case for the function whose keyword starts at `kw`, if
    /// it is a marked test with a brace body.
    fn test_function(
        &self,
        kw: usize,
        class_close: usize,
        class_depth: u32,
        depth: &[u32],
        matching: &HashMap<usize, usize>,
    ) -> Option<TestCase> {
        let kw_line = self.line_start(kw);
        let line_prefix = &self.src[kw_line..kw];

        // Same-line modifiers and annotations (`@Test fun foo()`).
        let mut sig_start = kw;
        loop {
            let before = self.src[kw_line..sig_start].trim_end();
            let word_start = before
                .rfind(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
                .map_or(0, |p| p + 1);
            let word = &before[word_start..];
            if word.is_empty() || !MODIFIERS.contains(&word) {
                break;
            }
            sig_start = kw_line + word_start;
        }
        let inline = self.src[kw_line..sig_start].trim();
        let mut inline_annotations = String::new();
        if !inline.is_empty() {
            let at = kw_line + line_prefix.find('@')?;
            if !inline.starts_with('@') || !self.is_code(at) {
                return None;
            }
            inline_annotations = inline.to_string();
        }

        // Annotation lines above the declaration; blank lines may separate
        // them from it.
        let mut annotation_lines: Vec<String> = Vec::new();
        let mut span_start = kw_line;
        let mut probe = kw_line;
        while probe > 0 {
            let prev_start = self.line_start(probe - 1);
            let line = &self.src[prev_start..probe];
            let trimmed = line.trim();
            if trimmed.is_empty() {
                probe = prev_start;
                continue;
            }
            let at = prev_start + (line.len() - line.trim_start().len());
            if trimmed.starts_with('@') && self.is_code(at) && depth[at] == class_depth {
                annotation_lines.insert(0, trimmed.to_string());
                span_start = prev_start;
                probe = prev_start;
            } else {
                break;
            }
        }
        if !inline_annotations.is_empty() {
            annotation_lines.push(inline_annotations);
        }
        if !annotation_lines.iter().any(|line| self.has_marker(line)) {
            return None;
        }

        let paren_open = self.next_code_byte(kw, b'(', class_close)?;
        let (name_start, name_end) = self
            .code_idents(kw + self.config.function_keyword.len(), paren_open)
            .last()
            .copied()?;
        let paren_close = self.matching_paren(paren_open, class_close)?;

        // Body: first code `{` after the parameters, unless another
        // declaration or the class end comes first (expression body).
        let mut body_open = None;
        for i in paren_close + 1..class_close {
            if !self.is_code(i) {
                continue;
            }
            match self.bytes[i] {
                b'{' => {
                    body_open = Some(i);
                    break;
                }
                b'}' if depth[i] < class_depth + 1 => return None,
                b'@' => return None,
                b if is_ident_start(b) && !is_ident_byte(self.bytes[i - 1]) => {
                    let end = (i..class_close)
                        .find(|&j| !is_ident_byte(self.bytes[j]))
                        .unwrap_or(class_close);
                    if &self.src[i..end] == self.config.function_keyword {
                        return None;
                    }
                }
                _ => {}
            }
        }
        let body_open = body_open?;
        let body_close = *matching.get(&body_open)?;

        let after = &self.src[body_close + 1..self.line_end(body_close)];
        let span_end = if after.trim().is_empty() {
            self.line_end(body_close)
        } else {
            body_close + 1
        };

        let body_text = self.src[sig_start..=body_close].to_string();
        let indent_len = self.src[span_start..]
            .bytes()
            .take_while(|b| *b == b' ' || *b == b'\t')
            .count();
        Some(TestCase {
            name: self.src[name_start..name_end].to_string(),
            annotation_lines,
            normalized_body: normalize(&self.src[paren_close + 1..=body_close]),
            body_text,
            indent: self.src[span_start..span_start + indent_len].to_string(),
            span: span_start..span_end,
            name_range: name_start - sig_start..name_end - sig_start,
            block_start: paren_close + 1 - sig_start,
        })
    }

    fn has_marker(&self, line: &str) -> bool {
        let marker = self.config.test_marker.as_str();
        line.match_indices(marker).any(|(i, _)| {
            let next = line.as_bytes().get(i + marker.len());
            let prev_ok = i == 0 || !is_ident_byte(line.as_bytes()[i - 1]);
            prev_ok && !next.is_some_and(|&b| is_ident_byte(b))
        })
    }

    fn matching_paren(&self, open: usize, limit: usize) -> Option<usize> {
        let mut level = 0i32;
        for i in open..limit {
            if !self.is_code(i) {
                continue;
            }
            match self.bytes[i] {
                b'(' => level += 1,
                b')' => {
                    level -= 1;
                    if level == 0 {
                        return Some(i);
                    }
                }
                _ => {}
            }
        }
        None
    }
}
