//! Prompt templates and rendering.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TEST_CLASS_PLACEHOLDER: &str = "{existing_test_class}";
pub const CLASS_UNDER_TEST_PLACEHOLDER: &str = "{class_under_test}";

const EXTEND_TEST: &str = "Here is a Kotlin unit test class: {existing_test_class}. \
Write an extended version of the test class that includes additional tests to cover some extra corner cases.";

const EXTEND_COVERAGE: &str = "Here is a Kotlin unit test class and the class that it tests: \
{existing_test_class} {class_under_test}. \
Write an extended version of the test class that includes additional unit tests that will \
increase the test coverage of the class under test.";

const CORNER_CASES: &str = "Here is a Kotlin unit test class and the class that it tests: \
{existing_test_class} {class_under_test}. \
Write an extended version of the test class that includes additional unit tests \
that will cover corner cases missed by the original and will \
increase the test coverage of the class under test.";

const STATEMENT_TO_COMPLETE: &str = "Here is a Kotlin class under test {class_under_test} \
This class under test can be tested with this Kotlin unit test class {existing_test_class}. \
Here is an extended version of the unit test class that includes additional unit test \
cases that will cover methods, edge cases, corner cases, \
and other features of the class under test that were missed by the original unit test class:";

pub const EXTEND_TEST_NAME: &str = "extend_test";
pub const EXTEND_COVERAGE_NAME: &str = "extend_coverage";
pub const CORNER_CASES_NAME: &str = "corner_cases";
pub const STATEMENT_TO_COMPLETE_NAME: &str = "statement_to_complete";

pub const BUILTIN_NAMES: [&str; 4] = [
    EXTEND_TEST_NAME,
    EXTEND_COVERAGE_NAME,
    CORNER_CASES_NAME,
    STATEMENT_TO_COMPLETE_NAME,
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("template `{0}` needs the class under test, but none is mapped")]
    MissingClassUnderTest(String),
    #[error("unknown prompt template `{0}`")]
    UnknownTemplate(String),
    #[error("template `{0}` has no {{existing_test_class}} placeholder")]
    MissingTestClassPlaceholder(String),
    #[error("template `{0}` redefines a built-in template")]
    BuiltinRedefined(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: String,
    pub template_text: String,
    pub requires_class_under_test: bool,
}

impl PromptTemplate {
    /// A manifest-defined template. It needs the class under test whenever
    /// its text mentions the placeholder.
    pub fn custom(name: &str, template_text: &str) -> Result<Self, PromptError> {
        if BUILTIN_NAMES.contains(&name) {
            return Err(PromptError::BuiltinRedefined(name.to_string()));
        }
        if !template_text.contains(TEST_CLASS_PLACEHOLDER) {
            return Err(PromptError::MissingTestClassPlaceholder(name.to_string()));
        }
        Ok(Self {
            name: name.to_string(),
            template_text: template_text.to_string(),
            requires_class_under_test: template_text.contains(CLASS_UNDER_TEST_PLACEHOLDER),
        })
    }

    pub fn render(
        &self,
        test_class: &str,
        class_under_test: Option<&str>,
    ) -> Result<String, PromptError> {
        render(self, test_class, class_under_test)
    }
}

pub fn builtin(name: &str) -> Option<PromptTemplate> {
    let (text, requires) = match name {
        EXTEND_TEST_NAME => (EXTEND_TEST, false),
        EXTEND_COVERAGE_NAME => (EXTEND_COVERAGE, true),
        CORNER_CASES_NAME => (CORNER_CASES, true),
        STATEMENT_TO_COMPLETE_NAME => (STATEMENT_TO_COMPLETE, true),
        _ => return None,
    };
    Some(PromptTemplate {
        name: name.to_string(),
        template_text: text.to_string(),
        requires_class_under_test: requires,
    })
}

pub fn builtins() -> Vec<PromptTemplate> {
    BUILTIN_NAMES.iter().filter_map(|n| builtin(n)).collect()
}

/// Built-ins plus manifest-defined templates, looked up by name.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: Vec<PromptTemplate>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self {
            templates: builtins(),
        }
    }
}

impl TemplateSet {
    pub fn with_custom(custom: Vec<PromptTemplate>) -> Self {
        let mut set = Self::default();
        set.templates.extend(custom);
        set
    }

    pub fn get(&self, name: &str) -> Result<&PromptTemplate, PromptError> {
        self.templates
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| PromptError::UnknownTemplate(name.to_string()))
    }

    pub fn all(&self) -> &[PromptTemplate] {
        &self.templates
    }
}

/// Splices the inputs into the template in a single left-to-right pass, so
/// placeholder-like text inside the inputs is never substituted again.
pub fn render(
    template: &PromptTemplate,
    test_class: &str,
    class_under_test: Option<&str>,
) -> Result<String, PromptError> {
    let needs_cut = template.requires_class_under_test
        || template
            .template_text
            .contains(CLASS_UNDER_TEST_PLACEHOLDER);
    if needs_cut && class_under_test.is_none() {
        return Err(PromptError::MissingClassUnderTest(template.name.clone()));
    }

    let text = template.template_text.as_str();
    let mut out =
        String::with_capacity(text.len() + test_class.len() + class_under_test.map_or(0, str::len));
    let mut rest = text;
    while let Some(pos) = rest.find('{') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if let Some(after) = tail.strip_prefix(TEST_CLASS_PLACEHOLDER) {
            out.push_str(test_class);
            rest = after;
        } else if let Some(after) = tail.strip_prefix(CLASS_UNDER_TEST_PLACEHOLDER) {
            out.push_str(class_under_test.unwrap_or_default());
            rest = after;
        } else {
            out.push('{');
            rest = &tail[1..];
        }
    }
    out.push_str(rest);
    Ok(out)
}
