//! Prompt templates with `{name}` placeholders.
//!
//! Defaults are compiled in; a directory holding files of the same names
//! overrides them one by one.

use std::fmt;
use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template {name}: missing placeholder {{{placeholder}}}")]
    MissingPlaceholder { name: String, placeholder: String },
    #[error("template {name}: {message}")]
    Invalid { name: String, message: String },
    #[error("template {name}: {source}")]
    Io { name: String, source: std::io::Error },
}

#[derive(Clone, PartialEq, Eq)]
pub struct Template {
    name: String,
    text: String,
}

impl fmt::Debug for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Template({})", self.name)
    }
}

impl Template {
    pub fn new(name: impl Into<String>, text: impl Into<String>) -> Self {
        Self { name: name.into(), text: text.into() }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub(crate) fn clone_with_text(&self, text: &str) -> Template {
        Template::new(self.name.clone(), text)
    }

    pub fn has_placeholder(&self, key: &str) -> bool {
        self.text.contains(&format!("{{{key}}}"))
    }

    fn require(&self, keys: &[&str]) -> Result<(), PromptError> {
        for key in keys {
            if !self.has_placeholder(key) {
                return Err(PromptError::MissingPlaceholder {
                    name: self.name.clone(),
                    placeholder: (*key).to_string(),
                });
            }
        }
        Ok(())
    }

    /// Single-pass substitution: values are inserted verbatim and never
    /// rescanned, and unknown `{...}` sequences are left alone.
    pub fn render(&self, vars: &[(&str, &str)]) -> String {
        let mut out = String::with_capacity(self.text.len() + 256);
        let mut rest = self.text.as_str();
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            let close = after.find('}').filter(|&c| {
                let key = &after[..c];
                !key.is_empty() && key.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '_')
            });
            match close.and_then(|c| vars.iter().find(|(k, _)| *k == &after[..c]).map(|(_, v)| (c, v))) {
                Some((c, value)) => {
                    out.push_str(value);
                    rest = &after[c + 1..];
                }
                None => {
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        out
    }
}

/// Literal the generation instruction opens with; the script backend swaps it.
pub const SQL_INSTRUCTION_LITERAL: &str = "Create SQL code";
pub const PYTHON_INSTRUCTION_LITERAL: &str = "Create Python code (using Pandas)";

pub const SQL_RULES: &str = "\
- Write one read-only SQLite statement that starts with SELECT or WITH. Never modify data.
- Write literal values in the same format as the Sample values.
- Reply with the SQL only, inside one ```sql fenced code block.";

pub const PYTHON_RULES: &str = "\
- Each table is stored as a CSV file with a header row; load the files named in the schema with pandas.read_csv.
- Print the final result table to standard output as CSV with a header row, using DataFrame.to_csv(sys.stdout, index=False), and print nothing else.
- Reply with the Python code only, inside one ```python fenced code block.";

const DEFAULTS: [(&str, &str, &[&str]); 8] = [
    ("extract.txt", include_str!("../prompts/extract.txt"), &["question", "timestamp"]),
    ("transform.txt", include_str!("../prompts/transform.txt"), &["terms", "timestamp"]),
    ("replace.txt", include_str!("../prompts/replace.txt"), &["question", "mapping"]),
    ("explain.txt", include_str!("../prompts/explain.txt"), &["question", "compact_schema"]),
    ("squeeze.txt", include_str!("../prompts/squeeze.txt"), &["explanation"]),
    ("generate.txt", include_str!("../prompts/generate.txt"), &["rules", "schema_block", "question"]),
    (
        "repair.txt",
        include_str!("../prompts/repair.txt"),
        &["previous_sql", "status", "error_message_or_empty_notice", "schema_block"],
    ),
    ("function.txt", include_str!("../prompts/function.txt"), &["schema_block", "question"]),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub extract: Template,
    pub transform: Template,
    pub replace: Template,
    pub explain: Template,
    pub squeeze: Template,
    pub generate: Template,
    pub repair: Template,
    pub function: Template,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self::build(|name, text| Ok(Template::new(name, text))).expect("built-in templates are valid")
    }
}

impl PromptSet {
    /// Built-in templates, each replaced by `<dir>/<name>` when that file exists.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        Self::build(|name, default| {
            let path = dir.join(name);
            if path.is_file() {
                let text =
                    fs::read_to_string(&path).map_err(|source| PromptError::Io { name: name.to_string(), source })?;
                Ok(Template::new(name, text))
            } else {
                Ok(Template::new(name, default))
            }
        })
    }

    fn build(mut load: impl FnMut(&str, &str) -> Result<Template, PromptError>) -> Result<Self, PromptError> {
        let mut loaded = Vec::with_capacity(DEFAULTS.len());
        for (name, text, required) in DEFAULTS {
            let t = load(name, text)?;
            t.require(required)?;
            loaded.push(t);
        }
        let generate = &loaded[5];
        let (schema_at, question_at) = (generate.text.find("{schema_block}"), generate.text.find("{question}"));
        if !(schema_at < question_at && !generate.text[..schema_at.unwrap_or(0)].trim().is_empty()) {
            return Err(PromptError::Invalid {
                name: generate.name.clone(),
                message: "instruction text must precede {schema_block}, which must precede {question}".into(),
            });
        }
        let mut it = loaded.into_iter();
        let mut next = || it.next().expect("one template per default");
        Ok(Self {
            extract: next(),
            transform: next(),
            replace: next(),
            explain: next(),
            squeeze: next(),
            generate: next(),
            repair: next(),
            function: next(),
        })
    }
}
