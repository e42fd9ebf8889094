//! Explain-squeeze schema linking.
//!
//! The explain phase shows the model only the compact `Table, Columns=[...]`
//! schema and asks it to reason about which tables and columns the question
//! touches. The squeeze phase feeds that reasoning back (without the
//! question) and asks for a bracketed `[table.column, ...]` list, which is
//! parsed leniently and then validated against the catalog.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::DatabaseCatalog;
use crate::llm::{Chat, GatewayError};
use crate::prompts::PromptSet;

#[derive(Debug, Error)]
pub enum LinkError {
    #[error("compact schema is empty")]
    EmptySchema,
    #[error("explanation is empty")]
    EmptyExplanation,
    #[error("the model returned an empty explanation")]
    EmptyResponse,
    #[error("no bracketed list found in squeeze output")]
    NoListFound,
    #[error("strict parse: {0}")]
    Strict(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Link {
    pub table: String,
    pub column: String,
}

impl Link {
    pub fn new(table: impl Into<String>, column: impl Into<String>) -> Self {
        Self { table: table.into(), column: column.into() }
    }
}

impl fmt::Display for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.table, self.column)
    }
}

/// Ordered, duplicate-free `table.column` pairs plus the tables they name
/// in first-appearance order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaLinks {
    links: Vec<Link>,
    tables: Vec<String>,
}

impl SchemaLinks {
    /// Deduplicates case-insensitively, keeping the first spelling.
    pub fn new(links: impl IntoIterator<Item = Link>) -> Self {
        let mut out = SchemaLinks::default();
        for link in links {
            let dup = out
                .links
                .iter()
                .any(|l| l.table.eq_ignore_ascii_case(&link.table) && l.column.eq_ignore_ascii_case(&link.column));
            if dup {
                continue;
            }
            if !out.tables.iter().any(|t| t.eq_ignore_ascii_case(&link.table)) {
                out.tables.push(link.table.clone());
            }
            out.links.push(link);
        }
        out
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn tables(&self) -> &[String] {
        &self.tables
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    /// `[t.a, u.b]`, the format the squeeze phase asks for.
    pub fn render(&self) -> String {
        let items: Vec<String> = self.links.iter().map(Link::to_string).collect();
        format!("[{}]", items.join(", "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplainResponse {
    pub text: String,
}

pub fn explain(
    question: &str,
    compact_schema: &str,
    chat: &Chat<'_>,
    prompts: &PromptSet,
) -> Result<ExplainResponse, LinkError> {
    if compact_schema.trim().is_empty() {
        return Err(LinkError::EmptySchema);
    }
    let prompt = prompts.explain.render(&[("question", question), ("compact_schema", compact_schema)]);
    let text = chat.ask(&prompt)?;
    if text.trim().is_empty() {
        return Err(LinkError::EmptyResponse);
    }
    Ok(ExplainResponse { text })
}

pub fn squeeze(explain_text: &str, chat: &Chat<'_>, prompts: &PromptSet) -> Result<String, LinkError> {
    if explain_text.trim().is_empty() {
        return Err(LinkError::EmptyExplanation);
    }
    Ok(chat.ask(&prompts.squeeze.render(&[("explanation", explain_text)]))?)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedLinks {
    pub links: SchemaLinks,
    pub warnings: Vec<String>,
}

const QUOTES: &[char] = &['"', '\'', '`', '[', ']'];

/// Lenient parse: the first `[...]` list anywhere in the text. Entries that
/// are not exactly one `table.column` pair are skipped with a warning.
pub fn parse_links(squeezed: &str) -> Result<ParsedLinks, LinkError> {
    let open = squeezed.find('[').ok_or(LinkError::NoListFound)?;
    let close = matching_bracket(squeezed, open).ok_or(LinkError::NoListFound)?;
    Ok(parse_entries(&squeezed[open + 1..close]))
}

/// Strict parse: the whole text, trimmed, must be exactly one list with
/// only well-formed entries.
pub fn parse_links_strict(squeezed: &str) -> Result<SchemaLinks, LinkError> {
    let t = squeezed.trim();
    if !t.starts_with('[') {
        return Err(if t.contains('[') {
            LinkError::Strict("text before the list".into())
        } else {
            LinkError::NoListFound
        });
    }
    let close = matching_bracket(t, 0).ok_or(LinkError::NoListFound)?;
    if close != t.len() - 1 {
        return Err(LinkError::Strict("text after the list".into()));
    }
    let parsed = parse_entries(&t[1..close]);
    match parsed.warnings.first() {
        Some(w) => Err(LinkError::Strict(w.clone())),
        None => Ok(parsed.links),
    }
}

// Entries may themselves be bracket-quoted (`[my table].col`), so track depth.
fn matching_bracket(s: &str, open: usize) -> Option<usize> {
    let mut depth = 0usize;
    for (i, c) in s[open..].char_indices() {
        match c {
            '[' => depth += 1,
            ']' => {
                depth -= 1;
                if depth == 0 {
                    return Some(open + i);
                }
            }
            _ => {}
        }
    }
    None
}

fn parse_entries(body: &str) -> ParsedLinks {
    let mut links = Vec::new();
    let mut warnings = Vec::new();
    for raw in body.split(',') {
        let entry = raw.trim().trim_matches(|c: char| c.is_whitespace() || c == '"' || c == '\'' || c == '`');
        if entry.is_empty() {
            continue;
        }
        let parts: Vec<&str> = entry.split('.').collect();
        if parts.len() != 2 {
            warnings.push(format!("skipped entry {entry:?}: expected exactly one '.'"));
            continue;
        }
        let table = parts[0].trim().trim_matches(QUOTES).trim();
        let column = parts[1].trim().trim_matches(QUOTES).trim();
        if table.is_empty() || column.is_empty() {
            warnings.push(format!("skipped entry {entry:?}: empty table or column"));
            continue;
        }
        links.push(Link::new(table, column));
    }
    for w in &warnings {
        tracing::warn!("{w}");
    }
    ParsedLinks { links: SchemaLinks::new(links), warnings }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidatedLinks {
    pub links: SchemaLinks,
    /// Pairs that did not resolve, as written by the model.
    pub dropped: Vec<Link>,
}

/// Keeps only pairs that resolve in the catalog, rewritten to catalog casing.
pub fn validate_links(links: &SchemaLinks, catalog: &DatabaseCatalog) -> ValidatedLinks {
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for link in links.links() {
        match catalog.resolve(&link.table, &link.column) {
            Some((t, c)) => kept.push(Link::new(t, c)),
            None => {
                tracing::warn!(link = %link, "dropping link that does not resolve");
                dropped.push(link.clone());
            }
        }
    }
    ValidatedLinks { links: SchemaLinks::new(kept), dropped }
}

/// Both phases plus parsing and validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkingOutcome {
    pub explanation: String,
    pub squeezed: String,
    pub links: SchemaLinks,
    pub dropped: Vec<Link>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

pub fn link_schema(
    question: &str,
    catalog: &DatabaseCatalog,
    compact_schema: &str,
    chat: &Chat<'_>,
    prompts: &PromptSet,
) -> Result<LinkingOutcome, LinkError> {
    let explanation = explain(question, compact_schema, chat, prompts)?;
    let squeezed = squeeze(&explanation.text, chat, prompts)?;
    let (parsed, mut warnings) = match parse_links(&squeezed) {
        Ok(p) => (p.links, p.warnings),
        Err(e) => (SchemaLinks::default(), vec![e.to_string()]),
    };
    let validated = validate_links(&parsed, catalog);
    warnings.extend(validated.dropped.iter().map(|l| format!("dropped unresolved link {l}")));
    Ok(LinkingOutcome {
        explanation: explanation.text,
        squeezed,
        links: validated.links,
        dropped: validated.dropped,
        warnings,
    })
}
