//! Query rewriting: extract vague terms, transform them into explicit
//! values, and substitute them back into the question.
//!
//! Well-known relative time phrases ("now", "just now", "today") and
//! glossary entries are resolved locally; only the remaining terms go
//! through the transform prompt. Substitution is mechanical by default.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use chrono::{Duration, NaiveDateTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{Chat, GatewayError};
use crate::prompts::PromptSet;

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M";

#[derive(Debug, Error)]
pub enum RewriteError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("cannot render temporal term {term:?}: {reason}")]
    MissingContext { term: String, reason: String },
    #[error("replacement key {0:?} does not occur in the question")]
    KeyAbsent(String),
    #[error("glossary {path}: {message}")]
    Glossary { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TermCategory {
    Temporal,
    Spatial,
    Domain,
}

impl TermCategory {
    /// Anything unrecognised is treated as domain vocabulary.
    pub fn parse_lenient(s: &str) -> Self {
        match s.trim().to_ascii_lowercase().as_str() {
            "temporal" | "time" => TermCategory::Temporal,
            "spatial" | "space" | "location" => TermCategory::Spatial,
            _ => TermCategory::Domain,
        }
    }
}

impl fmt::Display for TermCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TermCategory::Temporal => "temporal",
            TermCategory::Spatial => "spatial",
            TermCategory::Domain => "domain",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VagueTerm {
    pub surface: String,
    pub category: TermCategory,
}

impl VagueTerm {
    pub fn new(surface: impl Into<String>, category: TermCategory) -> Self {
        Self { surface: surface.into(), category }
    }
}

pub type Glossary = BTreeMap<String, String>;

pub fn load_glossary(path: &Path) -> Result<Glossary, RewriteError> {
    let err = |message: String| RewriteError::Glossary { path: path.display().to_string(), message };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    if text.trim().is_empty() {
        return Ok(Glossary::new());
    }
    serde_json::from_str(&text).map_err(|e| err(format!("line {}: {e}", e.line())))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RewriteContext {
    pub current_timestamp: NaiveDateTime,
    pub location: Option<String>,
    pub glossary: Glossary,
}

impl RewriteContext {
    pub fn at(current_timestamp: NaiveDateTime) -> Self {
        Self { current_timestamp, location: None, glossary: Glossary::new() }
    }

    fn timestamp(&self) -> String {
        self.current_timestamp.format(TIMESTAMP_FORMAT).to_string()
    }

    fn prompt_vars(&self) -> (String, String, String) {
        let glossary = if self.glossary.is_empty() {
            "(none)".to_string()
        } else {
            self.glossary.iter().map(|(k, v)| format!("- {k}: {v}")).collect::<Vec<_>>().join("\n")
        };
        (self.timestamp(), self.location.clone().unwrap_or_else(|| "(unknown)".into()), glossary)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplaceMode {
    /// Deterministic local substitution.
    #[default]
    Local,
    /// Ask the model to perform the substitution.
    Llm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewriteOptions {
    /// Width of the interval "just now"-style phrases resolve to.
    pub recent_window_minutes: i64,
    pub replace_mode: ReplaceMode,
}

impl Default for RewriteOptions {
    fn default() -> Self {
        Self { recent_window_minutes: 15, replace_mode: ReplaceMode::Local }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewriteResult {
    pub original: String,
    pub terms: Vec<VagueTerm>,
    pub mapping: BTreeMap<String, String>,
    pub rewritten: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl RewriteResult {
    pub fn identity(question: &str) -> Self {
        Self {
            original: question.to_string(),
            terms: Vec::new(),
            mapping: BTreeMap::new(),
            rewritten: question.to_string(),
            warnings: Vec::new(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.terms.is_empty() && self.rewritten == self.original
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Extraction {
    pub terms: Vec<VagueTerm>,
    pub warnings: Vec<String>,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Byte offset of the first occurrence of `term` in `text` that does not
/// start or end inside a word. Case-sensitive unless `fold_case`.
fn find_term(text: &str, term: &str, fold_case: bool) -> Option<usize> {
    if term.is_empty() {
        return None;
    }
    let (hay, needle) =
        if fold_case { (text.to_lowercase(), term.to_lowercase()) } else { (text.to_string(), term.to_string()) };
    // Lower-casing can change byte lengths; only trust offsets when it did not.
    if fold_case && hay.len() != text.len() {
        return find_term(text, term, false);
    }
    let mut from = 0;
    while let Some(rel) = hay[from..].find(&needle) {
        let at = from + rel;
        let end = at + needle.len();
        let left_ok = !term.starts_with(is_word_char) || !text[..at].chars().next_back().is_some_and(is_word_char);
        let right_ok = !term.ends_with(is_word_char) || !text[end..].chars().next().is_some_and(is_word_char);
        if left_ok && right_ok {
            return Some(at);
        }
        from = at + hay[at..].chars().next().map_or(1, char::len_utf8);
    }
    None
}

/// Finds the first JSON value of the given bracket kind embedded in prose.
pub(crate) fn embedded_json(reply: &str, open: char, close: char) -> Option<serde_json::Value> {
    let trimmed = reply.trim();
    if let Ok(v) = serde_json::from_str::<serde_json::Value>(trimmed) {
        return Some(v);
    }
    let mut starts = reply.match_indices(open).map(|(i, _)| i);
    let end = reply.rfind(close)?;
    starts.find_map(|s| (s < end).then(|| serde_json::from_str(&reply[s..=end]).ok()).flatten())
}

pub fn extract_vague_terms(
    question: &str,
    ctx: &RewriteContext,
    chat: &Chat<'_>,
    prompts: &PromptSet,
) -> Result<Extraction, RewriteError> {
    if question.trim().is_empty() {
        return Err(RewriteError::EmptyQuestion);
    }
    let (timestamp, location, glossary) = ctx.prompt_vars();
    let prompt = prompts.extract.render(&[
        ("question", question),
        ("timestamp", &timestamp),
        ("location", &location),
        ("glossary", &glossary),
    ]);
    let reply = chat.ask(&prompt)?;
    Ok(parse_extraction(question, &reply))
}

/// Parses the extraction reply and keeps only terms present in the question.
pub fn parse_extraction(question: &str, reply: &str) -> Extraction {
    let mut out = Extraction::default();
    let items = match embedded_json(reply, '[', ']') {
        Some(serde_json::Value::Array(items)) => items,
        _ => {
            let msg = format!("malformed extraction output, treating as no vague terms: {:?}", clip(reply));
            tracing::warn!("{msg}");
            out.warnings.push(msg);
            return out;
        }
    };
    for item in items {
        let (surface, category) = match &item {
            serde_json::Value::String(s) => (s.clone(), None),
            serde_json::Value::Object(o) => {
                let surface = ["term", "surface", "word", "text"]
                    .iter()
                    .find_map(|k| o.get(*k).and_then(|v| v.as_str()))
                    .map(str::to_string);
                let category = o.get("category").and_then(|v| v.as_str()).map(TermCategory::parse_lenient);
                match surface {
                    Some(s) => (s, category),
                    None => {
                        out.warnings.push(format!("extraction item without a term: {item}"));
                        continue;
                    }
                }
            }
            other => {
                out.warnings.push(format!("unexpected extraction item: {other}"));
                continue;
            }
        };
        let surface = surface.trim();
        let Some(at) = find_term(question, surface, false).or_else(|| find_term(question, surface, true)) else {
            let msg = format!("dropped term {surface:?}: not present in the question");
            tracing::warn!("{msg}");
            out.warnings.push(msg);
            continue;
        };
        let verbatim = &question[at..at + surface.len()];
        if out.terms.iter().any(|t| t.surface == verbatim) {
            continue;
        }
        let category = category.unwrap_or_else(|| {
            if temporal_policy(verbatim).is_some() {
                TermCategory::Temporal
            } else {
                TermCategory::Domain
            }
        });
        out.terms.push(VagueTerm::new(verbatim, category));
    }
    out
}

fn clip(s: &str) -> String {
    s.chars().take(80).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TemporalPolicy {
    Instant,
    RecentWindow,
    PastMinutes(i64),
    DayOffset(i64),
}

fn temporal_policy(surface: &str) -> Option<TemporalPolicy> {
    use TemporalPolicy::*;
    let s = surface.trim().to_lowercase();
    Some(match s.as_str() {
        "now" | "right now" | "currently" | "at the moment" | "at present" | "at this moment" => Instant,
        "just now" | "recently" | "a moment ago" | "lately" => RecentWindow,
        "in the last hour" | "in the past hour" | "the last hour" | "the past hour" => PastMinutes(60),
        "today" => DayOffset(0),
        "yesterday" => DayOffset(-1),
        _ => return None,
    })
}

fn render_temporal(
    term: &str,
    policy: TemporalPolicy,
    ctx: &RewriteContext,
    opts: &RewriteOptions,
) -> Result<String, RewriteError> {
    let now = ctx.current_timestamp;
    let fmt = |t: NaiveDateTime| t.format(TIMESTAMP_FORMAT).to_string();
    let before = |minutes: i64| {
        Duration::try_minutes(minutes).and_then(|d| now.checked_sub_signed(d)).ok_or_else(|| {
            RewriteError::MissingContext {
                term: term.to_string(),
                reason: format!("cannot step {minutes} minutes back from {}", fmt(now)),
            }
        })
    };
    Ok(match policy {
        TemporalPolicy::Instant => fmt(now),
        TemporalPolicy::RecentWindow => {
            format!("between {} and {}", fmt(before(opts.recent_window_minutes)?), fmt(now))
        }
        TemporalPolicy::PastMinutes(m) => format!("between {} and {}", fmt(before(m)?), fmt(now)),
        TemporalPolicy::DayOffset(days) => {
            let day = before(-days * 24 * 60)?;
            format!("on {}", day.format("%Y-%m-%d"))
        }
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transformation {
    pub mapping: BTreeMap<String, String>,
    pub warnings: Vec<String>,
}

pub fn transform_terms(
    question: &str,
    terms: &[VagueTerm],
    ctx: &RewriteContext,
    opts: &RewriteOptions,
    chat: &Chat<'_>,
    prompts: &PromptSet,
) -> Result<Transformation, RewriteError> {
    let mut out = Transformation::default();
    let mut pending = Vec::new();
    for term in terms {
        if let Some((_, def)) = ctx.glossary.iter().find(|(k, _)| k.eq_ignore_ascii_case(&term.surface)) {
            out.mapping.insert(term.surface.clone(), def.clone());
        } else if let Some(policy) = temporal_policy(&term.surface).filter(|_| term.category == TermCategory::Temporal)
        {
            out.mapping.insert(term.surface.clone(), render_temporal(&term.surface, policy, ctx, opts)?);
        } else {
            pending.push(term);
        }
    }
    if pending.is_empty() {
        return Ok(out);
    }

    let (timestamp, location, glossary) = ctx.prompt_vars();
    let listed =
        serde_json::to_string(&pending.iter().map(|t| &t.surface).collect::<Vec<_>>()).expect("string list serializes");
    let prompt = prompts.transform.render(&[
        ("question", question),
        ("terms", &listed),
        ("timestamp", &timestamp),
        ("location", &location),
        ("glossary", &glossary),
    ]);
    let reply = chat.ask(&prompt)?;
    let parsed = match embedded_json(&reply, '{', '}') {
        Some(serde_json::Value::Object(map)) => map,
        _ => {
            out.warnings.push(format!("malformed transform output, terms left unchanged: {:?}", clip(&reply)));
            return Ok(out);
        }
    };
    for term in pending {
        let value = parsed
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(&term.surface))
            .and_then(|(_, v)| match v {
                serde_json::Value::String(s) => Some(s.trim().to_string()),
                serde_json::Value::Null => None,
                other => Some(other.to_string()),
            })
            .filter(|v| !v.is_empty());
        match value {
            Some(v) => {
                out.mapping.insert(term.surface.clone(), v);
            }
            None => out.warnings.push(format!("no replacement returned for {:?}", term.surface)),
        }
    }
    Ok(out)
}

/// Replaces every whole-word occurrence of each key, trying longer keys
/// first at each position so "just now" wins over "now".
pub fn replace_terms(question: &str, mapping: &BTreeMap<String, String>) -> Result<String, RewriteError> {
    for key in mapping.keys() {
        if find_term(question, key, false).is_none() {
            return Err(RewriteError::KeyAbsent(key.clone()));
        }
    }
    let mut keys: Vec<(&String, &String)> = mapping.iter().filter(|(k, _)| !k.is_empty()).collect();
    keys.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(b.0)));

    let mut out = String::with_capacity(question.len() + 32);
    let mut i = 0;
    'scan: while i < question.len() {
        for (key, value) in &keys {
            if question[i..].starts_with(key.as_str()) && find_term(&question[i..], key, false) == Some(0) {
                let left_ok =
                    !key.starts_with(is_word_char) || !question[..i].chars().next_back().is_some_and(is_word_char);
                if left_ok {
                    out.push_str(value);
                    i += key.len();
                    continue 'scan;
                }
            }
        }
        let ch = question[i..].chars().next().expect("in bounds");
        out.push(ch);
        i += ch.len_utf8();
    }
    Ok(out)
}

pub fn rewrite(
    question: &str,
    ctx: &RewriteContext,
    opts: &RewriteOptions,
    chat: &Chat<'_>,
    prompts: &PromptSet,
) -> Result<RewriteResult, RewriteError> {
    let extraction = extract_vague_terms(question, ctx, chat, prompts)?;
    let mut result = RewriteResult::identity(question);
    result.warnings = extraction.warnings;
    if extraction.terms.is_empty() {
        return Ok(result);
    }
    let transformation = transform_terms(question, &extraction.terms, ctx, opts, chat, prompts)?;
    result.warnings.extend(transformation.warnings);
    result.terms = extraction.terms;
    result.mapping = transformation.mapping;

    result.rewritten = match opts.replace_mode {
        ReplaceMode::Local => replace_terms(question, &result.mapping)?,
        ReplaceMode::Llm if result.mapping.is_empty() => question.to_string(),
        ReplaceMode::Llm => {
            let mapping = serde_json::to_string(&result.mapping).expect("map serializes");
            let reply = chat.ask(&prompts.replace.render(&[("question", question), ("mapping", &mapping)]))?;
            let reply = reply.trim().trim_matches('"').trim();
            if reply.is_empty() {
                result.warnings.push("empty replace output, substituted locally".into());
                replace_terms(question, &result.mapping)?
            } else {
                reply.to_string()
            }
        }
    };
    Ok(result)
}
