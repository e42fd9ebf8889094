//! Zero-shot generation: instruction, enriched schema and question in that
//! order, and recovery of a single statement from the model's reply.

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{self, CatalogError, DatabaseCatalog};
use crate::linker::SchemaLinks;
use crate::llm::{Chat, GatewayError};
use crate::prompts::{PromptSet, SQL_RULES};
use crate::sqltext;

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("schema block is empty")]
    EmptySchema,
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("no code found in reply: {0:?}")]
    NoSqlFound(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationPrompt {
    pub instruction: String,
    pub schema_block: String,
    pub question: String,
    /// The assembled prompt sent to the model.
    pub text: String,
}

impl GenerationPrompt {
    /// Assembles the generation template around the given parts.
    pub fn assemble(
        prompts: &PromptSet,
        rules: &str,
        schema_block: &str,
        question: &str,
    ) -> Result<Self, GenerateError> {
        if question.trim().is_empty() {
            return Err(GenerateError::EmptyQuestion);
        }
        if schema_block.trim().is_empty() {
            return Err(GenerateError::EmptySchema);
        }
        let template = prompts.generate.text();
        let head_end = template.find("{schema_block}").expect("validated at load");
        let instruction = prompts.generate.clone_with_text(&template[..head_end]).render(&[("rules", rules)]);
        let text = prompts.generate.render(&[
            ("rules", rules),
            ("schema_block", schema_block.trim_end()),
            ("question", question),
        ]);
        Ok(Self {
            instruction: instruction.trim().to_string(),
            schema_block: schema_block.to_string(),
            question: question.to_string(),
            text,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Initial,
    Boosted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SqlCandidate {
    pub sql_text: String,
    pub attempt_index: u32,
    pub origin: Origin,
}

impl SqlCandidate {
    pub fn initial(sql_text: impl Into<String>) -> Self {
        Self { sql_text: sql_text.into(), attempt_index: 0, origin: Origin::Initial }
    }
}

impl fmt::Display for SqlCandidate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.sql_text)
    }
}

/// `links == None` means the all-tables fallback.
pub fn build_generation_prompt(
    question: &str,
    catalog: &DatabaseCatalog,
    links: Option<&SchemaLinks>,
    prompts: &PromptSet,
) -> Result<GenerationPrompt, GenerateError> {
    let schema_block = catalog::render_enriched(catalog, links)?;
    GenerationPrompt::assemble(prompts, SQL_RULES, &schema_block, question)
}

pub fn generate_sql(prompt: &GenerationPrompt, chat: &Chat<'_>) -> Result<SqlCandidate, GenerateError> {
    let reply = chat.ask(&prompt.text)?;
    Ok(SqlCandidate::initial(extract_sql(&reply)?))
}

/// Body of the first fenced code block, if any. An unclosed fence runs to
/// the end of the text.
pub fn first_fenced_block(reply: &str) -> Option<&str> {
    let open = reply.find("```")?;
    let after = &reply[open + 3..];
    // Skip the language tag line.
    let body_start = after.find('\n').map_or(after.len(), |i| i + 1);
    let body = &after[body_start..];
    let body = match body.find("```") {
        Some(close) => &body[..close],
        None => body,
    };
    Some(body)
}

fn statement_start() -> &'static [Regex; 3] {
    static RE: OnceLock<[Regex; 3]> = OnceLock::new();
    RE.get_or_init(|| {
        [
            Regex::new(r"\bSELECT\b").unwrap(),
            Regex::new(r#"(?i)\bWITH\s+(RECURSIVE\s+)?[\w"`\[\]]+\s*(\([^)]*\))?\s+AS\s*\("#).unwrap(),
            Regex::new(r"(?i)\bselect\b").unwrap(),
        ]
    })
}

/// First statement of `text`, without its terminator.
fn first_statement(text: &str) -> String {
    match sqltext::split_statements(text) {
        Ok(stmts) => stmts.into_iter().next().unwrap_or_default(),
        // Prose with a stray quote after the statement: cut at the first semicolon.
        Err(_) => text.split(';').next().unwrap_or("").trim().to_string(),
    }
}

/// Recovers one SQL statement from a model reply.
///
/// Prefers the first fenced block; otherwise scans for the first `SELECT`
/// (upper-case preferred) or `WITH name AS (` and reads to the statement
/// terminator. Only the first statement is kept.
pub fn extract_sql(reply: &str) -> Result<String, GenerateError> {
    if let Some(body) = first_fenced_block(reply) {
        let stmt = first_statement(body);
        if !stmt.is_empty() {
            return Ok(stmt.replace("```", "").trim().to_string());
        }
    }
    let [upper_select, with, any_select] = statement_start();
    let start = [upper_select.find(reply), with.find(reply)]
        .into_iter()
        .flatten()
        .map(|m| m.start())
        .min()
        .or_else(|| any_select.find(reply).map(|m| m.start()));
    let Some(start) = start else {
        return Err(GenerateError::NoSqlFound(reply.chars().take(80).collect()));
    };
    let stmt = first_statement(&reply[start..]).replace("```", "").trim().to_string();
    if stmt.is_empty() {
        return Err(GenerateError::NoSqlFound(reply.chars().take(80).collect()));
    }
    Ok(stmt)
}

/// Body of the first fenced block (trimmed), else the whole reply trimmed.
pub fn extract_code(reply: &str) -> Result<String, GenerateError> {
    let code = first_fenced_block(reply).unwrap_or(reply).trim().to_string();
    if code.is_empty() {
        return Err(GenerateError::NoSqlFound(reply.chars().take(80).collect()));
    }
    Ok(code)
}
