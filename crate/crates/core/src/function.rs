//! Template-based backend: the model picks one of four query functions and
//! fills its arguments; the call is validated against the catalog and
//! compiled to SQL by fixed text assembly.

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::catalog::{self, CatalogError, DatabaseCatalog, TableDescriptor};
use crate::database::Database;
use crate::executor::{self, ExecOptions};
use crate::linker::SchemaLinks;
use crate::llm::{Chat, GatewayError};
use crate::prompts::PromptSet;
use crate::rewrite::embedded_json;
use crate::sqltext::{self, TokenKind};

/// The four signatures, as they appear in the selection prompt.
pub const SIGNATURES: [&str; 4] = [
    "get_specific_columns(columns, table, condition)",
    "get_sorted_values_based_on_condition(values, table, condition, order_by, limit)",
    "get_aggregated_value(calculation, table, condition)",
    "get_distinct_grouped(columns, table, condition, group_by)",
];

#[derive(Debug, Error)]
pub enum FunctionError {
    #[error("malformed function call: {0}")]
    MalformedCall(String),
    #[error("unknown table: {0}")]
    UnknownTable(String),
    #[error("unknown column(s): {}", .0.join(", "))]
    UnknownColumn(Vec<String>),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dry run failed: {0}")]
    DryRun(String),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecificColumns {
    #[serde(deserialize_with = "one_or_many")]
    pub columns: Vec<String>,
    pub table: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SortedValues {
    #[serde(deserialize_with = "one_or_many")]
    pub values: Vec<String>,
    pub table: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<String>,
    pub order_by: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregatedValue {
    pub calculation: String,
    pub table: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistinctGrouped {
    #[serde(deserialize_with = "one_or_many")]
    pub columns: Vec<String>,
    pub table: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<String>,
    #[serde(default, deserialize_with = "opt_one_or_many", skip_serializing_if = "Option::is_none")]
    pub group_by: Option<Vec<String>>,
}

/// Wire form: `{"template": "<name>", "args": {...}}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "template", content = "args", rename_all = "snake_case")]
pub enum FunctionCall {
    GetSpecificColumns(SpecificColumns),
    GetSortedValuesBasedOnCondition(SortedValues),
    GetAggregatedValue(AggregatedValue),
    GetDistinctGrouped(DistinctGrouped),
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

impl From<OneOrMany> for Vec<String> {
    fn from(v: OneOrMany) -> Self {
        match v {
            OneOrMany::One(s) => vec![s],
            OneOrMany::Many(v) => v,
        }
    }
}

fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<String>, D::Error> {
    OneOrMany::deserialize(d).map(Into::into)
}

fn opt_one_or_many<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<String>>, D::Error> {
    Ok(Option::<OneOrMany>::deserialize(d)?.map(Into::into))
}

impl FunctionCall {
    pub fn template_name(&self) -> &'static str {
        match self {
            FunctionCall::GetSpecificColumns(_) => "get_specific_columns",
            FunctionCall::GetSortedValuesBasedOnCondition(_) => "get_sorted_values_based_on_condition",
            FunctionCall::GetAggregatedValue(_) => "get_aggregated_value",
            FunctionCall::GetDistinctGrouped(_) => "get_distinct_grouped",
        }
    }

    pub fn table(&self) -> &str {
        match self {
            FunctionCall::GetSpecificColumns(a) => &a.table,
            FunctionCall::GetSortedValuesBasedOnCondition(a) => &a.table,
            FunctionCall::GetAggregatedValue(a) => &a.table,
            FunctionCall::GetDistinctGrouped(a) => &a.table,
        }
    }

    fn table_mut(&mut self) -> &mut String {
        match self {
            FunctionCall::GetSpecificColumns(a) => &mut a.table,
            FunctionCall::GetSortedValuesBasedOnCondition(a) => &mut a.table,
            FunctionCall::GetAggregatedValue(a) => &mut a.table,
            FunctionCall::GetDistinctGrouped(a) => &mut a.table,
        }
    }

    pub fn condition(&self) -> Option<&str> {
        let c = match self {
            FunctionCall::GetSpecificColumns(a) => &a.condition,
            FunctionCall::GetSortedValuesBasedOnCondition(a) => &a.condition,
            FunctionCall::GetAggregatedValue(a) => &a.condition,
            FunctionCall::GetDistinctGrouped(a) => &a.condition,
        };
        c.as_deref().map(str::trim).filter(|c| !c.is_empty())
    }

    /// Parses the wire form.
    pub fn from_json(value: serde_json::Value) -> Result<Self, FunctionError> {
        serde_json::from_value(value).map_err(|e| FunctionError::MalformedCall(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompiledSql {
    pub sql_text: String,
    pub source_call: FunctionCall,
}

pub fn build_function_prompt(
    question: &str,
    catalog: &DatabaseCatalog,
    links: Option<&SchemaLinks>,
    prompts: &PromptSet,
) -> Result<String, FunctionError> {
    let schema_block = catalog::render_enriched(catalog, links)?;
    Ok(prompts.function.render(&[("schema_block", schema_block.trim_end()), ("question", question)]))
}

/// Parses a model reply into a call.
pub fn parse_call(reply: &str) -> Result<FunctionCall, FunctionError> {
    let value = embedded_json(reply, '{', '}')
        .ok_or_else(|| FunctionError::MalformedCall(format!("no JSON object in reply: {:?}", clip(reply))))?;
    FunctionCall::from_json(value)
}

fn clip(s: &str) -> String {
    s.chars().take(80).collect()
}

pub fn select_and_fill(
    question: &str,
    catalog: &DatabaseCatalog,
    links: Option<&SchemaLinks>,
    chat: &Chat<'_>,
    prompts: &PromptSet,
) -> Result<FunctionCall, FunctionError> {
    let prompt = build_function_prompt(question, catalog, links, prompts)?;
    parse_call(&chat.ask(&prompt)?)
}

/// The column name an argument item denotes, when it is a bare identifier
/// (plain or double-quoted). Expressions yield `None`.
fn bare_identifier(item: &str) -> Option<String> {
    let tokens = sqltext::tokenize(item.trim()).ok()?;
    match tokens.as_slice() {
        [t] if matches!(t.kind, TokenKind::Word | TokenKind::QuotedIdent) => t.ident(),
        _ => None,
    }
}

/// Splits `a DESC, b` into `(a, "DESC")`, `(b, "")` pieces.
fn order_terms(order_by: &str) -> Vec<(String, String)> {
    order_by
        .split(',')
        .map(|piece| {
            let piece = piece.trim();
            let upper = piece.to_ascii_uppercase();
            for dir in [" ASC", " DESC"] {
                if upper.ends_with(dir) {
                    let cut = piece.len() - dir.len();
                    return (piece[..cut].trim().to_string(), dir.trim().to_string());
                }
            }
            (piece.to_string(), String::new())
        })
        .collect()
}

struct Resolver<'a> {
    table: &'a TableDescriptor,
    unknown: Vec<String>,
}

impl Resolver<'_> {
    /// Canonicalizes bare identifiers; expressions pass through unchanged.
    fn item(&mut self, item: &str) -> String {
        let trimmed = item.trim();
        if trimmed == "*" {
            return trimmed.to_string();
        }
        match bare_identifier(trimmed) {
            Some(name) => match self.table.column(&name) {
                Some(col) => col.name.clone(),
                None => {
                    self.unknown.push(name);
                    trimmed.to_string()
                }
            },
            None => trimmed.to_string(),
        }
    }

    fn list(&mut self, items: &mut [String]) {
        for item in items {
            *item = self.item(item);
        }
    }

    fn order_by(&mut self, order_by: &str) -> String {
        order_terms(order_by)
            .into_iter()
            .map(|(expr, dir)| {
                let expr = self.item(&expr);
                let expr = if bare_identifier(&expr).is_some() { sqltext::quote_ident(&expr) } else { expr };
                if dir.is_empty() {
                    expr
                } else {
                    format!("{expr} {dir}")
                }
            })
            .collect::<Vec<_>>()
            .join(", ")
    }
}

/// Checks the call against the catalog and returns it with table and
/// column names in catalog casing. With a database, the compiled statement
/// is also dry-run with `LIMIT 0` so free-text conditions and calculations
/// are checked too.
pub fn validate_call(
    call: &FunctionCall,
    catalog: &DatabaseCatalog,
    db: Option<&Database>,
) -> Result<FunctionCall, FunctionError> {
    let table_name = call.table().trim();
    if table_name.is_empty() {
        return Err(FunctionError::InvalidArgument("table is empty".into()));
    }
    let lookup = bare_identifier(table_name).unwrap_or_else(|| table_name.to_string());
    let table = catalog.table(&lookup).ok_or_else(|| FunctionError::UnknownTable(table_name.to_string()))?;
    let mut call = call.clone();
    *call.table_mut() = table.name.clone();
    let mut r = Resolver { table, unknown: Vec::new() };
    match &mut call {
        FunctionCall::GetSpecificColumns(a) => {
            non_empty("columns", &a.columns)?;
            r.list(&mut a.columns);
        }
        FunctionCall::GetSortedValuesBasedOnCondition(a) => {
            non_empty("values", &a.values)?;
            r.list(&mut a.values);
            if a.order_by.trim().is_empty() {
                return Err(FunctionError::InvalidArgument("order_by is empty".into()));
            }
            a.order_by = r.order_by(&a.order_by);
            if a.limit == Some(0) {
                return Err(FunctionError::InvalidArgument("limit must be positive".into()));
            }
        }
        FunctionCall::GetAggregatedValue(a) => {
            if a.calculation.trim().is_empty() {
                return Err(FunctionError::InvalidArgument("calculation is empty".into()));
            }
            a.calculation = a.calculation.trim().to_string();
        }
        FunctionCall::GetDistinctGrouped(a) => {
            non_empty("columns", &a.columns)?;
            r.list(&mut a.columns);
            if let Some(g) = &mut a.group_by {
                r.list(g);
            }
        }
    }
    if !r.unknown.is_empty() {
        return Err(FunctionError::UnknownColumn(r.unknown));
    }
    if let Some(db) = db {
        let compiled = compile(&call);
        let probe = format!("SELECT * FROM ({}) LIMIT 0", compiled.sql_text);
        let outcome = executor::execute(&probe, db, ExecOptions::default());
        if !outcome.is_success() {
            return Err(FunctionError::DryRun(outcome.error_message.unwrap_or_default()));
        }
    }
    Ok(call)
}

fn non_empty(name: &str, items: &[String]) -> Result<(), FunctionError> {
    if items.is_empty() || items.iter().any(|i| i.trim().is_empty()) {
        return Err(FunctionError::InvalidArgument(format!("{name} must list at least one non-empty item")));
    }
    Ok(())
}

fn render_list(items: &[String]) -> String {
    items
        .iter()
        .map(|i| {
            let i = i.trim();
            match bare_identifier(i) {
                Some(name) => sqltext::quote_ident(&name),
                None => i.to_string(),
            }
        })
        .collect::<Vec<_>>()
        .join(", ")
}

/// Deterministic assembly; expects a call that passed `validate_call`.
pub fn compile(call: &FunctionCall) -> CompiledSql {
    let table = sqltext::quote_ident(call.table().trim());
    let where_clause = call.condition().map(|c| format!(" WHERE {c}")).unwrap_or_default();
    let sql_text = match call {
        FunctionCall::GetSpecificColumns(a) => {
            format!("SELECT {} FROM {table}{where_clause}", render_list(&a.columns))
        }
        FunctionCall::GetSortedValuesBasedOnCondition(a) => {
            let limit = a.limit.map(|n| format!(" LIMIT {n}")).unwrap_or_default();
            format!(
                "SELECT {} FROM {table}{where_clause} ORDER BY {}{limit}",
                render_list(&a.values),
                a.order_by.trim()
            )
        }
        FunctionCall::GetAggregatedValue(a) => {
            format!("SELECT {} FROM {table}{where_clause}", a.calculation.trim())
        }
        FunctionCall::GetDistinctGrouped(a) => match a.group_by.as_deref().filter(|g| !g.is_empty()) {
            Some(group_by) => format!(
                "SELECT {} FROM {table}{where_clause} GROUP BY {}",
                render_list(&a.columns),
                render_list(group_by)
            ),
            None => format!("SELECT DISTINCT {} FROM {table}{where_clause}", render_list(&a.columns)),
        },
    };
    CompiledSql { sql_text, source_call: call.clone() }
}
