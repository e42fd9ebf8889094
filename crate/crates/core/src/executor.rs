//! The execution environment: guarded, read-only, time-bounded statements.

use std::fmt;
use std::time::{Duration, Instant};

use rusqlite::types::ValueRef;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::database::Database;
use crate::sqltext::{self, TokenKind};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);
pub const DEFAULT_ROW_CAP: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GuardError {
    #[error("forbidden statement: {0}")]
    ForbiddenStatement(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OutcomeError {
    #[error("emptiness is undefined for a failed execution")]
    InvalidOnFailure,
}

/// A single result cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Null,
    Integer(i64),
    Real(f64),
    Text(String),
    Blob(Blob),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Blob {
    pub blob_hex: String,
}

impl Value {
    pub fn is_null(&self) -> bool {
        matches!(self, Value::Null)
    }

    fn from_ref(v: ValueRef<'_>) -> Self {
        match v {
            ValueRef::Null => Value::Null,
            ValueRef::Integer(i) => Value::Integer(i),
            ValueRef::Real(f) => Value::Real(f),
            ValueRef::Text(t) => Value::Text(String::from_utf8_lossy(t).into_owned()),
            ValueRef::Blob(b) => Value::Blob(Blob { blob_hex: hex::encode(b) }),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Null => Ok(()),
            Value::Integer(i) => write!(f, "{i}"),
            Value::Real(r) => write!(f, "{r}"),
            Value::Text(t) => f.write_str(t),
            Value::Blob(b) => write!(f, "x'{}'", b.blob_hex),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultSet {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
    /// Set when the row cap cut the result short.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub truncated: bool,
}

impl ResultSet {
    /// Zero rows, or a single row of nulls (aggregate over an empty set).
    pub fn is_empty(&self) -> bool {
        match self.rows.as_slice() {
            [] => true,
            [only] => only.iter().all(Value::is_null),
            _ => false,
        }
    }

    /// Plain-text grid for terminal output.
    pub fn to_table_string(&self) -> String {
        let cells: Vec<Vec<String>> = self.rows.iter().map(|r| r.iter().map(|v| v.to_string()).collect()).collect();
        let mut widths: Vec<usize> = self.columns.iter().map(|c| c.chars().count()).collect();
        for row in &cells {
            for (i, c) in row.iter().enumerate() {
                if let Some(w) = widths.get_mut(i) {
                    *w = (*w).max(c.chars().count());
                }
            }
        }
        let line = |vals: &[String]| {
            vals.iter()
                .zip(&widths)
                .map(|(v, w)| format!("{v:<w$}"))
                .collect::<Vec<_>>()
                .join(" | ")
                .trim_end()
                .to_string()
        };
        let mut out = line(&self.columns);
        out.push('\n');
        out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
        for row in &cells {
            out.push('\n');
            out.push_str(&line(row));
        }
        if self.truncated {
            out.push_str("\n(truncated)");
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecStatus {
    Success,
    Fail,
}

impl fmt::Display for ExecStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExecStatus::Success => "success",
            ExecStatus::Fail => "fail",
        })
    }
}

/// What the environment reports back for one candidate.
///
/// A failure carries its message and no result; a success carries a
/// result and no message. Construct through [`ExecutionOutcome::success`]
/// and [`ExecutionOutcome::fail`] to keep that pairing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub status: ExecStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_message: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<ResultSet>,
    /// Wall time; excluded from serialized traces so replays stay byte-stable.
    #[serde(skip)]
    pub elapsed: Duration,
}

impl ExecutionOutcome {
    pub fn success(result: ResultSet, elapsed: Duration) -> Self {
        Self { status: ExecStatus::Success, error_message: None, result: Some(result), elapsed }
    }

    pub fn fail(message: impl Into<String>, elapsed: Duration) -> Self {
        let mut message = message.into();
        if message.trim().is_empty() {
            message = "execution failed without a message".into();
        }
        Self { status: ExecStatus::Fail, error_message: Some(message), result: None, elapsed }
    }

    pub fn is_success(&self) -> bool {
        self.status == ExecStatus::Success
    }

    pub fn is_empty(&self) -> Result<bool, OutcomeError> {
        match &self.result {
            Some(rs) if self.is_success() => Ok(rs.is_empty()),
            _ => Err(OutcomeError::InvalidOnFailure),
        }
    }

    /// Success with at least one meaningful row: the loop's stop condition.
    pub fn is_success_nonempty(&self) -> bool {
        self.is_empty() == Ok(false)
    }
}

const FORBIDDEN_WORDS: [&str; 14] = [
    "INSERT", "UPDATE", "DELETE", "REPLACE", "DROP", "CREATE", "ALTER", "ATTACH", "DETACH", "PRAGMA", "VACUUM",
    "REINDEX", "ANALYZE", "UPSERT",
];

/// Accepts exactly one statement whose first keyword is `SELECT` or `WITH`.
pub fn guard_statement(sql: &str) -> Result<(), GuardError> {
    let tokens = sqltext::tokenize(sql).map_err(|e| GuardError::ForbiddenStatement(format!("unparseable ({e})")))?;
    let mut body_end = tokens.len();
    while body_end > 0 && tokens[body_end - 1].kind == TokenKind::Semicolon {
        body_end -= 1;
    }
    let body = &tokens[..body_end];
    if body.is_empty() {
        return Err(GuardError::ForbiddenStatement("empty statement".into()));
    }
    if body.iter().any(|t| t.kind == TokenKind::Semicolon) {
        return Err(GuardError::ForbiddenStatement("multiple statements".into()));
    }
    let keyword = sqltext::leading_keyword(body).ok_or_else(|| GuardError::ForbiddenStatement(body[0].text.clone()))?;
    if keyword != "SELECT" && keyword != "WITH" {
        return Err(GuardError::ForbiddenStatement(keyword));
    }
    // `WITH ... DELETE` and friends; a following `(` means a function call
    // such as replace(...).
    for (i, tok) in body.iter().enumerate() {
        if tok.kind == TokenKind::Word
            && FORBIDDEN_WORDS.iter().any(|w| tok.is_word(w))
            && body.get(i + 1).map(|n| n.kind != TokenKind::OpenParen).unwrap_or(true)
            && !body.get(i.wrapping_sub(1)).is_some_and(|p| p.kind == TokenKind::Dot)
        {
            return Err(GuardError::ForbiddenStatement(tok.text.to_ascii_uppercase()));
        }
    }
    Ok(())
}

/// Limits applied to every execution.
#[derive(Debug, Clone, Copy)]
pub struct ExecOptions {
    pub timeout: Duration,
    pub row_cap: usize,
}

impl Default for ExecOptions {
    fn default() -> Self {
        Self { timeout: DEFAULT_TIMEOUT, row_cap: DEFAULT_ROW_CAP }
    }
}

/// Guard, then execute. Guard rejections surface as failed outcomes so the
/// repair loop can feed them back like any engine error.
pub fn execute(sql: &str, db: &Database, opts: ExecOptions) -> ExecutionOutcome {
    let started = Instant::now();
    if let Err(e) = guard_statement(sql) {
        return ExecutionOutcome::fail(e.to_string(), started.elapsed());
    }
    execute_readonly(sql, db, opts)
}

/// Runs one statement. Engine errors come back verbatim as `fail`.
pub fn execute_readonly(sql: &str, db: &Database, opts: ExecOptions) -> ExecutionOutcome {
    let started = Instant::now();
    let deadline = started + opts.timeout;
    let conn = db.connection();
    conn.progress_handler(1_000, Some(move || Instant::now() >= deadline));
    let result = run_query(conn, sql, opts.row_cap);
    conn.progress_handler(0, None::<fn() -> bool>);
    let elapsed = started.elapsed();
    match result {
        Ok(rs) => ExecutionOutcome::success(rs, elapsed),
        Err(e) if is_interrupt(&e) && elapsed >= opts.timeout => {
            ExecutionOutcome::fail(format!("timeout: statement exceeded {:.3}s", opts.timeout.as_secs_f64()), elapsed)
        }
        Err(e) => ExecutionOutcome::fail(engine_message(&e), elapsed),
    }
}

fn is_interrupt(e: &rusqlite::Error) -> bool {
    matches!(e, rusqlite::Error::SqliteFailure(f, _) if f.code == rusqlite::ErrorCode::OperationInterrupted)
}

fn engine_message(e: &rusqlite::Error) -> String {
    match e {
        rusqlite::Error::SqliteFailure(_, Some(msg)) => msg.clone(),
        other => other.to_string(),
    }
}

fn run_query(conn: &rusqlite::Connection, sql: &str, row_cap: usize) -> rusqlite::Result<ResultSet> {
    let mut stmt = conn.prepare(sql)?;
    if !stmt.readonly() {
        return Err(rusqlite::Error::SqliteFailure(
            rusqlite::ffi::Error::new(rusqlite::ffi::SQLITE_READONLY),
            Some("statement is not read-only".into()),
        ));
    }
    let columns: Vec<String> = stmt.column_names().into_iter().map(String::from).collect();
    let width = columns.len();
    let mut rows = Vec::new();
    let mut truncated = false;
    let mut cursor = stmt.query([])?;
    while let Some(row) = cursor.next()? {
        if rows.len() == row_cap {
            truncated = true;
            break;
        }
        let mut values = Vec::with_capacity(width);
        for i in 0..width {
            values.push(Value::from_ref(row.get_ref(i)?));
        }
        rows.push(values);
    }
    Ok(ResultSet { columns, rows, truncated })
}
