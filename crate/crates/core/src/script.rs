//! Python backend: tables exported as CSV files, a generation prompt asking
//! for Pandas code, and a subprocess runner whose standard output is read
//! back as a CSV result table.

use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::booster::Environment;
use crate::catalog::{self, CatalogError, DatabaseCatalog};
use crate::database::Database;
use crate::executor::{ExecStatus, ExecutionOutcome, ResultSet, Value};
use crate::generator::{self, GenerateError, GenerationPrompt};
use crate::linker::SchemaLinks;
use crate::prompts::{PromptSet, PYTHON_INSTRUCTION_LITERAL, PYTHON_RULES, SQL_INSTRUCTION_LITERAL};
use crate::sqltext::quote_ident;

/// Environment variable naming the interpreter; `python3` on PATH otherwise.
pub const ENV_INTERPRETER: &str = "TEXT2SQL_PYTHON";
pub const DEFAULT_SCRIPT_TIMEOUT: Duration = Duration::from_secs(30);
pub const SCRIPT_FILE: &str = "answer.py";

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("interpreter not found: {0}")]
    InterpreterMissing(String),
    #[error("export failed: {0}")]
    Io(#[from] io::Error),
    #[error("export failed: {0}")]
    Csv(#[from] csv::Error),
    #[error("export failed: {0}")]
    Sql(#[from] rusqlite::Error),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error("nothing to export")]
    NoExports,
    #[error(transparent)]
    Generate(#[from] GenerateError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableExport {
    pub table: String,
    pub path: PathBuf,
    pub row_count: usize,
}

impl TableExport {
    /// Name of the file relative to the export directory.
    pub fn file_name(&self) -> String {
        self.path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptOutcome {
    pub status: ExecStatus,
    pub stdout: String,
    pub stderr: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parsed_rows: Option<ResultSet>,
    #[serde(skip)]
    pub elapsed: Duration,
}

impl ScriptOutcome {
    /// The outcome as the boost loop and the comparator see it: stderr is
    /// the error message, the parsed table the result.
    pub fn to_execution_outcome(&self) -> ExecutionOutcome {
        match (self.status, &self.parsed_rows) {
            (ExecStatus::Success, Some(rows)) => ExecutionOutcome::success(rows.clone(), self.elapsed),
            (ExecStatus::Success, None) if self.stdout.trim().is_empty() => {
                ExecutionOutcome::success(ResultSet::default(), self.elapsed)
            }
            (ExecStatus::Success, None) => ExecutionOutcome::fail(
                format!("standard output is not CSV: {}", self.stdout.chars().take(200).collect::<String>()),
                self.elapsed,
            ),
            (ExecStatus::Fail, _) => ExecutionOutcome::fail(self.stderr.trim(), self.elapsed),
        }
    }
}

fn file_stem_for(table: &str) -> String {
    table.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' }).collect()
}

fn cell(v: rusqlite::types::ValueRef<'_>) -> String {
    use rusqlite::types::ValueRef;
    match v {
        ValueRef::Null => String::new(),
        ValueRef::Integer(i) => i.to_string(),
        ValueRef::Real(r) => r.to_string(),
        ValueRef::Text(t) => String::from_utf8_lossy(t).into_owned(),
        ValueRef::Blob(b) => hex::encode(b),
    }
}

/// Writes `<table>.csv` for each linked table (every table when `links` is
/// absent or empty): header row in catalog column order, rows in natural
/// order, fields quoted only when needed, NULL as an empty field.
pub fn export_tables_csv(
    db: &Database,
    catalog: &DatabaseCatalog,
    links: Option<&SchemaLinks>,
    dir: &Path,
) -> Result<Vec<TableExport>, ScriptError> {
    let links = links.filter(|l| !l.is_empty());
    let tables = catalog::included_tables(catalog, links)?;
    fs::create_dir_all(dir)?;
    let mut exports = Vec::with_capacity(tables.len());
    for t in tables {
        let path = dir.join(format!("{}.csv", file_stem_for(&t.name)));
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(&path)?;
        w.write_record(t.columns.iter().map(|c| c.name.as_str()))?;
        let cols: Vec<String> = t.columns.iter().map(|c| quote_ident(&c.name)).collect();
        let sql = format!("SELECT {} FROM {}", cols.join(", "), quote_ident(&t.name));
        let mut stmt = db.connection().prepare(&sql)?;
        let mut rows = stmt.query([])?;
        let mut row_count = 0;
        while let Some(row) = rows.next()? {
            let record: Vec<String> = (0..cols.len()).map(|i| row.get_ref(i).map(cell)).collect::<Result<_, _>>()?;
            w.write_record(&record)?;
            row_count += 1;
        }
        w.flush()?;
        exports.push(TableExport { table: t.name.clone(), path, row_count });
    }
    Ok(exports)
}

/// The generation prompt with the Python instruction, the Python rules and
/// each table introduced by its CSV file name.
pub fn build_script_prompt(
    question: &str,
    exports: &[TableExport],
    catalog: &DatabaseCatalog,
    prompts: &PromptSet,
) -> Result<GenerationPrompt, ScriptError> {
    if exports.is_empty() {
        return Err(ScriptError::NoExports);
    }
    let tables: Vec<_> = catalog.tables().iter().filter(|t| exports.iter().any(|e| e.table == t.name)).collect();
    let schema_block = catalog::render_tables(&tables, |t| {
        let file = exports.iter().find(|e| e.table == t.name).map(TableExport::file_name).unwrap_or_default();
        format!("{file} (table {})", t.name)
    });
    let text = prompts.generate.text();
    let swapped = if text.contains(SQL_INSTRUCTION_LITERAL) {
        text.replacen(SQL_INSTRUCTION_LITERAL, PYTHON_INSTRUCTION_LITERAL, 1)
    } else {
        format!("{PYTHON_INSTRUCTION_LITERAL} to answer the question.\n{text}")
    };
    let swapped = PromptSet { generate: prompts.generate.clone_with_text(&swapped), ..prompts.clone() };
    Ok(GenerationPrompt::assemble(&swapped, PYTHON_RULES, &schema_block, question)?)
}

/// `$TEXT2SQL_PYTHON`, else the first `python3` on PATH.
pub fn find_interpreter() -> Option<PathBuf> {
    if let Some(p) = std::env::var_os(ENV_INTERPRETER).filter(|p| !p.is_empty()) {
        return Some(PathBuf::from(p));
    }
    let path = std::env::var_os("PATH").unwrap_or_default();
    std::env::split_paths(&path).map(|d| d.join("python3")).find(|p| p.is_file())
}

fn spawn_reader<R: Read + Send + 'static>(mut r: R) -> thread::JoinHandle<String> {
    thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = r.read_to_end(&mut buf);
        String::from_utf8_lossy(&buf).into_owned()
    })
}

/// Writes `code` to `answer.py` in `workdir` and runs it there.
pub fn execute_script(
    code: &str,
    workdir: &Path,
    interpreter: &Path,
    timeout: Duration,
) -> Result<ScriptOutcome, ScriptError> {
    let script = workdir.join(SCRIPT_FILE);
    fs::write(&script, code)?;
    let started = Instant::now();
    let mut child = match Command::new(interpreter)
        .arg(SCRIPT_FILE)
        .current_dir(workdir)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
    {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), io::ErrorKind::NotFound | io::ErrorKind::PermissionDenied) => {
            return Err(ScriptError::InterpreterMissing(format!("{}: {e}", interpreter.display())));
        }
        Err(e) => return Err(e.into()),
    };
    let out = spawn_reader(child.stdout.take().expect("piped"));
    let err = spawn_reader(child.stderr.take().expect("piped"));
    let mut timed_out = false;
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break Some(status);
        }
        if started.elapsed() >= timeout {
            let _ = child.kill();
            let _ = child.wait();
            timed_out = true;
            break None;
        }
        thread::sleep(Duration::from_millis(10));
    };
    let stdout = out.join().unwrap_or_default();
    let mut stderr = err.join().unwrap_or_default();
    let elapsed = started.elapsed();
    let success = status.is_some_and(|s| s.success());
    if timed_out {
        if !stderr.is_empty() && !stderr.ends_with('\n') {
            stderr.push('\n');
        }
        stderr.push_str(&format!("timeout: script exceeded {:.1}s", timeout.as_secs_f64()));
    } else if !success && stderr.trim().is_empty() {
        stderr = format!("script exited with {}", status.map_or("no status".into(), |s| s.to_string()));
    }
    let parsed_rows = if success { parse_csv_output(&stdout) } else { None };
    let status = if success { ExecStatus::Success } else { ExecStatus::Fail };
    if let Some(class) = failure_class(&stderr).filter(|_| !success) {
        tracing::warn!(class, "script failed");
    }
    tracing::debug!(?status, ?elapsed, "script finished");
    Ok(ScriptOutcome { status, stdout, stderr, parsed_rows, elapsed })
}

/// Coarse label for a Python traceback: a value used with the wrong type,
/// or a reference to data that does not exist.
pub fn failure_class(stderr: &str) -> Option<&'static str> {
    let last = stderr.lines().rev().find(|l| !l.trim().is_empty())?;
    if last.starts_with("TypeError") || last.contains("could not convert") || last.contains("invalid literal") {
        Some("type_error")
    } else if ["KeyError", "FileNotFoundError", "AttributeError", "IndexError"].iter().any(|e| last.starts_with(e))
        || last.contains("not in index")
    {
        Some("missing_data")
    } else {
        None
    }
}

fn infer(field: &str) -> Value {
    if field.is_empty() {
        Value::Null
    } else if let Ok(i) = field.parse::<i64>() {
        Value::Integer(i)
    } else if let Some(r) = field.parse::<f64>().ok().filter(|r| r.is_finite()) {
        Value::Real(r)
    } else {
        Value::Text(field.to_string())
    }
}

/// Header row plus records; empty fields become NULL and numeric-looking
/// fields numbers. `None` when stdout is empty or not rectangular CSV.
pub fn parse_csv_output(stdout: &str) -> Option<ResultSet> {
    if stdout.trim().is_empty() {
        return None;
    }
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(stdout.as_bytes());
    let columns: Vec<String> = r.headers().ok()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.ok()?;
        rows.push(rec.iter().map(infer).collect());
    }
    Some(ResultSet { columns, rows, truncated: false })
}

/// Runs candidates as scripts inside an export directory.
pub struct ScriptEnvironment<'a> {
    pub workdir: &'a Path,
    pub interpreter: &'a Path,
    pub timeout: Duration,
}

impl Environment for ScriptEnvironment<'_> {
    fn execute(&self, code: &str) -> ExecutionOutcome {
        match execute_script(code, self.workdir, self.interpreter, self.timeout) {
            Ok(o) => o.to_execution_outcome(),
            Err(e) => ExecutionOutcome::fail(e.to_string(), Duration::ZERO),
        }
    }

    fn extract(&self, reply: &str) -> Result<String, GenerateError> {
        generator::extract_code(reply)
    }

    fn language(&self) -> &'static str {
        "Python"
    }
}
