//! Schema introspection and the two schema renderings used in prompts.
//!
//! The compact form lists `Table <name>, Columns=[...]` clauses and feeds
//! schema linking. The enriched form adds, per column, the declared value
//! type, a meaning and a sample cell so the model sees value formats
//! (e.g. that dates are stored as `2023/10/10`) before writing conditions.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::database::{Database, DatabaseError};
use crate::executor::Value;
use crate::linker::SchemaLinks;
use crate::sqltext::quote_ident;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error(transparent)]
    UnreadableDatabase(#[from] DatabaseError),
    #[error("introspection of {db} failed: {source}")]
    Introspection { db: String, source: rusqlite::Error },
    #[error("annotation file {path}, line {line}: {message}")]
    AnnotationParse { path: PathBuf, line: usize, message: String },
    #[error("annotation file {path}: {source}")]
    AnnotationIo { path: PathBuf, source: std::io::Error },
    #[error("link {0} does not resolve in the catalog")]
    UnresolvedLink(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnDescriptor {
    pub name: String,
    pub value_type: String,
    pub meaning: String,
    pub sample_values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableDescriptor {
    pub name: String,
    pub comment: Option<String>,
    pub columns: Vec<ColumnDescriptor>,
}

impl TableDescriptor {
    pub fn column(&self, name: &str) -> Option<&ColumnDescriptor> {
        self.columns.iter().find(|c| c.name.eq_ignore_ascii_case(name))
    }
}

/// Introspected schema. Read-only once built; share it by reference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatabaseCatalog {
    db_id: String,
    tables: Vec<TableDescriptor>,
    source_path: PathBuf,
}

impl DatabaseCatalog {
    pub fn db_id(&self) -> &str {
        &self.db_id
    }

    pub fn tables(&self) -> &[TableDescriptor] {
        &self.tables
    }

    pub fn source_path(&self) -> &Path {
        &self.source_path
    }

    pub fn table(&self, name: &str) -> Option<&TableDescriptor> {
        self.tables.iter().find(|t| t.name.eq_ignore_ascii_case(name))
    }

    /// Case-insensitive lookup returning catalog casing.
    pub fn resolve(&self, table: &str, column: &str) -> Option<(&str, &str)> {
        let t = self.table(table)?;
        let c = t.column(column)?;
        Some((&t.name, &c.name))
    }

    pub fn column_count(&self) -> usize {
        self.tables.iter().map(|t| t.columns.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CatalogOptions {
    /// Non-null samples kept per column.
    pub sample_count: usize,
    /// Maximum rendered sample length in characters.
    pub sample_max_len: usize,
}

impl Default for CatalogOptions {
    fn default() -> Self {
        Self { sample_count: 1, sample_max_len: 64 }
    }
}

/// Meanings keyed `table.column` (and table comments keyed `table`),
/// stored lower-cased for case-insensitive matching.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Annotations {
    columns: BTreeMap<(String, String), String>,
    tables: BTreeMap<String, String>,
}

impl Annotations {
    pub fn len(&self) -> usize {
        self.columns.len() + self.tables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn column_meaning(&self, table: &str, column: &str) -> Option<&str> {
        self.columns.get(&(table.to_lowercase(), column.to_lowercase())).map(String::as_str)
    }

    pub fn table_comment(&self, table: &str) -> Option<&str> {
        self.tables.get(&table.to_lowercase()).map(String::as_str)
    }

    pub fn insert(&mut self, key: &str, meaning: impl Into<String>) -> Result<(), String> {
        match key.split_once('.') {
            Some((t, c)) if !t.is_empty() && !c.is_empty() => {
                self.columns.insert((t.to_lowercase(), c.to_lowercase()), meaning.into());
                Ok(())
            }
            None if !key.is_empty() => {
                self.tables.insert(key.to_lowercase(), meaning.into());
                Ok(())
            }
            _ => Err(format!("malformed key {key:?}, expected \"table.column\" or \"table\"")),
        }
    }

    /// Parses the JSON annotation format.
    pub fn parse(text: &str, origin: &Path) -> Result<Self, CatalogError> {
        let mut out = Annotations::default();
        if text.trim().is_empty() {
            return Ok(out);
        }
        let raw: BTreeMap<String, serde_json::Value> = serde_json::from_str(text).map_err(|e| {
            CatalogError::AnnotationParse { path: origin.to_path_buf(), line: e.line(), message: e.to_string() }
        })?;
        let line_of = |key: &str| {
            let needle = serde_json::to_string(key).unwrap_or_default();
            text.find(&needle).map_or(1, |pos| text[..pos].matches('\n').count() + 1)
        };
        for (key, value) in raw {
            let bad = |message: String| CatalogError::AnnotationParse {
                path: origin.to_path_buf(),
                line: line_of(&key),
                message,
            };
            let serde_json::Value::String(meaning) = value else {
                return Err(bad(format!("value for {key:?} must be a string")));
            };
            out.insert(&key, meaning).map_err(bad)?;
        }
        Ok(out)
    }
}

pub fn load_annotations(path: &Path) -> Result<Annotations, CatalogError> {
    let text =
        fs::read_to_string(path).map_err(|source| CatalogError::AnnotationIo { path: path.to_path_buf(), source })?;
    Annotations::parse(&text, path)
}

/// Sidecar annotation file looked up next to a database: `<stem>.annotations.json`.
pub fn sidecar_annotations_path(db_path: &Path) -> PathBuf {
    let stem = db_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    db_path.with_file_name(format!("{stem}.annotations.json"))
}

/// An annotation key that names no table or column. Reported, not fatal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationMismatch {
    pub key: String,
}

#[derive(Debug, Clone)]
pub struct CatalogBuild {
    pub catalog: DatabaseCatalog,
    pub warnings: Vec<AnnotationMismatch>,
}

pub fn build_catalog(
    db: &Database,
    annotations: Option<&Annotations>,
    opts: CatalogOptions,
) -> Result<CatalogBuild, CatalogError> {
    let db_id = db.path().file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "db".into());
    let introspect = |source| CatalogError::Introspection { db: db_id.clone(), source };
    let conn = db.connection();

    let mut stmt = conn
        .prepare(
            "SELECT name, COALESCE(sql, '') FROM sqlite_master \
             WHERE type = 'table' AND name NOT LIKE 'sqlite\\_%' ESCAPE '\\' ORDER BY rowid",
        )
        .map_err(introspect)?;
    let raw_tables: Vec<(String, String)> =
        stmt.query_map([], |r| Ok((r.get(0)?, r.get(1)?))).and_then(|rows| rows.collect()).map_err(introspect)?;

    let mut tables = Vec::with_capacity(raw_tables.len());
    for (name, create_sql) in raw_tables {
        let engine_comments = ddl_comments(&create_sql);
        let mut col_stmt =
            conn.prepare("SELECT name, type FROM pragma_table_info(?1) ORDER BY cid").map_err(introspect)?;
        let raw_cols: Vec<(String, String)> = col_stmt
            .query_map([&name], |r| Ok((r.get(0)?, r.get(1)?)))
            .and_then(|rows| rows.collect())
            .map_err(introspect)?;

        let mut columns = Vec::with_capacity(raw_cols.len());
        for (col, value_type) in raw_cols {
            let meaning = annotations
                .and_then(|a| a.column_meaning(&name, &col))
                .map(str::to_string)
                .or_else(|| engine_comments.columns.get(&col.to_lowercase()).cloned())
                .unwrap_or_default();
            let sample_values = sample_column(conn, &name, &col, opts).map_err(introspect)?;
            columns.push(ColumnDescriptor { name: col, value_type, meaning, sample_values });
        }
        let comment = annotations.and_then(|a| a.table_comment(&name)).map(str::to_string).or(engine_comments.table);
        tables.push(TableDescriptor { name, comment, columns });
    }

    let catalog = DatabaseCatalog { db_id, tables, source_path: db.path().to_path_buf() };
    let warnings = annotations.map(|a| unmatched_annotations(a, &catalog)).unwrap_or_default();
    for w in &warnings {
        tracing::warn!(key = %w.key, "annotation does not match any table or column");
    }
    Ok(CatalogBuild { catalog, warnings })
}

fn sample_column(
    conn: &rusqlite::Connection,
    table: &str,
    column: &str,
    opts: CatalogOptions,
) -> rusqlite::Result<Vec<String>> {
    if opts.sample_count == 0 {
        return Ok(Vec::new());
    }
    let col = format!("\"{}\"", column.replace('"', "\"\""));
    let sql = format!(
        "SELECT {col} FROM \"{}\" WHERE {col} IS NOT NULL LIMIT {}",
        table.replace('"', "\"\""),
        opts.sample_count
    );
    let mut stmt = conn.prepare(&sql)?;
    let mut rows = stmt.query([])?;
    let mut out = Vec::new();
    while let Some(row) = rows.next()? {
        let v = match row.get_ref(0)? {
            rusqlite::types::ValueRef::Integer(i) => Value::Integer(i),
            rusqlite::types::ValueRef::Real(f) => Value::Real(f),
            rusqlite::types::ValueRef::Text(t) => Value::Text(String::from_utf8_lossy(t).into_owned()),
            rusqlite::types::ValueRef::Blob(b) => Value::Text(format!("<blob {} bytes>", b.len())),
            rusqlite::types::ValueRef::Null => continue,
        };
        out.push(truncate_chars(&v.to_string(), opts.sample_max_len));
    }
    Ok(out)
}

fn truncate_chars(s: &str, max: usize) -> String {
    if s.chars().count() <= max {
        return s.to_string();
    }
    if max == 0 {
        return String::new();
    }
    let mut out: String = s.chars().take(max - 1).collect();
    out.push('…');
    out
}

#[derive(Debug, Default)]
struct DdlComments {
    table: Option<String>,
    columns: BTreeMap<String, String>,
}

/// `-- comment` text attached to column definitions in the stored DDL.
fn ddl_comments(create_sql: &str) -> DdlComments {
    let mut out = DdlComments::default();
    for line in create_sql.lines() {
        let Some((code, comment)) = line.split_once("--") else { continue };
        let comment = comment.trim();
        if comment.is_empty() {
            continue;
        }
        let code = code.trim().trim_start_matches(',').trim();
        if code.to_ascii_uppercase().starts_with("CREATE") {
            out.table = Some(comment.to_string());
            continue;
        }
        let first = code
            .split(|c: char| c.is_whitespace() || c == ',' || c == '(')
            .next()
            .unwrap_or("")
            .trim_matches(|c| matches!(c, '"' | '`' | '[' | ']'));
        if !first.is_empty() {
            out.columns.entry(first.to_lowercase()).or_insert_with(|| comment.to_string());
        }
    }
    out
}

fn unmatched_annotations(a: &Annotations, catalog: &DatabaseCatalog) -> Vec<AnnotationMismatch> {
    let mut out = Vec::new();
    for (t, c) in a.columns.keys() {
        if catalog.resolve(t, c).is_none() {
            out.push(AnnotationMismatch { key: format!("{t}.{c}") });
        }
    }
    for t in a.tables.keys() {
        if catalog.table(t).is_none() {
            out.push(AnnotationMismatch { key: t.clone() });
        }
    }
    out
}

/// `Table t, Columns=[a, b]; Table u, Columns=[c];`
pub fn render_compact(catalog: &DatabaseCatalog) -> String {
    catalog
        .tables
        .iter()
        .map(|t| {
            let cols: Vec<&str> = t.columns.iter().map(|c| c.name.as_str()).collect();
            format!("Table {}, Columns=[{}];", t.name, cols.join(", "))
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Per-column description for all tables, or only the linked ones.
pub fn render_enriched(catalog: &DatabaseCatalog, links: Option<&SchemaLinks>) -> Result<String, CatalogError> {
    let tables = included_tables(catalog, links)?;
    Ok(render_tables(&tables, |t| t.name.clone()))
}

/// Tables selected by `links` in catalog order; every table when absent.
pub fn included_tables<'a>(
    catalog: &'a DatabaseCatalog,
    links: Option<&SchemaLinks>,
) -> Result<Vec<&'a TableDescriptor>, CatalogError> {
    let Some(links) = links else {
        return Ok(catalog.tables.iter().collect());
    };
    for link in links.links() {
        if catalog.resolve(&link.table, &link.column).is_none() {
            return Err(CatalogError::UnresolvedLink(link.to_string()));
        }
    }
    Ok(catalog.tables.iter().filter(|t| links.tables().iter().any(|l| l.eq_ignore_ascii_case(&t.name))).collect())
}

pub(crate) fn render_tables(tables: &[&TableDescriptor], label: impl Fn(&TableDescriptor) -> String) -> String {
    let mut out = String::new();
    for (i, t) in tables.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str("Table ");
        out.push_str(&label(t));
        if let Some(comment) = t.comment.as_deref().filter(|c| !c.is_empty()) {
            out.push_str(" -- ");
            out.push_str(comment);
        }
        out.push('\n');
        for c in &t.columns {
            out.push_str(&format!(
                "  - {}: ValueType={}; Meaning={}; Sample={}\n",
                quote_ident(&c.name),
                c.value_type,
                c.meaning,
                c.sample_values.join(", ")
            ));
        }
    }
    out
}
