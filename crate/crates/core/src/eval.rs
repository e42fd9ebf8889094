//! Execution-accuracy evaluation.
//!
//! Results are compared as bags of rows: cells are normalized (numeric text
//! equals the number it spells, reals match within a relative tolerance,
//! NULL equals NULL), column names are ignored, and row order only counts
//! when the gold query ends in a top-level `ORDER BY`.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::database::Database;
use crate::executor::{self, ExecOptions, ExecutionOutcome, ResultSet, Value};
use crate::llm::TokenUsage;
use crate::parallel::{self, Parallelism};
use crate::sqltext;

pub const RELATIVE_TOLERANCE: f64 = 1e-6;
/// Largest bag for which near-tolerance reals fall back to full matching.
const MATCHING_FALLBACK_LIMIT: usize = 500;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("unparseable SQL: {0}")]
    UnparseableSql(String),
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read dataset {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("dataset line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("case {id}: {message}")]
    InvalidCase { id: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard];

    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
        }
    }
}

/// Hard when more than one distinct table is referenced (subqueries
/// included), medium when an aggregate function appears, easy otherwise.
pub fn classify_difficulty(sql: &str) -> Result<Difficulty, EvalError> {
    let tokens = sqltext::tokenize(sql).map_err(|e| EvalError::UnparseableSql(e.to_string()))?;
    if tokens.is_empty() {
        return Err(EvalError::UnparseableSql("empty statement".into()));
    }
    Ok(if sqltext::referenced_tables(&tokens).len() > 1 {
        Difficulty::Hard
    } else if sqltext::uses_aggregate(&tokens) {
        Difficulty::Medium
    } else {
        Difficulty::Easy
    })
}

#[derive(Debug, Clone, PartialEq)]
enum Cell<'a> {
    Null,
    Num(f64),
    Text(&'a str),
    Blob(&'a str),
}

impl<'a> Cell<'a> {
    fn of(v: &'a Value) -> Self {
        match v {
            Value::Null => Cell::Null,
            Value::Integer(i) => Cell::Num(*i as f64),
            Value::Real(r) => Cell::Num(*r),
            Value::Text(t) => match t.trim().parse::<f64>() {
                Ok(n) if n.is_finite() => Cell::Num(n),
                _ => Cell::Text(t),
            },
            Value::Blob(b) => Cell::Blob(&b.blob_hex),
        }
    }

    fn rank(&self) -> u8 {
        match self {
            Cell::Null => 0,
            Cell::Num(_) => 1,
            Cell::Text(_) => 2,
            Cell::Blob(_) => 3,
        }
    }

    fn order(&self, other: &Self) -> Ordering {
        match (self, other) {
            (Cell::Num(a), Cell::Num(b)) => a.total_cmp(b),
            (Cell::Text(a), Cell::Text(b)) | (Cell::Blob(a), Cell::Blob(b)) => a.cmp(b),
            _ => self.rank().cmp(&other.rank()),
        }
    }

    fn matches(&self, other: &Self) -> bool {
        match (self, other) {
            (Cell::Num(a), Cell::Num(b)) => a == b || (a - b).abs() <= RELATIVE_TOLERANCE * a.abs().max(b.abs()),
            _ => self == other,
        }
    }
}

type Row<'a> = Vec<Cell<'a>>;

fn canonical(rs: &ResultSet) -> Vec<Row<'_>> {
    rs.rows.iter().map(|r| r.iter().map(Cell::of).collect()).collect()
}

fn rows_match(a: &Row<'_>, b: &Row<'_>) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.matches(y))
}

fn row_order(a: &Row<'_>, b: &Row<'_>) -> Ordering {
    a.iter().zip(b).map(|(x, y)| x.order(y)).find(|o| o.is_ne()).unwrap_or(a.len().cmp(&b.len()))
}

/// Perfect matching between two bags under the tolerant row predicate.
fn bags_match_exhaustive(a: &[Row<'_>], b: &[Row<'_>]) -> bool {
    fn augment(i: usize, adj: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &j in &adj[i] {
            if !seen[j] {
                seen[j] = true;
                if owner[j].is_none_or(|k| augment(k, adj, seen, owner)) {
                    owner[j] = Some(i);
                    return true;
                }
            }
        }
        false
    }
    let adj: Vec<Vec<usize>> =
        a.iter().map(|r| b.iter().enumerate().filter(|(_, s)| rows_match(r, s)).map(|(j, _)| j).collect()).collect();
    let mut owner = vec![None; b.len()];
    (0..a.len()).all(|i| augment(i, &adj, &mut vec![false; b.len()], &mut owner))
}

/// Compares two result tables. `ordered` enforces row order.
pub fn compare_result_sets(pred: &ResultSet, gold: &ResultSet, ordered: bool) -> bool {
    if pred.columns.len() != gold.columns.len() || pred.rows.len() != gold.rows.len() {
        return false;
    }
    let (mut p, mut g) = (canonical(pred), canonical(gold));
    if ordered {
        return p.iter().zip(&g).all(|(a, b)| rows_match(a, b));
    }
    p.sort_by(row_order);
    g.sort_by(row_order);
    if p.iter().zip(&g).all(|(a, b)| rows_match(a, b)) {
        return true;
    }
    // Sorting can pair rows differently when reals differ within tolerance.
    let has_num = p.iter().flatten().any(|c| matches!(c, Cell::Num(_)));
    has_num && p.len() <= MATCHING_FALLBACK_LIMIT && bags_match_exhaustive(&p, &g)
}

/// Whether row order is part of the expected answer.
pub fn order_matters(gold_sql: &str) -> bool {
    sqltext::tokenize(gold_sql).map(|t| sqltext::has_top_level_order_by(&t)).unwrap_or(false)
}

/// Execution-accuracy match. A failed prediction never matches.
pub fn compare_results(pred: &ExecutionOutcome, gold: &ExecutionOutcome, gold_sql: &str) -> bool {
    match (&pred.result, &gold.result) {
        (Some(p), Some(g)) if pred.is_success() && gold.is_success() => {
            compare_result_sets(p, g, order_matters(gold_sql))
        }
        _ => false,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCase {
    pub id: String,
    pub question: String,
    pub gold_sql: String,
    /// Database file, relative to the dataset's directory unless absolute.
    pub db: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<Difficulty>,
}

/// Reads a JSON Lines dataset and checks every gold query.
pub fn load_dataset(path: &Path) -> Result<Vec<EvalCase>, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })?;
    let mut cases = Vec::new();
    let mut ids = HashSet::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let case: EvalCase =
            serde_json::from_str(line).map_err(|e| DatasetError::Parse { line: n + 1, message: e.to_string() })?;
        let invalid = |message: String| DatasetError::InvalidCase { id: case.id.clone(), message };
        executor::guard_statement(&case.gold_sql).map_err(|e| invalid(e.to_string()))?;
        classify_difficulty(&case.gold_sql).map_err(|e| invalid(e.to_string()))?;
        if !ids.insert(case.id.clone()) {
            return Err(invalid("duplicate id".into()));
        }
        cases.push(case);
    }
    Ok(cases)
}

/// What a backend produced for one case.
#[derive(Debug, Clone, Default)]
pub struct Prediction {
    /// Final SQL or script text, when one was produced.
    pub predicted: Option<String>,
    pub outcome: Option<ExecutionOutcome>,
    /// Why no usable prediction exists.
    pub error: Option<String>,
    pub token_usage: TokenUsage,
    /// Where the full trace was written.
    pub trace: Option<String>,
}

pub trait Predictor: Sync {
    fn predict(&self, case: &EvalCase, db: &Database) -> Prediction;
}

impl<F> Predictor for F
where
    F: Fn(&EvalCase, &Database) -> Prediction + Sync,
{
    fn predict(&self, case: &EvalCase, db: &Database) -> Prediction {
        self(case, db)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions {
    pub parallelism: Parallelism,
    pub exec: ExecOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub id: String,
    pub question: String,
    pub difficulty: Difficulty,
    pub gold_sql: String,
    pub predicted: Option<String>,
    #[serde(rename = "match")]
    pub matched: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<String>,
    pub token_usage: TokenUsage,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TierStats {
    pub cases: usize,
    pub matches: usize,
    pub ex: Option<f64>,
}

impl TierStats {
    fn add(&mut self, matched: bool) {
        self.cases += 1;
        self.matches += usize::from(matched);
        self.ex = Some(self.matches as f64 / self.cases as f64);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cases: Vec<CaseResult>,
    pub matches: usize,
    pub ex_overall: Option<f64>,
    pub ex_by_difficulty: BTreeMap<Difficulty, TierStats>,
    pub token_usage: TokenUsage,
}

impl EvalReport {
    pub fn from_cases(cases: Vec<CaseResult>) -> Self {
        let mut tiers: BTreeMap<Difficulty, TierStats> =
            Difficulty::ALL.into_iter().map(|d| (d, TierStats::default())).collect();
        let mut overall = TierStats::default();
        let mut token_usage = TokenUsage::default();
        for c in &cases {
            tiers.entry(c.difficulty).or_default().add(c.matched);
            overall.add(c.matched);
            token_usage += c.token_usage;
        }
        Self { matches: overall.matches, ex_overall: overall.ex, ex_by_difficulty: tiers, cases, token_usage }
    }

    pub fn mismatches(&self) -> usize {
        self.cases.len() - self.matches
    }

    /// Pretty JSON with a trailing newline; identical inputs give identical bytes.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Tiers by accuracy, one row each, then the overall figure.
    pub fn summary_table(&self) -> String {
        let fmt_ex = |ex: Option<f64>| ex.map_or("-".to_string(), |e| format!("{e:.4}"));
        let mut out = format!("{:<10}{:>7}{:>9}{:>9}\n", "tier", "cases", "matches", "EX");
        for (tier, s) in &self.ex_by_difficulty {
            let _ = writeln!(out, "{:<10}{:>7}{:>9}{:>9}", tier.as_str(), s.cases, s.matches, fmt_ex(s.ex));
        }
        let _ =
            writeln!(out, "{:<10}{:>7}{:>9}{:>9}", "overall", self.cases.len(), self.matches, fmt_ex(self.ex_overall));
        out
    }
}

fn resolve_db(base_dir: &Path, db: &str) -> PathBuf {
    let p = Path::new(db);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_dir.join(p)
    }
}

fn evaluate_case(case: &EvalCase, base_dir: &Path, predictor: &dyn Predictor, opts: &EvalOptions) -> CaseResult {
    let (difficulty, mut reason) = match case.difficulty {
        Some(d) => (d, None),
        None => match classify_difficulty(&case.gold_sql) {
            Ok(d) => (d, None),
            Err(e) => (Difficulty::Hard, Some(format!("gold query: {e}"))),
        },
    };
    let mut result = CaseResult {
        id: case.id.clone(),
        question: case.question.clone(),
        difficulty,
        gold_sql: case.gold_sql.clone(),
        predicted: None,
        matched: false,
        reason: None,
        trace: None,
        token_usage: TokenUsage::default(),
    };
    let db = match Database::open(resolve_db(base_dir, &case.db)) {
        Ok(db) => db,
        Err(e) => {
            result.reason = Some(e.to_string());
            return result;
        }
    };
    let gold = executor::execute(&case.gold_sql, &db, opts.exec);
    let pred = predictor.predict(case, &db);
    result.predicted = pred.predicted;
    result.trace = pred.trace;
    result.token_usage = pred.token_usage;
    if reason.is_none() {
        reason = if !gold.is_success() {
            Some(format!("gold query failed: {}", gold.error_message.as_deref().unwrap_or_default()))
        } else if let Some(e) = pred.error {
            Some(e)
        } else {
            match &pred.outcome {
                None => Some("no prediction".into()),
                Some(o) if !o.is_success() => {
                    Some(format!("prediction failed: {}", o.error_message.as_deref().unwrap_or_default()))
                }
                Some(o) if compare_results(o, &gold, &case.gold_sql) => None,
                Some(_) => Some("result mismatch".into()),
            }
        };
    }
    result.matched = reason.is_none();
    result.reason = reason;
    result
}

/// Runs every case, in parallel when configured. Per-case failures count
/// as mismatches; case order in the report follows the dataset.
pub fn evaluate(cases: &[EvalCase], base_dir: &Path, predictor: &dyn Predictor, opts: EvalOptions) -> EvalReport {
    let results = parallel::map_ordered(cases, opts.parallelism, |case| {
        let r = evaluate_case(case, base_dir, predictor, &opts);
        tracing::info!(id = %r.id, matched = r.matched, "case evaluated");
        r
    });
    EvalReport::from_cases(results)
}
