#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use nl2sql::catalog::{self, CatalogOptions, DatabaseCatalog};
use nl2sql::database::Database;
use tempfile::TempDir;

pub const DEMO_FILES: [&str; 7] = [
    "demo.jsonl",
    "demo_config.json",
    "glossary.json",
    "traffic.annotations.json",
    "traffic.sql",
    "demo_transcript.jsonl",
    "demo_function_transcript.jsonl",
];

pub fn demo_source() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../demo")
}

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// A private copy of the demo directory with the database rebuilt from
/// `traffic.sql`.
pub struct Demo {
    pub dir: TempDir,
}

impl Demo {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().expect("tempdir");
        for name in DEMO_FILES {
            fs::copy(demo_source().join(name), dir.path().join(name))
                .unwrap_or_else(|e| panic!("copy demo/{name}: {e}"));
        }
        let sql = fs::read_to_string(dir.path().join("traffic.sql")).expect("traffic.sql");
        rusqlite::Connection::open(dir.path().join("traffic.sqlite"))
            .expect("create db")
            .execute_batch(&sql)
            .expect("load traffic.sql");
        Self { dir }
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn db_path(&self) -> PathBuf {
        self.path().join("traffic.sqlite")
    }

    pub fn db(&self) -> Database {
        Database::open(self.db_path()).expect("open demo db")
    }

    pub fn catalog(&self, db: &Database) -> DatabaseCatalog {
        let ann = catalog::load_annotations(&self.path().join("traffic.annotations.json")).expect("annotations");
        catalog::build_catalog(db, Some(&ann), CatalogOptions::default()).expect("catalog").catalog
    }
}

/// Compares `actual` with a golden file; `NL2SQL_BLESS=1` rewrites it.
pub fn check_golden(name: &str, actual: &str) -> Result<(), String> {
    let path = golden_dir().join(name);
    if std::env::var_os("NL2SQL_BLESS").is_some() {
        fs::create_dir_all(golden_dir()).map_err(|e| e.to_string())?;
        fs::write(&path, actual).map_err(|e| e.to_string())?;
    }
    let expected = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if expected == actual {
        return Ok(());
    }
    let line = expected
        .lines()
        .zip(actual.lines())
        .position(|(a, b)| a != b)
        .unwrap_or_else(|| expected.lines().count().min(actual.lines().count()));
    Err(format!("{name} differs from golden at line {}", line + 1))
}
