//! Read-only handle on a single-file SQLite database.

use std::path::{Path, PathBuf};

use rusqlite::{Connection, OpenFlags};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatabaseError {
    #[error("cannot read database {path}: {reason}")]
    Unreadable { path: PathBuf, reason: String },
}

/// One read-only connection. `Send` but not `Sync`: concurrent workers
/// each open their own handle on the same file.
#[derive(Debug)]
pub struct Database {
    path: PathBuf,
    conn: Connection,
}

impl Database {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, DatabaseError> {
        let path = path.as_ref().to_path_buf();
        let unreadable = |reason: String| DatabaseError::Unreadable { path: path.clone(), reason };
        if !path.is_file() {
            return Err(unreadable("no such file".into()));
        }
        let conn =
            Connection::open_with_flags(&path, OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX)
                .map_err(|e| unreadable(e.to_string()))?;
        // Opening is lazy; force a read of the header so corrupt files fail here.
        conn.query_row("SELECT COUNT(*) FROM sqlite_master", [], |r| r.get::<_, i64>(0))
            .map_err(|e| unreadable(e.to_string()))?;
        Ok(Self { path, conn })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn connection(&self) -> &Connection {
        &self.conn
    }
}
