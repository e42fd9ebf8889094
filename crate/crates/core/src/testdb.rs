//! Small fixture database shared by unit tests.

use rusqlite::Connection;
use tempfile::TempDir;

use crate::database::Database;

pub const TOY_SCHEMA: &str = "
CREATE TABLE road_status (
    road_id INTEGER, -- road identifier
    speed REAL,
    record_time TEXT
);
CREATE TABLE districts (district_id INTEGER PRIMARY KEY, name TEXT);
CREATE VIEW fast_roads AS SELECT road_id FROM road_status WHERE speed > 40;
INSERT INTO road_status VALUES (1, NULL, NULL);
INSERT INTO road_status VALUES (5, 42.5, '2023/10/10');
INSERT INTO road_status VALUES (5, 38.0, '2023/10/10 08:00');
INSERT INTO road_status VALUES (7, 12.0, '2023/10/10 08:00');
INSERT INTO districts VALUES (1, 'North, Old Town');
INSERT INTO districts VALUES (2, 'Harbour');
";

pub fn toy_db() -> (TempDir, Database) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.sqlite");
    Connection::open(&path).unwrap().execute_batch(TOY_SCHEMA).unwrap();
    let db = Database::open(&path).unwrap();
    (dir, db)
}
