//! Rebuilds the demo database and records the demo transcripts.
//!
//! The model is replaced by a scripted author that recognizes each prompt
//! by its stage and its question, so the transcripts are produced by the
//! real pipeline and replay without misses.
//!
//!     cargo run -p nl2sql-core --example author_demo -- demo

use std::fs;
use std::path::{Path, PathBuf};

use nl2sql::database::Database;
use nl2sql::eval::{self, EvalOptions};
use nl2sql::llm::{CompletionRequest, FnBackend, Gateway, GatewayError};
use nl2sql::pipeline::{Backend, Pipeline, PipelineConfig};

struct Case {
    question: &'static str,
    rewritten: &'static str,
    extract: &'static str,
    explain: &'static str,
    squeeze: &'static str,
    /// Initial SQL followed by the repairs, in order.
    sql: &'static [&'static str],
    function: &'static str,
}

const CASES: &[Case] = &[
    Case {
        question: "What is the speed on Ring Road as of now?",
        rewritten: "What is the speed on Ring Road as of 2023-10-10 08:00?",
        extract: r#"[{"term": "now", "category": "temporal"}]"#,
        explain: "The query asks for a speed measurement of one named road at one moment. Road names live in roads.road_name; measurements live in road_status with road_id, record_time and speed.",
        squeeze: "[roads.road_id, roads.road_name, road_status.road_id, road_status.record_time, road_status.speed]",
        sql: &[
            "SELECT s.speed FROM road_status s JOIN roads r ON s.road_id = r.road_id WHERE r.road_name = 'Ring Road' AND s.record_time = '2023-10-10 08:00';",
            "SELECT s.speed FROM road_status s JOIN roads r ON s.road_id = r.road_id WHERE r.road_name = 'Ring Road' AND s.record_time = '2023/10/10 08:00';",
        ],
        function: r#"{"template": "get_specific_columns", "args": {"columns": ["speed"], "table": "road_status", "condition": "road_id = (SELECT road_id FROM roads WHERE road_name = 'Ring Road') AND record_time = '2023/10/10 08:00'"}}"#,
    },
    Case {
        question: "List the names of all roads in district 2.",
        rewritten: "List the names of all roads in district 2.",
        extract: "[]",
        explain: "The query lists road names filtered by district. The roads table holds road_name and district_id.",
        squeeze: "[roads.road_name, roads.district_id]",
        sql: &["SELECT road_name FROM roads WHERE district_id = 2;"],
        function: r#"{"template": "get_specific_columns", "args": {"columns": ["road_name"], "table": "roads", "condition": "district_id = 2"}}"#,
    },
    Case {
        question: "Which incidents had a severity of 3 or higher?",
        rewritten: "Which incidents had a severity of 3 or higher?",
        extract: "[]",
        explain: "The query filters incidents by severity. The incidents table holds incident_id, incident_type and severity.",
        squeeze: "[incidents.incident_id, incidents.incident_type, incidents.severity]",
        sql: &["SELECT incident_id, incident_type FROM incidents WHERE severity >= 3"],
        function: r#"{"template": "get_specific_columns", "args": {"columns": ["incident_id", "incident_type"], "table": "incidents", "condition": "severity >= 3"}}"#,
    },
    Case {
        question: "Show the name and speed limit of every expressway.",
        rewritten: "Show the name and speed limit of every expressway.",
        extract: "[]",
        explain: "The query reads road attributes for one road class. The roads table holds road_name, speed_limit and road_class.",
        squeeze: "[roads.road_name, roads.speed_limit, roads.road_class]",
        sql: &["SELECT road_name, speed_limit FROM roads WHERE road_class = 'expressway';"],
        function: r#"{"template": "get_specific_columns", "args": {"columns": ["road_name", "speed_limit"], "table": "roads", "condition": "road_class = 'expressway'"}}"#,
    },
    Case {
        question: "What was the average speed on Main Street yesterday?",
        rewritten: "What was the average speed on Main Street on 2023-10-09?",
        extract: r#"[{"term": "yesterday", "category": "temporal"}]"#,
        explain: "The query averages speed measurements of a named road over one day. Road names are in roads.road_name; speed and record_time are in road_status, joined on road_id.",
        squeeze: "[roads.road_id, roads.road_name, road_status.road_id, road_status.speed, road_status.record_time]",
        sql: &["SELECT AVG(s.speed) FROM road_status s JOIN roads r ON s.road_id = r.road_id WHERE r.road_name = 'Main Street' AND s.record_time LIKE '2023/10/09%';"],
        function: r#"{"template": "get_aggregated_value", "args": {"calculation": "AVG(speed)", "table": "road_status", "condition": "road_id = 1 AND record_time LIKE '2023/10/09%'"}}"#,
    },
    Case {
        question: "How many incidents have been reported in total?",
        rewritten: "How many incidents have been reported in total?",
        extract: "[]",
        explain: "The query counts all incidents. The incidents table has one row per incident, identified by incident_id.",
        squeeze: "[incidents.incident_id, incidents.report_count]",
        sql: &["SELECT COUNT(*) FROM incidents;"],
        function: r#"{"template": "get_aggregated_value", "args": {"calculation": "COUNT(*)", "table": "incidents"}}"#,
    },
    Case {
        question: "What is the highest traffic volume ever measured on North Avenue?",
        rewritten: "What is the highest traffic volume ever measured on North Avenue?",
        extract: "[]",
        explain: "The query takes the maximum traffic volume of a named road. Road names are in roads.road_name; volume is in road_status, joined on road_id.",
        squeeze: "[roads.road_id, roads.road_name, road_status.road_id, road_status.volume]",
        sql: &[
            "SELECT MAX(s.traffic_volume) FROM road_status s JOIN roads r ON s.road_id = r.road_id WHERE r.road_name = 'North Avenue';",
            "SELECT MAX(s.volume) FROM road_status s JOIN roads r ON s.road_id = r.road_id WHERE r.road_name = 'North Avenue';",
        ],
        function: r#"{"template": "get_aggregated_value", "args": {"calculation": "MAX(volume)", "table": "road_status", "condition": "road_id = 5"}}"#,
    },
    Case {
        question: "What is the total population of all residential districts?",
        rewritten: "What is the total population of all residential districts?",
        extract: "[]",
        explain: "The query sums population over districts of one zone type. The districts table holds population and zone_type.",
        squeeze: "[districts.population, districts.zone_type]",
        sql: &["SELECT SUM(population) FROM districts WHERE zone_type = 'residential';"],
        function: r#"{"template": "get_aggregated_value", "args": {"calculation": "SUM(population)", "table": "districts", "condition": "zone_type = 'residential'"}}"#,
    },
    Case {
        question: "What is the average speed in each district today?",
        rewritten: "What is the average speed in each district on 2023-10-10?",
        extract: r#"[{"term": "today", "category": "temporal"}]"#,
        explain: "The query averages speed per district for one day. Speed and record_time are in road_status; roads maps road_id to district_id; districts holds the district name.",
        squeeze: "[road_status.speed, road_status.record_time, road_status.road_id, roads.road_id, roads.district_id, districts.district_id, districts.name]",
        sql: &["SELECT d.name, AVG(s.speed) AS avg_speed FROM road_status s JOIN roads r ON s.road_id = r.road_id JOIN districts d ON r.district_id = d.district_id WHERE s.record_time LIKE '2023/10/10%' GROUP BY d.name ORDER BY d.name;"],
        function: r#"{"template": "get_distinct_grouped", "args": {"columns": ["road_id", "AVG(speed)"], "table": "road_status", "condition": "record_time LIKE '2023/10/10%'", "group_by": ["road_id"]}}"#,
    },
    Case {
        question: "Which roads had an incident that blocked at least one lane?",
        rewritten: "Which roads had an incident that blocked at least one lane?",
        extract: "[]",
        explain: "The query finds roads with lane-blocking incidents. incidents holds road_id and lanes_blocked; roads holds road_name.",
        squeeze: "[roads.road_id, roads.road_name, incidents.road_id, incidents.lanes_blocked]",
        sql: &["SELECT DISTINCT roads.road_name FROM roads JOIN incidents ON roads.road_id = incidents.road_id WHERE incidents.lanes_blocked >= 1;"],
        function: r#"{"template": "get_specific_columns", "args": {"columns": ["road_name"], "table": "roads", "condition": "road_id IN (SELECT road_id FROM incidents WHERE lanes_blocked > 0)"}}"#,
    },
    Case {
        question: "Which district has the most roads?",
        rewritten: "Which district has the most roads?",
        extract: "[]",
        explain: "The query counts roads per district and keeps the largest. roads holds district_id; districts holds the name.",
        squeeze: "[roads.road_id, roads.district_id, districts.district_id, districts.name]",
        sql: &["SELECT d.name FROM districts d JOIN roads r ON r.district_id = d.district_id GROUP BY d.name ORDER BY COUNT(r.road_id) DESC LIMIT 1;"],
        function: r#"{"template": "get_distinct_grouped", "args": {"columns": ["district_id", "COUNT(*)"], "table": "roads", "group_by": ["district_id"]}}"#,
    },
    Case {
        question: "What was the congestion level on the roads of the Harbour district during rush hour today?",
        rewritten: "What was the congestion level on the roads of the Harbour district during the 07:00 to 08:00 window on 2023-10-10?",
        extract: r#"[{"term": "rush hour", "category": "domain"}, {"term": "today", "category": "temporal"}]"#,
        explain: "The query reads congestion levels of the roads in one district over a time window. road_status holds congestion_level and record_time; roads holds road_name and district_id; districts holds the name.",
        squeeze: "[road_status.congestion_level, road_status.record_time, road_status.road_id, roads.road_id, roads.road_name, roads.district_id, districts.district_id, districts.name]",
        sql: &["SELECT r.road_name, s.congestion_level FROM road_status s JOIN roads r ON s.road_id = r.road_id JOIN districts d ON r.district_id = d.district_id WHERE d.name = 'Harbour' AND s.record_time BETWEEN '2023/10/10 07:00' AND '2023/10/10 08:00';"],
        function: r#"{"template": "get_specific_columns", "args": {"columns": ["road_id", "congestion_level"], "table": "road_status", "condition": "record_time BETWEEN '2023/10/10 07:00' AND '2023/10/10 08:00' AND road_id IN (SELECT road_id FROM roads WHERE district_id = 2)"}}"#,
    },
];

/// The case whose `key` text occurs in the prompt; the longest wins.
fn find_case(prompt: &str, key: impl Fn(&Case) -> &str) -> &'static Case {
    CASES
        .iter()
        .filter(|c| prompt.contains(key(c)))
        .max_by_key(|c| key(c).len())
        .unwrap_or_else(|| panic!("no demo case matches prompt:\n{prompt}"))
}

fn fence(sql: &str) -> String {
    format!("```sql\n{sql}\n```")
}

fn author(req: &CompletionRequest) -> Result<String, GatewayError> {
    let p = &req.messages.last().expect("one message").content;
    let reply = if p.contains("Task: EXTRACT") {
        find_case(p, |c| c.question).extract.to_string()
    } else if p.contains("Task: TRANSFORM") {
        panic!("the demo questions need no model transform:\n{p}");
    } else if p.contains("[Table1.column3") {
        find_case(p, |c| c.rewritten).squeeze.to_string()
    } else if p.contains("The database contains the following tables") {
        let c = find_case(p, |c| c.rewritten);
        format!("Question: {}\n{}", c.rewritten, c.explain)
    } else if p.contains("needs to be improved") {
        let c = find_case(p, |c| c.rewritten);
        let at = c
            .sql
            .iter()
            .position(|s| p.contains(s.trim_end_matches(';')))
            .unwrap_or_else(|| panic!("repair prompt quotes no known attempt:\n{p}"));
        fence(c.sql.get(at + 1).unwrap_or_else(|| panic!("no scripted repair after attempt {at}:\n{p}")))
    } else if p.contains("four query functions") {
        find_case(p, |c| c.rewritten).function.to_string()
    } else if p.contains("Create SQL code") {
        fence(find_case(p, |c| c.rewritten).sql[0])
    } else {
        panic!("unrecognized prompt:\n{p}");
    };
    Ok(reply)
}

fn rebuild_database(dir: &Path) -> PathBuf {
    let db_path = dir.join("traffic.sqlite");
    let _ = fs::remove_file(&db_path);
    let sql = fs::read_to_string(dir.join("traffic.sql")).expect("traffic.sql");
    rusqlite::Connection::open(&db_path).expect("create").execute_batch(&sql).expect("load traffic.sql");
    db_path
}

fn record(dir: &Path, backend: Backend, transcript: &str) {
    let path = dir.join(transcript);
    let _ = fs::remove_file(&path);
    let mut cfg = PipelineConfig::load(&dir.join("demo_config.json")).expect("demo config");
    cfg.backend = backend;
    let pipeline =
        Pipeline::new(cfg, Gateway::record(Box::new(FnBackend(author)), &path).expect("transcript")).expect("pipeline");
    let db = Database::open(dir.join("traffic.sqlite")).expect("db");
    for c in CASES {
        let r = pipeline.run_question(c.question, &db).expect("recording run");
        assert_eq!(r.rewrite.result.rewritten, c.rewritten, "rewrite drifted");
    }
    let cases = eval::load_dataset(&dir.join("demo.jsonl")).expect("dataset");
    let mut cfg = PipelineConfig::load(&dir.join("demo_config.json")).expect("demo config");
    cfg.backend = backend;
    let replay = Pipeline::new(cfg, Gateway::replay_file(&path).expect("transcript")).expect("pipeline");
    let report = eval::evaluate(&cases, dir, &replay, EvalOptions::default());
    println!("{transcript} ({backend} backend):\n{}", report.summary_table());
}

fn main() {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "demo".into()));
    rebuild_database(&dir);
    record(&dir, Backend::Sql, "demo_transcript.jsonl");
    record(&dir, Backend::Function, "demo_function_transcript.jsonl");
}
