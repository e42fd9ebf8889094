use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use nl2sql::catalog;
use nl2sql::database::Database;
use nl2sql::eval::{self, EvalOptions};
use nl2sql::llm::{self, Gateway, HttpBackend};
use nl2sql::parallel::Parallelism;
use nl2sql::pipeline::{AnswerRecord, Backend, Pipeline, PipelineConfig};

/// Ask questions of a SQLite database in plain language.
#[derive(Parser, Debug)]
#[command(name = "nl2sql", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: GlobalOpts,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the compact and the enriched schema renderings.
    Catalog { db: PathBuf },
    /// Answer one question and print the final SQL and its result.
    Ask {
        db: PathBuf,
        question: String,
        /// Print the full answer record as JSON instead.
        #[arg(long)]
        json: bool,
    },
    /// Answer questions read line by line from standard input.
    Repl { db: PathBuf },
    /// Run a JSON Lines dataset and report execution accuracy.
    Eval {
        dataset: PathBuf,
        /// Where to write the JSON report.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Exit with status 2 when any case mismatches.
        #[arg(long)]
        strict: bool,
        /// Run cases one at a time.
        #[arg(long)]
        sequential: bool,
    },
}

#[derive(Args, Debug)]
struct GlobalOpts {
    /// Pipeline configuration file (JSON). Flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Call the live service and append every exchange to this transcript.
    #[arg(long, global = true, conflicts_with = "replay")]
    record: Option<PathBuf>,
    /// Answer model calls from this transcript only.
    #[arg(long, global = true)]
    replay: Option<PathBuf>,
    /// sql, function or script.
    #[arg(long, global = true)]
    backend: Option<Backend>,
    #[arg(long, global = true)]
    no_rewrite: bool,
    #[arg(long, global = true)]
    no_link: bool,
    #[arg(long, global = true)]
    no_boost: bool,
    /// Executed candidates per question, the first one included.
    #[arg(long, global = true)]
    max_attempts: Option<u32>,
    #[arg(long, global = true)]
    model: Option<String>,
    #[arg(long, global = true)]
    prompt_dir: Option<PathBuf>,
    /// Write one JSON trace per question here.
    #[arg(long, global = true)]
    trace_dir: Option<PathBuf>,
    /// Column meanings file; defaults to `<db stem>.annotations.json` beside the database.
    #[arg(long, global = true)]
    annotations: Option<PathBuf>,
    /// Fixed current time for the rewriter, `YYYY-MM-DD HH:MM`.
    #[arg(long, global = true)]
    clock: Option<String>,
}

impl GlobalOpts {
    fn pipeline_config(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => {
                let mut cfg = PipelineConfig::default();
                if let Ok(model) = std::env::var(llm::ENV_MODEL_ID) {
                    cfg.llm.model_id = model;
                }
                cfg
            }
        };
        if let Some(b) = self.backend {
            cfg.backend = b;
        }
        cfg.stages.rewrite &= !self.no_rewrite;
        cfg.stages.link &= !self.no_link;
        cfg.stages.boost &= !self.no_boost;
        if let Some(n) = self.max_attempts {
            cfg.max_boost_attempts = n;
        }
        if let Some(m) = &self.model {
            cfg.llm.model_id = m.clone();
        }
        for (flag, slot) in [
            (&self.prompt_dir, &mut cfg.prompt_dir),
            (&self.trace_dir, &mut cfg.trace_dir),
            (&self.annotations, &mut cfg.annotations),
        ] {
            if flag.is_some() {
                *slot = flag.clone();
            }
        }
        if self.clock.is_some() {
            cfg.clock = self.clock.clone();
        }
        Ok(cfg)
    }

    fn gateway(&self) -> Result<Gateway> {
        Ok(match (&self.replay, &self.record) {
            (Some(path), _) => Gateway::replay_file(path)?,
            (None, Some(path)) => Gateway::record(Box::new(HttpBackend::from_env()?), path)?,
            (None, None) => Gateway::live(Box::new(HttpBackend::from_env()?)),
        })
    }

    fn pipeline(&self) -> Result<Pipeline> {
        Ok(Pipeline::new(self.pipeline_config()?, self.gateway()?)?)
    }
}

fn open_db(path: &Path) -> Result<Database> {
    Ok(Database::open(path)?)
}

fn print_answer(out: &mut impl Write, record: &AnswerRecord) -> io::Result<()> {
    if record.rewrite.result.rewritten != record.question {
        writeln!(out, "Rewritten: {}", record.rewrite.result.rewritten)?;
    }
    match &record.final_answer.code {
        Some(code) => writeln!(out, "{code}")?,
        None => writeln!(out, "(no query produced)")?,
    }
    match &record.final_answer.outcome {
        Some(o) if o.is_success() => {
            writeln!(out)?;
            let table = o.result.as_ref().map(|r| r.to_table_string()).unwrap_or_default();
            writeln!(out, "{}", table.trim_end())?;
        }
        _ => {
            let reason = record.final_answer.error.as_deref().unwrap_or("unknown failure");
            writeln!(out, "\nFailed: {reason}")?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match &cli.command {
        Command::Catalog { db } => {
            let database = open_db(db)?;
            let cfg = cli.opts.pipeline_config()?;
            let ann_path = cfg.annotations.clone().or_else(|| {
                let side = catalog::sidecar_annotations_path(db);
                side.is_file().then_some(side)
            });
            let annotations = ann_path.as_deref().map(catalog::load_annotations).transpose()?;
            let build = catalog::build_catalog(&database, annotations.as_ref(), cfg.catalog)?;
            for w in &build.warnings {
                eprintln!("warning: annotation key {} names no table or column", w.key);
            }
            writeln!(out, "{}\n", catalog::render_compact(&build.catalog))?;
            write!(out, "{}", catalog::render_enriched(&build.catalog, None)?)?;
        }
        Command::Ask { db, question, json } => {
            let database = open_db(db)?;
            let pipeline = cli.opts.pipeline()?;
            let record = pipeline.run_question(question, &database)?;
            pipeline.write_trace("ask", &record)?;
            if *json {
                write!(out, "{}", record.to_json())?;
            } else {
                print_answer(&mut out, &record)?;
            }
        }
        Command::Repl { db } => {
            let database = open_db(db)?;
            let pipeline = cli.opts.pipeline()?;
            let stdin = io::stdin();
            let mut n = 0;
            loop {
                write!(out, "> ")?;
                out.flush()?;
                let mut line = String::new();
                if stdin.lock().read_line(&mut line)? == 0 {
                    break;
                }
                let q = line.trim();
                if matches!(q, "exit" | "quit") {
                    break;
                }
                if q.is_empty() {
                    continue;
                }
                n += 1;
                let record = pipeline.run_question(q, &database)?;
                pipeline.write_trace(&format!("repl-{n}"), &record)?;
                print_answer(&mut out, &record)?;
            }
        }
        Command::Eval { dataset, report, strict, sequential } => {
            let cases = eval::load_dataset(dataset)?;
            let pipeline = cli.opts.pipeline()?;
            let base = dataset.parent().unwrap_or(Path::new("."));
            let parallelism = if *sequential { Parallelism::Sequential } else { Parallelism::Parallel };
            let opts = EvalOptions { parallelism, exec: pipeline.config().exec_options() };
            let result = eval::evaluate(&cases, base, &pipeline, opts);
            if let Some(path) = report {
                fs::write(path, result.to_json()).with_context(|| format!("cannot write {}", path.display()))?;
            }
            write!(out, "{}", result.summary_table())?;
            if *strict && result.mismatches() > 0 {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(io::stderr)
        .with_ansi(io::IsTerminal::is_terminal(&io::stderr()))
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(io::stdout(), "{e}");
                    return ExitCode::SUCCESS;
                }
                ErrorKind::InvalidSubcommand
                | ErrorKind::MissingSubcommand
                | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    eprintln!("{e}");
                    eprintln!("{}", Cli::command().render_long_help());
                }
                _ => eprintln!("{e}"),
            }
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(code) => code,
        // Output piped into a reader that stopped early.
        Err(e) if e.downcast_ref::<io::Error>().is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe) => {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
