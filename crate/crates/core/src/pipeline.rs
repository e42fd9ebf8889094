//! End-to-end orchestration: rewrite, link, generate, then execute with
//! repairs. Each stage can be switched off; the record keeps the same shape
//! either way.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::booster::{self, BoostTrace, Environment, RepairContext, SqlEnvironment};
use crate::catalog::{self, CatalogError, CatalogOptions, DatabaseCatalog};
use crate::database::Database;
use crate::eval::{EvalCase, Prediction, Predictor};
use crate::executor::{self, ExecOptions, ExecutionOutcome};
use crate::function::{self, FunctionCall, FunctionError};
use crate::generator::{self, GenerateError, GenerationPrompt, SqlCandidate};
use crate::linker::{self, LinkError, LinkingOutcome, SchemaLinks};
use crate::llm::{Chat, Gateway, GatewayError, LlmSettings, TokenUsage};
use crate::prompts::{PromptError, PromptSet};
use crate::rewrite::{self, Glossary, RewriteContext, RewriteError, RewriteOptions, RewriteResult};
use crate::script::{self, ScriptEnvironment};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Prompts(#[from] PromptError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    /// The transcript has no answer for a request; the fixture is out of date.
    #[error("replay miss: no recorded response for digest {digest}")]
    ReplayMiss { digest: String },
    #[error("cannot write trace {path}: {message}")]
    Trace { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stages {
    pub rewrite: bool,
    pub link: bool,
    pub boost: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Self { rewrite: true, link: true, boost: true }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Sql,
    Function,
    Script,
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Sql => "sql",
            Backend::Function => "function",
            Backend::Script => "script",
        })
    }
}

impl FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sql" => Ok(Backend::Sql),
            "function" => Ok(Backend::Function),
            "script" | "python" => Ok(Backend::Script),
            other => Err(format!("unknown backend {other:?} (expected sql, function or script)")),
        }
    }
}

/// Accepts `YYYY-MM-DD HH:MM`, with optional seconds and an optional `T`.
pub fn parse_clock(s: &str) -> Result<NaiveDateTime, PipelineError> {
    let s = s.trim();
    ["%Y-%m-%d %H:%M", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%dT%H:%M:%S"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .ok_or_else(|| PipelineError::Config(format!("cannot parse clock {s:?}; expected YYYY-MM-DD HH:MM")))
}

/// JSON-loadable settings. Relative paths in a config file are taken
/// relative to the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub stages: Stages,
    pub backend: Backend,
    pub max_boost_attempts: u32,
    pub llm: LlmSettings,
    pub prompt_dir: Option<PathBuf>,
    pub trace_dir: Option<PathBuf>,
    /// Fixed "current time" for the rewriter; the wall clock when absent.
    pub clock: Option<String>,
    pub location: Option<String>,
    pub glossary: Option<PathBuf>,
    /// Column meanings; `<db stem>.annotations.json` next to the database otherwise.
    pub annotations: Option<PathBuf>,
    pub interpreter_path: Option<PathBuf>,
    pub script_timeout_secs: f64,
    pub exec_timeout_secs: f64,
    pub row_cap: usize,
    pub catalog: CatalogOptions,
    pub rewrite: RewriteOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            stages: Stages::default(),
            backend: Backend::Sql,
            max_boost_attempts: booster::DEFAULT_MAX_ATTEMPTS,
            llm: LlmSettings::default(),
            prompt_dir: None,
            trace_dir: None,
            clock: None,
            location: None,
            glossary: None,
            annotations: None,
            interpreter_path: None,
            script_timeout_secs: script::DEFAULT_SCRIPT_TIMEOUT.as_secs_f64(),
            exec_timeout_secs: executor::DEFAULT_TIMEOUT.as_secs_f64(),
            row_cap: executor::DEFAULT_ROW_CAP,
            catalog: CatalogOptions::default(),
            rewrite: RewriteOptions::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.prompt_dir, &mut cfg.trace_dir, &mut cfg.glossary, &mut cfg.annotations] {
            if let Some(rel) = p.as_mut().filter(|p| p.is_relative()) {
                *rel = base.join(&*rel);
            }
        }
        Ok(cfg)
    }

    pub fn exec_options(&self) -> ExecOptions {
        ExecOptions { timeout: Duration::from_secs_f64(self.exec_timeout_secs), row_cap: self.row_cap }
    }

    fn check(&self) -> Result<(), PipelineError> {
        if self.max_boost_attempts == 0 {
            return Err(PipelineError::Config("max_boost_attempts must be at least 1".into()));
        }
        if !(self.exec_timeout_secs > 0.0 && self.script_timeout_secs > 0.0) {
            return Err(PipelineError::Config("timeouts must be positive".into()));
        }
        if let Some(c) = &self.clock {
            parse_clock(c)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewriteStage {
    pub enabled: bool,
    /// The identity rewrite when disabled or failed.
    pub result: RewriteResult,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkStage {
    pub enabled: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<LinkingOutcome>,
    /// Tables shown to the generator.
    pub tables: Vec<String>,
    /// Set when every table was shown because linking was off, failed or empty.
    pub all_tables: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationStage {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate: Option<SqlCandidate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub function_call: Option<FunctionCall>,
    /// CSV files handed to the script, by file name.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exports: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostStage {
    pub enabled: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<BoostTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalAnswer {
    /// The last executed SQL or script.
    pub code: Option<String>,
    pub outcome: Option<ExecutionOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub rewrite: Duration,
    pub link: Duration,
    pub generation: Duration,
    pub boost: Duration,
}

/// Everything that happened for one question, stages in pipeline order.
/// Timings are kept out of the serialized form so replays are byte-stable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub question: String,
    pub db_id: String,
    pub backend: Backend,
    pub rewrite: RewriteStage,
    pub link: LinkStage,
    pub generation: GenerationStage,
    pub boost: BoostStage,
    #[serde(rename = "final")]
    pub final_answer: FinalAnswer,
    pub llm_calls: u32,
    pub token_usage: TokenUsage,
    #[serde(skip)]
    pub timings: StageTimings,
}

impl AnswerRecord {
    pub fn is_success(&self) -> bool {
        self.final_answer.outcome.as_ref().is_some_and(ExecutionOutcome::is_success)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("record serializes");
        s.push('\n');
        s
    }
}

fn replay_miss(err: &GatewayError) -> Option<PipelineError> {
    match err {
        GatewayError::ReplayMiss { digest } => Some(PipelineError::ReplayMiss { digest: digest.clone() }),
        _ => None,
    }
}

fn rewrite_miss(e: &RewriteError) -> Option<PipelineError> {
    match e {
        RewriteError::Gateway(g) => replay_miss(g),
        _ => None,
    }
}

fn link_miss(e: &LinkError) -> Option<PipelineError> {
    match e {
        LinkError::Gateway(g) => replay_miss(g),
        _ => None,
    }
}

fn generate_miss(e: &GenerateError) -> Option<PipelineError> {
    match e {
        GenerateError::Gateway(g) => replay_miss(g),
        _ => None,
    }
}

fn function_miss(e: &FunctionError) -> Option<PipelineError> {
    match e {
        FunctionError::Gateway(g) => replay_miss(g),
        _ => None,
    }
}

/// A configured pipeline bound to one gateway. Shareable across threads.
pub struct Pipeline {
    cfg: PipelineConfig,
    prompts: PromptSet,
    gateway: Gateway,
    glossary: Glossary,
    clock: NaiveDateTime,
    interpreter: Option<PathBuf>,
    catalogs: Mutex<HashMap<PathBuf, Arc<DatabaseCatalog>>>,
}

impl fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Pipeline").field("cfg", &self.cfg).field("gateway", &self.gateway).finish()
    }
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, gateway: Gateway) -> Result<Self, PipelineError> {
        cfg.check()?;
        let prompts = match &cfg.prompt_dir {
            Some(dir) => PromptSet::from_dir(dir)?,
            None => PromptSet::default(),
        };
        let glossary = match &cfg.glossary {
            Some(p) => rewrite::load_glossary(p).map_err(|e| PipelineError::Config(e.to_string()))?,
            None => Glossary::new(),
        };
        let clock = match &cfg.clock {
            Some(c) => parse_clock(c)?,
            None => chrono::Local::now().naive_local(),
        };
        let interpreter = cfg.interpreter_path.clone().or_else(script::find_interpreter);
        if cfg.backend == Backend::Script && interpreter.is_none() {
            return Err(PipelineError::Config(format!(
                "backend script needs an interpreter: set interpreter_path or {}",
                script::ENV_INTERPRETER
            )));
        }
        Ok(Self { cfg, prompts, gateway, glossary, clock, interpreter, catalogs: Mutex::new(HashMap::new()) })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn prompts(&self) -> &PromptSet {
        &self.prompts
    }

    /// Catalog for `db`, built once per database file.
    pub fn catalog(&self, db: &Database) -> Result<Arc<DatabaseCatalog>, PipelineError> {
        let key = db.path().to_path_buf();
        if let Some(c) = self.catalogs.lock().unwrap_or_else(|p| p.into_inner()).get(&key) {
            return Ok(c.clone());
        }
        let ann_path = self.cfg.annotations.clone().or_else(|| {
            let side = catalog::sidecar_annotations_path(db.path());
            side.is_file().then_some(side)
        });
        let annotations = ann_path.as_deref().map(catalog::load_annotations).transpose()?;
        let build = catalog::build_catalog(db, annotations.as_ref(), self.cfg.catalog)?;
        for w in &build.warnings {
            tracing::warn!(key = %w.key, "annotation names no table or column");
        }
        let c = Arc::new(build.catalog);
        self.catalogs.lock().unwrap_or_else(|p| p.into_inner()).insert(key, c.clone());
        Ok(c)
    }

    fn rewrite_context(&self) -> RewriteContext {
        RewriteContext {
            current_timestamp: self.clock,
            location: self.cfg.location.clone(),
            glossary: self.glossary.clone(),
        }
    }

    /// Runs one question. Stage failures are recorded and degrade the
    /// remaining stages; only configuration problems (including replay
    /// misses) are returned as errors.
    pub fn run_question(&self, question: &str, db: &Database) -> Result<AnswerRecord, PipelineError> {
        let catalog = self.catalog(db)?;
        let chat = Chat::new(&self.gateway, &self.cfg.llm);
        let mut timings = StageTimings::default();

        let t = Instant::now();
        let rewrite = self.stage_rewrite(question, &chat)?;
        timings.rewrite = t.elapsed();
        let q = rewrite.result.rewritten.clone();

        let t = Instant::now();
        let link = self.stage_link(&q, &catalog, &chat)?;
        timings.link = t.elapsed();
        let links = link.outcome.as_ref().map(|o| &o.links).filter(|_| !link.all_tables);

        let t = Instant::now();
        let (generation, boost, final_answer) = match self.cfg.backend {
            Backend::Sql => self.run_sql(&q, &catalog, links, db, &chat, &mut timings)?,
            Backend::Function => self.run_function(&q, &catalog, links, db, &chat, &mut timings)?,
            Backend::Script => self.run_script(&q, &catalog, links, db, &chat, &mut timings)?,
        };
        timings.boost = t.elapsed().saturating_sub(timings.generation);

        Ok(AnswerRecord {
            question: question.to_string(),
            db_id: catalog.db_id().to_string(),
            backend: self.cfg.backend,
            rewrite,
            link,
            generation,
            boost,
            final_answer,
            llm_calls: chat.calls(),
            token_usage: chat.usage(),
            timings,
        })
    }

    fn stage_rewrite(&self, question: &str, chat: &Chat<'_>) -> Result<RewriteStage, PipelineError> {
        if !self.cfg.stages.rewrite {
            return Ok(RewriteStage { enabled: false, result: RewriteResult::identity(question), error: None });
        }
        match rewrite::rewrite(question, &self.rewrite_context(), &self.cfg.rewrite, chat, &self.prompts) {
            Ok(result) => Ok(RewriteStage { enabled: true, result, error: None }),
            Err(e) => {
                if let Some(fatal) = rewrite_miss(&e) {
                    return Err(fatal);
                }
                tracing::warn!("rewrite failed, keeping the question as asked: {e}");
                Ok(RewriteStage {
                    enabled: true,
                    result: RewriteResult::identity(question),
                    error: Some(e.to_string()),
                })
            }
        }
    }

    fn stage_link(
        &self,
        question: &str,
        catalog: &DatabaseCatalog,
        chat: &Chat<'_>,
    ) -> Result<LinkStage, PipelineError> {
        let all: Vec<String> = catalog.tables().iter().map(|t| t.name.clone()).collect();
        if !self.cfg.stages.link {
            return Ok(LinkStage { enabled: false, outcome: None, tables: all, all_tables: true, error: None });
        }
        let compact = catalog::render_compact(catalog);
        match linker::link_schema(question, catalog, &compact, chat, &self.prompts) {
            Ok(outcome) if outcome.links.is_empty() => {
                tracing::warn!("linking produced no usable links; showing every table");
                Ok(LinkStage { enabled: true, outcome: Some(outcome), tables: all, all_tables: true, error: None })
            }
            Ok(outcome) => {
                let tables = catalog
                    .tables()
                    .iter()
                    .filter(|t| outcome.links.tables().iter().any(|l| l.eq_ignore_ascii_case(&t.name)))
                    .map(|t| t.name.clone())
                    .collect();
                Ok(LinkStage { enabled: true, outcome: Some(outcome), tables, all_tables: false, error: None })
            }
            Err(e) => {
                if let Some(fatal) = link_miss(&e) {
                    return Err(fatal);
                }
                tracing::warn!("linking failed, showing every table: {e}");
                Ok(LinkStage {
                    enabled: true,
                    outcome: None,
                    tables: all,
                    all_tables: true,
                    error: Some(e.to_string()),
                })
            }
        }
    }

    fn finish_boost(
        &self,
        initial: SqlCandidate,
        env: &dyn Environment,
        ctx: RepairContext<'_>,
        chat: &Chat<'_>,
    ) -> Result<(BoostStage, FinalAnswer), PipelineError> {
        let trace = if self.cfg.stages.boost {
            booster::boost(initial, env, ctx, chat, &self.prompts, self.cfg.max_boost_attempts)
                .map_err(|e| PipelineError::Config(e.to_string()))?
        } else {
            booster::single_shot(initial, env)
        };
        if let Some(digest) = &trace.replay_miss {
            return Err(PipelineError::ReplayMiss { digest: digest.clone() });
        }
        let last = trace.last_outcome().clone();
        let final_answer = FinalAnswer {
            code: Some(trace.final_candidate.sql_text.clone()),
            error: last.error_message.clone(),
            outcome: Some(last),
        };
        Ok((BoostStage { enabled: self.cfg.stages.boost, trace: Some(trace) }, final_answer))
    }

    fn failed(generation: GenerationStage, boost_enabled: bool) -> (GenerationStage, BoostStage, FinalAnswer) {
        let error = generation.error.clone();
        (
            generation,
            BoostStage { enabled: boost_enabled, trace: None },
            FinalAnswer { code: None, outcome: None, error },
        )
    }

    fn run_sql(
        &self,
        question: &str,
        catalog: &DatabaseCatalog,
        links: Option<&SchemaLinks>,
        db: &Database,
        chat: &Chat<'_>,
        timings: &mut StageTimings,
    ) -> Result<(GenerationStage, BoostStage, FinalAnswer), PipelineError> {
        let t = Instant::now();
        let mut generation =
            GenerationStage { prompt: None, candidate: None, function_call: None, exports: Vec::new(), error: None };
        let prompt = match generator::build_generation_prompt(question, catalog, links, &self.prompts) {
            Ok(p) => p,
            Err(e) => {
                generation.error = Some(e.to_string());
                return Ok(Self::failed(generation, self.cfg.stages.boost));
            }
        };
        generation.prompt = Some(prompt.text.clone());
        let candidate = generator::generate_sql(&prompt, chat);
        timings.generation = t.elapsed();
        let candidate = match candidate {
            Ok(c) => c,
            Err(e) => {
                if let Some(fatal) = generate_miss(&e) {
                    return Err(fatal);
                }
                generation.error = Some(e.to_string());
                return Ok(Self::failed(generation, self.cfg.stages.boost));
            }
        };
        generation.candidate = Some(candidate.clone());
        let env = SqlEnvironment::new(db, self.cfg.exec_options());
        let ctx = RepairContext { question, schema_block: &prompt.schema_block };
        let (boost, final_answer) = self.finish_boost(candidate, &env, ctx, chat)?;
        Ok((generation, boost, final_answer))
    }

    fn run_function(
        &self,
        question: &str,
        catalog: &DatabaseCatalog,
        links: Option<&SchemaLinks>,
        db: &Database,
        chat: &Chat<'_>,
        timings: &mut StageTimings,
    ) -> Result<(GenerationStage, BoostStage, FinalAnswer), PipelineError> {
        let t = Instant::now();
        let mut generation =
            GenerationStage { prompt: None, candidate: None, function_call: None, exports: Vec::new(), error: None };
        let built = function::build_function_prompt(question, catalog, links, &self.prompts);
        let call = built.and_then(|prompt| {
            generation.prompt = Some(prompt.clone());
            function::parse_call(&chat.ask(&prompt)?)
        });
        let compiled = call.and_then(|call| {
            generation.function_call = Some(call.clone());
            function::validate_call(&call, catalog, Some(db)).map(|v| function::compile(&v))
        });
        timings.generation = t.elapsed();
        let compiled = match compiled {
            Ok(c) => c,
            Err(e) => {
                if let Some(fatal) = function_miss(&e) {
                    return Err(fatal);
                }
                generation.error = Some(e.to_string());
                return Ok(Self::failed(generation, false));
            }
        };
        let candidate = SqlCandidate::initial(compiled.sql_text);
        generation.candidate = Some(candidate.clone());
        // Compiled calls are deterministic; there is nothing for a repair to change.
        let env = SqlEnvironment::new(db, self.cfg.exec_options());
        let trace = booster::single_shot(candidate, &env);
        let last = trace.last_outcome().clone();
        let final_answer = FinalAnswer {
            code: Some(trace.final_candidate.sql_text.clone()),
            error: last.error_message.clone(),
            outcome: Some(last),
        };
        Ok((generation, BoostStage { enabled: false, trace: Some(trace) }, final_answer))
    }

    fn run_script(
        &self,
        question: &str,
        catalog: &DatabaseCatalog,
        links: Option<&SchemaLinks>,
        db: &Database,
        chat: &Chat<'_>,
        timings: &mut StageTimings,
    ) -> Result<(GenerationStage, BoostStage, FinalAnswer), PipelineError> {
        let t = Instant::now();
        let mut generation =
            GenerationStage { prompt: None, candidate: None, function_call: None, exports: Vec::new(), error: None };
        let interpreter = self.interpreter.as_deref().expect("checked at construction");
        let workdir = tempfile::tempdir().map_err(|e| PipelineError::Config(format!("cannot create workdir: {e}")))?;
        let prompt: Result<GenerationPrompt, String> = script::export_tables_csv(db, catalog, links, workdir.path())
            .and_then(|exports| {
                generation.exports = exports.iter().map(script::TableExport::file_name).collect();
                script::build_script_prompt(question, &exports, catalog, &self.prompts)
            })
            .map_err(|e| e.to_string());
        let prompt = match prompt {
            Ok(p) => p,
            Err(e) => {
                generation.error = Some(e);
                return Ok(Self::failed(generation, self.cfg.stages.boost));
            }
        };
        generation.prompt = Some(prompt.text.clone());
        let code = chat.ask(&prompt.text).map_err(GenerateError::from).and_then(|r| generator::extract_code(&r));
        timings.generation = t.elapsed();
        let code = match code {
            Ok(c) => c,
            Err(e) => {
                if let Some(fatal) = generate_miss(&e) {
                    return Err(fatal);
                }
                generation.error = Some(e.to_string());
                return Ok(Self::failed(generation, self.cfg.stages.boost));
            }
        };
        let candidate = SqlCandidate::initial(code);
        generation.candidate = Some(candidate.clone());
        let env = ScriptEnvironment {
            workdir: workdir.path(),
            interpreter,
            timeout: Duration::from_secs_f64(self.cfg.script_timeout_secs),
        };
        let ctx = RepairContext { question, schema_block: &prompt.schema_block };
        let (boost, final_answer) = self.finish_boost(candidate, &env, ctx, chat)?;
        Ok((generation, boost, final_answer))
    }

    /// Writes `<trace_dir>/<name>.json` when a trace directory is configured
    /// and returns the file name.
    pub fn write_trace(&self, name: &str, record: &AnswerRecord) -> Result<Option<String>, PipelineError> {
        let Some(dir) = &self.cfg.trace_dir else { return Ok(None) };
        let file = format!(
            "{}.json",
            name.chars()
                .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
                .collect::<String>()
        );
        let path = dir.join(&file);
        let err = |e: std::io::Error| PipelineError::Trace { path: path.clone(), message: e.to_string() };
        fs::create_dir_all(dir).map_err(err)?;
        fs::write(&path, record.to_json()).map_err(err)?;
        Ok(Some(file))
    }
}

impl Predictor for Pipeline {
    fn predict(&self, case: &EvalCase, db: &Database) -> Prediction {
        match self.run_question(&case.question, db) {
            Ok(record) => {
                let trace = match self.write_trace(&case.id, &record) {
                    Ok(t) => t,
                    Err(e) => {
                        tracing::warn!("{e}");
                        None
                    }
                };
                Prediction {
                    predicted: record.final_answer.code.clone(),
                    error: record
                        .final_answer
                        .outcome
                        .is_none()
                        .then(|| record.final_answer.error.clone().unwrap_or_else(|| "no prediction".into())),
                    outcome: record.final_answer.outcome,
                    token_usage: record.token_usage,
                    trace,
                }
            }
            Err(e) => Prediction { error: Some(e.to_string()), ..Default::default() },
        }
    }
}
