//! Execution-feedback repair loop.
//!
//! Each candidate is executed; the loop stops at the first successful,
//! non-empty result. Otherwise the previous code, the status label and
//! either the error message or an empty-result notice go back to the model
//! with the schema block, and the reply becomes the next candidate. The
//! attempt budget counts executed candidates, the initial one included.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::database::Database;
use crate::executor::{self, ExecOptions, ExecutionOutcome};
use crate::generator::{self, GenerateError, Origin, SqlCandidate};
use crate::llm::{Chat, GatewayError};
use crate::prompts::PromptSet;

pub const DEFAULT_MAX_ATTEMPTS: u32 = 3;

pub const EMPTY_RESULT_NOTICE: &str = "The code executed successfully but the result is empty \
(no rows, or only NULL values). The query is probably too restrictive or compares against values \
in the wrong format; check the conditions against the Sample values in the schema.";

#[derive(Debug, Error)]
pub enum BoostError {
    #[error("max_attempts must be at least 1")]
    InvalidBudget,
    #[error("repair prompt requested for a successful, non-empty outcome")]
    PreconditionViolated,
}

/// Where candidates run: the database for SQL, a subprocess for scripts.
pub trait Environment {
    fn execute(&self, code: &str) -> ExecutionOutcome;
    /// Pulls the next candidate out of a model reply.
    fn extract(&self, reply: &str) -> Result<String, GenerateError>;
    fn language(&self) -> &'static str;
}

pub struct SqlEnvironment<'a> {
    pub db: &'a Database,
    pub opts: ExecOptions,
}

impl<'a> SqlEnvironment<'a> {
    pub fn new(db: &'a Database, opts: ExecOptions) -> Self {
        Self { db, opts }
    }
}

impl Environment for SqlEnvironment<'_> {
    fn execute(&self, code: &str) -> ExecutionOutcome {
        executor::execute(code, self.db, self.opts)
    }

    fn extract(&self, reply: &str) -> Result<String, GenerateError> {
        generator::extract_sql(reply)
    }

    fn language(&self) -> &'static str {
        "SQL"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    SuccessNonempty,
    MaxAttemptsExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub candidate: SqlCandidate,
    pub outcome: ExecutionOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostTrace {
    pub attempts: Vec<Attempt>,
    pub termination: Termination,
    #[serde(rename = "final")]
    pub final_candidate: SqlCandidate,
    /// Why the loop stopped early, when a model call failed mid-loop.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    /// Set when the interruption was a replay miss (fixture drift).
    #[serde(skip)]
    pub replay_miss: Option<String>,
}

impl BoostTrace {
    pub fn last_outcome(&self) -> &ExecutionOutcome {
        &self.attempts.last().expect("a trace has at least one attempt").outcome
    }
}

/// What the repair prompt needs besides the failed attempt.
#[derive(Debug, Clone, Copy)]
pub struct RepairContext<'a> {
    pub question: &'a str,
    pub schema_block: &'a str,
}

pub fn build_repair_prompt(
    previous: &SqlCandidate,
    outcome: &ExecutionOutcome,
    ctx: RepairContext<'_>,
    language: &str,
    prompts: &PromptSet,
) -> Result<String, BoostError> {
    let feedback = match (&outcome.error_message, outcome.is_empty()) {
        (_, Ok(false)) => return Err(BoostError::PreconditionViolated),
        (_, Ok(true)) => EMPTY_RESULT_NOTICE.to_string(),
        (Some(msg), Err(_)) => format!("Error message: {msg}"),
        (None, Err(_)) => "Error message: (none reported)".to_string(),
    };
    let status = outcome.status.to_string();
    Ok(prompts.repair.render(&[
        ("language", language),
        ("question", ctx.question),
        ("previous_sql", &previous.sql_text),
        ("status", &status),
        ("error_message_or_empty_notice", &feedback),
        ("schema_block", ctx.schema_block.trim_end()),
    ]))
}

pub fn boost(
    initial: SqlCandidate,
    env: &dyn Environment,
    ctx: RepairContext<'_>,
    chat: &Chat<'_>,
    prompts: &PromptSet,
    max_attempts: u32,
) -> Result<BoostTrace, BoostError> {
    if max_attempts == 0 {
        return Err(BoostError::InvalidBudget);
    }
    let mut attempts: Vec<Attempt> = Vec::new();
    let mut candidate = initial;
    let mut note = None;
    let mut replay_miss = None;
    let termination = loop {
        let outcome = env.execute(&candidate.sql_text);
        let done = outcome.is_success_nonempty();
        attempts.push(Attempt { candidate: candidate.clone(), outcome });
        if done {
            break Termination::SuccessNonempty;
        }
        if attempts.len() as u32 >= max_attempts {
            break Termination::MaxAttemptsExhausted;
        }
        let last = attempts.last().expect("just pushed");
        let prompt = build_repair_prompt(&last.candidate, &last.outcome, ctx, env.language(), prompts)?;
        let next = chat
            .ask(&prompt)
            .map_err(RepairFailure::Gateway)
            .and_then(|reply| env.extract(&reply).map_err(RepairFailure::Extract));
        match next {
            Ok(code) => {
                candidate = SqlCandidate {
                    sql_text: code,
                    attempt_index: candidate.attempt_index + 1,
                    origin: Origin::Boosted,
                };
            }
            Err(failure) => {
                if let RepairFailure::Gateway(GatewayError::ReplayMiss { digest }) = &failure {
                    replay_miss = Some(digest.clone());
                }
                let msg = failure.to_string();
                tracing::warn!(attempt = attempts.len(), "repair loop interrupted: {msg}");
                note = Some(msg);
                break Termination::MaxAttemptsExhausted;
            }
        }
    };
    let final_candidate = attempts.last().expect("at least one attempt").candidate.clone();
    Ok(BoostTrace { attempts, termination, final_candidate, note, replay_miss })
}

#[derive(Debug, Error)]
enum RepairFailure {
    #[error("model call failed: {0}")]
    Gateway(GatewayError),
    #[error("repair reply unusable: {0}")]
    Extract(GenerateError),
}

/// Executes once without repairs; the shape the loop returns when disabled.
pub fn single_shot(initial: SqlCandidate, env: &dyn Environment) -> BoostTrace {
    let outcome = env.execute(&initial.sql_text);
    let termination =
        if outcome.is_success_nonempty() { Termination::SuccessNonempty } else { Termination::MaxAttemptsExhausted };
    BoostTrace {
        attempts: vec![Attempt { candidate: initial.clone(), outcome }],
        termination,
        final_candidate: initial,
        note: None,
        replay_miss: None,
    }
}
