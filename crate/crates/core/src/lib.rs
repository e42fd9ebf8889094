//! Natural-language questions to SQL over SQLite databases.

pub mod booster;
pub mod catalog;
pub mod database;
pub mod eval;
pub mod executor;
pub mod function;
pub mod generator;
pub mod linker;
pub mod llm;
pub mod parallel;
pub mod pipeline;
pub mod prompts;
pub mod rewrite;
pub mod script;
pub mod sqltext;

#[cfg(test)]
mod testdb;
