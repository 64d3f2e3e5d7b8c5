//! Toolkit for persona-conditioned two-agent dialogue simulation,
//! LLM-judged consistency scoring, agreement statistics, and reward
//! dataset export.
//!
//! A run flows through five file-based stages driven by the `personasim`
//! binary: `simulate` generates conversations between a persona-
//! conditioned user simulator and a fixed task agent; `judge` scores
//! each simulator line with three consistency metrics (alignment with
//! the backstory, contradiction of earlier lines, and multiple-choice
//! probes of persona beliefs); `score` folds verdicts into per-transcript
//! reports; `stats` computes agreement statistics; `export` emits
//! training-ready record streams.

pub mod config;
pub mod dialogue;
pub mod export;
pub mod gateway;
pub mod golden;
pub mod judge;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod stats;
pub mod stub;

pub use config::RunConfig;
pub use model::{
    AgentRole, ConsistencyReport, JudgeVerdict, MetricKind, Persona, ProbeSet, TaskKind, Transcript,
    Utterance,
};
