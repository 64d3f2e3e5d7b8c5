//! Training-ready dataset emission from scored transcripts: next-line
//! supervised targets, binary desirability labels, and turn-level
//! rewards, all as line-delimited record streams with an explicit
//! schema-version header.
//!
//! Exported prompts are re-rendered from the stored template and
//! bindings through the same rendering path the generator used, so a
//! prompt in a dataset is byte-identical to the prompt the simulator
//! actually saw at that turn.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialogue::{render_turn_prompt, DialogueError, TaskTemplates};
use crate::metrics::{binarize_reward, per_turn_rewards, MetricsError, RewardMetric, VerdictMatrix};
use crate::model::{AgentRole, Transcript, SCHEMA_VERSION};

#[derive(Debug, Error)]
pub enum ExportError {
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Render(#[from] DialogueError),
    #[error("record stream is missing its header record")]
    MissingHeader,
    #[error("record stream header mismatch: kind `{kind}`, schema `{schema}`")]
    HeaderMismatch { kind: String, schema: String },
    #[error("malformed record at line {line}: {source}")]
    MalformedRecord {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

/// Next-line supervised target: the prompt the simulator saw and the
/// line it should produce.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub prompt: String,
    pub target: String,
}

/// A 0/1 desirability label over (prompt, completion), from rounding the
/// averaged consistency score half-up.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryLabelRecord {
    pub prompt: String,
    pub completion: String,
    pub label: u8,
}

/// A scalar turn reward over (prompt, completion).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRewardRecord {
    pub prompt: String,
    pub completion: String,
    pub reward: f64,
    pub transcript_id: String,
    pub turn_index: usize,
}

/// Which metrics enter the averaged score behind a binary label.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelPolicy {
    /// Mean of every scored metric at the turn (reduces to a single
    /// metric when only one was scored).
    #[default]
    Averaged,
    PromptToLine,
    LineToLine,
    Qa,
}

impl From<LabelPolicy> for RewardMetric {
    fn from(policy: LabelPolicy) -> RewardMetric {
        match policy {
            LabelPolicy::Averaged => RewardMetric::Averaged,
            LabelPolicy::PromptToLine => RewardMetric::PromptToLine,
            LabelPolicy::LineToLine => RewardMetric::LineToLine,
            LabelPolicy::Qa => RewardMetric::Qa,
        }
    }
}

fn simulator_prompt(
    transcript: &Transcript,
    templates: &TaskTemplates,
    utterance_index: usize,
    brevity_reminder: bool,
) -> Result<String, DialogueError> {
    // Transcripts generated by this toolkit record the brevity flag
    // they were rendered with; honor it over the caller's setting so
    // re-rendered prompts stay byte-identical to generation time.
    let brevity = transcript
        .persona
        .metadata
        .get("brevity_reminder")
        .map(|v| v == "true")
        .unwrap_or(brevity_reminder);
    render_turn_prompt(
        templates,
        &transcript.persona,
        transcript.prefix(utterance_index),
        AgentRole::UserSimulator,
        brevity,
    )
}

/// One SFT record per simulator utterance.
pub fn export_sft(
    transcript: &Transcript,
    templates: &TaskTemplates,
    brevity_reminder: bool,
) -> Result<Vec<SftRecord>, ExportError> {
    let mut records = Vec::new();
    for utt in transcript.simulator_turns() {
        records.push(SftRecord {
            prompt: simulator_prompt(transcript, templates, utt.index, brevity_reminder)?,
            target: utt.text.clone(),
        });
    }
    Ok(records)
}

/// One labeled record per scored simulator utterance; unscored turns are
/// skipped and counted.
pub fn export_binary_labels(
    transcript: &Transcript,
    matrix: &VerdictMatrix,
    templates: &TaskTemplates,
    policy: LabelPolicy,
    brevity_reminder: bool,
) -> Result<(Vec<BinaryLabelRecord>, usize), ExportError> {
    let rewards = match per_turn_rewards(matrix, policy.into()) {
        Ok(rewards) => rewards,
        Err(MetricsError::MetricUnavailable(_)) => Vec::new(),
        Err(other) => return Err(other.into()),
    };
    let simulator_turns = transcript.simulator_turns();
    let mut records = Vec::new();
    for reward in &rewards {
        let Some(utt) = simulator_turns.iter().find(|u| u.index == reward.turn_index) else {
            continue;
        };
        records.push(BinaryLabelRecord {
            prompt: simulator_prompt(transcript, templates, utt.index, brevity_reminder)?,
            completion: utt.text.clone(),
            label: binarize_reward(reward.reward),
        });
    }
    let skipped = simulator_turns.len() - records.len();
    Ok((records, skipped))
}

/// One reward record per scored turn under the selected metric.
pub fn export_turn_rewards(
    transcript: &Transcript,
    matrix: &VerdictMatrix,
    templates: &TaskTemplates,
    metric: RewardMetric,
    brevity_reminder: bool,
) -> Result<Vec<TurnRewardRecord>, ExportError> {
    let rewards = per_turn_rewards(matrix, metric)?;
    let simulator_turns = transcript.simulator_turns();
    let mut records = Vec::new();
    for reward in rewards {
        let Some(utt) = simulator_turns.iter().find(|u| u.index == reward.turn_index) else {
            continue;
        };
        records.push(TurnRewardRecord {
            prompt: simulator_prompt(transcript, templates, utt.index, brevity_reminder)?,
            completion: utt.text.clone(),
            reward: reward.reward,
            transcript_id: reward.transcript_id,
            turn_index: reward.turn_index,
        });
    }
    Ok(records)
}

// --- record streams -------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct StreamHeader {
    record: String,
    schema_version: String,
    kind: String,
}

fn write_stream<T: Serialize>(kind: &str, records: &[T]) -> String {
    let header = StreamHeader {
        record: "header".into(),
        schema_version: SCHEMA_VERSION.into(),
        kind: kind.into(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for record in records {
        out.push_str(&serde_json::to_string(record).expect("record serializes"));
        out.push('\n');
    }
    out
}

fn read_stream<T: for<'de> Deserialize<'de>>(kind: &str, input: &str) -> Result<Vec<T>, ExportError> {
    let mut lines = input.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (line, header_line) = lines.next().ok_or(ExportError::MissingHeader)?;
    let header: StreamHeader = serde_json::from_str(header_line)
        .map_err(|source| ExportError::MalformedRecord { line: line + 1, source })?;
    if header.record != "header" || header.schema_version != SCHEMA_VERSION || header.kind != kind {
        return Err(ExportError::HeaderMismatch { kind: header.kind, schema: header.schema_version });
    }
    let mut records = Vec::new();
    for (line, text) in lines {
        records.push(
            serde_json::from_str(text)
                .map_err(|source| ExportError::MalformedRecord { line: line + 1, source })?,
        );
    }
    Ok(records)
}

pub fn write_sft_stream(records: &[SftRecord]) -> String {
    write_stream("sft", records)
}

pub fn read_sft_stream(input: &str) -> Result<Vec<SftRecord>, ExportError> {
    read_stream("sft", input)
}

pub fn write_kto_stream(records: &[BinaryLabelRecord]) -> String {
    write_stream("kto", records)
}

pub fn read_kto_stream(input: &str) -> Result<Vec<BinaryLabelRecord>, ExportError> {
    read_stream("kto", input)
}

pub fn write_rewards_stream(records: &[TurnRewardRecord]) -> String {
    write_stream("rewards", records)
}

pub fn read_rewards_stream(input: &str) -> Result<Vec<TurnRewardRecord>, ExportError> {
    read_stream("rewards", input)
}
