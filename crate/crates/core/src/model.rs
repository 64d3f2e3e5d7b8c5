//! Domain types shared by every other module: personas, transcripts,
//! judge verdicts, consistency reports, and probe sets, plus the
//! line-delimited record-stream format used to persist transcripts.
//!
//! Utterances carry 0-based global indices. The consistency metrics are
//! defined over 1-based simulator turns `t = 1..=T`; the mapping between
//! the two lives here (`simulator_turns`) and nowhere else.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Schema version written into every record-stream header.
pub const SCHEMA_VERSION: &str = "v1";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("persona `{0}` has an empty {1}")]
    EmptyPersonaField(String, &'static str),
    #[error("utterance {0} has empty text")]
    EmptyUtterance(usize),
    #[error("utterances {0} and {1} share speaker {2}")]
    AlternationViolated(usize, usize, AgentRole),
    #[error("utterance at position {position} has index {index}, expected {expected}")]
    NonContiguousIndex {
        position: usize,
        index: usize,
        expected: usize,
    },
    #[error("transcript `{id}` holds {count} utterances, target length is {target}")]
    OverLength { id: String, count: usize, target: usize },
    #[error("target length must be at least 1, got {0}")]
    BadTargetLength(usize),
    #[error("record stream is missing its header record")]
    MissingHeader,
    #[error("record stream header has schema version `{0}`, expected `{1}`")]
    SchemaVersionMismatch(String, &'static str),
    #[error("malformed record at line {line}: {source}")]
    MalformedRecord {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

/// The three interactive domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    OpenEnded,
    Education,
    MentalHealth,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::OpenEnded, TaskKind::Education, TaskKind::MentalHealth];

    pub fn slug(self) -> &'static str {
        match self {
            TaskKind::OpenEnded => "open_ended",
            TaskKind::Education => "education",
            TaskKind::MentalHealth => "mental_health",
        }
    }

    pub fn from_slug(slug: &str) -> Option<TaskKind> {
        match slug {
            "open_ended" | "open-ended" | "openended" => Some(TaskKind::OpenEnded),
            "education" => Some(TaskKind::Education),
            "mental_health" | "mental-health" | "mentalhealth" => Some(TaskKind::MentalHealth),
            _ => None,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

/// Which of the two agents spoke an utterance.
///
/// The user simulator is the persona-conditioned agent whose consistency
/// is measured; the task agent is its fixed counterpart (partner,
/// teacher, therapist).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    UserSimulator,
    TaskAgent,
}

impl AgentRole {
    pub fn other(self) -> AgentRole {
        match self {
            AgentRole::UserSimulator => AgentRole::TaskAgent,
            AgentRole::TaskAgent => AgentRole::UserSimulator,
        }
    }
}

impl fmt::Display for AgentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AgentRole::UserSimulator => f.write_str("user_simulator"),
            AgentRole::TaskAgent => f.write_str("task_agent"),
        }
    }
}

/// The backstory prompt conditioning the user simulator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Persona {
    pub id: String,
    pub task: TaskKind,
    /// Full backstory paragraph substituted for the backstory placeholder.
    pub text: String,
    /// Display label used in conversation renderings and judge prompts,
    /// e.g. "Student", "Patient", or a first name in open-ended chat.
    pub role_label: String,
    /// Sampled attributes, e.g. education_level, learning_style, or the
    /// eight mental-health dimensions. BTreeMap keeps serialization
    /// order stable.
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl Persona {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.text.trim().is_empty() {
            return Err(ModelError::EmptyPersonaField(self.id.clone(), "text"));
        }
        if self.role_label.trim().is_empty() {
            return Err(ModelError::EmptyPersonaField(self.id.clone(), "role_label"));
        }
        Ok(())
    }
}

/// One line of dialogue.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    /// 0-based position in the transcript.
    pub index: usize,
    pub speaker: AgentRole,
    pub text: String,
    /// How many times this line was regenerated after a role break.
    #[serde(default)]
    pub regen_count: u32,
}

/// An ordered two-agent conversation.
///
/// `target_length` counts total utterances (the 10/20/40/60 length
/// configurations count lines, not exchanges).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub id: String,
    pub persona: Persona,
    pub task: TaskKind,
    pub utterances: Vec<Utterance>,
    pub target_length: usize,
    pub seed: u64,
}

impl Transcript {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.target_length == 0 {
            return Err(ModelError::BadTargetLength(self.target_length));
        }
        if self.utterances.len() > self.target_length {
            return Err(ModelError::OverLength {
                id: self.id.clone(),
                count: self.utterances.len(),
                target: self.target_length,
            });
        }
        self.persona.validate()?;
        for (position, utt) in self.utterances.iter().enumerate() {
            if utt.text.is_empty() {
                return Err(ModelError::EmptyUtterance(utt.index));
            }
            if utt.index != position {
                return Err(ModelError::NonContiguousIndex {
                    position,
                    index: utt.index,
                    expected: position,
                });
            }
        }
        for pair in self.utterances.windows(2) {
            if pair[0].speaker == pair[1].speaker {
                return Err(ModelError::AlternationViolated(
                    pair[0].index,
                    pair[1].index,
                    pair[0].speaker,
                ));
            }
        }
        Ok(())
    }

    /// The simulator's utterances in order. Its length defines `T`, the
    /// index domain of all three consistency metrics: the t-th simulator
    /// turn (1-based) is `simulator_turns()[t - 1]`.
    pub fn simulator_turns(&self) -> Vec<&Utterance> {
        self.utterances
            .iter()
            .filter(|u| u.speaker == AgentRole::UserSimulator)
            .collect()
    }

    /// All utterances strictly before global index `end`.
    pub fn prefix(&self, end: usize) -> &[Utterance] {
        let cut = self.utterances.iter().take_while(|u| u.index < end).count();
        &self.utterances[..cut]
    }
}

/// A binary consistency decision from the judge, with provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub consistent: bool,
    pub raw_text: String,
    pub judge_model: String,
    #[serde(default)]
    pub retries_used: u32,
}

/// Which metric a score, error, or reward belongs to. Serialized with
/// the same short slugs the CLI flags use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MetricKind {
    #[serde(rename = "prompt")]
    PromptToLine,
    #[serde(rename = "line")]
    LineToLine,
    #[serde(rename = "qa")]
    Qa,
}

impl MetricKind {
    pub const ALL: [MetricKind; 3] = [MetricKind::PromptToLine, MetricKind::LineToLine, MetricKind::Qa];

    pub fn slug(self) -> &'static str {
        match self {
            MetricKind::PromptToLine => "prompt",
            MetricKind::LineToLine => "line",
            MetricKind::Qa => "qa",
        }
    }

    pub fn from_slug(slug: &str) -> Option<MetricKind> {
        match slug {
            "prompt" | "prompt_to_line" | "prompt-to-line" => Some(MetricKind::PromptToLine),
            "line" | "line_to_line" | "line-to-line" => Some(MetricKind::LineToLine),
            "qa" | "q&a" | "qanda" => Some(MetricKind::Qa),
            _ => None,
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

/// Per-turn metric values for one simulator turn.
///
/// `turn_index` is the utterance's global 0-based index; prompt and line
/// values are the 0/1 judge bits, `qa_fraction` the correct fraction of
/// probes at that turn. A `None` means the metric was not scored there
/// (not requested, structurally absent, or an error turn).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnScores {
    pub turn_index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt_to_line: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub line_to_line: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qa_fraction: Option<f64>,
}

/// Aggregate scores over the scored turns of a transcript.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregateScores {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt_to_line: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub line_to_line: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qa: Option<f64>,
}

impl AggregateScores {
    pub fn get(&self, metric: MetricKind) -> Option<f64> {
        match metric {
            MetricKind::PromptToLine => self.prompt_to_line,
            MetricKind::LineToLine => self.line_to_line,
            MetricKind::Qa => self.qa,
        }
    }
}

/// A turn the judge could not score, with the reason.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorTurn {
    pub turn_index: usize,
    pub metric: MetricKind,
    pub reason: String,
}

/// Per-utterance and aggregate consistency scores for one transcript.
///
/// Aggregates equal the closed-form means of the per-turn entries over
/// the non-error turns; error turns are excluded from denominators and
/// listed with reasons so either convention can be recomputed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub transcript_id: String,
    pub task: TaskKind,
    pub target_length: usize,
    pub per_turn: Vec<TurnScores>,
    pub aggregate: AggregateScores,
    #[serde(default)]
    pub error_turns: Vec<ErrorTurn>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

/// One diagnostic multiple-choice question about a persona.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeQuestion {
    pub prompt: String,
    /// Exactly five answer choices.
    pub choices: Vec<String>,
    pub reference_answer: String,
}

impl ProbeQuestion {
    /// The question rendered the way it is shown to the answering agent.
    pub fn rendered(&self) -> String {
        let mut out = self.prompt.clone();
        for choice in &self.choices {
            out.push('\n');
            out.push_str(choice);
        }
        out
    }
}

/// The diagnostic question set for one persona.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeSet {
    pub persona_id: String,
    pub questions: Vec<ProbeQuestion>,
}

/// One probe answer given mid-dialogue, with its grade once judged.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeAnswerRecord {
    pub turn_index: usize,
    pub question_index: usize,
    pub given_answer: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub graded_correct: Option<bool>,
}

// --- record-stream serialization -------------------------------------

/// One line of the `.records` transcript format.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum TranscriptRecord {
    Header {
        schema_version: String,
        id: String,
        task: TaskKind,
        persona: Persona,
        target_length: usize,
        seed: u64,
    },
    Utterance {
        index: usize,
        speaker: AgentRole,
        text: String,
        regen_count: u32,
    },
}

/// Serializes a transcript as one JSON record per line: a header record
/// followed by one record per utterance. Newlines inside utterance text
/// are escaped by the JSON encoding, so records stay line-delimited.
pub fn serialize_transcript(transcript: &Transcript) -> String {
    let mut out = String::new();
    let header = TranscriptRecord::Header {
        schema_version: SCHEMA_VERSION.to_string(),
        id: transcript.id.clone(),
        task: transcript.task,
        persona: transcript.persona.clone(),
        target_length: transcript.target_length,
        seed: transcript.seed,
    };
    out.push_str(&serde_json::to_string(&header).expect("header serializes"));
    out.push('\n');
    for utt in &transcript.utterances {
        let record = TranscriptRecord::Utterance {
            index: utt.index,
            speaker: utt.speaker,
            text: utt.text.clone(),
            regen_count: utt.regen_count,
        };
        out.push_str(&serde_json::to_string(&record).expect("utterance serializes"));
        out.push('\n');
    }
    out
}

/// Parses a record stream produced by [`serialize_transcript`].
pub fn deserialize_transcript(input: &str) -> Result<Transcript, ModelError> {
    let mut lines = input.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (line_no, header_line) = lines.next().ok_or(ModelError::MissingHeader)?;
    let header: TranscriptRecord = serde_json::from_str(header_line)
        .map_err(|source| ModelError::MalformedRecord { line: line_no + 1, source })?;
    let (id, task, persona, target_length, seed) = match header {
        TranscriptRecord::Header { schema_version, id, task, persona, target_length, seed } => {
            if schema_version != SCHEMA_VERSION {
                return Err(ModelError::SchemaVersionMismatch(schema_version, SCHEMA_VERSION));
            }
            (id, task, persona, target_length, seed)
        }
        TranscriptRecord::Utterance { .. } => return Err(ModelError::MissingHeader),
    };
    let mut utterances = Vec::new();
    for (line_no, line) in lines {
        let record: TranscriptRecord = serde_json::from_str(line)
            .map_err(|source| ModelError::MalformedRecord { line: line_no + 1, source })?;
        match record {
            TranscriptRecord::Utterance { index, speaker, text, regen_count } => {
                utterances.push(Utterance { index, speaker, text, regen_count });
            }
            TranscriptRecord::Header { .. } => return Err(ModelError::MissingHeader),
        }
    }
    Ok(Transcript { id, persona, task, utterances, target_length, seed })
}
