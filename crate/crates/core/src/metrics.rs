//! Score arithmetic over judge outputs.
//!
//! All three consistency scores are means over scored turns: error turns
//! are excluded from the denominator rather than scored 0, and the
//! report carries both T and the scored-turn count so either convention
//! can be recomputed downstream.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::judge::ConflictFinding;
use crate::model::{
    AggregateScores, ConsistencyReport, ErrorTurn, MetricKind, Transcript, TurnScores,
};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no scored turns for {0}")]
    NoScoredTurns(MetricKind),
    #[error("no scored cells in the QA grade grid")]
    NoScoredCells,
    #[error("metric {0:?} unavailable for this transcript")]
    MetricUnavailable(RewardMetric),
    #[error("matrix dimensions do not match transcript `{id}`: {detail}")]
    DimensionMismatch { id: String, detail: String },
}

/// Judge outputs for one transcript, indexed by 1-based simulator turn
/// ordinal `t` (stored 0-based).
///
/// * `prompt_to_line[t-1]` — consistency bit for turn t, length T.
/// * `conflicts[t-2]` — conflict finding for turn t (t starts at 2; the
///   first simulator turn has no prior lines), length T-1.
/// * `qa_grades[t-1][k]` — correctness of probe k answered at turn t.
///
/// `None` entries are unscored: the metric was not requested, is
/// structurally absent, or the turn errored (listed in `errors`).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerdictMatrix {
    pub transcript_id: String,
    /// Global utterance index per simulator ordinal.
    pub turn_indices: Vec<usize>,
    pub prompt_to_line: Vec<Option<bool>>,
    pub conflicts: Vec<Option<ConflictFinding>>,
    pub qa_grades: Vec<Vec<Option<bool>>>,
    pub errors: Vec<ErrorTurn>,
}

impl VerdictMatrix {
    pub fn empty(transcript_id: impl Into<String>, turn_indices: Vec<usize>) -> VerdictMatrix {
        let t = turn_indices.len();
        VerdictMatrix {
            transcript_id: transcript_id.into(),
            turn_indices,
            prompt_to_line: vec![None; t],
            conflicts: vec![None; t.saturating_sub(1)],
            qa_grades: vec![Vec::new(); t],
            errors: Vec::new(),
        }
    }

    pub fn turn_count(&self) -> usize {
        self.turn_indices.len()
    }

    /// Per-turn line bit: empty citation list means consistent.
    pub fn line_bit(&self, ordinal: usize) -> Option<bool> {
        if ordinal < 2 {
            return None;
        }
        self.conflicts
            .get(ordinal - 2)
            .and_then(|slot| slot.as_ref())
            .map(ConflictFinding::is_clean)
    }

    /// Per-turn QA fraction over the graded cells of that row.
    pub fn qa_fraction(&self, ordinal: usize) -> Option<f64> {
        let row = self.qa_grades.get(ordinal - 1)?;
        let graded: Vec<bool> = row.iter().flatten().copied().collect();
        if graded.is_empty() {
            return None;
        }
        let correct = graded.iter().filter(|&&g| g).count();
        Some(correct as f64 / graded.len() as f64)
    }
}

/// Mean of the scored per-turn bits: (1/T') Σ J over the T' scored turns.
pub fn prompt_to_line_score(verdicts: &[Option<bool>]) -> Result<f64, MetricsError> {
    let scored: Vec<bool> = verdicts.iter().flatten().copied().collect();
    if scored.is_empty() {
        return Err(MetricsError::NoScoredTurns(MetricKind::PromptToLine));
    }
    let sum = scored.iter().filter(|&&bit| bit).count();
    Ok(sum as f64 / scored.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineToLineScore {
    pub value: f64,
    /// True when T = 1: the (T-1) denominator is undefined and the score
    /// falls back to the no-prior-line convention value 1.0.
    pub single_turn_convention: bool,
}

/// Fraction of turns t = 2..T whose conflict list is empty, over the
/// scored turns. A turn with any surviving citation contributes 0,
/// realizing the minimum over its prior lines.
pub fn line_to_line_score(
    turn_count: usize,
    conflicts: &[Option<ConflictFinding>],
) -> Result<LineToLineScore, MetricsError> {
    if turn_count == 0 {
        return Err(MetricsError::NoScoredTurns(MetricKind::LineToLine));
    }
    if turn_count == 1 {
        return Ok(LineToLineScore { value: 1.0, single_turn_convention: true });
    }
    let scored: Vec<bool> = conflicts.iter().flatten().map(ConflictFinding::is_clean).collect();
    if scored.is_empty() {
        return Err(MetricsError::NoScoredTurns(MetricKind::LineToLine));
    }
    let clean = scored.iter().filter(|&&c| c).count();
    Ok(LineToLineScore {
        value: clean as f64 / scored.len() as f64,
        single_turn_convention: false,
    })
}

/// Fraction of correct cells in the T×K grade grid, over scored cells.
pub fn qa_consistency_score(grades: &[Vec<Option<bool>>]) -> Result<f64, MetricsError> {
    let mut scored = 0usize;
    let mut correct = 0usize;
    for row in grades {
        for cell in row.iter().flatten() {
            scored += 1;
            if *cell {
                correct += 1;
            }
        }
    }
    if scored == 0 {
        return Err(MetricsError::NoScoredCells);
    }
    Ok(correct as f64 / scored as f64)
}

/// Which per-turn value feeds a reward record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RewardMetric {
    #[serde(rename = "prompt")]
    PromptToLine,
    #[serde(rename = "line")]
    LineToLine,
    #[serde(rename = "qa")]
    Qa,
    #[serde(rename = "averaged")]
    Averaged,
}

impl RewardMetric {
    pub fn from_slug(slug: &str) -> Option<RewardMetric> {
        match slug {
            "prompt" => Some(RewardMetric::PromptToLine),
            "line" => Some(RewardMetric::LineToLine),
            "qa" => Some(RewardMetric::Qa),
            "averaged" | "avg" => Some(RewardMetric::Averaged),
            _ => None,
        }
    }
}

/// A scalar reward in [0,1] attached to one simulator utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub transcript_id: String,
    pub turn_index: usize,
    pub reward: f64,
    pub metric: RewardMetric,
}

/// Per-turn rewards for the selected metric: the turn's 0/1 bit for the
/// binary metrics, the correct fraction for QA, and the mean of the
/// available per-turn values for Averaged.
pub fn per_turn_rewards(
    matrix: &VerdictMatrix,
    metric: RewardMetric,
) -> Result<Vec<RewardRecord>, MetricsError> {
    let mut records = Vec::new();
    for ordinal in 1..=matrix.turn_count() {
        let turn_index = matrix.turn_indices[ordinal - 1];
        let prompt = matrix.prompt_to_line[ordinal - 1].map(|b| if b { 1.0 } else { 0.0 });
        let line = matrix.line_bit(ordinal).map(|b| if b { 1.0 } else { 0.0 });
        let qa = matrix.qa_fraction(ordinal);
        let reward = match metric {
            RewardMetric::PromptToLine => prompt,
            RewardMetric::LineToLine => line,
            RewardMetric::Qa => qa,
            RewardMetric::Averaged => {
                let available: Vec<f64> = [prompt, line, qa].into_iter().flatten().collect();
                if available.is_empty() {
                    None
                } else {
                    Some(available.iter().sum::<f64>() / available.len() as f64)
                }
            }
        };
        if let Some(reward) = reward {
            debug_assert!((0.0..=1.0).contains(&reward));
            records.push(RewardRecord {
                transcript_id: matrix.transcript_id.clone(),
                turn_index,
                reward,
                metric,
            });
        }
    }
    if records.is_empty() {
        return Err(MetricsError::MetricUnavailable(metric));
    }
    Ok(records)
}

/// Rounds an averaged consistency score to a 0/1 desirability label,
/// half up: 0.5 rounds to 1.
pub fn binarize_reward(value: f64) -> u8 {
    if value >= 0.5 {
        1
    } else {
        0
    }
}

/// Builds the per-transcript report: per-turn values plus aggregates
/// equal to the three score functions applied to the matrix.
pub fn assemble_report(
    transcript: &Transcript,
    matrix: &VerdictMatrix,
) -> Result<ConsistencyReport, MetricsError> {
    let simulator_turns = transcript.simulator_turns();
    let t = simulator_turns.len();
    let mismatch = |detail: String| MetricsError::DimensionMismatch {
        id: transcript.id.clone(),
        detail,
    };
    if matrix.turn_count() != t {
        return Err(mismatch(format!("matrix has {} turns, transcript has {t}", matrix.turn_count())));
    }
    if matrix.prompt_to_line.len() != t
        || matrix.conflicts.len() != t.saturating_sub(1)
        || matrix.qa_grades.len() != t
    {
        return Err(mismatch("ragged matrix dimensions".to_string()));
    }
    for (ordinal, utt) in simulator_turns.iter().enumerate() {
        if matrix.turn_indices[ordinal] != utt.index {
            return Err(mismatch(format!(
                "ordinal {} maps to index {}, transcript says {}",
                ordinal + 1,
                matrix.turn_indices[ordinal],
                utt.index
            )));
        }
    }

    let mut per_turn = Vec::with_capacity(t);
    for ordinal in 1..=t {
        per_turn.push(TurnScores {
            turn_index: matrix.turn_indices[ordinal - 1],
            prompt_to_line: matrix.prompt_to_line[ordinal - 1].map(u8::from),
            line_to_line: matrix.line_bit(ordinal).map(u8::from),
            qa_fraction: matrix.qa_fraction(ordinal),
        });
    }

    let mut notes = Vec::new();
    let aggregate = AggregateScores {
        prompt_to_line: prompt_to_line_score(&matrix.prompt_to_line).ok(),
        line_to_line: match line_to_line_score(t, &matrix.conflicts) {
            Ok(score) => {
                if score.single_turn_convention {
                    notes.push("line_to_line: single simulator turn, convention value 1.0".to_string());
                }
                Some(score.value)
            }
            Err(_) => None,
        },
        qa: qa_consistency_score(&matrix.qa_grades).ok(),
    };

    Ok(ConsistencyReport {
        transcript_id: transcript.id.clone(),
        task: transcript.task,
        target_length: transcript.target_length,
        per_turn,
        aggregate,
        error_turns: matrix.errors.clone(),
        notes,
    })
}
