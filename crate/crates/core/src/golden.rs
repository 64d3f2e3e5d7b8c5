//! The nine golden fixture conversations shipped under
//! `fixtures/golden/`: three per task, each carrying the judge's printed
//! per-line verdict texts, the frozen per-turn consistency bits, and the
//! conversation-level prompt-to-line score they reproduce.

use serde::Deserialize;

use crate::judge::{consistent_from, parse_verdict_text, JudgePolarity};
use crate::model::{AgentRole, Persona, TaskKind, Transcript, Utterance};

#[derive(Debug, Clone, Deserialize)]
pub struct GoldenFixture {
    pub name: String,
    pub task: TaskKind,
    pub expected_prompt_to_line: f64,
    pub persona: GoldenPersona,
    pub task_agent_label: String,
    pub turns: Vec<GoldenTurn>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct GoldenPersona {
    pub id: String,
    pub role_label: String,
    pub text: String,
    #[serde(default)]
    pub metadata: std::collections::BTreeMap<String, String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct GoldenTurn {
    pub speaker: AgentRole,
    pub text: String,
    /// Printed judge verdict; present on simulator turns only.
    #[serde(default)]
    pub verdict: Option<String>,
    /// Frozen consistency bit the verdict reduces to (1 = consistent,
    /// 0 = inconsistent, absent = unparseable error turn).
    #[serde(default)]
    pub expected_bit: Option<u8>,
}

const GOLDEN_JSON: [&str; 9] = [
    include_str!("../fixtures/golden/open_ended_1.json"),
    include_str!("../fixtures/golden/open_ended_2.json"),
    include_str!("../fixtures/golden/open_ended_3.json"),
    include_str!("../fixtures/golden/education_1.json"),
    include_str!("../fixtures/golden/education_2.json"),
    include_str!("../fixtures/golden/education_3.json"),
    include_str!("../fixtures/golden/mental_health_1.json"),
    include_str!("../fixtures/golden/mental_health_2.json"),
    include_str!("../fixtures/golden/mental_health_3.json"),
];

/// All nine fixtures, in task order.
pub fn all() -> Vec<GoldenFixture> {
    GOLDEN_JSON
        .iter()
        .map(|raw| serde_json::from_str(raw).expect("golden fixture parses"))
        .collect()
}

impl GoldenFixture {
    pub fn persona(&self) -> Persona {
        let mut metadata = self.persona.metadata.clone();
        metadata.insert("listener_label".to_string(), self.task_agent_label.clone());
        Persona {
            id: self.persona.id.clone(),
            task: self.task,
            text: self.persona.text.clone(),
            role_label: self.persona.role_label.clone(),
            metadata,
        }
    }

    pub fn transcript(&self) -> Transcript {
        let utterances = self
            .turns
            .iter()
            .enumerate()
            .map(|(index, turn)| Utterance {
                index,
                speaker: turn.speaker,
                text: turn.text.clone(),
                regen_count: 0,
            })
            .collect();
        Transcript {
            id: format!("golden-{}", self.name),
            persona: self.persona(),
            task: self.task,
            utterances,
            target_length: self.turns.len(),
            seed: 0,
        }
    }

    /// The printed verdict texts in simulator-turn order.
    pub fn verdict_texts(&self) -> Vec<&str> {
        self.turns.iter().filter_map(|t| t.verdict.as_deref()).collect()
    }

    /// Frozen per-turn bits in simulator-turn order (None = error turn).
    pub fn expected_bits(&self) -> Vec<Option<u8>> {
        self.turns
            .iter()
            .filter(|t| t.speaker == AgentRole::UserSimulator)
            .map(|t| t.expected_bit)
            .collect()
    }

    /// Replays parse → polarity over the printed verdicts, yielding a
    /// per-turn consistency bit or an error turn.
    pub fn replay_bits(&self, polarity: JudgePolarity) -> Vec<Option<bool>> {
        self.verdict_texts()
            .iter()
            .map(|text| parse_verdict_text(text).map(|parsed| consistent_from(parsed, polarity)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::judge::default_prompt_polarity;
    use crate::metrics::prompt_to_line_score;

    #[test]
    fn nine_fixtures_parse_and_validate() {
        let fixtures = all();
        assert_eq!(fixtures.len(), 9);
        for fixture in &fixtures {
            let transcript = fixture.transcript();
            transcript.validate().unwrap();
            assert_eq!(transcript.simulator_turns().len(), 5, "{}", fixture.name);
            assert_eq!(fixture.verdict_texts().len(), 5, "{}", fixture.name);
        }
    }

    #[test]
    fn open_ended_example_one_has_five_simulator_lines() {
        let fixtures = all();
        let fixture = fixtures.iter().find(|f| f.name == "open_ended_1").unwrap();
        assert_eq!(fixture.transcript().simulator_turns().len(), 5);
    }

    #[test]
    fn replayed_bits_match_frozen_bits() {
        for fixture in all() {
            let polarity = default_prompt_polarity(fixture.task);
            let replayed = fixture.replay_bits(polarity);
            let expected = fixture.expected_bits();
            for (turn, (got, want)) in replayed.iter().zip(&expected).enumerate() {
                assert_eq!(
                    got.map(u8::from),
                    *want,
                    "{} simulator turn {} parsed differently",
                    fixture.name,
                    turn + 1
                );
            }
        }
    }

    #[test]
    fn replayed_scores_match_printed_labels() {
        for fixture in all() {
            let polarity = default_prompt_polarity(fixture.task);
            let bits = fixture.replay_bits(polarity);
            let score = prompt_to_line_score(&bits).unwrap();
            assert_eq!(score, fixture.expected_prompt_to_line, "{}", fixture.name);
        }
    }
}
