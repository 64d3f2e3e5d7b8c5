//! Judge-side machinery: renders the five shipped judge prompts, calls
//! the judge provider, and parses verdicts, conflict-index lists,
//! generated probe questions, probe answers, and grades.
//!
//! Verdict parsing scans for the last standalone YES/NO token, which
//! covers both "reasoning. YES" and "YES. reasoning" reply shapes. When
//! no token exists at all, an explicit "does not contradict" phrase is
//! accepted as a non-contradiction verdict; anything else is reported
//! as unparseable and becomes an error turn upstream.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialogue::{render_conversation, render_prompt, DialogueError, PromptTemplate};
use crate::gateway::{ChatMessage, ChatProvider, ChatRequest, GatewayError};
use crate::model::{AgentRole, Persona, ProbeQuestion, ProbeSet, TaskKind, Utterance};

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("unparseable verdict after {attempts} attempt(s): {raw:?}")]
    UnparseableVerdict { raw: String, attempts: u32 },
    #[error("unparseable index list after {attempts} attempt(s): {raw:?}")]
    UnparseableIndexList { raw: String, attempts: u32 },
    #[error("malformed probe question after {attempts} attempt(s): {raw:?}")]
    MalformedQuestion { raw: String, attempts: u32 },
    #[error("provider error: {0}")]
    Provider(#[from] GatewayError),
    #[error(transparent)]
    Render(#[from] DialogueError),
}

/// Whether a YES token from the prompt-to-line judge denotes a
/// contradiction or a confirmation of consistency.
///
/// The shipped prompt asks for YES-on-contradiction, but judge replies
/// in the mental-health domain follow the opposite convention, so the
/// mapping is configured per task rather than hard-coded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgePolarity {
    YesMeansContradiction,
    YesMeansConsistent,
}

/// Task defaults chosen to match observed judge behavior per domain.
pub fn default_prompt_polarity(task: TaskKind) -> JudgePolarity {
    match task {
        TaskKind::MentalHealth => JudgePolarity::YesMeansConsistent,
        TaskKind::OpenEnded | TaskKind::Education => JudgePolarity::YesMeansContradiction,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum YesNo {
    Yes,
    No,
}

/// What a verdict reply reduced to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParsedVerdict {
    Token(YesNo),
    /// Reply contained no YES/NO token but stated outright that the line
    /// does not contradict the background.
    NonContradictionPhrase,
}

/// Finds the last standalone case-insensitive YES or NO token. Total:
/// never panics, returns `None` when neither token occurs.
pub fn parse_trailing_yes_no(text: &str) -> Option<YesNo> {
    let mut last = None;
    for token in text.split(|c: char| !c.is_ascii_alphabetic()) {
        if token.eq_ignore_ascii_case("yes") {
            last = Some(YesNo::Yes);
        } else if token.eq_ignore_ascii_case("no") {
            last = Some(YesNo::No);
        }
    }
    last
}

const NON_CONTRADICTION_PHRASES: &[&str] =
    &["does not contradict", "doesn't contradict", "no contradiction"];

/// Reduces a prompt-to-line or grading reply to a verdict.
pub fn parse_verdict_text(text: &str) -> Option<ParsedVerdict> {
    if let Some(token) = parse_trailing_yes_no(text) {
        return Some(ParsedVerdict::Token(token));
    }
    let lowered = text.to_lowercase();
    if NON_CONTRADICTION_PHRASES.iter().any(|p| lowered.contains(p)) {
        return Some(ParsedVerdict::NonContradictionPhrase);
    }
    None
}

/// Maps a parsed verdict to a consistency bit under `polarity`.
pub fn consistent_from(parsed: ParsedVerdict, polarity: JudgePolarity) -> bool {
    match parsed {
        ParsedVerdict::Token(YesNo::Yes) => polarity == JudgePolarity::YesMeansConsistent,
        ParsedVerdict::Token(YesNo::No) => polarity == JudgePolarity::YesMeansContradiction,
        ParsedVerdict::NonContradictionPhrase => true,
    }
}

/// Extracts the last bracketed integer list in `text`; `[]` yields an
/// empty list; duplicates are removed and the result sorted ascending.
/// Total: returns `None` when no bracketed integer list occurs.
pub fn parse_index_list(text: &str) -> Option<Vec<usize>> {
    let bytes = text.as_bytes();
    let mut best: Option<Vec<usize>> = None;
    let mut open: Option<usize> = None;
    for (i, &b) in bytes.iter().enumerate() {
        match b {
            b'[' => open = Some(i),
            b']' => {
                if let Some(start) = open.take() {
                    if let Some(list) = parse_int_list(&text[start + 1..i]) {
                        best = Some(list);
                    }
                }
            }
            _ => {}
        }
    }
    best
}

fn parse_int_list(inner: &str) -> Option<Vec<usize>> {
    let inner = inner.trim();
    if inner.is_empty() {
        return Some(Vec::new());
    }
    let mut values = Vec::new();
    for part in inner.split(',') {
        values.push(part.trim().parse::<usize>().ok()?);
    }
    values.sort_unstable();
    values.dedup();
    Some(values)
}

/// A judged citation of earlier conflicting lines.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictFinding {
    /// Global index of the judged utterance.
    pub turn_index: usize,
    /// Cited line indices after filtering: simulator lines strictly
    /// before the judged turn only.
    pub cited_indices: Vec<usize>,
    pub raw_text: String,
}

impl ConflictFinding {
    pub fn is_clean(&self) -> bool {
        self.cited_indices.is_empty()
    }
}

/// Parses one generated probe question block: a `Question:` stem, five
/// lettered choices, and an `Answer:` reference.
pub fn parse_probe_question(text: &str) -> Option<ProbeQuestion> {
    let mut stem: Option<String> = None;
    let mut choices: Vec<String> = Vec::new();
    let mut reference: Option<String> = None;
    for line in text.lines() {
        let trimmed = line.trim();
        if let Some(rest) = trimmed.strip_prefix("Question:") {
            stem = Some(rest.trim().to_string());
        } else if let Some(rest) = trimmed.strip_prefix("Answer:") {
            reference = Some(rest.trim().to_string());
        } else if is_choice_line(trimmed) {
            choices.push(trimmed.to_string());
        } else if let (Some(s), true) = (&stem, choices.is_empty()) {
            // Multi-line stems continue until the first choice.
            if !trimmed.is_empty() && reference.is_none() {
                let mut extended = s.clone();
                extended.push(' ');
                extended.push_str(trimmed);
                stem = Some(extended);
            }
        }
    }
    let stem = stem?;
    let reference = reference?;
    if stem.is_empty() || reference.is_empty() || choices.len() != 5 {
        return None;
    }
    let mut distinct = choices.clone();
    distinct.sort();
    distinct.dedup();
    if distinct.len() != 5 {
        return None;
    }
    Some(ProbeQuestion { prompt: format!("Question: {stem}"), choices, reference_answer: reference })
}

fn is_choice_line(line: &str) -> bool {
    let mut chars = line.chars();
    matches!(
        (chars.next(), chars.next()),
        (Some('A'..='E'), Some(')' | '.' | ':'))
    )
}

// --- judge prompt catalog -------------------------------------------------

const PROMPT_TO_LINE_TXT: &str = include_str!("../prompts/judge/prompt_to_line.txt");
const LINE_TO_LINE_TXT: &str = include_str!("../prompts/judge/line_to_line.txt");
const QA_GENERATE_TXT: &str = include_str!("../prompts/judge/qa_generate.txt");
const QA_ANSWER_TXT: &str = include_str!("../prompts/judge/qa_answer.txt");
const QA_GRADE_TXT: &str = include_str!("../prompts/judge/qa_grade.txt");

/// The five judge prompt templates.
#[derive(Debug, Clone)]
pub struct JudgePrompts {
    pub prompt_to_line: PromptTemplate,
    pub line_to_line: PromptTemplate,
    pub qa_generate: PromptTemplate,
    pub qa_answer: PromptTemplate,
    pub qa_grade: PromptTemplate,
}

impl JudgePrompts {
    pub fn builtin() -> JudgePrompts {
        JudgePrompts {
            prompt_to_line: PromptTemplate::new("prompt_to_line", PROMPT_TO_LINE_TXT)
                .expect("builtin prompt parses"),
            line_to_line: PromptTemplate::new("line_to_line", LINE_TO_LINE_TXT)
                .expect("builtin prompt parses"),
            qa_generate: PromptTemplate::new("qa_generate", QA_GENERATE_TXT).expect("builtin prompt parses"),
            qa_answer: PromptTemplate::new("qa_answer", QA_ANSWER_TXT).expect("builtin prompt parses"),
            qa_grade: PromptTemplate::new("qa_grade", QA_GRADE_TXT).expect("builtin prompt parses"),
        }
    }

    /// Loads overrides from `<dir>/judge/<name>.txt` when present.
    pub fn load(dir: Option<&Path>) -> Result<JudgePrompts, DialogueError> {
        let mut prompts = Self::builtin();
        let Some(dir) = dir else { return Ok(prompts) };
        let judge_dir = dir.join("judge");
        let load_one = |name: &str, slot: &mut PromptTemplate| -> Result<(), DialogueError> {
            let path = judge_dir.join(format!("{name}.txt"));
            if path.exists() {
                let raw = std::fs::read_to_string(&path).map_err(|e| DialogueError::BadDataFile {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
                *slot = PromptTemplate::new(name, raw)?;
            }
            Ok(())
        };
        load_one("prompt_to_line", &mut prompts.prompt_to_line)?;
        load_one("line_to_line", &mut prompts.line_to_line)?;
        load_one("qa_generate", &mut prompts.qa_generate)?;
        load_one("qa_answer", &mut prompts.qa_answer)?;
        load_one("qa_grade", &mut prompts.qa_grade)?;
        Ok(prompts)
    }
}

/// Labels and scenario sentence used when embedding a conversation into
/// judge prompts.
#[derive(Debug, Clone)]
pub struct ConversationContext {
    pub scenario_desc: String,
    pub simulator_label: String,
    pub task_agent_label: String,
}

/// Default judge sampling temperature: as deterministic as the
/// endpoint allows.
pub const JUDGE_TEMPERATURE: f64 = 0.0;

/// Judge-side configuration: provider, prompt catalog, per-task
/// polarity, sampling temperature, and the parse retry budget.
pub struct Judge<'a> {
    pub provider: &'a dyn ChatProvider,
    pub prompts: JudgePrompts,
    pub polarity: JudgePolarity,
    pub temperature: f64,
    /// Additional judge calls allowed when a reply fails to parse.
    pub max_retries: u32,
}

impl<'a> Judge<'a> {
    pub fn new(provider: &'a dyn ChatProvider, task: TaskKind) -> Judge<'a> {
        Judge {
            provider,
            prompts: JudgePrompts::builtin(),
            polarity: default_prompt_polarity(task),
            temperature: JUDGE_TEMPERATURE,
            max_retries: 2,
        }
    }

    fn call(&self, prompt: String) -> Result<String, GatewayError> {
        let request = ChatRequest::new(self.provider.model(), vec![ChatMessage::user(prompt)])
            .with_temperature(self.temperature);
        self.provider.complete(&request)
    }

    /// Judges one simulator line against the persona, in isolation from
    /// the rest of the conversation.
    pub fn judge_prompt_to_line(
        &self,
        context: &ConversationContext,
        persona: &Persona,
        utterance: &Utterance,
    ) -> Result<crate::model::JudgeVerdict, JudgeError> {
        debug_assert_eq!(utterance.speaker, AgentRole::UserSimulator);
        let mut bindings: BTreeMap<&str, String> = BTreeMap::new();
        bindings.insert("SCENARIO_DESC", context.scenario_desc.clone());
        bindings.insert("SPEAKER_ROLE", context.simulator_label.clone());
        bindings.insert("SPEAKER_BACKSTORY", persona.text.clone());
        bindings.insert("SPEAKER_LINE", utterance.text.clone());
        let prompt = render_prompt(&self.prompts.prompt_to_line, &bindings)?;

        let mut last_raw = String::new();
        for attempt in 0..=self.max_retries {
            let raw = self.call(prompt.clone())?;
            if let Some(parsed) = parse_verdict_text(&raw) {
                return Ok(crate::model::JudgeVerdict {
                    consistent: consistent_from(parsed, self.polarity),
                    raw_text: raw,
                    judge_model: self.provider.model().to_string(),
                    retries_used: attempt,
                });
            }
            last_raw = raw;
        }
        Err(JudgeError::UnparseableVerdict { raw: last_raw, attempts: self.max_retries + 1 })
    }

    /// Asks for conflicts between `utterance` and any earlier simulator
    /// line in `prefix`. Cited indices pointing at the task agent or at
    /// the judged turn itself (or later) are filtered out.
    pub fn judge_line_to_line(
        &self,
        context: &ConversationContext,
        prefix: &[Utterance],
        utterance: &Utterance,
    ) -> Result<ConflictFinding, JudgeError> {
        debug_assert_eq!(utterance.speaker, AgentRole::UserSimulator);
        let conversation =
            render_conversation(prefix, &context.simulator_label, &context.task_agent_label);
        let mut bindings: BTreeMap<&str, String> = BTreeMap::new();
        bindings.insert("SCENARIO_DESC", context.scenario_desc.clone());
        bindings.insert("SPEAKER_ROLE", context.simulator_label.clone());
        bindings.insert("CONVERSATION", conversation);
        bindings.insert("SPEAKER_LINE", utterance.text.clone());
        let prompt = render_prompt(&self.prompts.line_to_line, &bindings)?;

        let simulator_indices: Vec<usize> = prefix
            .iter()
            .filter(|u| u.speaker == AgentRole::UserSimulator)
            .map(|u| u.index)
            .collect();

        let mut last_raw = String::new();
        for _ in 0..=self.max_retries {
            let raw = self.call(prompt.clone())?;
            if let Some(cited) = parse_index_list(&raw) {
                let filtered = cited
                    .into_iter()
                    .filter(|i| *i < utterance.index && simulator_indices.contains(i))
                    .collect();
                return Ok(ConflictFinding { turn_index: utterance.index, cited_indices: filtered, raw_text: raw });
            }
            last_raw = raw;
        }
        Err(JudgeError::UnparseableIndexList { raw: last_raw, attempts: self.max_retries + 1 })
    }

    /// Asks the judge for the next diagnostic question, feeding the ones
    /// generated so far through the previous-questions placeholder.
    pub fn generate_one_probe_question(
        &self,
        persona: &Persona,
        previous: &[ProbeQuestion],
    ) -> Result<ProbeQuestion, JudgeError> {
        let previous_rendered = previous
            .iter()
            .map(|q| format!("{}\nAnswer: {}", q.rendered(), q.reference_answer))
            .collect::<Vec<_>>()
            .join("\n");
        let mut bindings: BTreeMap<&str, String> = BTreeMap::new();
        bindings.insert("SPEAKER_BACKSTORY", persona.text.clone());
        bindings.insert("PREVIOUS_QUESTIONS", previous_rendered);
        let prompt = render_prompt(&self.prompts.qa_generate, &bindings)?;

        let mut last_raw = String::new();
        for _ in 0..=self.max_retries {
            let raw = self.call(prompt.clone())?;
            if let Some(question) = parse_probe_question(&raw) {
                return Ok(question);
            }
            last_raw = raw;
        }
        Err(JudgeError::MalformedQuestion { raw: last_raw, attempts: self.max_retries + 1 })
    }

    /// Iteratively generates `k` diagnostic questions. A slot whose
    /// replies stay malformed through the retry budget is skipped, so
    /// the set may come back smaller than `k`; `malformed_slots`
    /// reports how many were dropped.
    pub fn generate_probe_questions(
        &self,
        persona: &Persona,
        k: usize,
    ) -> Result<(ProbeSet, u32), JudgeError> {
        let mut questions: Vec<ProbeQuestion> = Vec::with_capacity(k);
        let mut malformed_slots = 0u32;
        for _slot in 0..k {
            match self.generate_one_probe_question(persona, &questions) {
                Ok(question) => questions.push(question),
                Err(JudgeError::MalformedQuestion { .. }) => malformed_slots += 1,
                Err(other) => return Err(other),
            }
        }
        Ok((ProbeSet { persona_id: persona.id.clone(), questions }, malformed_slots))
    }

    /// Grades a probe answer against its reference. This prompt's
    /// polarity is fixed: YES means the answers match.
    pub fn grade_answer(
        &self,
        given: &str,
        reference: &str,
    ) -> Result<crate::model::JudgeVerdict, JudgeError> {
        let mut bindings: BTreeMap<&str, String> = BTreeMap::new();
        bindings.insert("GIVEN_ANSWER", given.to_string());
        bindings.insert("CORRECT_ANSWER", reference.to_string());
        let prompt = render_prompt(&self.prompts.qa_grade, &bindings)?;

        let mut last_raw = String::new();
        for attempt in 0..=self.max_retries {
            let raw = self.call(prompt.clone())?;
            if let Some(token) = parse_trailing_yes_no(&raw) {
                return Ok(crate::model::JudgeVerdict {
                    consistent: token == YesNo::Yes,
                    raw_text: raw,
                    judge_model: self.provider.model().to_string(),
                    retries_used: attempt,
                });
            }
            last_raw = raw;
        }
        Err(JudgeError::UnparseableVerdict { raw: last_raw, attempts: self.max_retries + 1 })
    }
}

/// Prompts the simulator (not the judge) to answer one probe question
/// from its backstory plus the dialogue history up to the probed turn.
pub fn answer_probe(
    prompts: &JudgePrompts,
    context: &ConversationContext,
    persona: &Persona,
    history: &[Utterance],
    question: &ProbeQuestion,
    simulator: &dyn ChatProvider,
    temperature: f64,
) -> Result<String, JudgeError> {
    let conversation = render_conversation(history, &context.simulator_label, &context.task_agent_label);
    let mut bindings: BTreeMap<&str, String> = BTreeMap::new();
    bindings.insert("SPEAKER_ROLE", context.simulator_label.clone());
    bindings.insert("LISTENER_ROLE", context.task_agent_label.clone());
    bindings.insert("SPEAKER_BACKSTORY", persona.text.clone());
    bindings.insert("CONVERSATION", conversation);
    bindings.insert("BACKSTORY_QUESTION", question.rendered());
    let prompt = render_prompt(&prompts.qa_answer, &bindings)?;
    let request =
        ChatRequest::new(simulator.model(), vec![ChatMessage::user(prompt)]).with_temperature(temperature);
    Ok(simulator.complete(&request)?)
}
