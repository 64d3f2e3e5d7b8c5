//! File-based pipeline commands: simulate, judge, score, stats, export,
//! report. Stages communicate exclusively through files under the run's
//! output directory, so a judging run that dies after hours resumes
//! without re-requesting completed verdicts.
//!
//! Layout under `output_dir`:
//!
//! ```text
//! manifest.json                 simulate: ids, seeds, persona ids
//! transcripts/<id>.records      one record stream per conversation
//! verdicts/<id>.records         append-only judge outputs
//! reports/<id>.report.json      per-transcript consistency report
//! reports/summary.tsv           per-length mean ± std per metric
//! stats/…                       heatmap, length table, agreement
//! exports/…                     sft / kto / rewards record streams
//! logs/calls.records            provider call log (opt-in)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::dialogue::{
    generate_conversation, sample_persona, speaker_label, DialogueConfig, DialogueError,
    DialogueProviders, PersonaCatalog, TaskTemplates,
};
use crate::export::{
    export_binary_labels, export_sft, export_turn_rewards, write_kto_stream, write_rewards_stream,
    write_sft_stream, ExportError,
};
use crate::gateway::{ChatProvider, ChatRequest, GatewayError, HttpProvider, ScriptedProvider};
use crate::judge::{ConflictFinding, ConversationContext, Judge, JudgeError, JudgePolarity, JudgePrompts};
use crate::metrics::{assemble_report, MetricsError, VerdictMatrix};
use crate::model::{
    deserialize_transcript, serialize_transcript, AgentRole, ConsistencyReport, ErrorTurn,
    MetricKind, ModelError, ProbeQuestion, TaskKind, Transcript, SCHEMA_VERSION,
};
use crate::stats::{
    consistency_by_length, fleiss_kappa, metric_agreement_heatmap, percent_agreement,
    AnnotationMatrix, LikertRating, StatsError,
};
use crate::stub::{fnv1a, SynthProvider};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dialogue(#[from] DialogueError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Export(#[from] ExportError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("missing input: {0}")]
    MissingInput(PathBuf),
    #[error("malformed file {path}: {message}")]
    Malformed { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

/// Splitmix64 over the run seed and a stream tag; every derived seed in
/// a run is a pure function of (seed, tag, length, index).
pub fn derive_seed(seed: u64, tag: &str, length: usize, index: usize) -> u64 {
    let mut x = seed
        ^ fnv1a(tag.as_bytes())
        ^ ((length as u64) << 32)
        ^ (index as u64);
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

// --- providers -------------------------------------------------------------

pub struct RunProviders {
    pub judge: Arc<dyn ChatProvider>,
    pub simulator: Arc<dyn ChatProvider>,
    pub task_agent: Arc<dyn ChatProvider>,
}

struct CallBudget {
    remaining: AtomicU64,
}

impl CallBudget {
    fn take(&self) -> bool {
        self.remaining
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok()
    }
}

struct CallLog {
    file: Mutex<fs::File>,
}

impl CallLog {
    fn open(path: &Path) -> Result<CallLog, PipelineError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        Ok(CallLog { file: Mutex::new(file) })
    }

    fn append(&self, role: &str, request: &ChatRequest) {
        let hash = fnv1a(serde_json::to_string(request).unwrap_or_default().as_bytes());
        let line = format!("{{\"role\":\"{role}\",\"request_hash\":\"{hash:016x}\"}}\n");
        let mut file = self.file.lock().unwrap();
        let _ = file.write_all(line.as_bytes());
        let _ = file.flush();
    }
}

/// Wraps a provider with the shared call budget and optional call log.
/// A budget rejection happens before the inner call and is never logged,
/// so a resumed run re-issues only requests that never executed.
struct InstrumentedProvider {
    inner: Box<dyn ChatProvider>,
    role: &'static str,
    budget: Option<Arc<CallBudget>>,
    log: Option<Arc<CallLog>>,
}

impl ChatProvider for InstrumentedProvider {
    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        if let Some(budget) = &self.budget {
            if !budget.take() {
                return Err(GatewayError::BudgetExhausted);
            }
        }
        if let Some(log) = &self.log {
            log.append(self.role, request);
        }
        self.inner.complete(request)
    }

    fn model(&self) -> &str {
        self.inner.model()
    }
}

fn decode_script_line(line: &str) -> String {
    let mut out = String::with_capacity(line.len());
    let mut chars = line.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('n') => out.push('\n'),
                Some('\\') => out.push('\\'),
                Some(other) => {
                    out.push('\\');
                    out.push(other);
                }
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

fn scripted_file_provider(path: &Path) -> Result<ScriptedProvider, PipelineError> {
    let raw = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(ScriptedProvider::new(raw.lines().map(decode_script_line)))
}

/// Builds the three role providers. In scripted mode a role is served
/// from `<dir>/<role>.txt` when that file exists (strict queue
/// semantics) and from the deterministic synthesizer otherwise.
pub fn build_providers(config: &RunConfig) -> Result<RunProviders, PipelineError> {
    let budget = config.max_calls.map(|n| Arc::new(CallBudget { remaining: AtomicU64::new(n) }));
    let log = if config.call_log {
        Some(Arc::new(CallLog::open(&config.output_dir.join("logs/calls.records"))?))
    } else {
        None
    };

    let build_role = |role: &'static str,
                          provider_config: &crate::gateway::ProviderConfig|
     -> Result<Arc<dyn ChatProvider>, PipelineError> {
        let inner: Box<dyn ChatProvider> = if let Some(dir) = &config.scripted {
            let script_path = dir.join(format!("{role}.txt"));
            if script_path.exists() {
                Box::new(scripted_file_provider(&script_path)?)
            } else {
                Box::new(SynthProvider::new())
            }
        } else {
            Box::new(HttpProvider::new(provider_config.clone())?)
        };
        Ok(Arc::new(InstrumentedProvider {
            inner,
            role,
            budget: budget.clone(),
            log: log.clone(),
        }))
    };

    Ok(RunProviders {
        judge: build_role("judge", &config.provider.judge)?,
        simulator: build_role("simulator", &config.provider.simulator)?,
        task_agent: build_role("task_agent", &config.provider.task_agent)?,
    })
}

// --- parallel map -----------------------------------------------------------

/// Runs `f` over `items` with up to `jobs` worker threads, preserving
/// item order in the result.
pub fn parallel_map<T, R, F>(items: &[T], jobs: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let results: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let index = next.fetch_add(1, Ordering::SeqCst);
                if index >= items.len() {
                    break;
                }
                let result = f(&items[index]);
                *results[index].lock().unwrap() = Some(result);
            });
        }
    });
    results
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("worker filled every slot"))
        .collect()
}

// --- manifest ---------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: String,
    pub task: TaskKind,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub file: String,
    pub target_length: usize,
    pub seed: u64,
    pub persona_id: String,
    pub status: RunStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

pub fn manifest_path(config: &RunConfig) -> PathBuf {
    config.output_dir.join("manifest.json")
}

pub fn load_manifest(config: &RunConfig) -> Result<Manifest, PipelineError> {
    let path = manifest_path(config);
    if !path.exists() {
        return Err(PipelineError::MissingInput(path));
    }
    let raw = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&raw)
        .map_err(|e| PipelineError::Malformed { path, message: e.to_string() })
}

// --- simulate ----------------------------------------------------------------

#[derive(Debug, Default, Serialize)]
pub struct SimulateSummary {
    pub written: usize,
    pub failed: usize,
}

struct SimulateItem {
    length: usize,
    index: usize,
}

pub fn cmd_simulate(config: &RunConfig) -> Result<SimulateSummary, PipelineError> {
    let templates = TaskTemplates::load(config.task, config.prompts_dir.as_deref())?;
    let catalog = PersonaCatalog::load(config.task, config.personas_dir.as_deref())?;
    let providers = build_providers(config)?;

    let transcripts_dir = config.output_dir.join("transcripts");
    fs::create_dir_all(&transcripts_dir).map_err(io_err(&transcripts_dir))?;

    let mut items = Vec::new();
    for &length in &config.lengths {
        for index in 0..config.conversations_per_length {
            items.push(SimulateItem { length, index });
        }
    }

    let outcomes = parallel_map(&items, config.jobs, |item| -> Result<ManifestEntry, PipelineError> {
        let conv_seed = derive_seed(config.seed, "conversation", item.length, item.index);
        let persona_seed = derive_seed(config.seed, "persona", item.length, item.index);
        let id = format!("{}-L{:03}-c{:04}", config.task.slug(), item.length, item.index);

        let mut persona = sample_persona(&catalog, persona_seed)?;
        if config.task == TaskKind::OpenEnded {
            // The open-ended partner is itself persona-conditioned; give
            // it a different catalog entry whenever one exists.
            let mut listener = sample_persona(&catalog, persona_seed.wrapping_add(1))?;
            let mut bump = 2u64;
            while listener.id == persona.id && bump < 8 {
                listener = sample_persona(&catalog, persona_seed.wrapping_add(bump))?;
                bump += 1;
            }
            persona.metadata.insert("listener_label".into(), listener.role_label.clone());
            persona.metadata.insert("listener_backstory".into(), listener.text.clone());
        }

        let dialogue_config = DialogueConfig {
            task: config.task,
            target_length: item.length,
            opener: config.opener,
            max_regens_per_turn: config.max_regens_per_turn,
            brevity_reminder: config.brevity_reminder,
            temperature: config.dialogue_temperature,
            seed: conv_seed,
        };
        let providers = DialogueProviders {
            simulator: providers.simulator.as_ref(),
            task_agent: providers.task_agent.as_ref(),
        };
        let mut outcome = generate_conversation(&dialogue_config, &persona, &providers, &templates)?;
        outcome.transcript.id = id.clone();

        let file_name = format!("transcripts/{id}.records");
        let path = config.output_dir.join(&file_name);
        fs::write(&path, serialize_transcript(&outcome.transcript)).map_err(io_err(&path))?;
        Ok(ManifestEntry {
            id,
            file: file_name,
            target_length: item.length,
            seed: conv_seed,
            persona_id: outcome.transcript.persona.id.clone(),
            status: RunStatus::Ok,
            error: None,
        })
    });

    let mut entries = Vec::with_capacity(items.len());
    let mut summary = SimulateSummary::default();
    for (item, outcome) in items.iter().zip(outcomes) {
        match outcome {
            Ok(entry) => {
                summary.written += 1;
                entries.push(entry);
            }
            Err(error) => {
                summary.failed += 1;
                let id = format!("{}-L{:03}-c{:04}", config.task.slug(), item.length, item.index);
                entries.push(ManifestEntry {
                    id: id.clone(),
                    file: format!("transcripts/{id}.records"),
                    target_length: item.length,
                    seed: derive_seed(config.seed, "conversation", item.length, item.index),
                    persona_id: String::new(),
                    status: RunStatus::Failed,
                    error: Some(error.to_string()),
                });
            }
        }
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));

    let manifest = Manifest {
        schema_version: SCHEMA_VERSION.into(),
        task: config.task,
        seed: config.seed,
        entries,
    };
    let path = manifest_path(config);
    let mut rendered = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    rendered.push('\n');
    fs::write(&path, rendered).map_err(io_err(&path))?;
    Ok(summary)
}

// --- verdict records ----------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum VerdictRecord {
    Header {
        schema_version: String,
        transcript_id: String,
        polarity: JudgePolarity,
    },
    Prompt {
        ordinal: usize,
        turn_index: usize,
        consistent: bool,
        raw: String,
        retries: u32,
    },
    Conflict {
        ordinal: usize,
        turn_index: usize,
        cited: Vec<usize>,
        raw: String,
    },
    ProbeQuestion {
        slot: usize,
        question: ProbeQuestion,
    },
    QaAnswer {
        ordinal: usize,
        turn_index: usize,
        question: usize,
        given: String,
    },
    QaGrade {
        ordinal: usize,
        turn_index: usize,
        question: usize,
        correct: bool,
        raw: String,
    },
    Error {
        metric: MetricKind,
        ordinal: usize,
        turn_index: usize,
        #[serde(skip_serializing_if = "Option::is_none")]
        question: Option<usize>,
        reason: String,
    },
}

fn verdict_file(config: &RunConfig, transcript_id: &str) -> PathBuf {
    config.output_dir.join(format!("verdicts/{transcript_id}.records"))
}

fn load_verdict_records(path: &Path) -> Result<Vec<VerdictRecord>, PipelineError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let raw = fs::read_to_string(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    for (line_no, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: VerdictRecord = serde_json::from_str(line).map_err(|e| PipelineError::Malformed {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", line_no + 1),
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Marks which judge calls are already on disk.
#[derive(Default)]
struct DoneSet {
    prompt: BTreeSet<usize>,
    line: BTreeSet<usize>,
    probe_slots: BTreeSet<usize>,
    answers: BTreeMap<(usize, usize), String>,
    grades: BTreeSet<(usize, usize)>,
}

impl DoneSet {
    fn from_records(records: &[VerdictRecord]) -> DoneSet {
        let mut done = DoneSet::default();
        for record in records {
            match record {
                VerdictRecord::Prompt { ordinal, .. } => {
                    done.prompt.insert(*ordinal);
                }
                VerdictRecord::Conflict { ordinal, .. } => {
                    done.line.insert(*ordinal);
                }
                VerdictRecord::ProbeQuestion { slot, .. } => {
                    done.probe_slots.insert(*slot);
                }
                VerdictRecord::QaAnswer { ordinal, question, given, .. } => {
                    done.answers.insert((*ordinal, *question), given.clone());
                }
                VerdictRecord::QaGrade { ordinal, question, .. } => {
                    done.grades.insert((*ordinal, *question));
                }
                VerdictRecord::Error { metric, ordinal, question, .. } => match metric {
                    MetricKind::PromptToLine => {
                        done.prompt.insert(*ordinal);
                    }
                    MetricKind::LineToLine => {
                        done.line.insert(*ordinal);
                    }
                    MetricKind::Qa => {
                        if let Some(q) = question {
                            if *ordinal == 0 {
                                done.probe_slots.insert(*q);
                            } else {
                                done.grades.insert((*ordinal, *q));
                            }
                        }
                    }
                },
                VerdictRecord::Header { .. } => {}
            }
        }
        done
    }
}

struct VerdictWriter {
    file: fs::File,
    path: PathBuf,
}

impl VerdictWriter {
    fn open(path: &Path, transcript_id: &str, polarity: JudgePolarity) -> Result<Self, PipelineError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let fresh = !path.exists();
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        let mut writer = VerdictWriter { file, path: path.to_path_buf() };
        if fresh {
            writer.write(&VerdictRecord::Header {
                schema_version: SCHEMA_VERSION.into(),
                transcript_id: transcript_id.into(),
                polarity,
            })?;
        }
        Ok(writer)
    }

    fn write(&mut self, record: &VerdictRecord) -> Result<(), PipelineError> {
        let mut line = serde_json::to_string(record).expect("verdict record serializes");
        line.push('\n');
        self.file.write_all(line.as_bytes()).map_err(io_err(&self.path))?;
        self.file.flush().map_err(io_err(&self.path))
    }
}

// --- judge -----------------------------------------------------------------

#[derive(Debug, Default, Serialize)]
pub struct JudgeSummary {
    pub transcripts: usize,
    pub error_turns: usize,
    /// True when the call budget ran out; rerun to resume.
    pub interrupted: bool,
}

/// True when the error is the budget stop-signal rather than a judging
/// failure.
fn is_interrupt(error: &JudgeError) -> bool {
    matches!(error, JudgeError::Provider(GatewayError::BudgetExhausted))
}

struct TranscriptJudgeOutcome {
    error_turns: usize,
    interrupted: bool,
}

#[allow(clippy::too_many_arguments)]
fn judge_transcript(
    config: &RunConfig,
    templates: &TaskTemplates,
    prompts: &JudgePrompts,
    providers: &RunProviders,
    transcript: &Transcript,
) -> Result<TranscriptJudgeOutcome, PipelineError> {
    let polarity = config.prompt_polarity(transcript.task);
    let judge = Judge {
        provider: providers.judge.as_ref(),
        prompts: prompts.clone(),
        polarity,
        temperature: config.judge_temperature,
        max_retries: config.parse_retries,
    };
    let context = ConversationContext {
        scenario_desc: templates.scenario_desc.clone(),
        simulator_label: speaker_label(&transcript.persona, templates, AgentRole::UserSimulator),
        task_agent_label: speaker_label(&transcript.persona, templates, AgentRole::TaskAgent),
    };

    let simulator_turns: Vec<_> = transcript.simulator_turns().into_iter().cloned().collect();

    let path = verdict_file(config, &transcript.id);
    let existing = load_verdict_records(&path)?;
    let mut done = DoneSet::from_records(&existing);
    let mut writer = VerdictWriter::open(&path, &transcript.id, polarity)?;

    let mut outcome = TranscriptJudgeOutcome { error_turns: 0, interrupted: false };

    if config.metrics.contains(&MetricKind::PromptToLine) {
        for (ordinal0, utterance) in simulator_turns.iter().enumerate() {
            let ordinal = ordinal0 + 1;
            if done.prompt.contains(&ordinal) {
                continue;
            }
            match judge.judge_prompt_to_line(&context, &transcript.persona, utterance) {
                Ok(verdict) => writer.write(&VerdictRecord::Prompt {
                    ordinal,
                    turn_index: utterance.index,
                    consistent: verdict.consistent,
                    raw: verdict.raw_text,
                    retries: verdict.retries_used,
                })?,
                Err(e) if is_interrupt(&e) => {
                    outcome.interrupted = true;
                    return Ok(outcome);
                }
                Err(e) => {
                    outcome.error_turns += 1;
                    writer.write(&VerdictRecord::Error {
                        metric: MetricKind::PromptToLine,
                        ordinal,
                        turn_index: utterance.index,
                        question: None,
                        reason: e.to_string(),
                    })?;
                }
            }
        }
    }

    if config.metrics.contains(&MetricKind::LineToLine) {
        for (ordinal0, utterance) in simulator_turns.iter().enumerate().skip(1) {
            let ordinal = ordinal0 + 1;
            if done.line.contains(&ordinal) {
                continue;
            }
            let prefix = transcript.prefix(utterance.index);
            match judge.judge_line_to_line(&context, prefix, utterance) {
                Ok(finding) => writer.write(&VerdictRecord::Conflict {
                    ordinal,
                    turn_index: utterance.index,
                    cited: finding.cited_indices,
                    raw: finding.raw_text,
                })?,
                Err(e) if is_interrupt(&e) => {
                    outcome.interrupted = true;
                    return Ok(outcome);
                }
                Err(e) => {
                    outcome.error_turns += 1;
                    writer.write(&VerdictRecord::Error {
                        metric: MetricKind::LineToLine,
                        ordinal,
                        turn_index: utterance.index,
                        question: None,
                        reason: e.to_string(),
                    })?;
                }
            }
        }
    }

    if config.metrics.contains(&MetricKind::Qa) {
        // Probe questions first, one record per slot so an interrupted
        // generation resumes at the next slot.
        let mut questions: Vec<(usize, ProbeQuestion)> = existing
            .iter()
            .filter_map(|r| match r {
                VerdictRecord::ProbeQuestion { slot, question } => Some((*slot, question.clone())),
                _ => None,
            })
            .collect();
        for slot in 0..config.probe_count {
            if done.probe_slots.contains(&slot) {
                continue;
            }
            let previous: Vec<ProbeQuestion> = questions.iter().map(|(_, q)| q.clone()).collect();
            match judge.generate_one_probe_question(&transcript.persona, &previous) {
                Ok(question) => {
                    writer.write(&VerdictRecord::ProbeQuestion { slot, question: question.clone() })?;
                    questions.push((slot, question));
                    done.probe_slots.insert(slot);
                }
                Err(e) if is_interrupt(&e) => {
                    outcome.interrupted = true;
                    return Ok(outcome);
                }
                Err(e) => {
                    outcome.error_turns += 1;
                    done.probe_slots.insert(slot);
                    writer.write(&VerdictRecord::Error {
                        metric: MetricKind::Qa,
                        ordinal: 0,
                        turn_index: 0,
                        question: Some(slot),
                        reason: e.to_string(),
                    })?;
                }
            }
        }
        questions.sort_by_key(|(slot, _)| *slot);

        for (ordinal0, utterance) in simulator_turns.iter().enumerate() {
            let ordinal = ordinal0 + 1;
            if (ordinal - 1) % config.qa_stride != 0 {
                continue;
            }
            // History runs through the probed turn inclusive: the answer
            // reflects the simulator's state after its t-th line.
            let history_end = transcript
                .utterances
                .iter()
                .take_while(|u| u.index <= utterance.index)
                .count();
            let history = &transcript.utterances[..history_end];
            for (question_index, question) in &questions {
                let key = (ordinal, *question_index);
                if done.grades.contains(&key) {
                    continue;
                }
                let given = match done.answers.get(&key) {
                    Some(existing_answer) => existing_answer.clone(),
                    None => {
                        match crate::judge::answer_probe(
                            prompts,
                            &context,
                            &transcript.persona,
                            history,
                            question,
                            providers.simulator.as_ref(),
                            config.dialogue_temperature,
                        ) {
                            Ok(answer) => {
                                writer.write(&VerdictRecord::QaAnswer {
                                    ordinal,
                                    turn_index: utterance.index,
                                    question: *question_index,
                                    given: answer.clone(),
                                })?;
                                done.answers.insert(key, answer.clone());
                                answer
                            }
                            Err(e) if is_interrupt(&e) => {
                                outcome.interrupted = true;
                                return Ok(outcome);
                            }
                            Err(e) => {
                                outcome.error_turns += 1;
                                writer.write(&VerdictRecord::Error {
                                    metric: MetricKind::Qa,
                                    ordinal,
                                    turn_index: utterance.index,
                                    question: Some(*question_index),
                                    reason: e.to_string(),
                                })?;
                                continue;
                            }
                        }
                    }
                };
                match judge.grade_answer(&given, &question.reference_answer) {
                    Ok(verdict) => writer.write(&VerdictRecord::QaGrade {
                        ordinal,
                        turn_index: utterance.index,
                        question: *question_index,
                        correct: verdict.consistent,
                        raw: verdict.raw_text,
                    })?,
                    Err(e) if is_interrupt(&e) => {
                        outcome.interrupted = true;
                        return Ok(outcome);
                    }
                    Err(e) => {
                        outcome.error_turns += 1;
                        writer.write(&VerdictRecord::Error {
                            metric: MetricKind::Qa,
                            ordinal,
                            turn_index: utterance.index,
                            question: Some(*question_index),
                            reason: e.to_string(),
                        })?;
                    }
                }
            }
        }
    }

    Ok(outcome)
}

/// Transcript ids with an on-disk transcript, in manifest order.
fn run_transcript_ids(config: &RunConfig) -> Result<Vec<String>, PipelineError> {
    let manifest = load_manifest(config)?;
    Ok(manifest
        .entries
        .iter()
        .filter(|e| e.status == RunStatus::Ok)
        .map(|e| e.id.clone())
        .collect())
}

pub fn load_transcript(config: &RunConfig, id: &str) -> Result<Transcript, PipelineError> {
    let path = config.output_dir.join(format!("transcripts/{id}.records"));
    if !path.exists() {
        return Err(PipelineError::MissingInput(path));
    }
    let raw = fs::read_to_string(&path).map_err(io_err(&path))?;
    Ok(deserialize_transcript(&raw)?)
}

pub fn cmd_judge(config: &RunConfig) -> Result<JudgeSummary, PipelineError> {
    let templates = TaskTemplates::load(config.task, config.prompts_dir.as_deref())?;
    let prompts = JudgePrompts::load(config.prompts_dir.as_deref())?;
    let providers = build_providers(config)?;
    let ids = run_transcript_ids(config)?;

    let stop = AtomicBool::new(false);
    let outcomes = parallel_map(&ids, config.jobs, |id| -> Result<TranscriptJudgeOutcome, PipelineError> {
        if stop.load(Ordering::SeqCst) {
            return Ok(TranscriptJudgeOutcome { error_turns: 0, interrupted: true });
        }
        let transcript = load_transcript(config, id)?;
        let outcome = judge_transcript(config, &templates, &prompts, &providers, &transcript)?;
        if outcome.interrupted {
            stop.store(true, Ordering::SeqCst);
        }
        Ok(outcome)
    });

    let mut summary = JudgeSummary { transcripts: ids.len(), ..Default::default() };
    for outcome in outcomes {
        let outcome = outcome?;
        summary.error_turns += outcome.error_turns;
        summary.interrupted |= outcome.interrupted;
    }
    Ok(summary)
}

// --- score -----------------------------------------------------------------

/// Rebuilds the verdict matrix for one transcript from its record file.
pub fn load_matrix(config: &RunConfig, transcript: &Transcript) -> Result<VerdictMatrix, PipelineError> {
    let path = verdict_file(config, &transcript.id);
    if !path.exists() {
        return Err(PipelineError::MissingInput(path));
    }
    let records = load_verdict_records(&path)?;

    let turn_indices: Vec<usize> = transcript.simulator_turns().iter().map(|u| u.index).collect();
    let t = turn_indices.len();
    let mut matrix = VerdictMatrix::empty(&transcript.id, turn_indices);

    let probe_count = records
        .iter()
        .filter(|r| matches!(r, VerdictRecord::ProbeQuestion { .. }))
        .count();
    let slot_index: BTreeMap<usize, usize> = records
        .iter()
        .filter_map(|r| match r {
            VerdictRecord::ProbeQuestion { slot, .. } => Some(*slot),
            _ => None,
        })
        .enumerate()
        .map(|(dense, slot)| (slot, dense))
        .collect();
    if probe_count > 0 {
        matrix.qa_grades = vec![vec![None; probe_count]; t];
    }

    for record in &records {
        match record {
            VerdictRecord::Prompt { ordinal, consistent, .. } => {
                if (1..=t).contains(ordinal) {
                    matrix.prompt_to_line[ordinal - 1] = Some(*consistent);
                }
            }
            VerdictRecord::Conflict { ordinal, turn_index, cited, raw } => {
                if (2..=t).contains(ordinal) {
                    matrix.conflicts[ordinal - 2] = Some(ConflictFinding {
                        turn_index: *turn_index,
                        cited_indices: cited.clone(),
                        raw_text: raw.clone(),
                    });
                }
            }
            VerdictRecord::QaGrade { ordinal, question, correct, .. } => {
                if let (Some(row), Some(&dense)) =
                    (matrix.qa_grades.get_mut(ordinal.wrapping_sub(1)), slot_index.get(question))
                {
                    row[dense] = Some(*correct);
                }
            }
            VerdictRecord::Error { metric, ordinal, turn_index, reason, .. } => {
                matrix.errors.push(ErrorTurn {
                    turn_index: if *ordinal == 0 { 0 } else { *turn_index },
                    metric: *metric,
                    reason: reason.clone(),
                });
            }
            VerdictRecord::Header { .. } | VerdictRecord::ProbeQuestion { .. } | VerdictRecord::QaAnswer { .. } => {}
        }
    }
    Ok(matrix)
}

/// Assembles the recorded probe answers for one transcript, joined with
/// their grades where present. Ordinals are folded back to the global
/// utterance index; entries pointing outside the transcript's turn or
/// question range are dropped.
pub fn load_probe_answers(
    config: &RunConfig,
    transcript: &Transcript,
) -> Result<Vec<crate::model::ProbeAnswerRecord>, PipelineError> {
    let path = verdict_file(config, &transcript.id);
    if !path.exists() {
        return Err(PipelineError::MissingInput(path));
    }
    let records = load_verdict_records(&path)?;
    let t = transcript.simulator_turns().len();
    let k = records
        .iter()
        .filter(|r| matches!(r, VerdictRecord::ProbeQuestion { .. }))
        .count();
    let grades: BTreeMap<(usize, usize), bool> = records
        .iter()
        .filter_map(|r| match r {
            VerdictRecord::QaGrade { ordinal, question, correct, .. } => {
                Some(((*ordinal, *question), *correct))
            }
            _ => None,
        })
        .collect();
    let mut answers = Vec::new();
    for record in &records {
        if let VerdictRecord::QaAnswer { ordinal, turn_index, question, given } = record {
            if *ordinal == 0 || *ordinal > t || *question >= k {
                continue;
            }
            answers.push(crate::model::ProbeAnswerRecord {
                turn_index: *turn_index,
                question_index: *question,
                given_answer: given.clone(),
                graded_correct: grades.get(&(*ordinal, *question)).copied(),
            });
        }
    }
    Ok(answers)
}

#[derive(Debug, Default, Serialize)]
pub struct ScoreSummary {
    pub reports_written: usize,
    pub missing_verdicts: Vec<PathBuf>,
}

fn write_summary_tsv(
    path: &Path,
    task: TaskKind,
    reports: &[ConsistencyReport],
) -> Result<(), PipelineError> {
    let rows = consistency_by_length(reports);
    let mut out = String::from("task\ttarget_length\tmetric\tmean\tstd\tcount\n");
    for row in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{:.6}\t{:.6}\t{}\n",
            task.slug(),
            row.target_length,
            row.metric.slug(),
            row.stats.mean,
            row.stats.std,
            row.stats.count
        ));
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn cmd_score(config: &RunConfig) -> Result<ScoreSummary, PipelineError> {
    let ids = run_transcript_ids(config)?;
    let reports_dir = config.output_dir.join("reports");
    fs::create_dir_all(&reports_dir).map_err(io_err(&reports_dir))?;

    let mut summary = ScoreSummary::default();
    let mut reports = Vec::new();
    for id in &ids {
        let transcript = load_transcript(config, id)?;
        match load_matrix(config, &transcript) {
            Ok(matrix) => {
                let report = assemble_report(&transcript, &matrix)?;
                let path = reports_dir.join(format!("{id}.report.json"));
                let mut rendered = serde_json::to_string_pretty(&report).expect("report serializes");
                rendered.push('\n');
                fs::write(&path, rendered).map_err(io_err(&path))?;
                reports.push(report);
                summary.reports_written += 1;
            }
            Err(PipelineError::MissingInput(path)) => summary.missing_verdicts.push(path),
            Err(other) => return Err(other),
        }
    }
    write_summary_tsv(&reports_dir.join("summary.tsv"), config.task, &reports)?;
    Ok(summary)
}

pub fn load_reports(config: &RunConfig) -> Result<Vec<ConsistencyReport>, PipelineError> {
    let reports_dir = config.output_dir.join("reports");
    if !reports_dir.exists() {
        return Err(PipelineError::MissingInput(reports_dir));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(&reports_dir)
        .map_err(io_err(&reports_dir))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(".report.json")))
        .collect();
    paths.sort();
    let mut reports = Vec::with_capacity(paths.len());
    for path in paths {
        let raw = fs::read_to_string(&path).map_err(io_err(&path))?;
        let report: ConsistencyReport = serde_json::from_str(&raw)
            .map_err(|e| PipelineError::Malformed { path: path.clone(), message: e.to_string() })?;
        reports.push(report);
    }
    Ok(reports)
}

// --- stats -----------------------------------------------------------------

#[derive(Debug, Default, Serialize)]
pub struct StatsSummary {
    pub reports: usize,
    pub heatmap_written: bool,
    pub heatmap_note: Option<String>,
    pub agreement_written: bool,
}

#[derive(Deserialize)]
struct AnnotationFile {
    items: Vec<AnnotationItem>,
}

#[derive(Deserialize)]
struct AnnotationItem {
    #[allow(dead_code)]
    #[serde(default)]
    id: String,
    ratings: Vec<i64>,
}

#[derive(Serialize)]
struct AgreementOutput {
    items: usize,
    raters_per_item: u32,
    dropped_items: usize,
    fleiss_kappa: f64,
    degenerate_chance: bool,
    mean_pairwise_agreement: f64,
}

fn compute_agreement(path: &Path) -> Result<AgreementOutput, PipelineError> {
    let raw = fs::read_to_string(path).map_err(io_err(path))?;
    let file: AnnotationFile = serde_json::from_str(&raw)
        .map_err(|e| PipelineError::Malformed { path: path.to_path_buf(), message: e.to_string() })?;
    let mut binary_items = Vec::with_capacity(file.items.len());
    for item in &file.items {
        let mut bits = Vec::with_capacity(item.ratings.len());
        for &rating in &item.ratings {
            bits.push(crate::stats::binarize_likert(LikertRating::new(rating)?));
        }
        binary_items.push(bits);
    }
    let (matrix, dropped) = AnnotationMatrix::from_binary_ratings(&binary_items)?;
    let kappa = fleiss_kappa(&matrix)?;

    // Mean pairwise percent agreement over rater columns, computed on
    // the items that entered the matrix.
    let n = matrix.raters_per_item as usize;
    let kept: Vec<&Vec<u8>> = binary_items.iter().filter(|r| r.len() == n).collect();
    let mut pair_values = Vec::new();
    for a in 0..n {
        for b in (a + 1)..n {
            let col_a: Vec<u8> = kept.iter().map(|r| r[a]).collect();
            let col_b: Vec<u8> = kept.iter().map(|r| r[b]).collect();
            pair_values.push(percent_agreement(&col_a, &col_b)?);
        }
    }
    let mean_pairwise = pair_values.iter().sum::<f64>() / pair_values.len().max(1) as f64;

    Ok(AgreementOutput {
        items: matrix.items(),
        raters_per_item: matrix.raters_per_item,
        dropped_items: dropped,
        fleiss_kappa: kappa.value,
        degenerate_chance: kappa.degenerate_chance,
        mean_pairwise_agreement: mean_pairwise,
    })
}

pub fn cmd_stats(config: &RunConfig) -> Result<StatsSummary, PipelineError> {
    let reports = load_reports(config)?;
    let stats_dir = config.output_dir.join("stats");
    fs::create_dir_all(&stats_dir).map_err(io_err(&stats_dir))?;

    let mut summary = StatsSummary { reports: reports.len(), ..Default::default() };

    match metric_agreement_heatmap(&reports, config.qa_threshold) {
        Ok(heatmap) => {
            let mut tsv = String::from("metric\tprompt\tline\tqa\n");
            for (row, metric) in heatmap.metrics.iter().enumerate() {
                tsv.push_str(&format!(
                    "{}\t{:.6}\t{:.6}\t{:.6}\n",
                    metric.slug(),
                    heatmap.entries[row][0],
                    heatmap.entries[row][1],
                    heatmap.entries[row][2]
                ));
            }
            let tsv_path = stats_dir.join("heatmap.tsv");
            fs::write(&tsv_path, tsv).map_err(io_err(&tsv_path))?;

            let plot = serde_json::json!({
                "kind": "heatmap",
                "title": "Pairwise metric agreement",
                "x_labels": ["prompt", "line", "qa"],
                "y_labels": ["prompt", "line", "qa"],
                "values": heatmap.entries,
                "support": heatmap.support,
                "qa_threshold": config.qa_threshold,
            });
            let plot_path = stats_dir.join("heatmap.plot.json");
            let mut rendered = serde_json::to_string_pretty(&plot).expect("plot serializes");
            rendered.push('\n');
            fs::write(&plot_path, rendered).map_err(io_err(&plot_path))?;
            summary.heatmap_written = true;
        }
        Err(StatsError::NoComparableTurns(a, b)) => {
            summary.heatmap_note = Some(format!("no comparable turns for ({a}, {b}); heatmap skipped"));
        }
        Err(other) => return Err(other.into()),
    }

    let lengths_path = stats_dir.join("consistency_by_length.tsv");
    let rows = consistency_by_length(&reports);
    let mut tsv = String::from("target_length\tmetric\tmean\tstd\tcount\n");
    for row in rows {
        tsv.push_str(&format!(
            "{}\t{}\t{:.6}\t{:.6}\t{}\n",
            row.target_length,
            row.metric.slug(),
            row.stats.mean,
            row.stats.std,
            row.stats.count
        ));
    }
    fs::write(&lengths_path, tsv).map_err(io_err(&lengths_path))?;

    if let Some(annotations) = &config.annotations {
        let agreement = compute_agreement(annotations)?;
        let path = stats_dir.join("agreement.json");
        let mut rendered = serde_json::to_string_pretty(&agreement).expect("agreement serializes");
        rendered.push('\n');
        fs::write(&path, rendered).map_err(io_err(&path))?;
        summary.agreement_written = true;
    }
    Ok(summary)
}

// --- export ----------------------------------------------------------------

#[derive(Debug, Default, Serialize)]
pub struct ExportSummary {
    pub sft_records: usize,
    pub kto_records: usize,
    pub reward_records: usize,
    pub skipped_turns: usize,
    pub missing_verdicts: Vec<PathBuf>,
}

pub fn cmd_export(config: &RunConfig) -> Result<ExportSummary, PipelineError> {
    let templates = TaskTemplates::load(config.task, config.prompts_dir.as_deref())?;
    let ids = run_transcript_ids(config)?;
    let exports_dir = config.output_dir.join("exports");
    fs::create_dir_all(&exports_dir).map_err(io_err(&exports_dir))?;

    let mut summary = ExportSummary::default();
    let mut sft_records = Vec::new();
    let mut kto_records = Vec::new();
    let mut reward_records = Vec::new();

    for id in &ids {
        let transcript = load_transcript(config, id)?;
        let matrix = match load_matrix(config, &transcript) {
            Ok(matrix) => matrix,
            Err(PipelineError::MissingInput(path)) => {
                summary.missing_verdicts.push(path);
                continue;
            }
            Err(other) => return Err(other),
        };
        sft_records.extend(export_sft(&transcript, &templates, config.brevity_reminder)?);
        let (labels, skipped) = export_binary_labels(
            &transcript,
            &matrix,
            &templates,
            config.label_policy,
            config.brevity_reminder,
        )?;
        summary.skipped_turns += skipped;
        kto_records.extend(labels);
        match export_turn_rewards(
            &transcript,
            &matrix,
            &templates,
            config.reward_metric,
            config.brevity_reminder,
        ) {
            Ok(records) => reward_records.extend(records),
            Err(ExportError::Metrics(MetricsError::MetricUnavailable(_))) => {}
            Err(other) => return Err(other.into()),
        }
    }

    summary.sft_records = sft_records.len();
    summary.kto_records = kto_records.len();
    summary.reward_records = reward_records.len();

    let sft_path = exports_dir.join("sft.v1.records");
    fs::write(&sft_path, write_sft_stream(&sft_records)).map_err(io_err(&sft_path))?;
    let kto_path = exports_dir.join("kto.v1.records");
    fs::write(&kto_path, write_kto_stream(&kto_records)).map_err(io_err(&kto_path))?;
    let rewards_path = exports_dir.join("rewards.v1.records");
    fs::write(&rewards_path, write_rewards_stream(&reward_records)).map_err(io_err(&rewards_path))?;
    Ok(summary)
}

// --- report ----------------------------------------------------------------

#[derive(Debug, Default, Serialize)]
pub struct ReportSummary {
    pub reports: usize,
    pub error_turns: usize,
}

pub fn cmd_report(config: &RunConfig) -> Result<(String, ReportSummary), PipelineError> {
    let reports = load_reports(config)?;
    if reports.is_empty() {
        return Err(PipelineError::MissingInput(config.output_dir.join("reports")));
    }
    let mut text = String::new();
    text.push_str(&format!(
        "run: {} | task: {} | transcripts: {}\n",
        config.output_dir.display(),
        config.task.slug(),
        reports.len()
    ));
    text.push_str("length  metric  mean    std     n\n");
    for row in consistency_by_length(&reports) {
        text.push_str(&format!(
            "{:<7} {:<7} {:.4}  {:.4}  {}\n",
            row.target_length,
            row.metric.slug(),
            row.stats.mean,
            row.stats.std,
            row.stats.count
        ));
    }
    let error_turns: usize = reports.iter().map(|r| r.error_turns.len()).sum();
    text.push_str(&format!("error turns: {error_turns}\n"));

    let path = config.output_dir.join("report.txt");
    fs::write(&path, &text).map_err(io_err(&path))?;
    Ok((text, ReportSummary { reports: reports.len(), error_turns }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        let a = derive_seed(7, "conversation", 10, 0);
        let b = derive_seed(7, "conversation", 10, 0);
        assert_eq!(a, b);
        let c = derive_seed(7, "conversation", 10, 1);
        let d = derive_seed(7, "persona", 10, 0);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn script_line_decoding() {
        assert_eq!(decode_script_line("plain"), "plain");
        assert_eq!(decode_script_line("two\\nlines"), "two\nlines");
        assert_eq!(decode_script_line("back\\\\slash"), "back\\slash");
        assert_eq!(decode_script_line("trail\\"), "trail\\");
    }

    #[test]
    fn parallel_map_preserves_order() {
        let items: Vec<usize> = (0..100).collect();
        let doubled = parallel_map(&items, 8, |&x| x * 2);
        assert_eq!(doubled, items.iter().map(|x| x * 2).collect::<Vec<_>>());
    }

    #[test]
    fn call_budget_stops_at_zero() {
        let budget = CallBudget { remaining: AtomicU64::new(2) };
        assert!(budget.take());
        assert!(budget.take());
        assert!(!budget.take());
        assert!(!budget.take());
    }
}
