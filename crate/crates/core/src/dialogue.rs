//! Two-agent conversation engine: renders role prompts from templates,
//! alternates turns, appends brevity reminders, regenerates on role
//! breaks, and samples personas per task.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatMessage, ChatProvider, ChatRequest, GatewayError};
use crate::model::{AgentRole, ModelError, Persona, TaskKind, Transcript, Utterance};

#[derive(Debug, Error)]
pub enum DialogueError {
    #[error("missing binding for placeholder %{0}%")]
    MissingBinding(String),
    #[error("template `{name}` uses unrecognized placeholder %{placeholder}%")]
    UnrecognizedPlaceholder { name: String, placeholder: String },
    #[error("persona catalog for task {0} is empty")]
    EmptyCatalog(TaskKind),
    #[error("agent {0} returned empty text after all regenerations")]
    GenerationStalled(AgentRole),
    #[error("provider error on turn {turn}: {source}")]
    Provider {
        turn: usize,
        #[source]
        source: GatewayError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("failed to load {path}: {message}")]
    BadDataFile { path: String, message: String },
}

/// Every placeholder a template body may use.
pub const RECOGNIZED_PLACEHOLDERS: &[&str] = &[
    "SPEAKER_ROLE",
    "LISTENER_ROLE",
    "SPEAKER_BACKSTORY",
    "CONVERSATION",
    "SCENARIO_DESC",
    "SUBJECT",
    "ROLE",
    "SPEAKER_LINE",
    "PREVIOUS_QUESTIONS",
    "BACKSTORY_QUESTION",
    "GIVEN_ANSWER",
    "CORRECT_ANSWER",
];

/// A prompt template with `%NAME%` placeholders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: String,
    pub body: String,
}

impl PromptTemplate {
    /// Builds a template, rejecting bodies that use placeholders outside
    /// the recognized set.
    pub fn new(name: impl Into<String>, body: impl Into<String>) -> Result<Self, DialogueError> {
        let template = PromptTemplate { name: name.into(), body: body.into() };
        for placeholder in scan_placeholders(&template.body) {
            if !RECOGNIZED_PLACEHOLDERS.contains(&placeholder.as_str()) {
                return Err(DialogueError::UnrecognizedPlaceholder {
                    name: template.name.clone(),
                    placeholder,
                });
            }
        }
        Ok(template)
    }
}

/// Placeholder names present in `body`, in order of first occurrence.
///
/// A `%TOKEN%` counts as a placeholder only when TOKEN is uppercase
/// alphanumeric/underscore; stray percent signs pass through untouched.
pub fn scan_placeholders(body: &str) -> Vec<String> {
    let bytes = body.as_bytes();
    let mut found = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            if let Some(rel_end) = bytes[i + 1..].iter().position(|&b| b == b'%') {
                let inner = &body[i + 1..i + 1 + rel_end];
                if !inner.is_empty()
                    && inner.bytes().all(|b| b.is_ascii_uppercase() || b.is_ascii_digit() || b == b'_')
                {
                    if !found.contains(&inner.to_string()) {
                        found.push(inner.to_string());
                    }
                    i += rel_end + 2;
                    continue;
                }
            }
        }
        i += 1;
    }
    found
}

/// Substitutes every placeholder in `template.body` from `bindings`.
/// Replacement is a single pass: placeholder-like text inside binding
/// values is emitted verbatim, never re-expanded.
pub fn render_prompt(
    template: &PromptTemplate,
    bindings: &BTreeMap<&str, String>,
) -> Result<String, DialogueError> {
    let body = &template.body;
    let mut out = String::with_capacity(body.len());
    let bytes = body.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            if let Some(rel_end) = bytes[i + 1..].iter().position(|&b| b == b'%') {
                let inner = &body[i + 1..i + 1 + rel_end];
                if RECOGNIZED_PLACEHOLDERS.contains(&inner) {
                    let value = bindings
                        .get(inner)
                        .ok_or_else(|| DialogueError::MissingBinding(inner.to_string()))?;
                    out.push_str(value);
                    i += rel_end + 2;
                    continue;
                }
            }
        }
        let ch = body[i..].chars().next().unwrap();
        out.push(ch);
        i += ch.len_utf8();
    }
    Ok(out)
}

/// Renders a conversation prefix as `RoleLabel: text` lines joined by
/// newlines — the same rendering embedded in agent and judge prompts.
pub fn render_conversation(utterances: &[Utterance], simulator_label: &str, task_agent_label: &str) -> String {
    let mut out = String::new();
    for utt in utterances {
        let label = match utt.speaker {
            AgentRole::UserSimulator => simulator_label,
            AgentRole::TaskAgent => task_agent_label,
        };
        out.push_str(label);
        out.push_str(": ");
        out.push_str(&utt.text);
        out.push('\n');
    }
    out
}

// --- task templates -------------------------------------------------------

/// The per-task prompt bundle: scenario sentence, both agent templates,
/// default role labels, and (for education) the teaching topic list.
#[derive(Debug, Clone)]
pub struct TaskTemplates {
    pub task: TaskKind,
    pub scenario_desc: String,
    pub simulator: PromptTemplate,
    pub task_agent: PromptTemplate,
    pub simulator_role_label: String,
    pub task_agent_role_label: String,
    pub topics: Vec<String>,
}

#[derive(Deserialize)]
struct TaskTemplateFile {
    scenario_desc: String,
    simulator_role_label: String,
    task_agent_role_label: String,
    #[serde(default)]
    topics: Vec<String>,
    simulator: TemplateSection,
    task_agent: TemplateSection,
}

#[derive(Deserialize)]
struct TemplateSection {
    template: String,
}

const OPEN_ENDED_TOML: &str = include_str!("../prompts/tasks/open_ended.toml");
const EDUCATION_TOML: &str = include_str!("../prompts/tasks/education.toml");
const MENTAL_HEALTH_TOML: &str = include_str!("../prompts/tasks/mental_health.toml");

impl TaskTemplates {
    /// The templates shipped with the toolkit.
    pub fn builtin(task: TaskKind) -> TaskTemplates {
        let raw = match task {
            TaskKind::OpenEnded => OPEN_ENDED_TOML,
            TaskKind::Education => EDUCATION_TOML,
            TaskKind::MentalHealth => MENTAL_HEALTH_TOML,
        };
        Self::parse(task, raw, "<builtin>").expect("builtin task templates are valid")
    }

    /// Loads `<dir>/<task>.toml`, falling back to the builtin bundle
    /// when the file does not exist.
    pub fn load(task: TaskKind, dir: Option<&Path>) -> Result<TaskTemplates, DialogueError> {
        if let Some(dir) = dir {
            let path = dir.join(format!("{}.toml", task.slug()));
            if path.exists() {
                let raw = std::fs::read_to_string(&path).map_err(|e| DialogueError::BadDataFile {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
                return Self::parse(task, &raw, &path.display().to_string());
            }
        }
        Ok(Self::builtin(task))
    }

    fn parse(task: TaskKind, raw: &str, origin: &str) -> Result<TaskTemplates, DialogueError> {
        let file: TaskTemplateFile = toml::from_str(raw).map_err(|e| DialogueError::BadDataFile {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        Ok(TaskTemplates {
            task,
            scenario_desc: file.scenario_desc,
            simulator: PromptTemplate::new(format!("{}-simulator", task.slug()), file.simulator.template)?,
            task_agent: PromptTemplate::new(format!("{}-task-agent", task.slug()), file.task_agent.template)?,
            simulator_role_label: file.simulator_role_label,
            task_agent_role_label: file.task_agent_role_label,
            topics: file.topics,
        })
    }
}

// --- persona catalogs -------------------------------------------------------

/// Static persona entries plus the sampling tables used to compose new
/// personas for the education and mental-health tasks.
#[derive(Debug, Clone)]
pub struct PersonaCatalog {
    pub task: TaskKind,
    pub role_label: String,
    pub entries: Vec<Persona>,
    pub education_levels: Vec<EducationLevel>,
    pub style_blurbs: BTreeMap<String, String>,
    pub dimensions: Vec<PersonaDimension>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct EducationLevel {
    pub id: String,
    pub phrase: String,
    pub styles: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct PersonaDimension {
    pub key: String,
    pub name: String,
    pub variations: Vec<String>,
}

#[derive(Deserialize)]
struct CatalogFile {
    task: TaskKind,
    role_label: String,
    #[serde(default)]
    entries: Vec<CatalogEntry>,
    #[serde(default)]
    levels: Vec<EducationLevel>,
    #[serde(default)]
    style_blurbs: BTreeMap<String, String>,
    #[serde(default)]
    dimensions: Vec<PersonaDimension>,
}

#[derive(Deserialize)]
struct CatalogEntry {
    id: String,
    #[serde(default)]
    role_label: Option<String>,
    text: String,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

const OPEN_ENDED_CATALOG: &str = include_str!("../personas/open_ended.json");
const EDUCATION_CATALOG: &str = include_str!("../personas/education.json");
const MENTAL_HEALTH_CATALOG: &str = include_str!("../personas/mental_health.json");

impl PersonaCatalog {
    pub fn builtin(task: TaskKind) -> PersonaCatalog {
        let raw = match task {
            TaskKind::OpenEnded => OPEN_ENDED_CATALOG,
            TaskKind::Education => EDUCATION_CATALOG,
            TaskKind::MentalHealth => MENTAL_HEALTH_CATALOG,
        };
        Self::parse(raw, "<builtin>").expect("builtin persona catalogs are valid")
    }

    /// Loads `<dir>/<task>.json`, falling back to the builtin catalog.
    pub fn load(task: TaskKind, dir: Option<&Path>) -> Result<PersonaCatalog, DialogueError> {
        if let Some(dir) = dir {
            let path = dir.join(format!("{}.json", task.slug()));
            if path.exists() {
                let raw = std::fs::read_to_string(&path).map_err(|e| DialogueError::BadDataFile {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
                return Self::parse(&raw, &path.display().to_string());
            }
        }
        Ok(Self::builtin(task))
    }

    fn parse(raw: &str, origin: &str) -> Result<PersonaCatalog, DialogueError> {
        let file: CatalogFile = serde_json::from_str(raw).map_err(|e| DialogueError::BadDataFile {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        let entries = file
            .entries
            .into_iter()
            .map(|entry| Persona {
                id: entry.id,
                task: file.task,
                text: entry.text,
                role_label: entry.role_label.unwrap_or_else(|| file.role_label.clone()),
                metadata: entry.metadata,
            })
            .collect();
        Ok(PersonaCatalog {
            task: file.task,
            role_label: file.role_label,
            entries,
            education_levels: file.levels,
            style_blurbs: file.style_blurbs,
            dimensions: file.dimensions,
        })
    }
}

fn article_for(word: &str) -> &'static str {
    match word.chars().next().map(|c| c.to_ascii_lowercase()) {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

fn lower_first(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(first) => first.to_lowercase().collect::<String>() + chars.as_str(),
        None => String::new(),
    }
}

/// Draws one persona deterministically from `seed`.
///
/// Open-ended personas come straight from the catalog entries. Education
/// personas are composed from a sampled (level, style) pair out of the
/// level-grouped style table. Mental-health personas compose one sampled
/// variation per dimension into both the backstory text and metadata.
pub fn sample_persona(catalog: &PersonaCatalog, seed: u64) -> Result<Persona, DialogueError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match catalog.task {
        TaskKind::OpenEnded => {
            if catalog.entries.is_empty() {
                return Err(DialogueError::EmptyCatalog(catalog.task));
            }
            let pick = rng.random_range(0..catalog.entries.len());
            Ok(catalog.entries[pick].clone())
        }
        TaskKind::Education => {
            if catalog.education_levels.is_empty() {
                return Err(DialogueError::EmptyCatalog(catalog.task));
            }
            let level = &catalog.education_levels[rng.random_range(0..catalog.education_levels.len())];
            if level.styles.is_empty() {
                return Err(DialogueError::EmptyCatalog(catalog.task));
            }
            let style = &level.styles[rng.random_range(0..level.styles.len())];
            let blurb = catalog
                .style_blurbs
                .get(style)
                .cloned()
                .unwrap_or_else(|| "I learn best when the material meets me where I am.".to_string());
            let text = format!(
                "As {} {} student with {} {} learning style, {}",
                article_for(&level.phrase),
                level.phrase,
                article_for(style),
                style,
                blurb
            );
            let mut metadata = BTreeMap::new();
            metadata.insert("education_level".to_string(), level.id.clone());
            metadata.insert("learning_style".to_string(), style.clone());
            Ok(Persona {
                id: format!("edu-{}-{}-s{}", level.id, style.to_lowercase().replace(' ', "-"), seed),
                task: TaskKind::Education,
                text,
                role_label: catalog.role_label.clone(),
                metadata,
            })
        }
        TaskKind::MentalHealth => {
            if catalog.dimensions.is_empty() {
                return Err(DialogueError::EmptyCatalog(catalog.task));
            }
            let mut metadata = BTreeMap::new();
            let mut picks: BTreeMap<&str, String> = BTreeMap::new();
            for dimension in &catalog.dimensions {
                if dimension.variations.is_empty() {
                    return Err(DialogueError::EmptyCatalog(catalog.task));
                }
                let variation = dimension.variations[rng.random_range(0..dimension.variations.len())].clone();
                metadata.insert(dimension.key.clone(), variation.clone());
                picks.insert(dimension.key.as_str(), variation);
            }
            let fetch = |key: &str| picks.get(key).cloned().unwrap_or_default();
            let text = format!(
                "You are a patient in therapy. Your core concern is {} and lately your days are colored by {}. \
                 In relationships you struggle with {}, and you usually cope through {}. \
                 Part of your story: {}. You hope therapy helps you work toward {}. \
                 In session you tend toward {} responses, and today your tone is {}.",
                lower_first(&fetch("core_concern")),
                lower_first(&fetch("emotional_themes")),
                lower_first(&fetch("relationship_patterns")),
                lower_first(&fetch("coping_strategies")),
                lower_first(&fetch("identity_context")),
                lower_first(&fetch("therapeutic_goals")),
                lower_first(&fetch("therapeutic_stance")),
                lower_first(&fetch("session_tone")),
            );
            Ok(Persona {
                id: format!("mh-s{seed}"),
                task: TaskKind::MentalHealth,
                text,
                role_label: catalog.role_label.clone(),
                metadata,
            })
        }
    }
}

// --- role-break detection -----------------------------------------------

/// Keyword heuristics for detecting that an agent fell out of character.
#[derive(Debug, Clone)]
pub struct RoleBreakDetector {
    pub phrases: Vec<String>,
}

impl Default for RoleBreakDetector {
    fn default() -> Self {
        RoleBreakDetector {
            phrases: [
                "as an ai",
                "as a language model",
                "as an artificial intelligence",
                "i am an ai",
                "i'm an ai",
                "i am a language model",
                "i'm a language model",
                "i cannot fulfill",
                "i can't fulfill",
                "my background is described as",
                "my instructions say",
                "here is your background",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        }
    }
}

impl RoleBreakDetector {
    /// True when the text self-identifies as an AI, restates its
    /// instructions, or is empty.
    pub fn is_break(&self, text: &str, _persona: &Persona) -> bool {
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return true;
        }
        let lowered = trimmed.to_lowercase();
        self.phrases.iter().any(|phrase| lowered.contains(phrase))
    }
}

/// Convenience wrapper using the default phrase list.
pub fn detect_role_break(text: &str, persona: &Persona) -> bool {
    RoleBreakDetector::default().is_break(text, persona)
}

// --- conversation engine ------------------------------------------------

pub const BREVITY_REMINDER: &str =
    " Remember to keep each statement less than 2 sentences long, and stay in character.";

/// Default dialogue sampling temperature; generation needs diversity
/// where judging wants determinism.
pub const DIALOGUE_TEMPERATURE: f64 = 0.7;

#[derive(Debug, Clone)]
pub struct DialogueConfig {
    pub task: TaskKind,
    pub target_length: usize,
    pub opener: AgentRole,
    pub max_regens_per_turn: u32,
    pub brevity_reminder: bool,
    pub temperature: f64,
    pub seed: u64,
}

impl DialogueConfig {
    pub fn new(task: TaskKind, target_length: usize, seed: u64) -> Self {
        DialogueConfig {
            task,
            target_length,
            opener: AgentRole::TaskAgent,
            max_regens_per_turn: 2,
            brevity_reminder: true,
            temperature: DIALOGUE_TEMPERATURE,
            seed,
        }
    }
}

pub struct DialogueProviders<'a> {
    pub simulator: &'a dyn ChatProvider,
    pub task_agent: &'a dyn ChatProvider,
}

/// One rendered agent prompt, logged at generation time so exports can
/// be checked byte-for-byte against a re-rendering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub utterance_index: usize,
    pub speaker: AgentRole,
    pub prompt: String,
}

pub struct GenerationOutcome {
    pub transcript: Transcript,
    pub prompt_log: Vec<RenderedPrompt>,
}

/// The label shown for an agent in conversation renderings and prompts.
pub fn speaker_label(persona: &Persona, templates: &TaskTemplates, speaker: AgentRole) -> String {
    match speaker {
        AgentRole::UserSimulator => persona.role_label.clone(),
        AgentRole::TaskAgent => persona
            .metadata
            .get("listener_label")
            .cloned()
            .unwrap_or_else(|| templates.task_agent_role_label.clone()),
    }
}

/// Renders the prompt an agent sees before producing the utterance at
/// `prefix.len()`. Pure in (templates, persona, prefix, config flags):
/// exports re-render with the same inputs and must get identical bytes.
pub fn render_turn_prompt(
    templates: &TaskTemplates,
    persona: &Persona,
    prefix: &[Utterance],
    speaker: AgentRole,
    brevity_reminder: bool,
) -> Result<String, DialogueError> {
    let simulator_label = speaker_label(persona, templates, AgentRole::UserSimulator);
    let task_agent_label = speaker_label(persona, templates, AgentRole::TaskAgent);
    let (speaker_role, listener_role) = match speaker {
        AgentRole::UserSimulator => (simulator_label.clone(), task_agent_label.clone()),
        AgentRole::TaskAgent => (task_agent_label.clone(), simulator_label.clone()),
    };

    let mut conversation = render_conversation(prefix, &simulator_label, &task_agent_label);
    if prefix.is_empty() {
        conversation = "(the conversation is just beginning)\n".to_string();
    }

    let mut bindings: BTreeMap<&str, String> = BTreeMap::new();
    bindings.insert("SPEAKER_ROLE", speaker_role);
    bindings.insert("LISTENER_ROLE", listener_role);
    bindings.insert("SCENARIO_DESC", templates.scenario_desc.clone());
    bindings.insert("CONVERSATION", conversation);
    if speaker == AgentRole::UserSimulator {
        bindings.insert("SPEAKER_BACKSTORY", persona.text.clone());
    } else {
        // Open-ended partners carry their own backstory; other task
        // agents have none and the placeholder is absent from their
        // templates.
        bindings.insert(
            "SPEAKER_BACKSTORY",
            persona.metadata.get("listener_backstory").cloned().unwrap_or_default(),
        );
    }
    if let Some(subject) = persona.metadata.get("subject") {
        bindings.insert("SUBJECT", subject.clone());
    }
    if let Some(level) = persona.metadata.get("education_level_phrase") {
        bindings.insert("ROLE", level.clone());
    } else if let Some(level) = persona.metadata.get("education_level") {
        bindings.insert("ROLE", level.replace('_', " "));
    }

    let template = match speaker {
        AgentRole::UserSimulator => &templates.simulator,
        AgentRole::TaskAgent => &templates.task_agent,
    };
    let mut prompt = render_prompt(template, &bindings)?;
    if brevity_reminder {
        prompt.push_str(BREVITY_REMINDER);
    }
    Ok(prompt)
}

/// Generates a conversation of exactly `config.target_length` utterances,
/// alternating speakers starting from `config.opener`.
///
/// Each generated line runs through the role-break detector; on a break
/// the turn is regenerated up to `max_regens_per_turn` times and the
/// last attempt is kept with its regen count recorded. An agent that
/// still returns empty text after all regenerations aborts generation.
pub fn generate_conversation(
    config: &DialogueConfig,
    persona: &Persona,
    providers: &DialogueProviders<'_>,
    templates: &TaskTemplates,
) -> Result<GenerationOutcome, DialogueError> {
    generate_conversation_with(config, persona, providers, templates, &RoleBreakDetector::default())
}

pub fn generate_conversation_with(
    config: &DialogueConfig,
    persona: &Persona,
    providers: &DialogueProviders<'_>,
    templates: &TaskTemplates,
    detector: &RoleBreakDetector,
) -> Result<GenerationOutcome, DialogueError> {
    let mut persona = persona.clone();
    // The transcript must be self-describing for later re-rendering of
    // its prompts, so generation-time conditioning that templates depend
    // on is recorded in the persona metadata.
    persona
        .metadata
        .insert("brevity_reminder".to_string(), config.brevity_reminder.to_string());
    // Education conversations are conditioned on a teaching topic; pick
    // one deterministically when the caller has not pinned it.
    if config.task == TaskKind::Education && !persona.metadata.contains_key("subject") {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7375626a); // "subj"
        let subject = if templates.topics.is_empty() {
            "a chosen topic".to_string()
        } else {
            templates.topics[rng.random_range(0..templates.topics.len())].clone()
        };
        persona.metadata.insert("subject".to_string(), subject);
    }

    let mut utterances: Vec<Utterance> = Vec::with_capacity(config.target_length);
    let mut prompt_log = Vec::with_capacity(config.target_length);

    for index in 0..config.target_length {
        let speaker = if index % 2 == 0 { config.opener } else { config.opener.other() };
        let provider = match speaker {
            AgentRole::UserSimulator => providers.simulator,
            AgentRole::TaskAgent => providers.task_agent,
        };
        let prompt = render_turn_prompt(templates, &persona, &utterances, speaker, config.brevity_reminder)?;
        prompt_log.push(RenderedPrompt { utterance_index: index, speaker, prompt: prompt.clone() });

        let mut regen_count = 0u32;
        let mut text;
        loop {
            let request = ChatRequest::new(provider.model(), vec![ChatMessage::user(prompt.clone())])
                .with_temperature(config.temperature);
            text = provider
                .complete(&request)
                .map_err(|source| DialogueError::Provider { turn: index, source })?;
            if !detector.is_break(&text, &persona) || regen_count >= config.max_regens_per_turn {
                break;
            }
            regen_count += 1;
        }
        if text.trim().is_empty() {
            return Err(DialogueError::GenerationStalled(speaker));
        }
        utterances.push(Utterance { index, speaker, text, regen_count });
    }

    let transcript = Transcript {
        id: format!("{}-L{}-s{}", persona.id, config.target_length, config.seed),
        persona,
        task: config.task,
        utterances,
        target_length: config.target_length,
        seed: config.seed,
    };
    transcript.validate()?;
    Ok(GenerationOutcome { transcript, prompt_log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ScriptedProvider;

    fn test_persona() -> Persona {
        Persona {
            id: "p-test".into(),
            task: TaskKind::MentalHealth,
            text: "You are Quinn, a 29-year-old florist who is anxious about change.".into(),
            role_label: "Patient".into(),
            metadata: BTreeMap::new(),
        }
    }

    #[test]
    fn render_substitutes_placeholder() {
        let template = PromptTemplate::new("t", "You are %SPEAKER_ROLE%.").unwrap();
        let mut bindings = BTreeMap::new();
        bindings.insert("SPEAKER_ROLE", "Student".to_string());
        assert_eq!(render_prompt(&template, &bindings).unwrap(), "You are Student.");
    }

    #[test]
    fn render_without_placeholders_is_identity() {
        let template = PromptTemplate::new("t", "No placeholders here, just 100% text.").unwrap();
        let bindings = BTreeMap::new();
        assert_eq!(
            render_prompt(&template, &bindings).unwrap(),
            "No placeholders here, just 100% text."
        );
    }

    #[test]
    fn render_missing_binding_names_the_placeholder() {
        let template = PromptTemplate::new("t", "History: %CONVERSATION%").unwrap();
        let bindings = BTreeMap::new();
        match render_prompt(&template, &bindings) {
            Err(DialogueError::MissingBinding(name)) => assert_eq!(name, "CONVERSATION"),
            other => panic!("expected MissingBinding, got {other:?}"),
        }
    }

    #[test]
    fn binding_values_are_not_re_expanded() {
        let template = PromptTemplate::new("t", "Line: %SPEAKER_LINE%").unwrap();
        let mut bindings = BTreeMap::new();
        bindings.insert("SPEAKER_LINE", "cited %CONVERSATION% literally".to_string());
        assert_eq!(
            render_prompt(&template, &bindings).unwrap(),
            "Line: cited %CONVERSATION% literally"
        );
    }

    #[test]
    fn unrecognized_placeholder_rejected() {
        assert!(matches!(
            PromptTemplate::new("t", "Hello %NOT_A_THING%"),
            Err(DialogueError::UnrecognizedPlaceholder { .. })
        ));
    }

    #[test]
    fn builtin_templates_and_catalogs_parse() {
        for task in TaskKind::ALL {
            let templates = TaskTemplates::builtin(task);
            assert!(!templates.scenario_desc.is_empty());
            let catalog = PersonaCatalog::builtin(task);
            assert!(!catalog.entries.is_empty());
        }
        assert_eq!(TaskTemplates::builtin(TaskKind::Education).topics.len(), 10);
    }

    #[test]
    fn education_sampling_stays_in_style_table() {
        let catalog = PersonaCatalog::builtin(TaskKind::Education);
        let all_styles: Vec<&String> =
            catalog.education_levels.iter().flat_map(|l| l.styles.iter()).collect();
        assert_eq!(all_styles.len(), 27);
        for seed in 0..50 {
            let persona = sample_persona(&catalog, seed).unwrap();
            let style = persona.metadata.get("learning_style").unwrap();
            let level = persona.metadata.get("education_level").unwrap();
            let level_entry = catalog.education_levels.iter().find(|l| &l.id == level).unwrap();
            assert!(level_entry.styles.contains(style), "style {style} not valid at {level}");
            assert!(persona.text.contains(style));
        }
        // Narrative is one of the elementary-school styles.
        assert!(catalog.education_levels[0].styles.contains(&"Narrative".to_string()));
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        for task in TaskKind::ALL {
            let catalog = PersonaCatalog::builtin(task);
            let a = sample_persona(&catalog, 42).unwrap();
            let b = sample_persona(&catalog, 42).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn mental_health_sampling_covers_all_eight_dimensions() {
        let catalog = PersonaCatalog::builtin(TaskKind::MentalHealth);
        assert_eq!(catalog.dimensions.len(), 8);
        let persona = sample_persona(&catalog, 9).unwrap();
        for key in [
            "core_concern",
            "emotional_themes",
            "relationship_patterns",
            "coping_strategies",
            "identity_context",
            "therapeutic_goals",
            "therapeutic_stance",
            "session_tone",
        ] {
            assert!(persona.metadata.contains_key(key), "missing dimension {key}");
        }
    }

    #[test]
    fn empty_catalog_is_an_error() {
        let catalog = PersonaCatalog {
            task: TaskKind::OpenEnded,
            role_label: "Speaker".into(),
            entries: vec![],
            education_levels: vec![],
            style_blurbs: BTreeMap::new(),
            dimensions: vec![],
        };
        assert!(matches!(sample_persona(&catalog, 1), Err(DialogueError::EmptyCatalog(_))));
    }

    #[test]
    fn role_break_detects_canonical_phrases() {
        let persona = test_persona();
        assert!(detect_role_break("As an AI language model, I cannot maintain this persona.", &persona));
        assert!(detect_role_break("", &persona));
        assert!(detect_role_break("   ", &persona));
        assert!(!detect_role_break(
            "I guess I just feel like I'm on borrowed time, like one wrong move and everything will come crashing down.",
            &persona
        ));
    }

    #[test]
    fn conversation_of_ten_scripted_lines() {
        let sim_script: Vec<String> = (0..5).map(|i| format!("sim line {i}")).collect();
        let agent_script: Vec<String> = (0..5).map(|i| format!("agent line {i}")).collect();
        let simulator = ScriptedProvider::new(sim_script);
        let task_agent = ScriptedProvider::new(agent_script);
        let providers = DialogueProviders { simulator: &simulator, task_agent: &task_agent };
        let config = DialogueConfig::new(TaskKind::MentalHealth, 10, 3);
        let templates = TaskTemplates::builtin(TaskKind::MentalHealth);
        let outcome = generate_conversation(&config, &test_persona(), &providers, &templates).unwrap();
        let t = &outcome.transcript;
        assert_eq!(t.utterances.len(), 10);
        assert_eq!(t.utterances[0].text, "agent line 0");
        assert_eq!(t.utterances[1].text, "sim line 0");
        assert_eq!(t.utterances[9].text, "sim line 4");
        t.validate().unwrap();
        assert_eq!(outcome.prompt_log.len(), 10);
        assert_eq!(simulator.requests()[0].temperature, DIALOGUE_TEMPERATURE);
    }

    #[test]
    fn minimal_conversation_has_one_turn_per_agent() {
        let simulator = ScriptedProvider::new(["only sim line"]);
        let task_agent = ScriptedProvider::new(["only agent line"]);
        let providers = DialogueProviders { simulator: &simulator, task_agent: &task_agent };
        let config = DialogueConfig::new(TaskKind::MentalHealth, 2, 3);
        let templates = TaskTemplates::builtin(TaskKind::MentalHealth);
        let outcome = generate_conversation(&config, &test_persona(), &providers, &templates).unwrap();
        let speakers: Vec<AgentRole> = outcome.transcript.utterances.iter().map(|u| u.speaker).collect();
        assert_eq!(speakers, vec![AgentRole::TaskAgent, AgentRole::UserSimulator]);
    }

    #[test]
    fn role_break_triggers_one_regeneration() {
        // Utterance index 2 (agent's second line) is a role break; the
        // regenerated text is the next script entry.
        let task_agent = ScriptedProvider::new([
            "agent line 0",
            "As an AI language model, I cannot continue.",
            "agent line 1 regenerated",
        ]);
        let simulator = ScriptedProvider::new(["sim line 0", "sim line 1"]);
        let providers = DialogueProviders { simulator: &simulator, task_agent: &task_agent };
        let config = DialogueConfig::new(TaskKind::MentalHealth, 4, 3);
        let templates = TaskTemplates::builtin(TaskKind::MentalHealth);
        let outcome = generate_conversation(&config, &test_persona(), &providers, &templates).unwrap();
        let broken_turn = &outcome.transcript.utterances[2];
        assert_eq!(broken_turn.regen_count, 1);
        assert_eq!(broken_turn.text, "agent line 1 regenerated");
    }

    #[test]
    fn exhausted_regens_keep_last_attempt_flagged() {
        let task_agent = ScriptedProvider::new([
            "As an AI, attempt 0",
            "As an AI, attempt 1",
            "As an AI, attempt 2",
            "sim? no, agent line",
        ]);
        let simulator = ScriptedProvider::new(["sim line 0"]);
        let providers = DialogueProviders { simulator: &simulator, task_agent: &task_agent };
        let config = DialogueConfig::new(TaskKind::MentalHealth, 2, 3);
        let templates = TaskTemplates::builtin(TaskKind::MentalHealth);
        let outcome = generate_conversation(&config, &test_persona(), &providers, &templates).unwrap();
        let first = &outcome.transcript.utterances[0];
        assert_eq!(first.regen_count, 2);
        assert_eq!(first.text, "As an AI, attempt 2");
    }

    #[test]
    fn simulator_prompt_contains_persona_text_verbatim() {
        let simulator = ScriptedProvider::new(["a", "b"]);
        let task_agent = ScriptedProvider::new(["c", "d"]);
        let providers = DialogueProviders { simulator: &simulator, task_agent: &task_agent };
        let config = DialogueConfig::new(TaskKind::MentalHealth, 4, 3);
        let templates = TaskTemplates::builtin(TaskKind::MentalHealth);
        let persona = test_persona();
        let outcome = generate_conversation(&config, &persona, &providers, &templates).unwrap();
        for logged in outcome.prompt_log.iter().filter(|p| p.speaker == AgentRole::UserSimulator) {
            assert!(logged.prompt.contains(&persona.text));
        }
    }

    #[test]
    fn scripted_generation_is_deterministic() {
        let run = || {
            let simulator = ScriptedProvider::new(["a", "b", "c"]);
            let task_agent = ScriptedProvider::new(["x", "y", "z"]);
            let providers = DialogueProviders { simulator: &simulator, task_agent: &task_agent };
            let config = DialogueConfig::new(TaskKind::Education, 6, 11);
            let templates = TaskTemplates::builtin(TaskKind::Education);
            let catalog = PersonaCatalog::builtin(TaskKind::Education);
            let persona = sample_persona(&catalog, 11).unwrap();
            let outcome = generate_conversation(&config, &persona, &providers, &templates).unwrap();
            crate::model::serialize_transcript(&outcome.transcript)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn education_prompts_bind_subject_and_level() {
        let simulator = ScriptedProvider::new(["a"]);
        let task_agent = ScriptedProvider::new(["x"]);
        let providers = DialogueProviders { simulator: &simulator, task_agent: &task_agent };
        let config = DialogueConfig::new(TaskKind::Education, 2, 5);
        let templates = TaskTemplates::builtin(TaskKind::Education);
        let catalog = PersonaCatalog::builtin(TaskKind::Education);
        let persona = sample_persona(&catalog, 5).unwrap();
        let outcome = generate_conversation(&config, &persona, &providers, &templates).unwrap();
        let subject = outcome.transcript.persona.metadata.get("subject").unwrap();
        assert!(templates.topics.contains(subject));
        for logged in &outcome.prompt_log {
            assert!(logged.prompt.contains(subject.as_str()));
            assert!(!logged.prompt.contains('%'), "unbound placeholder in: {}", logged.prompt);
        }
    }
}
