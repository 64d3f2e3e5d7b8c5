//! Run configuration: a single TOML file with `${VAR}` environment
//! interpolation, plus programmatic defaults for offline runs.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::export::LabelPolicy;
use crate::gateway::ProviderConfig;
use crate::judge::JudgePolarity;
use crate::metrics::RewardMetric;
use crate::model::{AgentRole, MetricKind, TaskKind};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read {0}: {1}")]
    Read(PathBuf, std::io::Error),
    #[error("failed to parse {0}: {1}")]
    Parse(PathBuf, String),
    #[error("config interpolation references unset environment variable ${{{0}}}")]
    MissingEnvVar(String),
    #[error("invalid {field}: {message}")]
    Invalid { field: &'static str, message: String },
}

/// Everything a pipeline command needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub task: TaskKind,
    pub lengths: Vec<usize>,
    pub conversations_per_length: usize,
    pub metrics: BTreeSet<MetricKind>,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub jobs: usize,
    /// Diagnostic questions per persona (K).
    pub probe_count: usize,
    /// Probe every Nth simulator turn; 1 probes every turn.
    pub qa_stride: usize,
    /// Per-turn QA classification threshold for the agreement heatmap.
    pub qa_threshold: f64,
    pub opener: AgentRole,
    pub max_regens_per_turn: u32,
    pub brevity_reminder: bool,
    /// Sampling temperature for the two dialogue agents (and the
    /// simulator when it answers probes).
    pub dialogue_temperature: f64,
    /// Sampling temperature for judge calls.
    pub judge_temperature: f64,
    /// Extra judge calls allowed when a reply fails to parse.
    pub parse_retries: u32,
    /// Per-task polarity overrides; tasks not listed use the defaults.
    pub polarity: BTreeMap<TaskKind, JudgePolarity>,
    pub label_policy: LabelPolicy,
    pub reward_metric: RewardMetric,
    pub provider: ProvidersConfig,
    /// Optional directory overriding the builtin prompt templates.
    pub prompts_dir: Option<PathBuf>,
    /// Optional directory overriding the builtin persona catalogs.
    pub personas_dir: Option<PathBuf>,
    /// Offline mode: serve all three roles from this fixture directory.
    pub scripted: Option<PathBuf>,
    /// Stop after this many provider calls (cost guard); completed work
    /// is persisted and a later run resumes where this one stopped.
    pub max_calls: Option<u64>,
    /// Append one record per provider call to `logs/calls.records`.
    pub call_log: bool,
    /// Human annotation file consumed by the stats command.
    pub annotations: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProvidersConfig {
    pub judge: ProviderConfig,
    pub simulator: ProviderConfig,
    pub task_agent: ProviderConfig,
}

impl Default for ProvidersConfig {
    fn default() -> Self {
        ProvidersConfig {
            judge: ProviderConfig::local("http://127.0.0.1:8080", "judge-model"),
            simulator: ProviderConfig::local("http://127.0.0.1:8080", "simulator-model"),
            task_agent: ProviderConfig::local("http://127.0.0.1:8080", "task-agent-model"),
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: TaskKind::MentalHealth,
            lengths: vec![10],
            conversations_per_length: 2,
            metrics: [MetricKind::PromptToLine].into_iter().collect(),
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            jobs: 1,
            probe_count: 5,
            qa_stride: 1,
            qa_threshold: 0.8,
            opener: AgentRole::TaskAgent,
            max_regens_per_turn: 2,
            brevity_reminder: true,
            dialogue_temperature: crate::dialogue::DIALOGUE_TEMPERATURE,
            judge_temperature: crate::judge::JUDGE_TEMPERATURE,
            parse_retries: 2,
            polarity: BTreeMap::new(),
            label_policy: LabelPolicy::Averaged,
            reward_metric: RewardMetric::PromptToLine,
            provider: ProvidersConfig::default(),
            prompts_dir: None,
            personas_dir: None,
            scripted: None,
            max_calls: None,
            call_log: false,
            annotations: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let raw = std::fs::read_to_string(path).map_err(|e| ConfigError::Read(path.to_path_buf(), e))?;
        let interpolated = interpolate_env(&raw)?;
        let config: RunConfig = toml::from_str(&interpolated)
            .map_err(|e| ConfigError::Parse(path.to_path_buf(), e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.lengths.is_empty() {
            return Err(ConfigError::Invalid { field: "lengths", message: "must be non-empty".into() });
        }
        if let Some(bad) = self.lengths.iter().find(|&&l| l < 2) {
            return Err(ConfigError::Invalid {
                field: "lengths",
                message: format!("length {bad} is below the minimum of 2"),
            });
        }
        if self.conversations_per_length == 0 {
            return Err(ConfigError::Invalid {
                field: "conversations_per_length",
                message: "must be positive".into(),
            });
        }
        if self.metrics.is_empty() {
            return Err(ConfigError::Invalid { field: "metrics", message: "must be non-empty".into() });
        }
        if self.jobs == 0 {
            return Err(ConfigError::Invalid { field: "jobs", message: "must be positive".into() });
        }
        if self.probe_count == 0 {
            return Err(ConfigError::Invalid { field: "probe_count", message: "must be positive".into() });
        }
        if self.qa_stride == 0 {
            return Err(ConfigError::Invalid { field: "qa_stride", message: "must be positive".into() });
        }
        if !(0.0..=1.0).contains(&self.qa_threshold) {
            return Err(ConfigError::Invalid {
                field: "qa_threshold",
                message: "must lie in [0, 1]".into(),
            });
        }
        for (field, value) in [
            ("dialogue_temperature", self.dialogue_temperature),
            ("judge_temperature", self.judge_temperature),
        ] {
            if !value.is_finite() || value < 0.0 {
                return Err(ConfigError::Invalid {
                    field: "temperature",
                    message: format!("{field} must be a non-negative number, got {value}"),
                });
            }
        }
        Ok(())
    }

    /// Polarity for the prompt-to-line judge on `task`: the configured
    /// override when present, the task default otherwise.
    pub fn prompt_polarity(&self, task: TaskKind) -> JudgePolarity {
        self.polarity
            .get(&task)
            .copied()
            .unwrap_or_else(|| crate::judge::default_prompt_polarity(task))
    }
}

/// Replaces `${NAME}` with the value of environment variable NAME.
/// Unset variables are an error so secrets never silently vanish.
pub fn interpolate_env(raw: &str) -> Result<String, ConfigError> {
    let mut out = String::with_capacity(raw.len());
    let mut rest = raw;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let Some(end) = after.find('}') else {
            out.push_str(&rest[start..]);
            rest = "";
            break;
        };
        let name = &after[..end];
        if name.is_empty() || !name.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_') {
            // Not an interpolation; emit literally.
            out.push_str("${");
            rest = after;
            continue;
        }
        match std::env::var(name) {
            Ok(value) => out.push_str(&value),
            Err(_) => return Err(ConfigError::MissingEnvVar(name.to_string())),
        }
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}
