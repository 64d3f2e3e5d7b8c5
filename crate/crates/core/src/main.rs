use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use personasim::config::RunConfig;
use personasim::metrics::RewardMetric;
use personasim::model::{MetricKind, TaskKind};
use personasim::pipeline;

#[derive(Parser)]
#[command(
    name = "personasim",
    about = "Simulate persona-conditioned dialogues, judge their consistency, and export reward datasets",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// TOML run configuration; flags below override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for every pipeline stage.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Task: open_ended, education, or mental_health.
    #[arg(long, global = true)]
    task: Option<String>,
    /// Comma-separated conversation lengths in total utterances.
    #[arg(long, global = true, value_delimiter = ',')]
    lengths: Option<Vec<usize>>,
    /// Comma-separated metrics: prompt, line, qa.
    #[arg(long, global = true, value_delimiter = ',')]
    metrics: Option<Vec<String>>,
    /// Worker threads across transcripts.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Run seed; every derived seed is a pure function of it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Offline fixture directory; roles without a <role>.txt script fall
    /// back to the deterministic synthesizer.
    #[arg(long, global = true)]
    scripted: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate persona-conditioned conversations.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// Conversations per length bucket.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Score transcripts with the selected consistency metrics.
    Judge {
        #[command(flatten)]
        common: CommonArgs,
        /// Stop after this many provider calls; rerun to resume.
        #[arg(long)]
        max_calls: Option<u64>,
        /// Append every provider call to logs/calls.records.
        #[arg(long)]
        call_log: bool,
    },
    /// Fold verdicts into per-transcript reports and a summary table.
    Score {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Agreement statistics: metric heatmap, length table, annotations.
    Stats {
        #[command(flatten)]
        common: CommonArgs,
        /// Human annotation file (JSON) for Fleiss' kappa.
        #[arg(long)]
        annotations: Option<PathBuf>,
    },
    /// Emit sft/kto/rewards record streams.
    Export {
        #[command(flatten)]
        common: CommonArgs,
        /// Reward metric: prompt, line, qa, or averaged.
        #[arg(long)]
        metric: Option<String>,
    },
    /// Print and persist the run-level summary.
    Report {
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn build_config(common: &CommonArgs) -> Result<RunConfig, String> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path).map_err(|e| e.to_string())?,
        None => RunConfig::default(),
    };
    if let Some(out) = &common.out {
        config.output_dir = out.clone();
    }
    if let Some(task) = &common.task {
        config.task = TaskKind::from_slug(task).ok_or_else(|| format!("unknown task `{task}`"))?;
    }
    if let Some(lengths) = &common.lengths {
        config.lengths = lengths.clone();
    }
    if let Some(metrics) = &common.metrics {
        let mut parsed = BTreeSet::new();
        for metric in metrics {
            parsed.insert(
                MetricKind::from_slug(metric).ok_or_else(|| format!("unknown metric `{metric}`"))?,
            );
        }
        config.metrics = parsed;
    }
    if let Some(jobs) = common.jobs {
        config.jobs = jobs;
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(scripted) = &common.scripted {
        config.scripted = Some(scripted.clone());
    }
    config.validate().map_err(|e| e.to_string())?;
    Ok(config)
}

fn run() -> Result<ExitCode, String> {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate { common, count } => {
            let mut config = build_config(&common)?;
            if let Some(count) = count {
                config.conversations_per_length = count;
            }
            config.validate().map_err(|e| e.to_string())?;
            let summary = pipeline::cmd_simulate(&config).map_err(|e| e.to_string())?;
            println!("simulate: {} written, {} failed", summary.written, summary.failed);
            Ok(if summary.failed > 0 { ExitCode::FAILURE } else { ExitCode::SUCCESS })
        }
        Command::Judge { common, max_calls, call_log } => {
            let mut config = build_config(&common)?;
            if max_calls.is_some() {
                config.max_calls = max_calls;
            }
            if call_log {
                config.call_log = true;
            }
            let summary = pipeline::cmd_judge(&config).map_err(|e| e.to_string())?;
            println!(
                "judge: {} transcripts, {} error turns{}",
                summary.transcripts,
                summary.error_turns,
                if summary.interrupted { ", interrupted (rerun to resume)" } else { "" }
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Score { common } => {
            let config = build_config(&common)?;
            let summary = pipeline::cmd_score(&config).map_err(|e| e.to_string())?;
            println!("score: {} reports written", summary.reports_written);
            for path in &summary.missing_verdicts {
                eprintln!("missing verdicts: {}", path.display());
            }
            Ok(if summary.missing_verdicts.is_empty() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Stats { common, annotations } => {
            let mut config = build_config(&common)?;
            if annotations.is_some() {
                config.annotations = annotations;
            }
            let summary = pipeline::cmd_stats(&config).map_err(|e| e.to_string())?;
            println!(
                "stats: {} reports, heatmap {}{}",
                summary.reports,
                if summary.heatmap_written { "written" } else { "skipped" },
                if summary.agreement_written { ", agreement written" } else { "" }
            );
            if let Some(note) = summary.heatmap_note {
                eprintln!("{note}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Export { common, metric } => {
            let mut config = build_config(&common)?;
            if let Some(metric) = metric {
                config.reward_metric = RewardMetric::from_slug(&metric)
                    .ok_or_else(|| format!("unknown reward metric `{metric}`"))?;
            }
            let summary = pipeline::cmd_export(&config).map_err(|e| e.to_string())?;
            println!(
                "export: {} sft, {} kto, {} rewards ({} unscored turns skipped)",
                summary.sft_records, summary.kto_records, summary.reward_records, summary.skipped_turns
            );
            for path in &summary.missing_verdicts {
                eprintln!("missing verdicts: {}", path.display());
            }
            Ok(if summary.missing_verdicts.is_empty() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Report { common } => {
            let config = build_config(&common)?;
            let (text, _) = pipeline::cmd_report(&config).map_err(|e| e.to_string())?;
            print!("{text}");
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}
