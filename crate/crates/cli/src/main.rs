//! `pipeline`: single executable exposing every curation stage as a
//! subcommand, plus `all` for the end-to-end flow
//! clean -> dedup -> score -> select -> format -> mix -> mask -> report.

mod config;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use curation_core::cleaning::CleaningPolicy;
use curation_core::dedup::{DedupConfig, DEFAULT_SEED};
use curation_core::formatting::FormatterConfig;
use curation_core::mask::MaskOptions;
use curation_core::uncertainty::ProbeConfig;

use config::PipelineConfig;
use stages::JobKind;

#[derive(Parser)]
#[command(name = "pipeline", version, about = "Corpus curation pipeline")]
struct Cli {
    /// Configuration file; flags override config values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Global worker cap for stages that parallelise.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rule-based filtering of parallel pairs.
    Clean(CleanArgs),
    /// Three-stage deduplication cascade on the English side.
    Dedup(DedupArgs),
    /// Entropy scoring of samples via top-k logprobs.
    Score(ScoreArgs),
    /// Top-N selection of scored samples.
    Select(SelectArgs),
    /// Instruction formatting and generation-job building.
    #[command(subcommand)]
    Format(FormatCommand),
    /// Merge manifests into a single shuffled corpus with accounting.
    Mix(MixArgs),
    /// Render conversations and emit per-token loss masks.
    Mask(MaskArgs),
    /// Mixture accounting report without assembling.
    Report(ReportArgs),
    /// GPU/facility energy estimate.
    Energy(EnergyArgs),
    /// Run the full pipeline from the config file.
    All,
}

#[derive(Args)]
struct CleanArgs {
    /// Cleaning policy file (JSON).
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    rejects: Option<PathBuf>,
}

#[derive(Args)]
struct DedupArgs {
    /// Stage to run; `all` is the full cascade.
    #[arg(long, default_value = "all")]
    stage: String,
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jaccard: Option<f64>,
    #[arg(long)]
    cosine: Option<f64>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    t: Option<usize>,
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Pre-recorded logprob JSONL; no endpoint needed.
    #[arg(long)]
    offline: Option<PathBuf>,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum FormatCommand {
    /// Convert cleaned parallel pairs into instruction chat data.
    Pairs(FormatPairsArgs),
    /// Build generation jobs for teacher models.
    Jobs(FormatJobsArgs),
}

#[derive(Args)]
struct FormatPairsArgs {
    /// Directory with en2cy.txt and cy2en.txt template banks.
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "single-frac")]
    single_frac: Option<f64>,
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
}

#[derive(Args)]
struct FormatJobsArgs {
    #[arg(long, value_enum)]
    kind: JobKind,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MixArgs {
    /// JSONL list of {name, path, policy} dataset entries.
    #[arg(long)]
    manifests: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    lengths: Option<PathBuf>,
}

#[derive(Args)]
struct MaskArgs {
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    counter: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    manifests: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EnergyArgs {
    #[arg(long)]
    gpus: f64,
    #[arg(long)]
    tdp: f64,
    #[arg(long)]
    hours: f64,
    #[arg(long)]
    pue: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace(['"', '\n'], " ");
            eprintln!("{{\"level\":\"error\",\"msg\":\"{msg}\"}}");
            if msg.contains("not found") || msg.contains("cannot read") {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn required<T: Clone>(flag: Option<T>, section: Option<T>, name: &str) -> Result<T> {
    flag.or(section)
        .with_context(|| format!("missing required option: {name}"))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.config)?;
    let work_dir = cfg
        .global
        .work_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("."));
    let counter = stages::resolve_counter(&cfg.global.token_counter)?;

    match cli.command {
        Command::Clean(args) => {
            let policy = match &args.policy {
                Some(path) => {
                    let text = std::fs::read_to_string(path)
                        .with_context(|| format!("cannot read policy {}", path.display()))?;
                    serde_json::from_str(&text)
                        .with_context(|| format!("invalid policy {}", path.display()))?
                }
                None => cleaning_policy_from_config(&cfg),
            };
            let input = required(args.input, cfg.clean.input.clone(), "--in")?;
            let out = required(args.out, cfg.clean.output.clone(), "--out")?;
            let rejects = args.rejects.or(cfg.clean.rejects.clone());
            stages::run_clean(&input, &out, rejects.as_deref(), &policy)?;
        }
        Command::Dedup(args) => {
            if !matches!(args.stage.as_str(), "exact" | "near" | "semantic" | "all") {
                bail!("unknown dedup stage: {}", args.stage);
            }
            let input = required(args.input, cfg.dedup.input.clone(), "--in")?;
            let out = required(args.out, cfg.dedup.output.clone(), "--out")?;
            let report = args.report.or(cfg.dedup.report.clone());
            let config = DedupConfig {
                seed: args.seed.or(cfg.dedup.seed).unwrap_or(DEFAULT_SEED),
                jaccard_threshold: args.jaccard.or(cfg.dedup.jaccard).unwrap_or(0.9),
                cosine_threshold: args.cosine.or(cfg.dedup.cosine).unwrap_or(0.85),
            };
            stages::run_dedup_stage(&args.stage, &input, &out, report.as_deref(), &config)?;
        }
        Command::Score(args) => {
            let out = required(args.out, cfg.score.output.clone(), "--out")?;
            match args.offline.or(cfg.score.offline.clone()) {
                Some(offline) => {
                    stages::run_score_offline(&offline, &out)?;
                }
                None => {
                    let input = required(args.input, cfg.score.input.clone(), "--in")?;
                    let probe = ProbeConfig {
                        k: args.k.or(cfg.score.k).unwrap_or(20),
                        t_max: args.t.or(cfg.score.t).unwrap_or(32),
                        select_n: 30_000,
                        endpoint: required(args.endpoint, cfg.score.endpoint.clone(), "--endpoint")?,
                        model: required(args.model, cfg.score.model.clone(), "--model")?,
                    };
                    let jobs = cli.jobs.unwrap_or(cfg.global.jobs);
                    stages::run_score_online(&input, &out, &probe, jobs)?;
                }
            }
        }
        Command::Select(args) => {
            let scores = required(args.scores, cfg.select.scores.clone(), "--scores")?;
            let n = args.n.or(cfg.select.n).unwrap_or(30_000);
            let out = required(args.out, cfg.select.output.clone(), "--out")?;
            stages::run_select(&scores, n, &out)?;
        }
        Command::Format(FormatCommand::Pairs(args)) => {
            let input = required(args.input, cfg.format.input.clone(), "--in")?;
            let out = required(args.out, cfg.format.output.clone(), "--out")?;
            let templates = args.templates.or(cfg.format.templates.clone());
            let fmt = FormatterConfig {
                seed: args.seed.unwrap_or(cfg.global.seed),
                single_turn_fraction: args
                    .single_frac
                    .or(cfg.format.single_frac)
                    .unwrap_or(0.7),
                direction_split: cfg.format.direction_split.unwrap_or(0.5),
                ..FormatterConfig::default()
            };
            let dataset = args
                .dataset
                .or(cfg.format.dataset.clone())
                .unwrap_or_else(|| "parallel".to_string());
            stages::run_format_pairs(&input, &out, templates.as_deref(), &fmt, &dataset)?;
        }
        Command::Format(FormatCommand::Jobs(args)) => {
            stages::run_format_jobs(args.kind, &args.input, &args.out)?;
        }
        Command::Mix(args) => {
            let manifests_path = required(args.manifests, cfg.mix.manifests.clone(), "--manifests")?;
            let out = required(args.out, cfg.mix.output.clone(), "--out")?;
            let report = args.report.or(cfg.mix.report.clone());
            let lengths = args.lengths.or(cfg.mix.lengths.clone());
            let seed = args.seed.unwrap_or(cfg.global.seed);
            let manifests = stages::load_manifests(&manifests_path, &work_dir)?;
            stages::run_mix(
                &manifests,
                seed,
                &out,
                report.as_deref(),
                lengths.as_deref(),
                counter.as_ref(),
            )?;
        }
        Command::Mask(args) => {
            let input = required(args.input, cfg.mask.input.clone(), "--in")?;
            let out = required(args.out, cfg.mask.output.clone(), "--out")?;
            let counter = stages::resolve_counter(
                args.counter
                    .or(cfg.mask.counter.clone())
                    .as_deref()
                    .unwrap_or("reference"),
            )?;
            let options = MaskOptions {
                supervise_reasoning: cfg.mask.supervise_reasoning.unwrap_or(true),
            };
            stages::run_mask(&input, &out, counter.as_ref(), options)?;
        }
        Command::Report(args) => {
            let manifests_path = required(args.manifests, cfg.mix.manifests.clone(), "--manifests")?;
            let manifests = stages::load_manifests(&manifests_path, &work_dir)?;
            stages::run_report(&manifests, counter.as_ref(), args.out.as_deref())?;
        }
        Command::Energy(args) => {
            stages::run_energy(args.gpus, args.tdp, args.hours, args.pue);
        }
        Command::All => {
            run_all(&cfg, counter.as_ref(), &work_dir)?;
        }
    }
    Ok(())
}

fn cleaning_policy_from_config(cfg: &PipelineConfig) -> CleaningPolicy {
    let d = CleaningPolicy::default();
    CleaningPolicy {
        min_chars: cfg.clean.min_chars.unwrap_or(d.min_chars),
        max_char_repeat_ratio: cfg
            .clean
            .max_char_repeat_ratio
            .unwrap_or(d.max_char_repeat_ratio),
        max_word_repeat_ratio: cfg
            .clean
            .max_word_repeat_ratio
            .unwrap_or(d.max_word_repeat_ratio),
        url_filter: cfg.clean.url_filter.unwrap_or(d.url_filter),
        emoji_filter: cfg.clean.emoji_filter.unwrap_or(d.emoji_filter),
        list_item_filter: cfg.clean.list_item_filter.unwrap_or(d.list_item_filter),
    }
}

/// End-to-end flow over the config file. Every stage whose section names
/// an input runs; stages without configured inputs are skipped with a log
/// line. All randomness derives from the global seed unless a stage
/// overrides it.
fn run_all(
    cfg: &PipelineConfig,
    counter: &dyn curation_core::model::TokenCounter,
    work_dir: &std::path::Path,
) -> Result<()> {
    let resolve = |p: &PathBuf| {
        if p.is_absolute() {
            p.clone()
        } else {
            work_dir.join(p)
        }
    };

    let cleaned = match (&cfg.clean.input, &cfg.clean.output) {
        (Some(input), Some(output)) => {
            let policy = cleaning_policy_from_config(cfg);
            let rejects = cfg.clean.rejects.as_ref().map(&resolve);
            stages::run_clean(&resolve(input), &resolve(output), rejects.as_deref(), &policy)
                .context("clean")?;
            Some(resolve(output))
        }
        _ => {
            stages::log_stage("clean", "skipped (no input configured)");
            None
        }
    };

    let deduped = match &cfg.dedup.output {
        Some(output) => {
            let input = cfg
                .dedup
                .input
                .as_ref()
                .map(&resolve)
                .or(cleaned)
                .context("dedup: no input available")?;
            let config = DedupConfig {
                seed: cfg.dedup.seed.unwrap_or(cfg.global.seed),
                jaccard_threshold: cfg.dedup.jaccard.unwrap_or(0.9),
                cosine_threshold: cfg.dedup.cosine.unwrap_or(0.85),
            };
            let report = cfg.dedup.report.as_ref().map(&resolve);
            stages::run_dedup(&input, &resolve(output), report.as_deref(), &config)
                .context("dedup")?;
            Some(resolve(output))
        }
        None => {
            stages::log_stage("dedup", "skipped (no output configured)");
            None
        }
    };

    match (&cfg.score.offline, &cfg.score.output) {
        (Some(offline), Some(output)) => {
            stages::run_score_offline(&resolve(offline), &resolve(output)).context("score")?;
            if let (Some(n), Some(select_out)) = (cfg.select.n, &cfg.select.output) {
                let scores = cfg
                    .select
                    .scores
                    .as_ref()
                    .map(&resolve)
                    .unwrap_or_else(|| resolve(output));
                stages::run_select(&scores, n, &resolve(select_out)).context("select")?;
            }
        }
        _ => stages::log_stage("score", "skipped (no offline logprobs configured)"),
    }

    match &cfg.format.output {
        Some(output) => {
            let input = cfg
                .format
                .input
                .as_ref()
                .map(&resolve)
                .or(deduped)
                .context("format: no input available")?;
            let fmt = FormatterConfig {
                seed: cfg.global.seed,
                single_turn_fraction: cfg.format.single_frac.unwrap_or(0.7),
                direction_split: cfg.format.direction_split.unwrap_or(0.5),
                ..FormatterConfig::default()
            };
            let dataset = cfg
                .format
                .dataset
                .clone()
                .unwrap_or_else(|| "parallel".to_string());
            let templates = cfg.format.templates.as_ref().map(&resolve);
            stages::run_format_pairs(&input, &resolve(output), templates.as_deref(), &fmt, &dataset)
                .context("format")?;
        }
        None => stages::log_stage("format", "skipped (no output configured)"),
    }

    let mixed = match (&cfg.mix.manifests, &cfg.mix.output) {
        (Some(manifests_path), Some(output)) => {
            let manifests = stages::load_manifests(&resolve(manifests_path), work_dir)?;
            let report = cfg.mix.report.as_ref().map(&resolve);
            let lengths = cfg.mix.lengths.as_ref().map(&resolve);
            stages::run_mix(
                &manifests,
                cfg.global.seed,
                &resolve(output),
                report.as_deref(),
                lengths.as_deref(),
                counter,
            )
            .context("mix")?;
            Some(resolve(output))
        }
        _ => {
            stages::log_stage("mix", "skipped (no manifests configured)");
            None
        }
    };

    match &cfg.mask.output {
        Some(output) => {
            let input = cfg
                .mask
                .input
                .as_ref()
                .map(&resolve)
                .or(mixed)
                .context("mask: no input available")?;
            let mask_counter = stages::resolve_counter(
                cfg.mask.counter.as_deref().unwrap_or("reference"),
            )?;
            let options = MaskOptions {
                supervise_reasoning: cfg.mask.supervise_reasoning.unwrap_or(true),
            };
            stages::run_mask(&input, &resolve(output), mask_counter.as_ref(), options)
                .context("mask")?;
        }
        None => stages::log_stage("mask", "skipped (no output configured)"),
    }

    stages::log_stage("all", "pipeline complete");
    Ok(())
}
