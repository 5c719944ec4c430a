//! Stage implementations shared by the individual subcommands and the
//! end-to-end `all` pipeline. Each stage reads and writes JSONL files and
//! never mutates its inputs.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use curation_core::cleaning::{clean_pair, CleaningPolicy, Rule};
use curation_core::dedup::{cascade, CascadeReport, DedupConfig, HashedBowProvider};
use curation_core::formatting::{
    build_culture_job, build_replay_job, build_translation_job, format_pairs, FormatterConfig,
    GenerationJob, JobReasoning, TemplateBank,
};
use curation_core::mask::{mask_record, MaskOptions};
use curation_core::mixture::{
    assemble, estimate_energy, length_distribution, report as mixture_report, MixtureReport,
};
use curation_core::model::{
    read_all, Conversation, DatasetManifest, JsonlReader, JsonlWriter, ParallelPair, Policy,
    TokenCounter, WhitespaceCounter,
};
use curation_core::uncertainty::{
    build_probe_prompt, probe, rank_and_select, sample_score, ProbeConfig, SampleScore,
    TopKLogprobs,
};

pub fn resolve_counter(name: &str) -> Result<Box<dyn TokenCounter>> {
    match name {
        "whitespace" | "reference" => Ok(Box::new(WhitespaceCounter)),
        other => bail!("unknown token counter: {other}"),
    }
}

/// One structured log line on standard error; data only ever goes to files
/// or standard output.
pub fn log_stage(stage: &str, msg: &str) {
    eprintln!("{{\"stage\":\"{stage}\",\"level\":\"info\",\"msg\":\"{msg}\"}}");
}

fn require_input(path: &Path) -> Result<()> {
    if !path.exists() {
        bail!("input file not found: {}", path.display());
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct RejectedPair {
    reasons: Vec<Rule>,
    pair: ParallelPair,
}

pub struct CleanOutcome {
    pub kept: usize,
    pub rejected: usize,
}

pub fn run_clean(
    input: &Path,
    output: &Path,
    rejects: Option<&Path>,
    policy: &CleaningPolicy,
) -> Result<CleanOutcome> {
    require_input(input)?;
    policy.validate().map_err(|e| anyhow!("clean policy: {e}"))?;
    let mut out = JsonlWriter::create(output)?;
    let mut rej = rejects.map(JsonlWriter::create).transpose()?;
    let mut outcome = CleanOutcome {
        kept: 0,
        rejected: 0,
    };
    for record in JsonlReader::<ParallelPair>::open(input)? {
        let pair = record?;
        pair.validate()?;
        let decision = clean_pair(&pair, policy);
        if decision.keep {
            out.write(&pair)?;
            outcome.kept += 1;
        } else {
            if let Some(w) = rej.as_mut() {
                w.write(&RejectedPair {
                    reasons: decision.reasons,
                    pair,
                })?;
            }
            outcome.rejected += 1;
        }
    }
    out.finish()?;
    if let Some(w) = rej {
        w.finish()?;
    }
    log_stage(
        "clean",
        &format!("kept {} rejected {}", outcome.kept, outcome.rejected),
    );
    Ok(outcome)
}

pub fn run_dedup(
    input: &Path,
    output: &Path,
    report_path: Option<&Path>,
    config: &DedupConfig,
) -> Result<CascadeReport> {
    require_input(input)?;
    let pairs: Vec<ParallelPair> = read_all(input)?;
    // dedup is keyed on the English side of each pair
    let keys: Vec<(String, String)> = pairs
        .iter()
        .map(|p| (p.id.clone(), english_side(p).to_string()))
        .collect();
    let (survivors, report) = cascade(&keys, config, &HashedBowProvider)?;
    let mut out = JsonlWriter::create(output)?;
    for &i in &survivors {
        out.write(&pairs[i])?;
    }
    out.finish()?;
    if let Some(path) = report_path {
        write_json(path, &report)?;
    }
    log_stage(
        "dedup",
        &format!("{} -> {} records", pairs.len(), survivors.len()),
    );
    Ok(report)
}

/// Run a single cascade stage, or the whole cascade for "all".
pub fn run_dedup_stage(
    stage: &str,
    input: &Path,
    output: &Path,
    report_path: Option<&Path>,
    config: &DedupConfig,
) -> Result<()> {
    if stage == "all" {
        run_dedup(input, output, report_path, config)?;
        return Ok(());
    }
    require_input(input)?;
    let pairs: Vec<ParallelPair> = read_all(input)?;
    let keys: Vec<(String, String)> = pairs
        .iter()
        .map(|p| (p.id.clone(), english_side(p).to_string()))
        .collect();
    let (survivors, stage_report) = match stage {
        "exact" => curation_core::dedup::exact_dedup(&keys),
        "near" => curation_core::dedup::near_dedup(&keys, config.jaccard_threshold, config.seed),
        "semantic" => curation_core::dedup::semantic_dedup(
            &keys,
            &HashedBowProvider,
            config.cosine_threshold,
        )?,
        other => bail!("unknown dedup stage: {other}"),
    };
    let mut out = JsonlWriter::create(output)?;
    for &i in &survivors {
        out.write(&pairs[i])?;
    }
    out.finish()?;
    if let Some(path) = report_path {
        write_json(
            path,
            &CascadeReport {
                stages: vec![stage_report],
            },
        )?;
    }
    log_stage(
        "dedup",
        &format!("{stage}: {} -> {} records", pairs.len(), survivors.len()),
    );
    Ok(())
}

fn english_side(pair: &ParallelPair) -> &str {
    if pair.source_lang.starts_with("en") {
        &pair.source_text
    } else {
        &pair.target_text
    }
}

pub fn run_score_offline(offline: &Path, output: &Path) -> Result<usize> {
    require_input(offline)?;
    let mut scores = Vec::new();
    for record in JsonlReader::<TopKLogprobs>::open(offline)? {
        scores.push(sample_score(&record?)?);
    }
    scores.sort_by(|a, b| a.id.cmp(&b.id));
    let mut out = JsonlWriter::create(output)?;
    for s in &scores {
        out.write(s)?;
    }
    out.finish()?;
    log_stage("score", &format!("scored {} samples offline", scores.len()));
    Ok(scores.len())
}

/// Checkpoint cadence for long remote scoring runs.
const CHECKPOINT_EVERY: usize = 1000;

pub fn run_score_online(
    input: &Path,
    output: &Path,
    config: &ProbeConfig,
    jobs: usize,
) -> Result<usize> {
    require_input(input)?;
    let conversations: Vec<Conversation> = read_all(input)?;

    // resume: skip ids already present in a previous partial output
    let mut done: HashSet<String> = HashSet::new();
    let checkpoint = output.with_extension("ckpt.jsonl");
    let mut scores: Vec<SampleScore> = if checkpoint.exists() {
        let prior: Vec<SampleScore> = read_all(&checkpoint)?;
        done.extend(prior.iter().map(|s| s.id.clone()));
        prior
    } else {
        Vec::new()
    };

    let pending: Vec<&Conversation> = conversations
        .iter()
        .filter(|c| !done.contains(&c.id))
        .collect();

    let jobs = jobs.max(1);
    for batch in pending.chunks(CHECKPOINT_EVERY) {
        let batch_scores = std::sync::Mutex::new(Vec::new());
        let next = std::sync::atomic::AtomicUsize::new(0);
        std::thread::scope(|scope| -> Result<()> {
            let mut handles = Vec::new();
            for _ in 0..jobs.min(batch.len()) {
                handles.push(scope.spawn(|| -> Result<()> {
                    loop {
                        let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        if i >= batch.len() {
                            return Ok(());
                        }
                        let conv = batch[i];
                        let prompt = build_probe_prompt(conv)?;
                        let logprobs = probe(&prompt, config, &conv.id)?;
                        let score = sample_score(&logprobs)?;
                        batch_scores.lock().unwrap().push(score);
                    }
                }));
            }
            for h in handles {
                h.join().map_err(|_| anyhow!("score worker panicked"))??;
            }
            Ok(())
        })?;
        scores.extend(batch_scores.into_inner().unwrap());
        // results are keyed by id; checkpoint order is irrelevant
        let mut ckpt = JsonlWriter::create(&checkpoint)?;
        for s in &scores {
            ckpt.write(s)?;
        }
        ckpt.finish()?;
    }

    scores.sort_by(|a, b| a.id.cmp(&b.id));
    let mut out = JsonlWriter::create(output)?;
    for s in &scores {
        out.write(s)?;
    }
    out.finish()?;
    let _ = std::fs::remove_file(&checkpoint);
    log_stage("score", &format!("scored {} samples", scores.len()));
    Ok(scores.len())
}

pub fn run_select(scores_path: &Path, n: usize, output: &Path) -> Result<usize> {
    require_input(scores_path)?;
    let reader = JsonlReader::<SampleScore>::open(scores_path)?;
    let scores = reader.collect::<Result<Vec<_>, _>>()?;
    let selected = rank_and_select(scores, n);
    let mut file = std::io::BufWriter::new(std::fs::File::create(output)?);
    for id in &selected {
        writeln!(file, "{id}")?;
    }
    file.flush()?;
    log_stage("select", &format!("selected {} ids", selected.len()));
    Ok(selected.len())
}

pub fn run_format_pairs(
    input: &Path,
    output: &Path,
    templates: Option<&Path>,
    config: &FormatterConfig,
    dataset: &str,
) -> Result<usize> {
    require_input(input)?;
    let bank = match templates {
        Some(dir) => TemplateBank::load(dir)?,
        None => TemplateBank::bundled(),
    };
    let pairs: Vec<ParallelPair> = read_all(input)?;
    let conversations = format_pairs(&pairs, &bank, config, dataset);
    let mut out = JsonlWriter::create(output)?;
    for c in &conversations {
        c.validate()?;
        out.write(c)?;
    }
    out.finish()?;
    log_stage(
        "format",
        &format!("{} pairs -> {} conversations", pairs.len(), conversations.len()),
    );
    Ok(conversations.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum JobKind {
    Translation,
    Culture,
    Replay,
}

#[derive(Debug, Deserialize)]
struct TranslationRequest {
    id: String,
    text: String,
    source_lang: String,
    target_lang: String,
}

#[derive(Debug, Deserialize)]
struct CultureRequest {
    id: String,
    question: String,
    persona: String,
    cultural_context: String,
}

#[derive(Debug, Deserialize)]
struct ReplayRequest {
    id: String,
    prompt: String,
    reasoning: JobReasoning,
}

pub fn run_format_jobs(kind: JobKind, input: &Path, output: &Path) -> Result<usize> {
    require_input(input)?;
    let mut out = JsonlWriter::create(output)?;
    let mut count = 0usize;
    match kind {
        JobKind::Translation => {
            for record in JsonlReader::<TranslationRequest>::open(input)? {
                let r = record?;
                let job: GenerationJob =
                    build_translation_job(&r.id, &r.text, &r.source_lang, &r.target_lang)?;
                out.write(&job)?;
                count += 1;
            }
        }
        JobKind::Culture => {
            for record in JsonlReader::<CultureRequest>::open(input)? {
                let r = record?;
                let job = build_culture_job(&r.id, &r.question, &r.persona, &r.cultural_context)?;
                out.write(&job)?;
                count += 1;
            }
        }
        JobKind::Replay => {
            for record in JsonlReader::<ReplayRequest>::open(input)? {
                let r = record?;
                let job = build_replay_job(&r.id, &r.prompt, r.reasoning)?;
                out.write(&job)?;
                count += 1;
            }
        }
    }
    out.finish()?;
    log_stage("format", &format!("built {count} jobs"));
    Ok(count)
}

/// Manifest list entry as provided on input; counts are always recomputed
/// from the records, never trusted.
#[derive(Debug, Clone, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub path: PathBuf,
    pub policy: Policy,
}

pub fn load_manifests(path: &Path, base_dir: &Path) -> Result<Vec<DatasetManifest>> {
    require_input(path)?;
    let entries: Vec<ManifestEntry> = read_all(path)?;
    let mut manifests = Vec::new();
    for e in entries {
        let record_path = if e.path.is_absolute() {
            e.path.clone()
        } else {
            base_dir.join(&e.path)
        };
        require_input(&record_path)
            .with_context(|| format!("dataset {} in manifest list", e.name))?;
        manifests.push(DatasetManifest {
            name: e.name,
            path: record_path,
            sample_count: 0,
            token_count: 0,
            mean_seq_len: 0.0,
            policy: e.policy,
        });
    }
    Ok(manifests)
}

pub fn run_mix(
    manifests: &[DatasetManifest],
    seed: u64,
    output: &Path,
    report_path: Option<&Path>,
    lengths_path: Option<&Path>,
    counter: &dyn TokenCounter,
) -> Result<MixtureReport> {
    let shuffled = assemble(manifests, seed)?;
    let mut out = JsonlWriter::create(output)?;
    for c in &shuffled {
        out.write(c)?;
    }
    out.finish()?;

    let report = mixture_report(manifests, counter)?;
    if let Some(path) = report_path {
        write_json(path, &report)?;
    }
    if let Some(path) = lengths_path {
        let dist = length_distribution(manifests, counter)?;
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(file, "dataset,x,density")?;
        for ds in &dist.datasets {
            for (x, density) in &ds.kde {
                writeln!(file, "{},{:.12},{:.12}", ds.name, x, density)?;
            }
        }
        file.flush()?;
    }
    log_stage(
        "mix",
        &format!(
            "{} datasets, {} samples, on-policy fraction {:.4}",
            report.rows.len(),
            report.totals.samples,
            report.on_policy_fraction
        ),
    );
    Ok(report)
}

pub fn run_mask(
    input: &Path,
    output: &Path,
    counter: &dyn TokenCounter,
    options: MaskOptions,
) -> Result<usize> {
    require_input(input)?;
    let mut out = JsonlWriter::create(output)?;
    let mut count = 0usize;
    for record in JsonlReader::<Conversation>::open(input)? {
        let conv = record?;
        conv.validate()?;
        out.write(&mask_record(&conv, counter, options))?;
        count += 1;
    }
    out.finish()?;
    log_stage("mask", &format!("masked {count} conversations"));
    Ok(count)
}

pub fn run_report(manifests: &[DatasetManifest], counter: &dyn TokenCounter, output: Option<&Path>) -> Result<MixtureReport> {
    let report = mixture_report(manifests, counter)?;
    match output {
        Some(path) => write_json(path, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(report)
}

pub fn run_energy(gpus: f64, tdp: f64, hours: f64, pue: f64) -> (f64, f64) {
    let (gpu_kwh, facility_kwh) = estimate_energy(gpus, tdp, hours, pue);
    println!("gpu_kwh={gpu_kwh:.2} facility_kwh={facility_kwh:.2}");
    (gpu_kwh, facility_kwh)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n")
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}
