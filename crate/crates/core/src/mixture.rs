//! Mixture assembly and accounting: merge per-dataset manifests into one
//! shuffled corpus, recompute the per-dataset accounting table, emit
//! length-distribution KDE data, and the energy estimate.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    conversation_tokens, Conversation, DatasetManifest, JsonlReader, ModelError, Policy,
    TokenCounter,
};

#[derive(Debug, Error)]
pub enum MixError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("duplicate ids across datasets: {0:?}")]
    DuplicateIds(Vec<String>),
    #[error("record {0} has zero tokens")]
    ZeroTokens(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub sample_count: u64,
    pub token_count: u64,
    pub mean_seq_len: f64,
    pub policy: Policy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub samples: u64,
    pub tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureReport {
    /// Rows sorted ascending by mean sequence length (name tie-break).
    pub rows: Vec<ReportRow>,
    pub totals: Totals,
    pub on_policy_fraction: f64,
    /// Name of the token counter the counts were computed with.
    pub token_counter: String,
}

/// Seeded Fisher-Yates permutation of 0..n. Record payloads are streamed
/// by index, so memory holds one index slot per record, not the records.
pub fn shuffle_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Concatenate all datasets and apply a seeded shuffle. Every input record
/// appears exactly once; duplicate ids across datasets are an error.
pub fn assemble(
    manifests: &[DatasetManifest],
    seed: u64,
) -> Result<Vec<Conversation>, MixError> {
    let mut records: Vec<Conversation> = Vec::new();
    for m in manifests {
        for rec in JsonlReader::<Conversation>::open(&m.path)? {
            records.push(rec?);
        }
    }
    let mut seen = HashSet::new();
    let mut collisions = Vec::new();
    for r in &records {
        if !seen.insert(r.id.as_str()) {
            collisions.push(r.id.clone());
        }
    }
    if !collisions.is_empty() {
        return Err(MixError::DuplicateIds(collisions));
    }
    let order = shuffle_indices(records.len(), seed);
    let mut out = Vec::with_capacity(records.len());
    let mut slots: Vec<Option<Conversation>> = records.into_iter().map(Some).collect();
    for i in order {
        out.push(slots[i].take().expect("each index used once"));
    }
    Ok(out)
}

/// Per-dataset counts are recomputed from the records on disk, never
/// trusted from the manifest.
pub fn report(
    manifests: &[DatasetManifest],
    counter: &dyn TokenCounter,
) -> Result<MixtureReport, MixError> {
    let mut rows = Vec::with_capacity(manifests.len());
    let mut on_policy_samples = 0u64;
    for m in manifests {
        let mut samples = 0u64;
        let mut tokens = 0u64;
        for rec in JsonlReader::<Conversation>::open(&m.path)? {
            let conv = rec?;
            samples += 1;
            tokens += conversation_tokens(&conv, counter);
        }
        if m.policy == Policy::On {
            on_policy_samples += samples;
        }
        rows.push(ReportRow {
            name: m.name.clone(),
            sample_count: samples,
            token_count: tokens,
            mean_seq_len: if samples == 0 {
                0.0
            } else {
                tokens as f64 / samples as f64
            },
            policy: m.policy,
        });
    }
    rows.sort_by(|a, b| {
        a.mean_seq_len
            .partial_cmp(&b.mean_seq_len)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.name.cmp(&b.name))
    });
    let totals = Totals {
        samples: rows.iter().map(|r| r.sample_count).sum(),
        tokens: rows.iter().map(|r| r.token_count).sum(),
    };
    let on_policy_fraction = if totals.samples == 0 {
        0.0
    } else {
        on_policy_samples as f64 / totals.samples as f64
    };
    Ok(MixtureReport {
        rows,
        totals,
        on_policy_fraction,
        token_counter: counter.name().to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetLengths {
    pub name: String,
    /// log10 of each record's token count.
    pub log10_tokens: Vec<f64>,
    pub bandwidth: f64,
    /// (x, density) points of the Gaussian KDE over log10 token counts.
    pub kde: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthDistribution {
    pub datasets: Vec<DatasetLengths>,
}

/// Silverman's rule on the log10 values, floored so near-constant
/// datasets still get a usable curve.
pub const BANDWIDTH_FLOOR: f64 = 0.01;
pub const KDE_GRID_POINTS: usize = 256;
/// Evaluation grid extends this many bandwidths beyond the data extremes.
pub const KDE_GRID_PAD: f64 = 4.0;

pub fn silverman_bandwidth(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if values.len() < 2 {
        return BANDWIDTH_FLOOR;
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let std = var.sqrt();

    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| {
        let pos = p * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    };
    let iqr = q(0.75) - q(0.25);

    let spread = if iqr > 0.0 {
        std.min(iqr / 1.34)
    } else {
        std
    };
    (0.9 * spread * n.powf(-0.2)).max(BANDWIDTH_FLOOR)
}

/// Evaluate the Gaussian KDE sum directly at one point.
pub fn kde_density(values: &[f64], bandwidth: f64, x: f64) -> f64 {
    let norm = 1.0 / (values.len() as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    values
        .iter()
        .map(|&v| (-((x - v) / bandwidth).powi(2) / 2.0).exp())
        .sum::<f64>()
        * norm
}

pub fn kde_curve(values: &[f64], bandwidth: f64) -> Vec<(f64, f64)> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min) - KDE_GRID_PAD * bandwidth;
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + KDE_GRID_PAD * bandwidth;
    (0..KDE_GRID_POINTS)
        .map(|i| {
            let x = lo + (hi - lo) * i as f64 / (KDE_GRID_POINTS - 1) as f64;
            (x, kde_density(values, bandwidth, x))
        })
        .collect()
}

/// Per-dataset KDE over log10 token counts, datasets ordered by ascending
/// mean length to match the accounting table. A zero-token record is an
/// error, naming the record.
pub fn length_distribution(
    manifests: &[DatasetManifest],
    counter: &dyn TokenCounter,
) -> Result<LengthDistribution, MixError> {
    let mut datasets = Vec::with_capacity(manifests.len());
    for m in manifests {
        let mut logs = Vec::new();
        for rec in JsonlReader::<Conversation>::open(&m.path)? {
            let conv = rec?;
            let tokens = conversation_tokens(&conv, counter);
            if tokens == 0 {
                return Err(MixError::ZeroTokens(conv.id));
            }
            logs.push((tokens as f64).log10());
        }
        let bandwidth = silverman_bandwidth(&logs);
        let kde = kde_curve(&logs, bandwidth);
        datasets.push(DatasetLengths {
            name: m.name.clone(),
            log10_tokens: logs,
            bandwidth,
            kde,
        });
    }
    datasets.sort_by(|a, b| {
        let mean = |d: &DatasetLengths| d.log10_tokens.iter().sum::<f64>() / d.log10_tokens.len() as f64;
        mean(a)
            .partial_cmp(&mean(b))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.name.cmp(&b.name))
    });
    Ok(LengthDistribution { datasets })
}

pub fn trapezoid_integral(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

/// gpu_kwh = gpus * tdp_watts * hours / 1000; facility_kwh applies PUE.
/// No rounding until display.
pub fn estimate_energy(gpus: f64, tdp_watts: f64, hours: f64, pue: f64) -> (f64, f64) {
    let gpu_kwh = gpus * tdp_watts * hours / 1000.0;
    (gpu_kwh, gpu_kwh * pue)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{JsonlWriter, Message, ReasoningMode, WhitespaceCounter};
    use std::path::PathBuf;

    fn write_dataset(dir: &std::path::Path, name: &str, convs: &[Conversation]) -> DatasetManifest {
        let path = dir.join(format!("{name}.jsonl"));
        let mut w = JsonlWriter::create(&path).unwrap();
        for c in convs {
            w.write(c).unwrap();
        }
        w.finish().unwrap();
        DatasetManifest {
            name: name.to_string(),
            path,
            sample_count: convs.len() as u64,
            token_count: 0,
            mean_seq_len: 0.0,
            policy: if name.ends_with("-on") { Policy::On } else { Policy::Off },
        }
    }

    fn conv(id: &str, user: &str, assistant: &str) -> Conversation {
        Conversation {
            id: id.to_string(),
            dataset: "t".to_string(),
            messages: vec![Message::user(user), Message::assistant(assistant)],
            policy: Policy::Off,
            reasoning_mode: ReasoningMode::NotApplicable,
        }
    }

    #[test]
    fn assemble_is_permutation_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let m1 = write_dataset(
            dir.path(),
            "a",
            &[conv("a1", "one", "un"), conv("a2", "two", "dau"), conv("a3", "three", "tri")],
        );
        let m2 = write_dataset(dir.path(), "b", &[conv("b1", "four", "pedwar"), conv("b2", "five", "pump")]);
        let manifests = vec![m1, m2];

        let out1 = assemble(&manifests, 9).unwrap();
        let out2 = assemble(&manifests, 9).unwrap();
        assert_eq!(out1, out2);
        assert_eq!(out1.len(), 5);
        let ids: HashSet<&str> = out1.iter().map(|c| c.id.as_str()).collect();
        assert_eq!(ids.len(), 5);
    }

    #[test]
    fn different_seeds_differ() {
        let a = shuffle_indices(1000, 1);
        let b = shuffle_indices(1000, 2);
        assert_ne!(a, b);
    }

    #[test]
    fn assemble_rejects_duplicate_ids() {
        let dir = tempfile::tempdir().unwrap();
        let m1 = write_dataset(dir.path(), "a", &[conv("x", "one", "un")]);
        let m2 = write_dataset(dir.path(), "b", &[conv("x", "two", "dau")]);
        assert!(matches!(
            assemble(&[m1, m2], 0),
            Err(MixError::DuplicateIds(_))
        ));
    }

    #[test]
    fn report_recomputes_and_orders() {
        let dir = tempfile::tempdir().unwrap();
        // "long" has mean 6 tokens/sample, "short-on" has mean 2
        let long = write_dataset(
            dir.path(),
            "long",
            &[conv("l1", "one two three", "un dau tri")],
        );
        let short = write_dataset(
            dir.path(),
            "short-on",
            &[conv("s1", "hi", "su"), conv("s2", "lo", "is")],
        );
        let rep = report(&[long, short], &WhitespaceCounter).unwrap();
        assert_eq!(rep.rows[0].name, "short-on");
        assert_eq!(rep.rows[0].token_count, 4);
        assert_eq!(rep.rows[0].mean_seq_len, 2.0);
        assert_eq!(rep.rows[1].token_count, 6);
        assert_eq!(rep.totals.samples, 3);
        assert_eq!(rep.totals.tokens, 10);
        assert!((rep.on_policy_fraction - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn all_on_policy_fraction_is_one() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(dir.path(), "only-on", &[conv("c1", "a b", "c d")]);
        let rep = report(&[m], &WhitespaceCounter).unwrap();
        assert_eq!(rep.on_policy_fraction, 1.0);
    }

    #[test]
    fn kde_degenerate_peak() {
        let values = vec![2.0; 50]; // log10(100)
        let bw = silverman_bandwidth(&values);
        assert_eq!(bw, BANDWIDTH_FLOOR);
        let curve = kde_curve(&values, bw);
        let peak = curve
            .iter()
            .cloned()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        assert!((peak.0 - 2.0).abs() < 0.01);
    }

    #[test]
    fn kde_bimodal_symmetry() {
        let values = vec![1.0, 3.0]; // log10 of {10, 1000}
        let bw = 0.2;
        assert!((kde_density(&values, bw, 1.0) - kde_density(&values, bw, 3.0)).abs() < 1e-12);
    }

    #[test]
    fn kde_matches_direct_gaussian_sum() {
        let values = [1.0f64, 1.5, 2.0, 2.5, 3.7];
        let bw = 0.3;
        for x in [1.2, 2.1, 3.0] {
            let direct: f64 = values
                .iter()
                .map(|&v| {
                    let z = (x - v) / bw;
                    (-z * z / 2.0).exp() / (bw * (2.0 * std::f64::consts::PI).sqrt())
                })
                .sum::<f64>()
                / values.len() as f64;
            assert!((kde_density(&values, bw, x) - direct).abs() < 1e-9);
        }
    }

    #[test]
    fn kde_integrates_to_one() {
        let values: Vec<f64> = (0..100).map(|i| 1.0 + 0.02 * i as f64).collect();
        let bw = silverman_bandwidth(&values);
        let curve = kde_curve(&values, bw);
        let integral = trapezoid_integral(&curve);
        assert!((integral - 1.0).abs() < 0.01, "integral {integral}");
    }

    #[test]
    fn zero_token_record_errors() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(dir.path(), "z", &[conv("empty", "", "")]);
        assert!(matches!(
            length_distribution(&[m], &WhitespaceCounter),
            Err(MixError::ZeroTokens(id)) if id == "empty"
        ));
    }

    #[test]
    fn energy_arithmetic() {
        let (gpu, facility) = estimate_energy(8.0, 700.0, 9.25, 1.1);
        assert!((gpu - 51.8).abs() < 1e-9);
        assert!((facility - 56.98).abs() < 1e-9);
        assert_eq!(estimate_energy(8.0, 700.0, 0.0, 1.1), (0.0, 0.0));
        assert_eq!(estimate_energy(1.0, 1000.0, 1.0, 1.0), (1.0, 1.0));
    }

    #[test]
    fn manifest_paths_unused_are_not_touched() {
        // report on an empty manifest list is a valid empty report
        let rep = report(&[], &WhitespaceCounter).unwrap();
        assert_eq!(rep.totals.samples, 0);
        assert_eq!(rep.on_policy_fraction, 0.0);
        let _ = PathBuf::new();
    }
}
