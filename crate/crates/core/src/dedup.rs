//! Three-stage deduplication cascade: exact, MinHash-LSH near-duplicate,
//! and semantic. Stages run in order of increasing computational cost, so
//! each stage sees a strictly smaller set than the previous one.
//!
//! All stages use keep-first semantics: the survivor of any duplicate
//! cluster is the earliest record in input order. Near-duplicate candidates
//! found via LSH are verified with the exact shingle-set Jaccard, so LSH
//! banding affects recall only, never precision.

use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

pub const NUM_PERMS: usize = 128;
pub const LSH_BANDS: usize = 8;
pub const LSH_ROWS: usize = 16;

/// Default hash-family seed; override with the CLI seed flag.
pub const DEFAULT_SEED: u64 = 0x5eed_0bad_cafe_f00d;

#[derive(Debug, Error)]
pub enum DedupError {
    #[error("embedding provider failed on record {id}: {msg}")]
    Embedding { id: String, msg: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DedupConfig {
    pub seed: u64,
    pub jaccard_threshold: f64,
    pub cosine_threshold: f64,
}

impl Default for DedupConfig {
    fn default() -> Self {
        DedupConfig {
            seed: DEFAULT_SEED,
            jaccard_threshold: 0.9,
            cosine_threshold: 0.85,
        }
    }
}

/// Lowercase, NFC-normalise, collapse internal whitespace runs to a single
/// space, and strip leading/trailing whitespace.
pub fn normalize_for_hash(text: &str) -> String {
    let folded = text.to_lowercase();
    let composed: String = folded.nfc().collect();
    let mut out = String::with_capacity(composed.len());
    let mut first = true;
    for word in composed.split_whitespace() {
        if !first {
            out.push(' ');
        }
        out.push_str(word);
        first = false;
    }
    out
}

/// Word-unigram shingles of the normalised text.
pub fn shingle(text: &str) -> HashSet<String> {
    normalize_for_hash(text)
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

pub fn jaccard(a: &HashSet<String>, b: &HashSet<String>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// FNV-1a 64-bit. Stable across platforms and runs; used to map shingles
/// into the universal-hash domain and to hash LSH band slices.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// The seeded universal hash family: one (a, b) pair per permutation, with
/// a forced odd. hash_i(x) = a_i * x + b_i over Z_2^64 (multiply-shift).
#[derive(Debug, Clone)]
pub struct HashFamily {
    coeffs: Vec<(u64, u64)>,
}

impl HashFamily {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coeffs = (0..NUM_PERMS)
            .map(|_| (rng.random::<u64>() | 1, rng.random::<u64>()))
            .collect();
        HashFamily { coeffs }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MinHashSignature {
    pub values: [u64; NUM_PERMS],
    /// Set when the shingle set was empty; a sentinel signature never
    /// matches any other signature, including another sentinel.
    pub empty: bool,
}

pub fn minhash_signature(shingles: &HashSet<String>, family: &HashFamily) -> MinHashSignature {
    if shingles.is_empty() {
        return MinHashSignature {
            values: [u64::MAX; NUM_PERMS],
            empty: true,
        };
    }
    let hashed: Vec<u64> = shingles.iter().map(|s| fnv1a(s.as_bytes())).collect();
    let mut values = [u64::MAX; NUM_PERMS];
    for (i, &(a, b)) in family.coeffs.iter().enumerate() {
        let mut min = u64::MAX;
        for &x in &hashed {
            let h = a.wrapping_mul(x).wrapping_add(b);
            if h < min {
                min = h;
            }
        }
        values[i] = min;
    }
    MinHashSignature { values, empty: false }
}

/// Fraction of agreeing signature positions — the MinHash estimate of
/// Jaccard similarity. Sentinels never agree anywhere.
pub fn signature_agreement(a: &MinHashSignature, b: &MinHashSignature) -> f64 {
    if a.empty || b.empty {
        return 0.0;
    }
    let agree = a
        .values
        .iter()
        .zip(b.values.iter())
        .filter(|(x, y)| x == y)
        .count();
    agree as f64 / NUM_PERMS as f64
}

/// LSH index over MinHash signatures: 8 bands x 16 rows. The band/row
/// split puts the collision-probability knee at (1/8)^(1/16) ~ 0.878,
/// just below the 0.9 verification threshold, biasing recall high.
#[derive(Debug, Default)]
pub struct LshIndex {
    buckets: HashMap<(usize, u64), Vec<usize>>,
}

impl LshIndex {
    pub fn new() -> Self {
        LshIndex::default()
    }

    fn band_keys(sig: &MinHashSignature) -> impl Iterator<Item = (usize, u64)> + '_ {
        (0..LSH_BANDS).map(move |band| {
            let slice = &sig.values[band * LSH_ROWS..(band + 1) * LSH_ROWS];
            let mut bytes = Vec::with_capacity(LSH_ROWS * 8);
            for v in slice {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            (band, fnv1a(&bytes))
        })
    }

    pub fn insert(&mut self, sig: &MinHashSignature, record: usize) {
        if sig.empty {
            return;
        }
        for key in Self::band_keys(sig) {
            self.buckets.entry(key).or_default().push(record);
        }
    }

    /// Candidate records sharing at least one band bucket, in insertion
    /// order, without duplicates.
    pub fn query(&self, sig: &MinHashSignature) -> Vec<usize> {
        if sig.empty {
            return Vec::new();
        }
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for key in Self::band_keys(sig) {
            if let Some(bucket) = self.buckets.get(&key) {
                for &r in bucket {
                    if seen.insert(r) {
                        out.push(r);
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// Embedding backends for the semantic stage. Implementations must be
/// deterministic and return unit-L2-norm vectors.
pub trait EmbeddingProvider {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>, String>;
}

/// Reference provider: feature-hashed bag of words over 256 dimensions,
/// signed by one hash bit, L2-normalised. Hermetic stand-in for a real
/// embedding endpoint behind the same trait.
#[derive(Debug, Clone, Copy, Default)]
pub struct HashedBowProvider;

pub const HASHED_BOW_DIM: usize = 256;

impl EmbeddingProvider for HashedBowProvider {
    fn dim(&self) -> usize {
        HASHED_BOW_DIM
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, String> {
        let mut v = vec![0.0f64; HASHED_BOW_DIM];
        for word in normalize_for_hash(text).split_whitespace() {
            let h = fnv1a(word.as_bytes());
            let idx = (h % HASHED_BOW_DIM as u64) as usize;
            let sign = if (h >> 63) & 1 == 0 { 1.0 } else { -1.0 };
            v[idx] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in &mut v {
                *x /= norm;
            }
        }
        Ok(v)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Exact,
    Near,
    Semantic,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    #[serde(rename = "in")]
    pub input: usize,
    pub out: usize,
    pub dropped: usize,
    /// Up to 10 ids of dropped records, for spot checks.
    pub example_drops: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CascadeReport {
    pub stages: Vec<StageReport>,
}

const MAX_EXAMPLE_DROPS: usize = 10;

fn stage_report(stage: Stage, input: usize, out: usize, drops: Vec<String>) -> StageReport {
    StageReport {
        stage,
        input,
        out,
        dropped: input - out,
        example_drops: drops.into_iter().take(MAX_EXAMPLE_DROPS).collect(),
    }
}

/// Keep the first occurrence (input order) of each canonical key string.
/// Returns the indices of survivors, in input order.
pub fn exact_dedup(keys: &[(String, String)]) -> (Vec<usize>, StageReport) {
    let mut seen = HashSet::new();
    let mut kept = Vec::new();
    let mut drops = Vec::new();
    for (i, (id, text)) in keys.iter().enumerate() {
        if seen.insert(normalize_for_hash(text)) {
            kept.push(i);
        } else {
            drops.push(id.clone());
        }
    }
    let report = stage_report(Stage::Exact, keys.len(), kept.len(), drops);
    (kept, report)
}

/// LSH-accelerated near-duplicate removal. A record is dropped iff some
/// earlier-kept record has exact shingle-set Jaccard >= threshold with it;
/// candidates come from the index but verification is always exact.
pub fn near_dedup(
    keys: &[(String, String)],
    threshold: f64,
    seed: u64,
) -> (Vec<usize>, StageReport) {
    let family = HashFamily::new(seed);
    let mut index = LshIndex::new();
    // shingle sets of kept records, indexed by kept order
    let mut kept_shingles: Vec<HashSet<String>> = Vec::new();
    let mut kept = Vec::new();
    let mut drops = Vec::new();

    for (i, (id, text)) in keys.iter().enumerate() {
        let sh = shingle(text);
        let sig = minhash_signature(&sh, &family);
        let duplicate = index
            .query(&sig)
            .into_iter()
            .any(|k| jaccard(&sh, &kept_shingles[k]) >= threshold);
        if duplicate {
            drops.push(id.clone());
        } else {
            index.insert(&sig, kept_shingles.len());
            kept_shingles.push(sh);
            kept.push(i);
        }
    }
    let report = stage_report(Stage::Near, keys.len(), kept.len(), drops);
    (kept, report)
}

/// Exhaustive-search semantic stage: drop a record iff its embedding has
/// cosine >= threshold with any earlier-kept embedding.
pub fn semantic_dedup(
    keys: &[(String, String)],
    provider: &dyn EmbeddingProvider,
    threshold: f64,
) -> Result<(Vec<usize>, StageReport), DedupError> {
    let mut kept_vecs: Vec<Vec<f64>> = Vec::new();
    let mut kept = Vec::new();
    let mut drops = Vec::new();
    for (i, (id, text)) in keys.iter().enumerate() {
        let v = provider.embed(text).map_err(|msg| DedupError::Embedding {
            id: id.clone(),
            msg,
        })?;
        let duplicate = kept_vecs.iter().any(|k| cosine(&v, k) >= threshold);
        if duplicate {
            drops.push(id.clone());
        } else {
            kept_vecs.push(v);
            kept.push(i);
        }
    }
    let report = stage_report(Stage::Semantic, keys.len(), kept.len(), drops);
    Ok((kept, report))
}

/// Full cascade: exact -> near -> semantic. `keys` is (id, key text); for
/// parallel pairs the key text is always the English side. Returns survivor
/// indices into `keys`, in input order, plus the per-stage report.
pub fn cascade(
    keys: &[(String, String)],
    config: &DedupConfig,
    provider: &dyn EmbeddingProvider,
) -> Result<(Vec<usize>, CascadeReport), DedupError> {
    let (kept1, r1) = exact_dedup(keys);
    let subset1: Vec<(String, String)> = kept1.iter().map(|&i| keys[i].clone()).collect();

    let (kept2, r2) = near_dedup(&subset1, config.jaccard_threshold, config.seed);
    let subset2: Vec<(String, String)> = kept2.iter().map(|&i| subset1[i].clone()).collect();

    let (kept3, r3) = semantic_dedup(&subset2, provider, config.cosine_threshold)?;

    let survivors: Vec<usize> = kept3.iter().map(|&i| kept1[kept2[i]]).collect();
    Ok((
        survivors,
        CascadeReport {
            stages: vec![r1, r2, r3],
        },
    ))
}
