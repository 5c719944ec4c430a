//! Benchmarks for the hot paths: minhash signatures, the dedup cascade,
//! and entropy scoring.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use curation_core::dedup::{
    cascade, minhash_signature, shingle, DedupConfig, HashFamily, HashedBowProvider,
};
use curation_core::uncertainty::{sample_score, TokenLogprob, TopKLogprobs};

fn synthetic_corpus(n: usize, dup_every: usize) -> Vec<(String, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    (0..n)
        .map(|i| {
            let text = if dup_every > 0 && i % dup_every == 0 && i > 0 {
                format!("shared duplicate sentence number {} repeated verbatim", i % 7)
            } else {
                (0..15)
                    .map(|_| format!("w{}", rng.random_range(0..5000u32)))
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            (format!("r{i}"), text)
        })
        .collect()
}

fn bench_minhash(c: &mut Criterion) {
    let family = HashFamily::new(7);
    let text = (0..40)
        .map(|i| format!("word{i}"))
        .collect::<Vec<_>>()
        .join(" ");
    let shingles = shingle(&text);

    let mut group = c.benchmark_group("minhash");
    group.throughput(Throughput::Elements(shingles.len() as u64));
    group.bench_function("signature_40_words", |b| {
        b.iter(|| minhash_signature(black_box(&shingles), &family))
    });
    group.finish();
}

fn bench_cascade(c: &mut Criterion) {
    let mut group = c.benchmark_group("cascade");
    group.sample_size(10);
    for &n in &[500usize, 2_000] {
        let corpus = synthetic_corpus(n, 10);
        group.throughput(Throughput::Elements(n as u64));
        group.bench_function(format!("records_{n}"), |b| {
            b.iter_batched(
                || corpus.clone(),
                |records| cascade(&records, &DedupConfig::default(), &HashedBowProvider).unwrap(),
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

fn bench_scoring(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let sample = TopKLogprobs {
        id: "s".to_string(),
        positions: (0..32)
            .map(|_| {
                (0..20)
                    .map(|j| TokenLogprob {
                        token: format!("t{j}"),
                        logprob: -rng.random_range(0.0..10.0f64),
                    })
                    .collect()
            })
            .collect(),
    };
    c.bench_function("sample_score_32x20", |b| {
        b.iter(|| sample_score(black_box(&sample)).unwrap())
    });
}

criterion_group!(benches, bench_minhash, bench_cascade, bench_scoring);
criterion_main!(benches);
