//! Data-parallel vs sequential batch inference for the two sequence
//! classifiers. Models carry random weights; the arithmetic is identical to
//! trained ones, so the comparison isolates the threading overhead.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use tagtriad_core::lstm::{LstmClassifier, LstmConfig};
use tagtriad_core::rng::Rng;
use tagtriad_core::transformer::{Encoder, EncoderConfig};
use tagtriad_core::vocab::{EncodedSequence, CLS, PAD, SEP};

fn random_batch(
    n: usize,
    max_len: usize,
    vocab: usize,
    framed: bool,
    seed: u64,
) -> Vec<EncodedSequence> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| {
            let body = 3 + rng.below(max_len.saturating_sub(if framed { 5 } else { 3 }));
            let mut ids = Vec::with_capacity(max_len);
            if framed {
                ids.push(CLS);
            }
            for _ in 0..body {
                ids.push(5 + rng.below(vocab - 5));
            }
            if framed {
                ids.push(SEP);
            }
            let true_length = ids.len();
            ids.resize(max_len, PAD);
            EncodedSequence { ids, true_length }
        })
        .collect()
}

fn lstm_batch(c: &mut Criterion) {
    let vocab = 800;
    let cfg = LstmConfig::desk_profile(vocab, 10, 7);
    let max_len = cfg.max_len;
    let model = LstmClassifier::new(cfg);
    let batch = random_batch(256, max_len, vocab, false, 11);
    let mut group = c.benchmark_group("lstm_batch_inference");
    group.bench_with_input(BenchmarkId::new("sequential", 256), &batch, |b, batch| {
        b.iter(|| model.predict_batch_seq(batch))
    });
    group.bench_with_input(BenchmarkId::new("parallel", 256), &batch, |b, batch| {
        b.iter(|| model.predict_batch(batch))
    });
    group.finish();
}

fn bert_batch(c: &mut Criterion) {
    let vocab = 800;
    let cfg = EncoderConfig::desk_profile(vocab, 10, 7);
    let max_len = cfg.max_len;
    let mut encoder = Encoder::new(cfg).expect("valid config");
    encoder.ensure_classifier_head();
    encoder.provenance.pretrained = true;
    encoder.provenance.finetuned = true;
    let batch = random_batch(64, max_len, vocab, true, 13);
    let mut group = c.benchmark_group("bert_batch_inference");
    group.bench_with_input(BenchmarkId::new("sequential", 64), &batch, |b, batch| {
        b.iter(|| encoder.predict_batch_seq(batch).unwrap())
    });
    group.bench_with_input(BenchmarkId::new("parallel", 64), &batch, |b, batch| {
        b.iter(|| encoder.predict_batch(batch).unwrap())
    });
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = lstm_batch, bert_batch
}
criterion_main!(benches);
