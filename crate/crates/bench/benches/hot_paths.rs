use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use sigprompt_core::features::{approx_entropy, sample_entropy};
use sigprompt_core::lm::{LmConfig, ToyLm};
use sigprompt_core::prompt::VocabSpec;
use sigprompt_core::vq::{Codebook, PatchBatch, TokenizerConfig, TokenizerModel};

fn quantize(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let book = Codebook::new(
        Array2::from_shape_simple_fn((64, 64), || rng.random_range(-1.0..1.0)),
        0.99,
        1e-5,
    )
    .unwrap();
    let z = Array2::from_shape_simple_fn((256, 64), || rng.random_range(-1.0..1.0));
    c.bench_function("assign 256 vectors, K=64 d=64", |b| {
        b.iter(|| book.assign(black_box(z.view())))
    });
    let one = Array1::from_shape_simple_fn(64, || rng.random_range(-1.0..1.0));
    c.bench_function("quantize one vector", |b| {
        b.iter(|| book.quantize(black_box(one.view())).unwrap())
    });
}

fn tcn_forward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = TokenizerModel::new("b", 1, &TokenizerConfig::default(), &mut rng).unwrap();
    let series: Vec<Array2<f64>> = (0..32)
        .map(|_| Array2::from_shape_simple_fn((1, 128), || rng.random_range(-1.0..1.0)))
        .collect();
    let batch = PatchBatch::from_series(series.iter().map(|s| s.view()), 16).unwrap();
    c.bench_function("encoder forward, 32 series of 128", |b| {
        b.iter(|| model.encode_continuous(black_box(&batch)))
    });
}

fn entropy(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<f64> = (0..512).map(|_| rng.random_range(-1.0..1.0)).collect();
    c.bench_function("sample entropy, N=512", |b| {
        b.iter(|| sample_entropy(black_box(&x), 2, 0.2).unwrap())
    });
    c.bench_function("approximate entropy, N=512", |b| {
        b.iter(|| approx_entropy(black_box(&x), 2, 0.2).unwrap())
    });
}

fn lm_forward(c: &mut Criterion) {
    let words: Vec<String> = (0..200).map(|i| format!("w{i}")).collect();
    let vocab = VocabSpec::build(words.iter().map(String::as_str), &[("b".into(), 64)]).unwrap();
    let cfg = LmConfig {
        d_model: 64,
        n_layers: 2,
        n_heads: 4,
        d_ff: 256,
        context: 256,
        projector_hidden: vec![64],
        ..LmConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cb = Array2::from_shape_simple_fn((64, 32), || rng.random_range(-1.0..1.0));
    let lm = ToyLm::new(cfg, vocab, vec![cb]).unwrap();
    let n = lm.vocab.size();
    let ids: Vec<usize> = (0..120).map(|_| rng.random_range(0..n)).collect();
    c.bench_function("lm forward, 120 tokens", |b| {
        b.iter(|| lm.forward(black_box(&ids)).unwrap())
    });
}

criterion_group!(benches, quantize, tcn_forward, entropy, lm_forward);
criterion_main!(benches);
