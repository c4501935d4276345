use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use segpos::analysis::pca_cumulative_variance;
use segpos::corpus::{gen_synthetic, make_windows, SyntheticConfig};
use segpos::encodings::{sinusoidal_pe, EncodingConfig, Scheme};
use segpos::inference::{beam_search, default_max_len, DecodeConfig};
use segpos::model::{prepare_window, Mode, Model, ModelConfig, TrainWindow};
use segpos::objective::LossConfig;

fn encodings(c: &mut Criterion) {
    let mut g = c.benchmark_group("sinusoidal_pe");
    for (rows, dim) in [(256, 64), (1024, 512)] {
        g.bench_with_input(
            BenchmarkId::from_parameter(format!("{rows}x{dim}")),
            &(rows, dim),
            |b, &(r, d)| b.iter(|| sinusoidal_pe(black_box(r), black_box(d)).unwrap()),
        );
    }
    g.finish();
}

fn pca(c: &mut Criterion) {
    let mut g = c.benchmark_group("pca");
    g.sample_size(10);
    for (rows, dim) in [(256, 64), (1024, 512)] {
        let pe = sinusoidal_pe(rows, dim).unwrap();
        g.bench_function(format!("{rows}x{dim}"), |b| {
            b.iter(|| pca_cumulative_variance(black_box(pe.as_array().view())).unwrap())
        });
    }
    g.finish();
}

fn setup() -> (Model, Vec<TrainWindow>) {
    let corpus = gen_synthetic(
        &SyntheticConfig {
            train_docs: 16,
            dev_docs: 0,
            test_docs: 0,
            contrastive_examples: 0,
            ..SyntheticConfig::default()
        },
        1,
    )
    .unwrap();
    let cfg = ModelConfig::desk(corpus.vocab.len());
    let mut enc = EncodingConfig::plain(cfg.d_model, 4);
    enc.scheme = Scheme::Shift;
    enc.persistent = true;
    let windows = corpus
        .train
        .iter()
        .flat_map(|d| make_windows(d, 4).unwrap())
        .map(|w| prepare_window(&w, &enc).unwrap())
        .collect();
    (Model::new(cfg, enc, 1).unwrap(), windows)
}

fn model(c: &mut Criterion) {
    let (model, windows) = setup();
    let loss = LossConfig::default();
    let batch = &windows[..16];
    let tokens: usize = batch.iter().map(TrainWindow::num_tokens).sum();
    let mut g = c.benchmark_group("model");
    g.throughput(criterion::Throughput::Elements(tokens as u64));
    g.bench_function("loss_16_windows", |b| {
        b.iter(|| model.loss(black_box(batch), &loss).unwrap())
    });
    g.bench_function("grad_16_windows", |b| {
        b.iter(|| model.grad(black_box(batch), &loss, Mode::Eval).unwrap())
    });
    g.finish();

    let w = windows.iter().find(|w| w.k_eff == 4).unwrap();
    let max_len = default_max_len(w.src.tokens.len());
    let mut g = c.benchmark_group("decode");
    g.sample_size(20);
    for beam in [1, 4] {
        g.bench_with_input(BenchmarkId::new("beam", beam), &beam, |b, &beam| {
            b.iter(|| beam_search(&model, &w.src, w.k_eff, DecodeConfig { beam, alpha: 0.6 }, max_len).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, encodings, pca, model);
criterion_main!(benches);
