//! Criterion benchmarks for the hot paths: a forward pass at the default
//! model size, one training epoch on a small batch, and metric evaluation.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use nexus_core::tensor::Array;
use nexus_core::{data, metrics, model, rng, train, NexusConfig};

fn bench_forward(c: &mut Criterion) {
    let cfg = NexusConfig::default();
    let params = model::init_params(&cfg, 0).unwrap();
    let mut r = rng::stream(0, "bench.forward");
    let x = Array::randn(vec![cfg.sites, cfg.lookback, cfg.features], 1.0, &mut r);
    c.bench_function("forward_default_config", |b| {
        b.iter(|| model::predict(&cfg, &params, black_box(&x)).unwrap())
    });
}

fn bench_train_epoch(c: &mut Criterion) {
    let cfg = NexusConfig {
        lookback: 24,
        rank: 8,
        mix_rank: 4,
        d_hidden: 16,
        head_hidden: 8,
        dropout_rate: 0.0,
        ..NexusConfig::default()
    };
    let mut r = rng::stream(0, "bench.train");
    let windows: Vec<data::WindowSample> = (0..16)
        .map(|i| {
            let x = Array::randn(vec![cfg.sites, cfg.lookback, cfg.features], 1.0, &mut r);
            let y = Array::randn(vec![cfg.sites * cfg.output_species], 1.0, &mut r);
            data::WindowSample {
                x,
                y,
                t_target: chrono_epoch(i),
            }
        })
        .collect();
    let tc = train::TrainConfig {
        max_epochs: 1,
        patience: 1,
        batch_size: 16,
        ..train::TrainConfig::default()
    };
    c.bench_function("train_epoch_16_windows", |b| {
        b.iter(|| {
            let mut params = model::init_params(&cfg, 0).unwrap();
            train::train(&cfg, &mut params, &windows, &windows[..4], &tc).unwrap()
        })
    });
}

fn chrono_epoch(i: usize) -> chrono::DateTime<chrono::Utc> {
    chrono::DateTime::from_timestamp(i as i64 * data::STEP_SECONDS, 0).unwrap()
}

fn bench_metrics(c: &mut Criterion) {
    let mut r = rng::stream(0, "bench.metrics");
    let y = Array::randn(vec![10_000], 1.0, &mut r);
    let yhat = Array::randn(vec![10_000], 1.0, &mut r);
    c.bench_function("metrics_r2_rmse_10k", |b| {
        b.iter(|| {
            let a = metrics::r2(black_box(y.data()), black_box(yhat.data())).unwrap();
            let b = metrics::rmse(y.data(), yhat.data()).unwrap();
            (a, b)
        })
    });
}

criterion_group!(benches, bench_forward, bench_train_epoch, bench_metrics);
criterion_main!(benches);
