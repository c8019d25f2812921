//! Per-window forward/backward over a mini-batch: rayon map vs the
//! sequential fallback. On a single-core machine the two should tie.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fsgpt::data::{generate_fleet, make_windows, FleetSpec};
use fsgpt::model::{init_params, ModelConfig};
use fsgpt::par;
use fsgpt::pretrain::{plan_for, window_loss};
use fsgpt::tokenizer::{prepare, PreparedWindow, TokenizerConfig};
use fsgpt::training::seed_all;

fn bench_batch(c: &mut Criterion) {
    let spec = FleetSpec::desk_c();
    let tok = TokenizerConfig {
        patch_len: 32,
        stride: 32,
        ..TokenizerConfig::default()
    };
    let model = ModelConfig {
        model_dim: 32,
        ffn_hidden: 128,
        ..ModelConfig::desk()
    };
    let ds = generate_fleet(&spec, 8192, 1).unwrap();
    let windows: Vec<PreparedWindow<f32>> = make_windows(&ds, 512, 512)
        .unwrap()
        .iter()
        .map(|w| prepare(w, &spec, &tok).unwrap())
        .collect();
    let store = init_params::<f32>(&model, &tok, 512, std::slice::from_ref(&spec), 1).unwrap();
    let bank = seed_all(1);
    let plans: Vec<_> = windows
        .iter()
        .enumerate()
        .map(|(i, w)| plan_for(&bank, &[i as u64], w, 0.3).unwrap())
        .collect();
    let items: Vec<_> = windows.iter().zip(&plans).collect();

    let mut group = c.benchmark_group("window_loss_batch");
    group.sample_size(10);
    group.bench_with_input(BenchmarkId::new("par_map", items.len()), &items, |b, items| {
        b.iter(|| par::map(items, |_, (w, p)| window_loss(&store, w, p, &model, None, true).unwrap().0))
    });
    group.bench_with_input(BenchmarkId::new("sequential", items.len()), &items, |b, items| {
        b.iter(|| par::map_seq(items, |_, (w, p)| window_loss(&store, w, p, &model, None, true).unwrap().0))
    });
    group.finish();
}

criterion_group!(benches, bench_batch);
criterion_main!(benches);
