//! Kernel micro-benchmarks: convolution, the AIC block, and the two
//! matching operators at DAVIS-like feature extents (107×60 at stride 8).

use std::time::Duration;

use criterion::{criterion_group, criterion_main, Criterion};

use lsmvos_bench::{clip_features, random_tensor, seeded_model, soft_gate, unit_features};
use lsmvos_core::aic::aic2d;
use lsmvos_core::matching::{long_term_match_pair, short_term_match_pair, MatchConfig};
use lsmvos_core::numerics::{conv2d, ConvSpec};

fn bench_conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d");
    group.sample_size(10).measurement_time(Duration::from_secs(3));

    let x = random_tensor(1, &[64, 60, 107]);
    let kernel = random_tensor(2, &[64, 64, 3, 3]);
    let spec = ConvSpec::new(kernel, vec![0.0; 64], 1, (1, 1)).unwrap();
    group.bench_function("3x3_64ch_107x60", |b| b.iter(|| conv2d(&x, &spec).unwrap()));

    let x1 = random_tensor(3, &[1153, 60, 107]);
    let k1 = random_tensor(4, &[128, 1153, 1, 1]);
    let spec1 = ConvSpec::new(k1, vec![0.0; 128], 1, (0, 0)).unwrap();
    group.bench_function("1x1_1153to128_107x60", |b| {
        b.iter(|| conv2d(&x1, &spec1).unwrap())
    });
    group.finish();
}

fn bench_aic(c: &mut Criterion) {
    let mut group = c.benchmark_group("aic2d");
    group.sample_size(10).measurement_time(Duration::from_secs(3));
    let model = seeded_model(5);
    let x = random_tensor(6, &[128, 60, 107]);
    group.bench_function("128ch_107x60", |b| {
        b.iter(|| aic2d(&x, &model.branch.local).unwrap())
    });
    group.finish();
}

fn bench_matching(c: &mut Criterion) {
    let mut group = c.benchmark_group("matching");
    group.sample_size(10).measurement_time(Duration::from_secs(5));

    let cur = unit_features(7, 128, 60, 107);
    let prev = unit_features(8, 128, 60, 107);
    let gate = soft_gate(9, 60, 107);
    let cfg = MatchConfig::default();
    group.bench_function("short_term_pair_k8_n256_107x60", |b| {
        b.iter(|| short_term_match_pair(&cur, &prev, &gate, &cfg).unwrap())
    });
    group.bench_function("long_term_pair_n256_107x60", |b| {
        b.iter(|| long_term_match_pair(&cur, &prev, &gate, &cfg).unwrap())
    });

    // the same operators on real encoded features of a procedural clip
    let (f0, f1) = clip_features(320, 192, 11);
    let (h, w) = f0.local_feat.extents();
    let gate_small = soft_gate(12, h, w);
    group.bench_function("short_term_pair_real_features_320x192", |b| {
        b.iter(|| short_term_match_pair(&f1.local_feat, &f0.local_feat, &gate_small, &cfg).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_conv, bench_aic, bench_matching);
criterion_main!(benches);
