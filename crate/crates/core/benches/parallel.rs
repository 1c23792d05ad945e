use asr_core::asrloop::{compare_strategies, AsrConfig, DatasetSpec, SamplerKind, Strategy};
use asr_core::metrics::recall_at_k_with;
use asr_core::par::Parallelism;
use asr_core::rng;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use rand::Rng as _;

const MODES: [(&str, Parallelism); 2] = [("rayon", Parallelism::Rayon), ("sequential", Parallelism::Sequential)];

fn recall(c: &mut Criterion) {
    let mut group = c.benchmark_group("recall_at_k");
    for n in [250, 1000] {
        let mut rng = rng::seeded(0);
        let emb = Array2::from_shape_simple_fn((n, 16), || rng.random_range(-1.0..1.0));
        let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
        for (name, mode) in MODES {
            group.bench_with_input(BenchmarkId::new(name, n), &n, |b, _| {
                b.iter(|| recall_at_k_with(emb.view(), &labels, &[1, 2, 4, 8], mode).unwrap())
            });
        }
    }
    group.finish();
}

fn comparison(c: &mut Criterion) {
    let mut group = c.benchmark_group("compare_strategies");
    group.sample_size(10);
    let data = DatasetSpec::Blobs { classes: 6, per_class: 40, dim: 8, spread: 1.0, val_fraction: 0.15 };
    let strategies: Vec<Strategy> = [SamplerKind::Random, SamplerKind::AsrPpo]
        .into_iter()
        .map(|sampler| Strategy::new(AsrConfig { sampler, epochs: 3, inner_iters: 4, ..Default::default() }))
        .collect();
    for (name, mode) in MODES {
        group.bench_function(name, |b| {
            b.iter(|| compare_strategies(&strategies, &[0, 1, 2, 3], &data, mode).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, recall, comparison);
criterion_main!(benches);
