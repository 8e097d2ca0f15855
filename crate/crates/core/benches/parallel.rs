//! Sequential against parallel execution for the model passes and for
//! per-subject registration and integration. On a single core the two
//! should match; the gap grows with `GRIN_WORKERS` / available cores.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mvadapt::adaptation::TinyModel;
use mvadapt::config::RunConfig;
use mvadapt::map::Image;
use mvadapt::par::Exec;
use mvadapt::pipeline::{ground_subjects, synthesize_subjects};

const MODES: [(&str, Exec); 2] = [
    ("sequential", Exec::Sequential),
    ("parallel", Exec::Parallel),
];

fn model_passes(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let img = Image::new(
        256,
        256,
        2,
        (0..256 * 256 * 2).map(|_| rng.random::<f64>()).collect(),
    )
    .unwrap();
    let model = TinyModel::seeded(2, 5, 1, 0.1).unwrap();
    let probs = model.forward(&img, Exec::Sequential).unwrap();
    let grad: Vec<f64> = (0..probs.data().len())
        .map(|i| (i % 3) as f64 - 1.0)
        .collect();

    let mut g = c.benchmark_group("tiny_model_256");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::new("forward", name), &exec, |b, &e| {
            b.iter(|| model.forward(&img, e).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("backward", name), &exec, |b, &e| {
            b.iter(|| model.backward(&img, &probs, &grad, e).unwrap())
        });
    }
    g.finish();
}

fn grounding(c: &mut Criterion) {
    let cfg = RunConfig {
        subjects: 2,
        ..RunConfig::default()
    };
    let subjects = synthesize_subjects(&cfg, Exec::Sequential).unwrap();
    let mut g = c.benchmark_group("ground_two_subjects");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &e| {
            b.iter(|| ground_subjects(&subjects, &cfg, e).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, model_passes, grounding);
criterion_main!(benches);
