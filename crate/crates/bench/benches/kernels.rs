use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use ltn_bench::{bench_config, random_matrix};
use ltn_core::latent_basis::orthogonalize;
use ltn_core::trainer_eval::Trainer;

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [16usize, 64, 128] {
        let a = random_matrix(n, n, 1);
        let b = random_matrix(n, n, 2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(a.matmul(&b).unwrap()))
        });
    }
    group.finish();
}

fn gram_schmidt(c: &mut Criterion) {
    let mut group = c.benchmark_group("gram_schmidt");
    for m in [4usize, 8, 16] {
        let raw = random_matrix(64, m, 3);
        group.bench_with_input(BenchmarkId::new("dim64", m), &m, |bench, _| {
            bench.iter(|| black_box(orthogonalize(&raw).unwrap()))
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(20);
    for variant in ["none", "v3"] {
        let mut cfg = bench_config();
        cfg.set("variant", variant).unwrap();
        cfg.steps = usize::MAX / 2;
        let mut trainer = Trainer::new(cfg).unwrap();
        group.bench_function(variant, |bench| bench.iter(|| black_box(trainer.step().unwrap())));
    }
    group.finish();
}

criterion_group!(benches, matmul, gram_schmidt, train_step);
criterion_main!(benches);
