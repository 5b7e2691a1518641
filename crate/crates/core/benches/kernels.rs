use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use vitlite::ffn::reparam_sweep_with;
use vitlite::model::{build_model, BlockVariant, ForwardOptions, ModelConfig};
use vitlite::ops::matmul_exec;
use vitlite::par::Exec;
use vitlite::rng::Rng;

const POLICIES: [(&str, Exec); 2] = [
    ("sequential", Exec::Sequential),
    ("parallel", Exec::Parallel),
];

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [64, 256] {
        let mut rng = Rng::seed(0);
        let a = rng.normal_tensor(&[n, n], 1.0);
        let b = rng.normal_tensor(&[n, n], 1.0);
        for (name, exec) in POLICIES {
            g.bench_with_input(BenchmarkId::new(name, n), &n, |bch, _| {
                bch.iter(|| matmul_exec(exec, black_box(&a), black_box(&b)).unwrap())
            });
        }
    }
    g.finish();
}

fn reparam(c: &mut Criterion) {
    let mut g = c.benchmark_group("reparam_sweep");
    g.sample_size(10);
    for (name, exec) in POLICIES {
        g.bench_function(name, |b| {
            b.iter(|| reparam_sweep_with(exec, 32, 0).unwrap())
        });
    }
    g.finish();
}

fn forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("toy_forward");
    g.sample_size(10);
    let x = Rng::seed(1).normal_tensor(&[8, 3, 16, 16], 1.0);
    for variant in [BlockVariant::Vanilla, BlockVariant::Ours] {
        let model = build_model(&ModelConfig::toy().with_variant(variant)).unwrap();
        for (name, exec) in POLICIES {
            let opts = ForwardOptions {
                exec,
                ..Default::default()
            };
            g.bench_function(BenchmarkId::new(name, format!("{variant:?}")), |b| {
                b.iter(|| model.forward(black_box(&x), opts).unwrap())
            });
        }
    }
    g.finish();
}

criterion_group!(benches, matmul, reparam, forward);
criterion_main!(benches);
