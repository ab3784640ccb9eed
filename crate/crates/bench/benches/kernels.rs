use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use ytune::tensor::{self, Tensor};
use ytune::Rng;

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    let mut rng = Rng::new(0);
    for n in [16, 64, 128] {
        let a = rng.normal_tensor(&[n, n], 1.0);
        let b = rng.normal_tensor(&[n, n], 1.0);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| tensor::matmul(black_box(&a), black_box(&b)).unwrap())
        });
    }
    group.finish();
}

fn softmax(c: &mut Criterion) {
    let x: Tensor = Rng::new(1).normal_tensor(&[64, 64], 3.0);
    c.bench_function("softmax_rows 64x64", |b| {
        b.iter(|| tensor::softmax_rows(black_box(&x)))
    });
}

criterion_group!(benches, matmul, softmax);
criterion_main!(benches);
