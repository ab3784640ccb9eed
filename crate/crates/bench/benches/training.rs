use criterion::{black_box, criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use ytune::heads::Target;
use ytune::store::{FeatureStore, StoreMode};
use ytune::{Optimizer, OptimizerKind};
use ytune_bench::{classifier, encoder, features, filled_store, tokens};

fn encode(c: &mut Criterion) {
    let enc = encoder();
    let mut group = c.benchmark_group("encoder_forward");
    for m in [16, 64] {
        let x = tokens(m, 7);
        group.bench_with_input(BenchmarkId::from_parameter(m), &m, |b, _| {
            b.iter(|| enc.encode(black_box(&x)).unwrap())
        });
    }
    group.finish();
}

/// One optimizer step on cached features: the whole per-batch cost once
/// the encoder is out of the loop.
fn fuser_step(c: &mut Criterion) {
    let enc = encoder();
    let model = classifier(&enc, 3);
    let feats: Vec<_> = (0..16)
        .map(|i| features(&enc, &model, &tokens(64, i)))
        .collect();
    let targets: Vec<Target> = (0..16).map(|i| Target::Class(i % 3)).collect();
    let refs: Vec<&Target> = targets.iter().collect();
    c.bench_function("fuser_step batch16 M64", |b| {
        b.iter_batched(
            || {
                (
                    model.clone(),
                    Optimizer::new(OptimizerKind::default(), 1e-3),
                )
            },
            |(mut m, mut opt)| ytune::trainer::train_step(&mut m, &mut opt, &feats, &refs).unwrap(),
            BatchSize::LargeInput,
        )
    });
}

fn store_get(c: &mut Criterion) {
    let enc = encoder();
    let model = classifier(&enc, 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bench.ytfs");
    let keys = filled_store(&enc, &model, &path, 32, 64);
    let store = FeatureStore::open(&path, StoreMode::Read).unwrap();
    let mut i = 0;
    c.bench_function("store_get M64", |b| {
        b.iter(|| {
            i = (i + 1) % keys.len();
            store.get(black_box(&keys[i])).unwrap()
        })
    });
}

criterion_group!(benches, encode, fuser_step, store_get);
criterion_main!(benches);
