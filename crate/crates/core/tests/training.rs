use std::fs;

use ytune::run::{prepare, Prepared};
use ytune::store::{FeatureStore, StoreMode};
use ytune::synth::{Generator, SyntheticSpec};
use ytune::trainer::{self, warm_start, Checkpoint, TrainConfig};
use ytune::{EncoderConfig, Error, FrozenEncoder, InitStrategy, Model, ModelSpec, TaskKind};

fn encoder_config() -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        hidden: 16,
        heads: 2,
        ffn_dim: 32,
        vocab_size: 100,
        max_len: 24,
        seed: 1,
    }
}

fn data(generator: Generator, size: usize, dev: usize) -> Prepared {
    let spec = SyntheticSpec {
        generator,
        size,
        dev_size: dev,
        classes: 2,
        ..SyntheticSpec::default()
    };
    let (train, dev) = spec.generate().unwrap();
    let here = std::path::Path::new("synthetic");
    prepare(
        &encoder_config(),
        &train,
        Some(&dev),
        None,
        None,
        (here, here),
    )
    .unwrap()
}

fn model(enc: &FrozenEncoder, d: &Prepared) -> Model {
    let mut spec = ModelSpec::new(d.kind, d.labels.clone());
    spec.fuser.heads = 2;
    Model::new(spec, enc, Some(&d.vocab)).unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        patience: None,
        learning_rate: 3e-3,
        ..TrainConfig::default()
    }
}

fn loss_bits(out: &trainer::TrainOutcome) -> Vec<u64> {
    out.history.iter().map(|h| h.train_loss.to_bits()).collect()
}

#[test]
fn cached_and_live_training_are_bit_identical() {
    let enc = FrozenEncoder::new(encoder_config()).unwrap();
    for generator in [
        Generator::KeywordClassification,
        Generator::TriggerBio,
        Generator::SentinelSpanQa,
    ] {
        let d = data(generator, 60, 20);
        let cfg = quick(3);
        let mut live = model(&enc, &d);
        let a = trainer::train(&cfg, &enc, &mut live, &d.train, &d.dev, None).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let mut store = FeatureStore::open(dir.path().join("f.ytfs"), StoreMode::Create).unwrap();
        let fr_cfg = TrainConfig {
            use_feature_store: true,
            ..cfg.clone()
        };
        let mut cached = model(&enc, &d);
        let b = trainer::train(
            &fr_cfg,
            &enc,
            &mut cached,
            &d.train,
            &d.dev,
            Some(&mut store),
        )
        .unwrap();

        assert_eq!(loss_bits(&a), loss_bits(&b), "{generator:?}");
        assert_eq!(a.history, b.history);
        assert_eq!(live.params().byte_hash(), cached.params().byte_hash());
        assert_eq!(store.len(), d.train.len());
    }
}

#[test]
fn read_only_store_cannot_be_populated() {
    let enc = FrozenEncoder::new(encoder_config()).unwrap();
    let d = data(Generator::KeywordClassification, 20, 0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.ytfs");
    // A read-only store that never got populated.
    FeatureStore::open(&path, StoreMode::Create).unwrap();
    let mut store = FeatureStore::open(&path, StoreMode::Read).unwrap();
    let cfg = TrainConfig {
        use_feature_store: true,
        ..quick(2)
    };
    let err = trainer::train(
        &cfg,
        &enc,
        &mut model(&enc, &d),
        &d.train,
        &[],
        Some(&mut store),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Usage(_)), "{err}");
}

#[test]
fn encoder_is_untouched_by_training() {
    let enc = FrozenEncoder::new(encoder_config()).unwrap();
    let before = enc.param_hash();
    let d = data(Generator::KeywordClassification, 40, 10);
    let mut m = model(&enc, &d);
    trainer::train(&quick(5), &enc, &mut m, &d.train, &d.dev, None).unwrap();
    assert_eq!(enc.param_hash(), before);
    assert_eq!(enc.params().grad_buffers(), 0);
    assert_eq!(enc.params().trainable_scalars(), 0);
}

#[test]
fn same_seed_same_run() {
    let enc = FrozenEncoder::new(encoder_config()).unwrap();
    let d = data(Generator::TriggerBio, 40, 10);
    let run = || {
        let mut m = model(&enc, &d);
        let out = trainer::train(&quick(3), &enc, &mut m, &d.train, &d.dev, None).unwrap();
        (loss_bits(&out), m.params().byte_hash())
    };
    assert_eq!(run(), run());
}

#[test]
fn early_stopping_restores_best_parameters() {
    let enc = FrozenEncoder::new(encoder_config()).unwrap();
    let d = data(Generator::KeywordClassification, 60, 30);
    let cfg = TrainConfig {
        epochs: 60,
        patience: Some(3),
        learning_rate: 3e-3,
        ..TrainConfig::default()
    };
    let mut m = model(&enc, &d);
    let out = trainer::train(&cfg, &enc, &mut m, &d.train, &d.dev, None).unwrap();
    let best = out.final_dev().unwrap().primary();
    assert!(out
        .history
        .iter()
        .all(|h| h.dev.as_ref().unwrap().primary() <= best));
    let feats = trainer::encode_examples(&enc, &d.dev, m.feature_mask(), 1).unwrap();
    let (_, now, _) = trainer::evaluate_model(&m, &feats, &d.dev).unwrap();
    assert_eq!(now.primary(), best);
}

#[test]
fn nan_parameters_report_divergence_with_last_good_state() {
    let enc = FrozenEncoder::new(encoder_config()).unwrap();
    let d = data(Generator::KeywordClassification, 20, 0);
    let mut m = model(&enc, &d);
    let id = m.params().find(ytune::fuser::EMBEDDINGS_NAME).unwrap();
    m.params_mut().get_mut(id).value_mut().data_mut()[0] = f64::NAN;
    match trainer::train(&quick(2), &enc, &mut m, &d.train, &[], None) {
        Err(Error::Diverged {
            epoch,
            step,
            last_good,
        }) => {
            assert_eq!((epoch, step), (1, 0));
            assert!(last_good.meta.history.is_empty());
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn checkpoint_round_trip_and_restore() {
    let enc = FrozenEncoder::new(encoder_config()).unwrap();
    let d = data(Generator::SentinelSpanQa, 30, 10);
    let mut m = model(&enc, &d);
    let out = trainer::train(&quick(2), &enc, &mut m, &d.train, &d.dev, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ytck");
    out.checkpoint.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, out.checkpoint);

    let restored = back.restore(&enc, Some(&d.vocab)).unwrap();
    assert_eq!(restored.params().byte_hash(), m.params().byte_hash());

    let other = FrozenEncoder::new(EncoderConfig {
        seed: 2,
        ..encoder_config()
    })
    .unwrap();
    assert!(matches!(
        back.restore(&other, Some(&d.vocab)),
        Err(Error::Config(_))
    ));
}

#[test]
fn damaged_checkpoints_are_format_errors() {
    let enc = FrozenEncoder::new(encoder_config()).unwrap();
    let d = data(Generator::KeywordClassification, 10, 0);
    let bytes = Checkpoint::capture(&model(&enc, &d), &enc, None, &[])
        .to_bytes()
        .unwrap();
    for cut in [0, 3, 15, bytes.len() / 2, bytes.len() - 1] {
        let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "cut {cut}: {err}");
    }
    for at in [0, 5, 20, bytes.len() / 3, bytes.len() - 2] {
        let mut bad = bytes.clone();
        bad[at] ^= 1;
        assert!(
            matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))),
            "flip at {at}"
        );
    }
}

#[test]
fn shape_mismatch_lists_offending_tensors() {
    let enc = FrozenEncoder::new(encoder_config()).unwrap();
    let d = data(Generator::KeywordClassification, 10, 0);
    let mut ckpt = Checkpoint::capture(&model(&enc, &d), &enc, None, &[]);
    ckpt.meta.model.k = 2;
    let err = ckpt.restore(&enc, Some(&d.vocab)).unwrap_err();
    match err {
        Error::Shape(list) => assert!(
            list.iter()
                .any(|s| s.contains(ytune::fuser::EMBEDDINGS_NAME)),
            "{list:?}"
        ),
        other => panic!("expected shape error, got {other}"),
    }
}

#[test]
fn warm_start_copies_fuser_only() {
    let enc = FrozenEncoder::new(encoder_config()).unwrap();
    let src_data = data(Generator::KeywordClassification, 30, 0);
    let mut src = model(&enc, &src_data);
    trainer::train(&quick(2), &enc, &mut src, &src_data.train, &[], None).unwrap();
    let ckpt = Checkpoint::capture(&src, &enc, None, &[]);

    let tgt_data = data(Generator::TriggerBio, 10, 0);
    let mut spec = ModelSpec::new(TaskKind::SequenceLabeling, tgt_data.labels.clone());
    spec.fuser.heads = 2;
    spec.init = InitStrategy::RandomUniform;
    let mut tgt = Model::new(spec, &enc, Some(&tgt_data.vocab)).unwrap();
    let emb = tgt.params().find(ytune::fuser::EMBEDDINGS_NAME).unwrap();
    let emb_before = tgt.params().value(emb).clone();

    let loaded = warm_start(&mut tgt, &ckpt).unwrap();
    let fuser_tensors = tgt
        .named_tensors()
        .iter()
        .filter(|(n, _)| n.starts_with(ytune::fuser::FUSER_PREFIX))
        .count();
    assert_eq!(loaded, fuser_tensors);
    assert_eq!(tgt.params().value(emb), &emb_before);
    for (name, t) in src.named_tensors() {
        if name.starts_with(ytune::fuser::FUSER_PREFIX) {
            let id = tgt.params().find(&name).unwrap();
            assert_eq!(tgt.params().value(id), &t, "{name}");
        }
    }
}

#[test]
fn store_file_corruption_is_detected_on_read() {
    let enc = FrozenEncoder::new(encoder_config()).unwrap();
    let d = data(Generator::KeywordClassification, 8, 0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.ytfs");
    let cfg = TrainConfig {
        use_feature_store: true,
        ..quick(1)
    };
    let mut m = model(&enc, &d);
    {
        let mut store = FeatureStore::open(&path, StoreMode::Create).unwrap();
        trainer::train(&cfg, &enc, &mut m, &d.train, &[], Some(&mut store)).unwrap();
    }
    let clean = fs::read(&path).unwrap();
    let mut detected = 0;
    let positions: Vec<usize> = (16..clean.len()).step_by(clean.len() / 97 + 1).collect();
    for &at in &positions {
        let mut bad = clean.clone();
        bad[at] ^= 0x10;
        fs::write(&path, &bad).unwrap();
        let ok = FeatureStore::open(&path, StoreMode::Read).and_then(|s| {
            let mut all = Vec::new();
            for ex in &d.train {
                let key = ytune::FeatureKey::new(enc.fingerprint(), &ex.tokens, m.feature_mask());
                all.push(s.get(&key)?);
            }
            Ok(all)
        });
        if ok.is_err() {
            detected += 1;
        }
    }
    assert_eq!(detected, positions.len());
}

#[test]
fn only_label_side_tensors_change() {
    let enc = FrozenEncoder::new(encoder_config()).unwrap();
    let d = data(Generator::KeywordClassification, 40, 0);
    let mut m = model(&enc, &d);
    let before = m.named_tensors();
    trainer::train(&quick(3), &enc, &mut m, &d.train, &[], None).unwrap();
    let after = m.named_tensors();
    let changed: Vec<&str> = before
        .iter()
        .zip(&after)
        .filter(|(a, b)| a.1 != b.1)
        .map(|(a, _)| a.0.as_str())
        .collect();
    assert_eq!(changed.len(), before.len(), "unchanged: {before:?}");
    assert!(changed
        .iter()
        .all(|n| *n == ytune::fuser::EMBEDDINGS_NAME || n.starts_with(ytune::fuser::FUSER_PREFIX)));
    assert_eq!(m.params().trainable_scalars(), m.params().total_scalars());
}

/// Reported, not asserted: a fuser pretrained on one keyword task is reused
/// on a second task with disjoint data, against a cold start with the same
/// epoch budget.
#[test]
fn warm_start_versus_cold_start_report() {
    let enc = FrozenEncoder::new(encoder_config()).unwrap();
    let here = std::path::Path::new("synthetic");
    let task = |seed: u64, size: usize| {
        let spec = SyntheticSpec {
            size,
            dev_size: 40,
            seed,
            ..SyntheticSpec::default()
        };
        let (t, d) = spec.generate().unwrap();
        prepare(&encoder_config(), &t, Some(&d), None, None, (here, here)).unwrap()
    };
    let cfg = quick(15);
    let (mut warm_sum, mut cold_sum) = (0.0, 0.0);
    for seed in 0..5 {
        let src = task(100 + seed, 60);
        let mut pre = model(&enc, &src);
        trainer::train(&quick(30), &enc, &mut pre, &src.train, &[], None).unwrap();
        let ckpt = Checkpoint::capture(&pre, &enc, None, &[]);

        let tgt = task(200 + seed, 30);
        let mut warm = model(&enc, &tgt);
        warm_start(&mut warm, &ckpt).unwrap();
        let w = trainer::train(&cfg, &enc, &mut warm, &tgt.train, &tgt.dev, None).unwrap();
        let mut cold = model(&enc, &tgt);
        let c = trainer::train(&cfg, &enc, &mut cold, &tgt.train, &tgt.dev, None).unwrap();
        warm_sum += w.final_dev().unwrap().primary();
        cold_sum += c.final_dev().unwrap().primary();
    }
    println!(
        "warm start mean dev accuracy {:.3}, cold start {:.3} over 5 seeds",
        warm_sum / 5.0,
        cold_sum / 5.0
    );
}
