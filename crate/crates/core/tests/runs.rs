use std::fs;
use std::path::Path;

use ytune::data::RawDataset;
use ytune::run::{self, RunConfig, CHECKPOINT_FILE, CONFIG_ECHO, METRICS_FILE, VOCAB_FILE};
use ytune::synth::{Generator, SyntheticSpec};
use ytune::{EncoderConfig, TaskKind};

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

fn write_split(
    spec: &SyntheticSpec,
    dir: &Path,
    ext: &str,
) -> (std::path::PathBuf, std::path::PathBuf) {
    let (train, dev) = spec.generate().unwrap();
    let (t, d) = (
        dir.join(format!("train.{ext}")),
        dir.join(format!("dev.{ext}")),
    );
    train.write(&t).unwrap();
    dev.write(&d).unwrap();
    (t, d)
}

fn config(task: TaskKind, train: &Path, dev: &Path, out: &Path) -> RunConfig {
    let mut cfg = RunConfig::new(task, train, out);
    cfg.dev_path = Some(dev.to_path_buf());
    cfg.encoder = encoder_config();
    cfg.model.fuser.heads = 2;
    cfg.train.epochs = 4;
    cfg.train.patience = None;
    cfg.train.learning_rate = 3e-3;
    cfg
}

#[test]
fn generated_files_read_back_at_full_size() {
    let dir = tempfile::tempdir().unwrap();
    for (generator, task, ext) in [
        (
            Generator::KeywordClassification,
            TaskKind::Classification,
            "tsv",
        ),
        (Generator::TriggerBio, TaskKind::SequenceLabeling, "bio"),
        (Generator::SentinelSpanQa, TaskKind::SpanQa, "jsonl"),
    ] {
        let spec = SyntheticSpec {
            generator,
            size: 137,
            dev_size: 41,
            ..SyntheticSpec::default()
        };
        let (t, d) = write_split(&spec, dir.path(), ext);
        let (train, warnings) = RawDataset::read(task, &t, None, false).unwrap();
        let (dev, _) = RawDataset::read(task, &d, None, false).unwrap();
        assert_eq!((train.len(), dev.len()), (137, 41), "{generator:?}");
        assert!(warnings.is_empty());
        let again = dir.path().join(format!("again.{ext}"));
        train.write(&again).unwrap();
        assert_eq!(fs::read(&again).unwrap(), fs::read(&t).unwrap());
        if let RawDataset::Qa(rs) = &train {
            assert!(rs
                .iter()
                .all(|r| r.begin <= r.end && r.end < r.context_tokens.len()));
        }
    }
}

/// Pearson statistic against a uniform prior. With 3 classes (2 degrees of
/// freedom) the upper tail is `exp(-x/2)`.
#[test]
fn class_priors_are_uniform() {
    let spec = SyntheticSpec {
        size: 3000,
        dev_size: 0,
        classes: 3,
        seed: 11,
        ..SyntheticSpec::default()
    };
    let (RawDataset::Classification(rs), _) = spec.generate().unwrap() else {
        panic!("expected classification records");
    };
    let mut counts = std::collections::BTreeMap::<String, f64>::new();
    for r in &rs {
        *counts.entry(r.label.clone()).or_default() += 1.0;
    }
    assert_eq!(counts.len(), 3);
    let expected = rs.len() as f64 / 3.0;
    let chi2: f64 = counts
        .values()
        .map(|&c| (c - expected).powi(2) / expected)
        .sum();
    let p = (-chi2 / 2.0).exp();
    assert!(
        p > 1e-3,
        "chi-square {chi2:.2}, p {p:.2e}, counts {counts:?}"
    );
}

#[test]
fn run_outputs_agree_with_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        generator: Generator::TriggerBio,
        size: 60,
        dev_size: 20,
        classes: 2,
        ..SyntheticSpec::default()
    };
    let (t, d) = write_split(&spec, dir.path(), "bio");
    let out = dir.path().join("run");
    let summary = run::run_training(&config(TaskKind::SequenceLabeling, &t, &d, &out)).unwrap();
    for f in [CONFIG_ECHO, VOCAB_FILE, CHECKPOINT_FILE, METRICS_FILE] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let ev = run::evaluate_file(
        &out.join(CHECKPOINT_FILE),
        &out.join(VOCAB_FILE),
        &t,
        false,
        1,
    )
    .unwrap();
    assert_eq!(ev.metrics, summary.metrics.train);
    let ev = run::evaluate_file(
        &out.join(CHECKPOINT_FILE),
        &out.join(VOCAB_FILE),
        &d,
        false,
        1,
    )
    .unwrap();
    assert_eq!(Some(ev.metrics), summary.metrics.dev);
}

#[test]
fn config_echo_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        size: 40,
        dev_size: 10,
        ..SyntheticSpec::default()
    };
    let (t, d) = write_split(&spec, dir.path(), "tsv");
    let first = dir.path().join("first");
    let mut cfg = config(TaskKind::Classification, &t, &d, &first);
    cfg.store_path = Some(dir.path().join("f.ytfs"));
    cfg.train.use_feature_store = true;
    run::run_training(&cfg).unwrap();

    let mut echo = RunConfig::load(&first.join(CONFIG_ECHO)).unwrap();
    let second = dir.path().join("second");
    echo.output_dir = second.clone();
    run::run_training(&echo).unwrap();
    for f in [METRICS_FILE, CHECKPOINT_FILE, VOCAB_FILE] {
        assert_eq!(
            fs::read(first.join(f)).unwrap(),
            fs::read(second.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn cache_command_fills_then_skips() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        generator: Generator::SentinelSpanQa,
        size: 12,
        dev_size: 5,
        ..SyntheticSpec::default()
    };
    let (t, d) = write_split(&spec, dir.path(), "jsonl");
    let mut cfg = config(TaskKind::SpanQa, &t, &d, &dir.path().join("run"));
    cfg.store_path = Some(dir.path().join("f.ytfs"));
    let (added, total) = run::populate_cache(&cfg).unwrap();
    assert_eq!(added, total);
    assert!(total > 0 && total <= 17);
    assert_eq!(run::populate_cache(&cfg).unwrap(), (0, total));
}

#[test]
fn stray_inside_tag_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.bio");
    fs::write(&path, "the\tO\ncat\tI-ANIMAL\nsat\tO\n").unwrap();
    let (raw, warnings) = RawDataset::read(TaskKind::SequenceLabeling, &path, None, false).unwrap();
    assert_eq!(warnings.len(), 1);
    assert_eq!(warnings[0].line, 2);
    let RawDataset::Bio(s) = raw else {
        unreachable!()
    };
    assert_eq!(s[0].tags[1], "I-ANIMAL");

    let (raw, _) = RawDataset::read(TaskKind::SequenceLabeling, &path, None, true).unwrap();
    let RawDataset::Bio(s) = raw else {
        unreachable!()
    };
    assert_eq!(s[0].tags[1], "B-ANIMAL");
}
