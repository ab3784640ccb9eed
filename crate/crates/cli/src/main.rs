use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use ytune::ablation::{run_ablation, AblationConfig};
use ytune::cost::{self, BenchConfig, CostQuery, Paradigm};
use ytune::run::{self, RunConfig, CHECKPOINT_FILE, VOCAB_FILE};
use ytune::synth::{Generator, SyntheticSpec};
use ytune::{EncoderConfig, Error, FuserConfig, InitStrategy, TaskKind};

/// Exit status for bad flags, configs and misuse.
const EXIT_USAGE: u8 = 2;
const EXIT_FAILURE: u8 = 1;

const THREADS_VAR: &str = "YTUNE_THREADS";

#[derive(Parser)]
#[command(
    name = "ytune",
    version,
    about = "Label-side tuning over a frozen encoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its artifacts to the output directory.
    Train(TrainArgs),
    /// Score a dataset file with a trained model.
    Eval(EvalArgs),
    /// Pre-populate a feature store for a run configuration.
    Cache(CacheArgs),
    /// Time training with and without cached features.
    Bench(BenchArgs),
    /// Print the analytic attention-cost table.
    Flops(FlopsArgs),
    /// Write synthetic train and dev files.
    Gen(GenArgs),
    /// Sweep label replicas, fuser depth and label initialization.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_task)]
    task: Option<TaskKind>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Feature store; implies training from cached features.
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Epochs without dev improvement before stopping; 0 disables.
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Embeddings per label.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    fuser_layers: Option<usize>,
    #[arg(long, value_parser = parse_init)]
    init: Option<InitStrategy>,
    #[arg(long)]
    margin: Option<f64>,
    /// Fuser weights to start from.
    #[arg(long)]
    warm_start: Option<PathBuf>,
    /// Rewrite stray I- tags to B- instead of only warning.
    #[arg(long)]
    repair_bio: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct CacheArgs {
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Output directory of a training run.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    repair_bio: bool,
    /// Also write one prediction per line to this file.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// JSON benchmark configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "M")]
    seq_len: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    examples: Option<usize>,
    /// Write the JSON report here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long = "L", default_value_t = 4)]
    layers: usize,
    #[arg(long = "M", default_value_t = 16)]
    seq_len: usize,
    #[arg(long = "P", default_value_t = 0)]
    prompt_len: usize,
    #[arg(long = "N", default_value_t = 3)]
    labels: usize,
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long = "Ld", alias = "L_d", default_value_t = 1)]
    fuser_layers: usize,
    /// Hidden width used for tunable-parameter counts.
    #[arg(long = "H", default_value_t = 64)]
    hidden: usize,
    /// Print only this paradigm's attention units.
    #[arg(long, value_parser = parse_paradigm)]
    paradigm: Option<Paradigm>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GenArgs {
    /// JSON synthetic spec; flags override its values.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, value_parser = parse_generator)]
    generator: Option<Generator>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    dev_size: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// JSON ablation configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the Markdown report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the rows as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Directory for the shared feature store.
    #[arg(long)]
    work_dir: Option<PathBuf>,
}

/// Parses a snake_case enum name; dashes are accepted for underscores.
fn parse_via_json<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
        .map_err(|e| e.to_string())
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    parse_via_json(s)
}

fn parse_init(s: &str) -> Result<InitStrategy, String> {
    parse_via_json(s)
}

fn parse_generator(s: &str) -> Result<Generator, String> {
    parse_via_json(s)
}

fn parse_paradigm(s: &str) -> Result<Paradigm, String> {
    Paradigm::parse(s).ok_or_else(|| {
        let names: Vec<_> = Paradigm::ALL.iter().map(|p| p.name()).collect();
        format!(
            "unknown paradigm {s:?}; expected one of {}",
            names.join(", ")
        )
    })
}

/// Worker bound from the environment, if set.
fn env_threads() -> anyhow::Result<Option<usize>> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!(
                "{THREADS_VAR} must be a positive integer, got {v:?}"
            ))
            .into()),
        },
        Err(_) => Ok(None),
    }
}

fn run_config(a: &RunArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => {
            let (Some(task), Some(train), Some(out)) = (a.task, &a.train, &a.out) else {
                return Err(Error::Usage(
                    "without --config, --task, --train and --out are required".into(),
                )
                .into());
            };
            RunConfig::new(task, train, out)
        }
    };
    if let Some(t) = a.task {
        cfg.task = t;
    }
    if let Some(p) = &a.train {
        cfg.train_path = p.clone();
    }
    if let Some(p) = &a.dev {
        cfg.dev_path = Some(p.clone());
    }
    if let Some(p) = &a.out {
        cfg.output_dir = p.clone();
    }
    if let Some(p) = &a.vocab {
        cfg.vocab_path = Some(p.clone());
    }
    if let Some(p) = &a.store {
        cfg.store_path = Some(p.clone());
        cfg.train.use_feature_store = true;
    }
    if let Some(p) = &a.warm_start {
        cfg.warm_start = Some(p.clone());
    }
    let t = &mut cfg.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.lr {
        t.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.patience {
        t.patience = (v > 0).then_some(v);
    }
    if let Some(v) = a.seed {
        t.seed = v;
        cfg.model.seed = v;
    }
    if let Some(v) = a.k {
        cfg.model.k = v;
    }
    if let Some(v) = a.fuser_layers {
        cfg.model.fuser.layers = v;
    }
    if let Some(v) = a.init {
        cfg.model.init = v;
    }
    if let Some(v) = a.margin {
        cfg.model.margin = v;
    }
    if a.repair_bio {
        cfg.repair_bio = true;
    }
    if let Some(n) = env_threads()? {
        cfg.train.threads = n;
    }
    Ok(cfg)
}

fn cmd_train(a: &TrainArgs) -> anyhow::Result<()> {
    let cfg = run_config(&a.run)?;
    let summary = run::run_training(&cfg)?;
    for w in &summary.warnings {
        eprintln!("warning: {w}");
    }
    let m = &summary.metrics;
    for rec in &m.history {
        let dev = rec
            .dev
            .as_ref()
            .map(|d| format!("  dev {} {:.4}", d.primary_name(), d.primary()))
            .unwrap_or_default();
        eprintln!("epoch {:>3}  loss {:.6}{dev}", rec.epoch, rec.train_loss);
    }
    println!(
        "best epoch {} of {}; train {} {:.4}",
        m.best_epoch,
        m.epochs_run,
        m.train.primary_name(),
        m.train.primary()
    );
    if let Some(d) = &m.dev {
        println!("dev {} {:.4}", d.primary_name(), d.primary());
    }
    println!(
        "tunable {} of {} parameters; artifacts in {}",
        m.trainable_params,
        m.trainable_params + m.encoder_params,
        cfg.output_dir.display()
    );
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> anyhow::Result<()> {
    let pick = |explicit: &Option<PathBuf>, file: &str| -> anyhow::Result<PathBuf> {
        match (explicit, &a.run_dir) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(d)) => Ok(d.join(file)),
            (None, None) => {
                Err(Error::Usage(format!("need --run-dir or an explicit path for {file}")).into())
            }
        }
    };
    let ckpt = pick(&a.checkpoint, CHECKPOINT_FILE)?;
    let vocab = pick(&a.vocab, VOCAB_FILE)?;
    let threads = env_threads()?.unwrap_or(1);
    let ev = run::evaluate_file(&ckpt, &vocab, &a.data, a.repair_bio, threads)?;
    if let Some(p) = &a.predictions {
        let lines: Vec<String> = ev
            .predictions
            .iter()
            .map(serde_json::to_string)
            .collect::<Result<_, _>>()?;
        fs::write(p, lines.join("\n") + "\n")?;
    }
    println!("{}", serde_json::to_string_pretty(&ev.metrics)?);
    eprintln!(
        "{} {:.4}  loss {:.6}",
        ev.metrics.primary_name(),
        ev.metrics.primary(),
        ev.loss
    );
    Ok(())
}

fn cmd_cache(a: &CacheArgs) -> anyhow::Result<()> {
    let cfg = run_config(&a.run)?;
    let (added, total) = run::populate_cache(&cfg)?;
    println!("added {added} records; store holds {total}");
    Ok(())
}

fn scratch_dir(name: &str) -> anyhow::Result<PathBuf> {
    let d = std::env::temp_dir().join(format!("ytune-{name}-{}", std::process::id()));
    fs::create_dir_all(&d)?;
    Ok(d)
}

fn cmd_bench(a: &BenchArgs) -> anyhow::Result<()> {
    let mut cfg: BenchConfig = match &a.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
            .map_err(|e| Error::Config(format!("bad bench config: {e}")))?,
        None => BenchConfig::default(),
    };
    if let Some(m) = a.seq_len {
        cfg.seq_len = m;
        cfg.encoder.max_len = cfg.encoder.max_len.max(m);
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(n) = a.examples {
        cfg.examples = n;
    }
    let dir = scratch_dir("bench")?;
    let report = cost::bench_feature_reuse(&cfg, &dir);
    let _ = fs::remove_dir_all(&dir);
    let report = report?;
    print!("{}", report.render());
    if let Some(p) = &a.json {
        fs::write(p, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn cmd_flops(a: &FlopsArgs) -> anyhow::Result<()> {
    let q = CostQuery {
        layers: a.layers,
        seq_len: a.seq_len,
        prompt_len: a.prompt_len,
        labels: a.labels,
        k: a.k,
        fuser_layers: a.fuser_layers,
    };
    if a.layers == 0 || a.seq_len == 0 || a.labels == 0 || a.k == 0 || a.fuser_layers == 0 {
        return Err(Error::Config("L, M, N, k and L_d must be positive".into()).into());
    }
    if let Some(p) = a.paradigm {
        if p == Paradigm::Prompt && a.prompt_len == 0 {
            return Err(Error::Config("prompt paradigm needs --P > 0".into()).into());
        }
        println!("{}", cost::attention_cost(p, &q));
        return Ok(());
    }
    let encoder = EncoderConfig {
        layers: a.layers,
        hidden: a.hidden,
        ffn_dim: 4 * a.hidden,
        ..EncoderConfig::default()
    };
    let rows = cost::paradigm_table(&encoder, &FuserConfig::default(), &q);
    if a.json {
        println!("{}", serde_json::to_string_pretty(&rows)?);
    } else {
        print!("{}", cost::render_table(&rows));
    }
    Ok(())
}

fn gen_file_names(g: Generator) -> (&'static str, &'static str) {
    match g {
        Generator::KeywordClassification => ("train.tsv", "dev.tsv"),
        Generator::TriggerBio => ("train.bio", "dev.bio"),
        Generator::SentinelSpanQa => ("train.jsonl", "dev.jsonl"),
    }
}

fn cmd_gen(a: &GenArgs) -> anyhow::Result<()> {
    let mut spec: SyntheticSpec = match &a.spec {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
            .map_err(|e| Error::Config(format!("bad synthetic spec: {e}")))?,
        None => SyntheticSpec::default(),
    };
    if let Some(v) = a.generator {
        spec.generator = v;
    }
    if let Some(v) = a.size {
        spec.size = v;
    }
    if let Some(v) = a.dev_size {
        spec.dev_size = v;
    }
    if let Some(v) = a.vocab_size {
        spec.vocab_size = v;
    }
    if let Some(v) = a.noise {
        spec.noise = v;
    }
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    if let Some(v) = a.classes {
        spec.classes = v;
    }
    let (train, dev) = spec.generate()?;
    fs::create_dir_all(&a.out_dir)?;
    let (tn, dn) = gen_file_names(spec.generator);
    train.write(&a.out_dir.join(tn))?;
    dev.write(&a.out_dir.join(dn))?;
    fs::write(
        a.out_dir.join("spec.json"),
        serde_json::to_string_pretty(&spec)?,
    )?;
    println!(
        "wrote {} train and {} dev examples to {}",
        train.len(),
        dev.len(),
        a.out_dir.display()
    );
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> anyhow::Result<()> {
    let mut cfg: AblationConfig = match &a.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
            .map_err(|e| Error::Config(format!("bad ablation config: {e}")))?,
        None => AblationConfig::default(),
    };
    if let Some(n) = env_threads()? {
        cfg.train.threads = n;
    }
    let (dir, cleanup) = match &a.work_dir {
        Some(d) => {
            fs::create_dir_all(d)?;
            (d.clone(), false)
        }
        None => (scratch_dir("ablate")?, true),
    };
    let report = run_ablation(&cfg, &dir, |r| {
        eprintln!(
            "k={} L_d={} init={}  dev acc {:.1}%  ({} epochs, {:.1}s)",
            r.k,
            r.fuser_layers,
            r.init.name(),
            r.dev_accuracy,
            r.epochs_run,
            r.seconds
        )
    });
    if cleanup {
        let _ = fs::remove_dir_all(&dir);
    }
    let report = report?;
    let md = report.to_markdown();
    match &a.out {
        Some(p) => fs::write(p, &md)?,
        None => print!("{md}"),
    }
    if let Some(p) = &a.json {
        fs::write(p, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Usage(_)) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = env_threads().and_then(|_| match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Cache(a) => cmd_cache(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Flops(a) => cmd_flops(a),
        Command::Gen(a) => cmd_gen(a),
        Command::Ablate(a) => cmd_ablate(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
