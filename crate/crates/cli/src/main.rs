use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use hetformer::experiment::{
    content_hash, model_grad_check, run_eval, run_sample, run_sweep, run_train, toy_config, toy_dataset, Dataset,
    ExperimentConfig, Precision,
};
use hetformer::graph::NodeId;
use hetformer::rwr::{read_cache, write_cache, NeighborSample};
use hetformer::synth::{self, SynthConfig};
use hetformer::train::split;
use hetformer::Error;

/// Failing threshold of `gradcheck`.
const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "hetformer", version, about = "Heterogeneous-graph transformer for fake news detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic planted-signal dataset.
    Synth(SynthArgs),
    /// Run the random walks and write the neighbor cache.
    Sample(SampleArgs),
    /// Train a model and report test metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Train and test once per neighborhood size.
    Sweep(SweepArgs),
    /// Compare backprop gradients of the full model to finite differences.
    Gradcheck(GradArgs),
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every stage (beats HETFORMER_SEED).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    graph_dir: Option<PathBuf>,
    #[arg(long)]
    emb_dir: Option<PathBuf>,
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Also write the output JSON here.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
}

#[derive(Args)]
struct WalkArgs {
    /// Neighborhood size.
    #[arg(long)]
    gamma: Option<usize>,
    #[arg(long)]
    restart_p: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Unified model dimension.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// JSON-lines epoch log.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    ablate_decoder: bool,
    #[arg(long)]
    ablate_positional: bool,
    /// Baseline on the target's own content.
    #[arg(long)]
    target_only: bool,
    #[arg(long)]
    literal_eq8: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    news: Option<usize>,
    /// Label-signal strength s.
    #[arg(long)]
    signal: Option<f64>,
    /// Community wiring strength.
    #[arg(long)]
    community_strength: Option<f64>,
    /// Replace news content with noise.
    #[arg(long)]
    content_free: bool,
    /// Start from the content-free friend-circle preset instead of the
    /// config's generator settings (the seed is kept).
    #[arg(long)]
    circles: bool,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    walk: WalkArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    walk: WalkArgs,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    walk: WalkArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    walk: WalkArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Comma-separated neighborhood sizes.
    #[arg(long, value_delimiter = ',')]
    gammas: Option<Vec<usize>>,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
}

fn resolve(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_seed_env()?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    let p = &mut cfg.paths;
    override_path(&mut p.graph_dir, &common.graph_dir);
    override_path(&mut p.emb_dir, &common.emb_dir);
    override_path(&mut p.cache, &common.cache);
    override_path(&mut p.checkpoint, &common.checkpoint);
    override_path(&mut p.report, &common.report);
    if let Some(w) = common.workers {
        cfg.train.workers = w;
    }
    match common.precision {
        Some(PrecisionArg::F32) => cfg.precision = Precision::F32,
        Some(PrecisionArg::F64) => cfg.precision = Precision::F64,
        None => {}
    }
    Ok(cfg)
}

fn override_path(slot: &mut Option<PathBuf>, flag: &Option<PathBuf>) {
    if flag.is_some() {
        slot.clone_from(flag);
    }
}

fn apply_walk(cfg: &mut ExperimentConfig, w: &WalkArgs) {
    if let Some(g) = w.gamma {
        cfg.walk.top_gamma = g;
    }
    if let Some(p) = w.restart_p {
        cfg.walk.restart_p = p;
    }
    if let Some(t) = w.iterations {
        cfg.walk.iterations = t;
    }
}

fn apply_model(cfg: &mut ExperimentConfig, m: &ModelArgs) {
    let t = &mut cfg.train;
    if let Some(v) = m.lr {
        t.lr = v;
    }
    if let Some(v) = m.epochs {
        t.max_epochs = v;
    }
    if let Some(v) = m.patience {
        t.patience = v;
    }
    if let Some(v) = m.batch {
        t.batch_size = v;
    }
    if let Some(v) = m.momentum {
        t.momentum = v;
    }
    if let Some(v) = m.dim {
        cfg.model.unified_dim = v;
    }
    if let Some(v) = m.layers {
        cfg.model.layers = v;
    }
    if let Some(v) = m.heads {
        cfg.model.heads = v;
    }
    override_path(&mut cfg.paths.log, &m.log);
    cfg.ablation.no_decoder |= m.ablate_decoder;
    cfg.ablation.no_positional |= m.ablate_positional;
    cfg.ablation.target_only |= m.target_only;
    cfg.model.literal_eq8 |= m.literal_eq8;
}

fn envelope(command: &str, cfg: &ExperimentConfig, body: Value) -> Result<Value, Error> {
    let inputs = match cfg.paths.graph_dir {
        Some(_) => Value::String(content_hash(&cfg.paths)?),
        None => Value::Null,
    };
    Ok(json!({
        "command": command,
        "config": serde_json::to_value(cfg)?,
        "provenance": { "inputs_sha256": inputs, "version": env!("CARGO_PKG_VERSION") },
        "result": body,
    }))
}

fn emit(cfg: &ExperimentConfig, out: &Value) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(out)?;
    println!("{text}");
    if let Some(path) = &cfg.paths.report {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, text + "\n")?;
    }
    Ok(())
}

/// Neighbor samples from the cache when it exists, otherwise fresh walks.
fn load_samples(cfg: &ExperimentConfig, data: &Dataset) -> Result<BTreeMap<NodeId, NeighborSample>, Error> {
    match &cfg.paths.cache {
        Some(path) if path.exists() => {
            let cached = read_cache(path)?;
            Ok(cached
                .into_iter()
                .map(|(id, s)| (id, s.truncated(cfg.walk.top_gamma)))
                .collect())
        }
        _ => run_sample(cfg, data, cfg.train.workers),
    }
}

fn cmd_synth(args: &SynthArgs) -> Result<(), Error> {
    let mut cfg = resolve(&args.common)?;
    if args.circles {
        cfg.synth = SynthConfig {
            seed: cfg.synth.seed,
            ..SynthConfig::circles()
        };
    }
    let s = &mut cfg.synth;
    if let Some(v) = args.news {
        s.news = v;
    }
    if let Some(v) = args.signal {
        s.signal = v;
    }
    if let Some(v) = args.community_strength {
        s.community_strength = v;
    }
    s.content_free |= args.content_free;
    let data = synth::generate(&cfg.synth)?;
    data.write_dir(&args.out)?;
    cfg.paths.graph_dir = Some(args.out.clone());
    cfg.paths.emb_dir = None;
    let stats = data.graph.stats();
    let body = json!({ "out": args.out, "stats": serde_json::to_value(&stats)? });
    emit(&cfg, &envelope("synth", &cfg, body)?)
}

fn cmd_sample(args: &SampleArgs) -> Result<(), Error> {
    let mut cfg = resolve(&args.common)?;
    apply_walk(&mut cfg, &args.walk);
    let cache = cfg
        .paths
        .cache
        .clone()
        .ok_or_else(|| Error::Config("sample needs --cache or paths.cache".into()))?;
    let data = Dataset::load(&cfg.paths, cfg.schema)?;
    let start = Instant::now();
    let samples = run_sample(&cfg, &data, cfg.train.workers)?;
    let seconds = start.elapsed().as_secs_f64();
    write_cache(&cache, &samples)?;
    let n = samples.len().max(1) as f64;
    let mean = |f: fn(&NeighborSample) -> usize| samples.values().map(f).sum::<usize>() as f64 / n;
    let body = json!({
        "cache": cache,
        "roots": samples.len(),
        "mean_len": mean(|s| s.len()),
        "mean_news": mean(|s| s.sizes().0),
        "mean_post": mean(|s| s.sizes().1),
        "mean_user": mean(|s| s.sizes().2),
        "seconds": seconds,
    });
    emit(&cfg, &envelope("sample", &cfg, body)?)
}

fn cmd_train(args: &TrainArgs) -> Result<(), Error> {
    let mut cfg = resolve(&args.common)?;
    apply_walk(&mut cfg, &args.walk);
    apply_model(&mut cfg, &args.model);
    let data = Dataset::load(&cfg.paths, cfg.schema)?;
    let samples = load_samples(&cfg, &data)?;
    let mut log_file = match &cfg.paths.log {
        Some(p) => Some(BufWriter::new(fs::File::create(p)?)),
        None => None,
    };
    let (outcome, trained) = run_train(&cfg, &data, &samples, log_file.as_mut().map(|w| w as &mut dyn Write))?;
    if let Some(mut w) = log_file {
        w.flush()?;
    }
    if let Some(path) = &cfg.paths.checkpoint {
        fs::write(path, &trained.checkpoint)?;
    }
    let body = json!({
        "epochs": outcome.run.epochs,
        "best_epoch": outcome.run.best_epoch,
        "best_val_acc": outcome.run.best_val_acc,
        "stopped_early": outcome.run.stopped_early,
        "split_sizes": { "train": outcome.split.train.len(), "val": outcome.split.val.len(), "test": outcome.split.test.len() },
        "num_parameters": outcome.num_parameters,
        "val": outcome.run.val,
        "test": outcome.run.test,
    });
    emit(&cfg, &envelope("train", &cfg, body)?)
}

fn cmd_eval(args: &EvalArgs) -> Result<(), Error> {
    let mut cfg = resolve(&args.common)?;
    apply_walk(&mut cfg, &args.walk);
    apply_model(&mut cfg, &args.model);
    let path = cfg
        .paths
        .checkpoint
        .clone()
        .ok_or_else(|| Error::Config("eval needs --checkpoint or paths.checkpoint".into()))?;
    let data = Dataset::load(&cfg.paths, cfg.schema)?;
    let samples = load_samples(&cfg, &data)?;
    let parts = split(&data.labeled_news(), &cfg.train)?;
    let (name, ids) = match args.split {
        SplitArg::Train => ("train", &parts.train),
        SplitArg::Val => ("val", &parts.val),
        SplitArg::Test => ("test", &parts.test),
    };
    let report = run_eval(&cfg, &data, &samples, &fs::read(&path)?, ids)?;
    let body = json!({ "split": name, "checkpoint": path, "metrics": report });
    emit(&cfg, &envelope("eval", &cfg, body)?)
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), Error> {
    let mut cfg = resolve(&args.common)?;
    apply_walk(&mut cfg, &args.walk);
    apply_model(&mut cfg, &args.model);
    if let Some(g) = &args.gammas {
        cfg.sweep_gammas.clone_from(g);
    }
    if cfg.sweep_gammas.contains(&0) {
        return Err(Error::Config("gammas must be positive".into()));
    }
    let data = Dataset::load(&cfg.paths, cfg.schema)?;
    let rows = run_sweep(&cfg, &data, &cfg.sweep_gammas, cfg.train.workers)?;
    emit(&cfg, &envelope("sweep", &cfg, json!({ "rows": rows }))?)
}

fn cmd_gradcheck(args: &GradArgs) -> Result<bool, Error> {
    let mut cfg = toy_config();
    cfg.apply_seed_env()?;
    if let Some(seed) = args.seed {
        cfg.set_seed(seed);
    }
    let data = toy_dataset(cfg.train.seed)?;
    let report = model_grad_check(&cfg, &data, args.eps)?;
    let pass = report.max_rel_error < GRAD_TOLERANCE;
    let body = json!({ "report": report, "tolerance": GRAD_TOLERANCE, "pass": pass });
    emit(&cfg, &envelope("gradcheck", &cfg, body)?)?;
    Ok(pass)
}

fn error_class(e: &Error) -> &'static str {
    match e {
        Error::Graph(_) => "graph",
        Error::Embedding(_) => "embedding",
        Error::Sample(_) => "sample",
        Error::Model(_) => "model",
        Error::TooFewSamples { .. } => "data",
        Error::Config(_) => "config",
        Error::Json(_) => "json",
        Error::Io(_) => "io",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a).map(|_| true),
        Command::Sample(a) => cmd_sample(a).map(|_| true),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Sweep(a) => cmd_sweep(a).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            let line = e.to_string().replace('\n', " ");
            eprintln!("hetformer: {} error: {line}", error_class(&e));
            ExitCode::from(2)
        }
    }
}
