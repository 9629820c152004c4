mod manifest;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use seqskip::data::Dataset;
use seqskip::eval::{evaluate_dataset, predict_dataset, score_predictions};
use seqskip::metrics::PredictionSet;
use seqskip::models::{Gate, LossScope, Model, ModelConfig, ModelKind};
use seqskip::synth::{generate, Rule, SynthConfig};
use seqskip::train::{stats_from_meta, train_with, TrainConfig};
use seqskip_tensor::gradcheck::primitive_suite;

use manifest::Manifest;

#[derive(Parser, Debug)]
#[command(name = "seqskip", version, about = "Sequential skip prediction toolkit")]
struct Cli {
    /// Worker threads for batch assembly and evaluation; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Re-run the command recorded in a run manifest.
    #[arg(long, value_name = "FILE")]
    manifest: Option<PathBuf>,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus: sessions, features and schema.
    GenData(GenDataArgs),
    /// Train a model and write checkpoint, manifest and epoch log.
    Fit(FitArgs),
    /// Score a checkpoint on a labelled corpus.
    Evaluate(EvaluateArgs),
    /// Write binary query predictions for a corpus.
    Predict(PredictArgs),
    /// Finite-difference check of every differentiable primitive.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    rule: Rule,
    /// Number of sessions.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Probability of flipping each label.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    feature_dim: Option<usize>,
    /// Catalog size.
    #[arg(long)]
    tracks: Option<usize>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    /// Shared taste vectors for the preference rule; 0 gives every session its own.
    #[arg(long)]
    preference_pool: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Scope {
    QueryOnly,
    SupportAndQuery,
}

impl From<Scope> for LossScope {
    fn from(s: Scope) -> Self {
        match s {
            Scope::QueryOnly => LossScope::QueryOnly,
            Scope::SupportAndQuery => LossScope::SupportAndQuery,
        }
    }
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    model: ModelKind,
    /// Directory holding sessions.csv, features.csv and schema.toml.
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Learning-rate factor applied after every epoch.
    #[arg(long, default_value_t = 0.7)]
    anneal: f64,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Labelled positions in the loss of timeline models.
    #[arg(long, value_enum, default_value_t = Scope::QueryOnly)]
    loss_scope: Scope,
    /// Rescale gradients above this global norm.
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    gate: Option<Gate>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
    checkpoint: Option<PathBuf>,
    /// Score a prediction file instead of running a model.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the per-session report.
    #[arg(long, default_value = "eval")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "predictions")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 25)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Also write the report and a manifest here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn gen_data(a: &GenDataArgs, threads: usize) -> Result<()> {
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        n_sessions: a.n.unwrap_or(d.n_sessions),
        min_len: a.min_len.unwrap_or(d.min_len),
        max_len: a.max_len.unwrap_or(d.max_len),
        feature_dim: a.feature_dim.unwrap_or(d.feature_dim),
        n_tracks: a.tracks.unwrap_or(d.n_tracks),
        rule: a.rule,
        noise: a.noise.unwrap_or(d.noise),
        seed: a.seed,
        preference_pool: a.preference_pool.unwrap_or(d.preference_pool),
    };
    let files = generate(&cfg, &a.out)?;
    let mut m = Manifest::new("gen-data", threads);
    m.arg("rule", cfg.rule)
        .arg("n", cfg.n_sessions)
        .arg("seed", cfg.seed)
        .arg("out", a.out.display())
        .arg("noise", cfg.noise)
        .arg("feature-dim", cfg.feature_dim)
        .arg("tracks", cfg.n_tracks)
        .arg("min-len", cfg.min_len)
        .arg("max-len", cfg.max_len)
        .arg("preference-pool", cfg.preference_pool);
    for (key, f) in ["sessions", "features", "schema"].iter().zip(&files) {
        m.artifact(key, f);
        println!("wrote {}", f.display());
    }
    m.save(&a.out)?;
    Ok(())
}

fn fit(a: &FitArgs, threads: usize) -> Result<()> {
    let data = Dataset::load_dir(&a.data)?;
    let mut model = ModelConfig::new(a.model, 0, a.width, a.seed);
    if let Some(g) = a.gate {
        model.gate = g;
    }
    if let Some(h) = a.heads {
        model.heads = h;
    }
    if let Some(b) = a.blocks {
        model.blocks = b;
    }
    create_dir(&a.out)?;
    let ckpt = a.out.join("checkpoint.bin");
    let log_path = a.out.join("epochs.log");
    let config = TrainConfig {
        train_fraction: a.train_fraction,
        batch_size: a.batch_size,
        base_lr: a.lr,
        anneal_factor: a.anneal,
        max_epochs: a.epochs,
        loss_scope: a.loss_scope.into(),
        clip_norm: a.clip_norm,
        checkpoint: Some(ckpt.clone()),
        ..TrainConfig::new(model, a.seed)
    };

    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let mut log_err = None;
    let outcome = train_with(&config, &data, |e| {
        println!("{e}");
        if let Err(err) = writeln!(log, "{e}").and_then(|_| log.flush()) {
            log_err.get_or_insert(err);
        }
    })?;
    if let Some(err) = log_err {
        return Err(err).with_context(|| format!("writing {}", log_path.display()));
    }

    let resolved = outcome.model.config();
    let mut m = Manifest::new("fit", threads);
    m.arg("model", a.model)
        .arg("data", a.data.display())
        .arg("out", a.out.display())
        .arg("width", a.width)
        .arg("batch-size", a.batch_size)
        .arg("epochs", a.epochs)
        .arg("lr", a.lr)
        .arg("anneal", a.anneal)
        .arg("train-fraction", a.train_fraction)
        .arg("seed", a.seed)
        .arg("loss-scope", a.loss_scope.to_possible_value().unwrap().get_name())
        .arg("gate", resolved.gate)
        .arg("heads", resolved.heads)
        .arg("blocks", resolved.blocks);
    if let Some(c) = a.clip_norm {
        m.arg("clip-norm", c);
    }
    m.artifact("checkpoint", &ckpt).artifact("epoch_log", &log_path);
    m.save(&a.out)?;
    println!("best_epoch={} best_val_maa={}", outcome.best_epoch, outcome.best_val_maa);
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<(Model, seqskip::data::PreprocessStats)> {
    let (model, meta) = Model::load(path)?;
    let stats = stats_from_meta(&meta).with_context(|| format!("in checkpoint {}", path.display()))?;
    Ok((model, stats))
}

fn evaluate(a: &EvaluateArgs, threads: usize) -> Result<()> {
    let data = Dataset::load_dir(&a.data)?;
    let report = match (&a.checkpoint, &a.predictions) {
        (Some(ckpt), _) => {
            let (model, stats) = load_checkpoint(ckpt)?;
            evaluate_dataset(&model, &stats, &data)?
        }
        (None, Some(p)) => score_predictions(&PredictionSet::load(p)?, &data)?,
        (None, None) => unreachable!("clap requires one source"),
    };
    create_dir(&a.out)?;
    let path = a.out.join("per_session_aa.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["session_id", "average_accuracy"])?;
    for (sid, aa) in &report.per_session {
        w.write_record([sid.as_str(), &aa.to_string()])?;
    }
    w.flush()?;
    let mut m = Manifest::new("evaluate", threads);
    match (&a.checkpoint, &a.predictions) {
        (Some(c), _) => m.arg("checkpoint", c.display()),
        (_, Some(p)) => m.arg("predictions", p.display()),
        _ => &mut m,
    };
    m.arg("data", a.data.display())
        .arg("out", a.out.display())
        .artifact("per_session", &path);
    m.save(&a.out)?;
    println!("sessions={}", report.per_session.len());
    println!("MAA={}", report.maa);
    Ok(())
}

fn predict(a: &PredictArgs, threads: usize) -> Result<()> {
    let (model, stats) = load_checkpoint(&a.checkpoint)?;
    let data = Dataset::load_dir(&a.data)?;
    let preds = predict_dataset(&model, &stats, &data)?;
    create_dir(&a.out)?;
    let path = a.out.join("predictions.txt");
    preds.save(&path)?;
    let mut m = Manifest::new("predict", threads);
    m.arg("checkpoint", a.checkpoint.display())
        .arg("data", a.data.display())
        .arg("out", a.out.display())
        .artifact("predictions", &path);
    m.save(&a.out)?;
    println!("wrote {} sessions to {}", preds.entries.len(), path.display());
    Ok(())
}

fn grad_check(a: &GradCheckArgs, threads: usize) -> Result<()> {
    let reports = primitive_suite(a.trials, a.seed)?;
    let mut text = String::new();
    for r in &reports {
        text += &format!("{:<24} trials={} max_rel_error={:.3e}\n", r.name, r.trials, r.max_rel_error);
    }
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    text += &format!("max_rel_error={worst:e}\n");
    print!("{text}");
    if let Some(out) = &a.out {
        create_dir(out)?;
        let path = out.join("grad_check.txt");
        std::fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
        let mut m = Manifest::new("grad-check", threads);
        m.arg("trials", a.trials)
            .arg("seed", a.seed)
            .arg("tolerance", a.tolerance)
            .arg("out", out.display())
            .artifact("report", &path);
        m.save(out)?;
    }
    if !(worst <= a.tolerance) {
        bail!("max relative error {worst:e} exceeds tolerance {:e}", a.tolerance);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match &cli.command {
        Some(Command::GenData(a)) => gen_data(a, cli.threads),
        Some(Command::Fit(a)) => fit(a, cli.threads),
        Some(Command::Evaluate(a)) => evaluate(a, cli.threads),
        Some(Command::Predict(a)) => predict(a, cli.threads),
        Some(Command::GradCheck(a)) => grad_check(a, cli.threads),
        None => unreachable!("parse guarantees a command"),
    }
}

/// Parses argv, replaying a manifest if one is given.
fn parse(argv: impl IntoIterator<Item = String>) -> std::result::Result<Result<Cli>, clap::Error> {
    let cli = Cli::try_parse_from(argv)?;
    use clap::CommandFactory;
    match (&cli.manifest, &cli.command) {
        (Some(_), Some(_)) => Err(Cli::command().error(
            clap::error::ErrorKind::ArgumentConflict,
            "--manifest replays a recorded command and takes no subcommand",
        )),
        (Some(path), None) => Ok(Manifest::load(path).and_then(|m| {
            Cli::try_parse_from(m.argv()).with_context(|| format!("replaying {}", path.display()))
        })),
        (None, Some(_)) => Ok(Ok(cli)),
        (None, None) => Err(Cli::command().error(
            clap::error::ErrorKind::MissingSubcommand,
            "a subcommand or --manifest is required",
        )),
    }
}

/// The error chain on one line, leaving out causes already spelled out by
/// the message before them.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain().map(|c| c.to_string()) {
        if !out.contains(&cause) {
            if !out.is_empty() {
                out += ": ";
            }
            out += &cause;
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = match parse(std::env::args()) {
        Ok(Ok(cli)) => cli,
        Ok(Err(e)) => {
            eprintln!("error: {}", describe(&e));
            return ExitCode::from(1);
        }
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(1)
        }
    }
}
