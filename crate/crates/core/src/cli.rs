//! Command-line pipeline: `generate`, `train`, `optimize`, `evaluate`,
//! `servo` and `replay`.
//!
//! Every command resolves its flags against a profile into a plain config
//! struct, writes that config to `run.json` in the output directory and then
//! runs from the config alone. `replay run.json` therefore reproduces a run
//! exactly. Commands that produce primary artifacts also write
//! `manifest.json`, the SHA-256 of each artifact, so reruns can be compared
//! byte for byte. Trial logs are hashed with their wall-time fields removed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{self, collect, CollectSpec, Dataset, Split};
use crate::nn::Activation;
use crate::pose::ObjectType;
use crate::posenet::{self, evaluate, fit, fit_with_progress, FitOptions, Hyperparams, PoseNet};
use crate::servo::{self, explore, DemoObject, Estimator, OracleEstimator, REFERENCE_DEPTH};
use crate::sim::{SimConfig, Simulator};
use crate::tpe::{self, best_so_far, optimize_logged, TpeConfig, Trial};

/// Environment variable holding the worker thread count for `generate`.
pub const THREADS_ENV: &str = "TACTILE_POSE_THREADS";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Filter and unit cap of the small-profile search space.
pub const SMALL_SEARCH_WIDTH: usize = 16;
/// Layer-count cap of the small-profile search space.
pub const SMALL_SEARCH_LAYERS: usize = 3;
/// Epoch budget of one small-profile search trial.
pub const SMALL_TRIAL_EPOCHS: usize = 6;
/// Early-stopping patience of one small-profile search trial.
pub const SMALL_TRIAL_PATIENCE: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {reason}")]
    File { path: String, reason: String },
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
    #[error(transparent)]
    PoseNet(#[from] posenet::PoseNetError),
    #[error(transparent)]
    Tpe(#[from] tpe::TpeError),
    #[error(transparent)]
    Servo(#[from] servo::ServoError),
    #[error(transparent)]
    Sim(#[from] crate::sim::SimError),
}

impl CliError {
    /// Stable error category used in the machine-readable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::File { .. } => "file",
            CliError::Dataset(_) => "dataset",
            CliError::PoseNet(_) => "model",
            CliError::Tpe(_) => "optimizer",
            CliError::Servo(_) => "servo",
            CliError::Sim(_) => "simulator",
        }
    }
}

fn file_err(path: &Path, e: impl ToString) -> CliError {
    CliError::File {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// 64x64 images, 500 samples per split, 30 search trials.
    Small,
    /// 128x128 images, 2000 samples per split, 300 search trials.
    Full,
}

impl Profile {
    pub fn image_size(self) -> usize {
        match self {
            Profile::Small => 64,
            Profile::Full => 128,
        }
    }

    pub fn n_samples(self) -> usize {
        match self {
            Profile::Small => 500,
            Profile::Full => 2000,
        }
    }

    pub fn sim_config(self) -> SimConfig {
        match self {
            Profile::Small => SimConfig::small(),
            Profile::Full => SimConfig::default(),
        }
    }

    pub fn learning_rate(self) -> f64 {
        match self {
            Profile::Small => 1e-3,
            Profile::Full => 1e-4,
        }
    }

    /// Hyperparameters used by `train` when none are given.
    pub fn hyperparams(self, object: ObjectType) -> Hyperparams {
        match self {
            Profile::Small => Hyperparams {
                n_conv: 3,
                n_filters: 16,
                n_dense: 1,
                n_units: 64,
                activation: Activation::Relu,
                dropout: 0.0,
                l1: 1e-4,
                l2: 1e-4,
                batch_size: 16,
                use_batchnorm: false,
            },
            Profile::Full => match object {
                ObjectType::Surface => Hyperparams::published_surface(),
                ObjectType::Edge => Hyperparams::published_edge(),
            },
        }
    }

    pub fn search_space(self) -> tpe::SearchSpace {
        match self {
            Profile::Small => posenet::search_space_capped(SMALL_SEARCH_WIDTH, SMALL_SEARCH_LAYERS),
            Profile::Full => posenet::search_space(),
        }
    }

    pub fn tpe_budget(self) -> (usize, usize) {
        match self {
            Profile::Small => (30, 10),
            Profile::Full => (300, 50),
        }
    }

    /// Fit options of one search trial.
    pub fn trial_fit(self) -> (usize, usize) {
        match self {
            Profile::Small => (SMALL_TRIAL_EPOCHS, SMALL_TRIAL_PATIENCE),
            Profile::Full => (200, 10),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "tactile-pose", version, about = "Simulated tactile pose estimation pipeline")]
pub struct Cli {
    /// Worker threads for dataset generation (overrides the environment).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Collect train, validation and test datasets.
    Generate(GenerateArgs),
    /// Train a pose network.
    Train(TrainArgs),
    /// Search hyperparameters with TPE.
    Optimize(OptimizeArgs),
    /// Evaluate a trained network on a dataset.
    Evaluate(EvaluateArgs),
    /// Run the PI servo loop on a demonstration object.
    Servo(ServoArgs),
    /// Re-run a command from its run.json.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_parser = parse_object_type)]
    pub object: ObjectType,
    #[arg(long, value_enum, default_value = "small")]
    pub profile: Profile,
    /// Samples per split (defaults to the profile size).
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Simulator config JSON (defaults to the profile sensor).
    #[arg(long)]
    pub sim_config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory holding `train/` and `validation/`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "small")]
    pub profile: Profile,
    /// Hyperparameter JSON, such as `best.json` from `optimize`.
    #[arg(long)]
    pub hyperparams: Option<PathBuf>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    /// Directory holding `train/` and `validation/`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "small")]
    pub profile: Profile,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub startup: Option<usize>,
    /// Epoch budget per trial.
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset directory, usually `test/`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory (defaults to the model's directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Oracle,
    Model,
}

#[derive(Debug, Args)]
pub struct ServoArgs {
    #[arg(long, value_enum, default_value = "oracle")]
    pub estimator: EstimatorKind,
    /// Checkpoint for `--estimator model`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// plane, sphere, bump, edge or contour.
    #[arg(long, value_parser = parse_demo_object)]
    pub object: DemoObject,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, value_enum, default_value = "small")]
    pub profile: Profile,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub run_json: PathBuf,
    /// Write into this directory instead of the recorded one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_object_type(s: &str) -> Result<ObjectType, String> {
    match s {
        "surface" => Ok(ObjectType::Surface),
        "edge" => Ok(ObjectType::Edge),
        other => Err(format!("unknown object type {other:?} (expected surface or edge)")),
    }
}

fn parse_demo_object(s: &str) -> Result<DemoObject, String> {
    s.parse().map_err(|e: servo::ServoError| e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub object: ObjectType,
    pub profile: Profile,
    pub n: usize,
    pub seed: u64,
    pub sim: SimConfig,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub data: PathBuf,
    pub profile: Profile,
    pub hyperparams: Hyperparams,
    pub fit: FitOptions,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeConfig {
    pub data: PathBuf,
    pub profile: Profile,
    pub tpe: TpeConfig,
    pub space: tpe::SearchSpace,
    /// Fit options shared by all trials; trial `i` trains with seed
    /// `fit.seed + i`.
    pub fit: FitOptions,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateConfig {
    pub model: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServoRunConfig {
    pub estimator: EstimatorKind,
    pub model: Option<PathBuf>,
    pub object: DemoObject,
    pub steps: usize,
    pub sim: SimConfig,
    pub out: PathBuf,
}

/// A fully resolved command, as stored in `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum RunConfig {
    Generate(GenerateConfig),
    Train(TrainRunConfig),
    Optimize(OptimizeConfig),
    Evaluate(EvaluateConfig),
    Servo(ServoRunConfig),
}

#[derive(Debug, Serialize, Deserialize)]
struct RunRecord {
    tool: String,
    version: String,
    #[serde(flatten)]
    config: RunConfig,
}

impl RunConfig {
    pub fn name(&self) -> &'static str {
        match self {
            RunConfig::Generate(_) => "generate",
            RunConfig::Train(_) => "train",
            RunConfig::Optimize(_) => "optimize",
            RunConfig::Evaluate(_) => "evaluate",
            RunConfig::Servo(_) => "servo",
        }
    }

    pub fn out_dir(&self) -> &Path {
        match self {
            RunConfig::Generate(c) => &c.out,
            RunConfig::Train(c) => &c.out,
            RunConfig::Optimize(c) => &c.out,
            RunConfig::Evaluate(c) => &c.out,
            RunConfig::Servo(c) => &c.out,
        }
    }

    pub fn set_out_dir(&mut self, out: PathBuf) {
        match self {
            RunConfig::Generate(c) => c.out = out,
            RunConfig::Train(c) => c.out = out,
            RunConfig::Optimize(c) => c.out = out,
            RunConfig::Evaluate(c) => c.out = out,
            RunConfig::Servo(c) => c.out = out,
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| file_err(path, e))?;
        let record: RunRecord = serde_json::from_str(&text).map_err(|e| file_err(path, e))?;
        Ok(record.config)
    }

    fn write(&self, dir: &Path) -> Result<(), CliError> {
        let record = RunRecord {
            tool: "tactile-pose".into(),
            version: TOOL_VERSION.into(),
            config: self.clone(),
        };
        write_json(&dir.join("run.json"), &record)
    }
}

/// Resolve parsed flags against their profile.
pub fn resolve(command: Command) -> Result<RunConfig, CliError> {
    Ok(match command {
        Command::Generate(a) => {
            let sim = match &a.sim_config {
                Some(p) => SimConfig::load(p)?,
                None => a.profile.sim_config(),
            };
            RunConfig::Generate(GenerateConfig {
                object: a.object,
                profile: a.profile,
                n: a.n.unwrap_or(a.profile.n_samples()),
                seed: a.seed,
                sim,
                out: a.out,
            })
        }
        Command::Train(a) => {
            let train_meta = read_meta(&a.data.join(Split::Train.name()))?;
            let hyperparams = match &a.hyperparams {
                Some(p) => read_hyperparams(p)?,
                None => a.profile.hyperparams(train_meta.object_type),
            };
            hyperparams.validate()?;
            let mut fit = FitOptions {
                learning_rate: a.profile.learning_rate(),
                seed: a.seed,
                ..FitOptions::default()
            };
            if let Some(lr) = a.learning_rate {
                fit.learning_rate = lr;
            }
            if let Some(e) = a.max_epochs {
                fit.max_epochs = e;
            }
            if let Some(p) = a.patience {
                fit.patience_epochs = p;
            }
            RunConfig::Train(TrainRunConfig {
                data: a.data,
                profile: a.profile,
                hyperparams,
                fit,
                out: a.out,
            })
        }
        Command::Optimize(a) => {
            let (trials, startup) = a.profile.tpe_budget();
            let (epochs, patience) = a.profile.trial_fit();
            RunConfig::Optimize(OptimizeConfig {
                data: a.data,
                profile: a.profile,
                tpe: TpeConfig {
                    n_trials: a.trials.unwrap_or(trials),
                    n_startup: a.startup.unwrap_or(startup),
                    seed: a.seed,
                    ..TpeConfig::default()
                },
                space: a.profile.search_space(),
                fit: FitOptions {
                    learning_rate: a.profile.learning_rate(),
                    patience_epochs: patience,
                    max_epochs: a.max_epochs.unwrap_or(epochs),
                    seed: a.seed,
                    ..FitOptions::default()
                },
                out: a.out,
            })
        }
        Command::Evaluate(a) => {
            let out = match a.out {
                Some(o) => o,
                None => a.model.parent().map(Path::to_path_buf).unwrap_or_default(),
            };
            RunConfig::Evaluate(EvaluateConfig {
                model: a.model,
                data: a.data,
                out,
            })
        }
        Command::Servo(a) => {
            if a.estimator == EstimatorKind::Model && a.model.is_none() {
                return Err(CliError::Usage("--estimator model needs --model".into()));
            }
            let sim = match (&a.model, a.estimator) {
                (Some(p), EstimatorKind::Model) => {
                    let net = PoseNet::load(p)?;
                    a.profile.sim_config_for(net.image_size)
                }
                _ => a.profile.sim_config(),
            };
            RunConfig::Servo(ServoRunConfig {
                estimator: a.estimator,
                model: a.model,
                object: a.object,
                steps: a.steps,
                sim,
                out: a.out,
            })
        }
        Command::Replay(a) => {
            let mut config = RunConfig::load(&a.run_json)?;
            if let Some(out) = a.out {
                config.set_out_dir(out);
            }
            config
        }
    })
}

impl Profile {
    fn sim_config_for(self, image_size: usize) -> SimConfig {
        let mut c = self.sim_config();
        if c.geometry.image_size != image_size {
            c.geometry = crate::sim::SensorGeometry::default().with_image_size(image_size);
        }
        c
    }
}

fn read_meta(dir: &Path) -> Result<dataset::DatasetMeta, CliError> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(|e| file_err(&path, e))?;
    serde_json::from_str(&text).map_err(|e| file_err(&path, e))
}

/// Accepts a bare hyperparameter object or any object with a
/// `hyperparams` field (such as `best.json`).
fn read_hyperparams(path: &Path) -> Result<Hyperparams, CliError> {
    let text = fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| file_err(path, e))?;
    let inner = value.get("hyperparams").cloned().unwrap_or(value);
    serde_json::from_value(inner).map_err(|e| file_err(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text + "\n").map_err(|e| file_err(path, e))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| file_err(dir, e))
}

/// Worker threads: the flag, then the environment, then one.
pub fn thread_count(flag: Option<usize>) -> usize {
    flag.or_else(|| std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok()))
        .unwrap_or(1)
        .max(1)
}

/// Outcome of a command, printed as one JSON line on success.
pub type Summary = serde_json::Value;

/// Run a resolved config, writing `run.json` first.
pub fn execute(config: &RunConfig, threads: usize) -> Result<Summary, CliError> {
    create_dir(config.out_dir())?;
    config.write(config.out_dir())?;
    match config {
        RunConfig::Generate(c) => run_generate(c, threads),
        RunConfig::Train(c) => run_train(c),
        RunConfig::Optimize(c) => run_optimize(c),
        RunConfig::Evaluate(c) => run_evaluate(c),
        RunConfig::Servo(c) => run_servo(c),
    }
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| file_err(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Hash of a JSON-lines trial log with `wall_time_s` removed.
fn sha256_trial_log(path: &Path) -> Result<String, CliError> {
    let text = fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    let mut h = Sha256::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let mut v: serde_json::Value = serde_json::from_str(line).map_err(|e| file_err(path, e))?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("wall_time_s");
        }
        h.update(v.to_string().as_bytes());
        h.update(b"\n");
    }
    Ok(hex::encode(h.finalize()))
}

/// Write `manifest.json` listing `files` (relative to `dir`) and their
/// hashes; returns the map.
fn write_manifest(dir: &Path, files: &[&str]) -> Result<BTreeMap<String, String>, CliError> {
    let mut m = BTreeMap::new();
    for f in files {
        let path = dir.join(f);
        let hash = if f.ends_with(".jsonl") {
            sha256_trial_log(&path)?
        } else {
            sha256_file(&path)?
        };
        m.insert(f.to_string(), hash);
    }
    write_json(&dir.join("manifest.json"), &m)?;
    Ok(m)
}

fn run_generate(c: &GenerateConfig, threads: usize) -> Result<Summary, CliError> {
    let sim = Simulator::new(c.sim.clone())?;
    let mut manifest = BTreeMap::new();
    let mut sizes = serde_json::Map::new();
    for split in Split::ALL {
        let spec = CollectSpec::standard(c.object, c.n, split.seed(c.seed), split);
        let data = collect(&spec, &sim, threads)?;
        let dir = c.out.join(split.name());
        data.save(&dir)?;
        for (name, hash) in dataset::manifest(&dir)? {
            manifest.insert(format!("{}/{name}", split.name()), hash);
        }
        sizes.insert(split.name().into(), data.len().into());
    }
    write_json(&c.out.join("manifest.json"), &manifest)?;
    Ok(serde_json::json!({
        "command": "generate",
        "object_type": c.object,
        "samples": sizes,
        "out": c.out,
    }))
}

fn load_pair(data: &Path) -> Result<(Dataset, Dataset), CliError> {
    let train = Dataset::load(&data.join(Split::Train.name()))?;
    let val = Dataset::load(&data.join(Split::Validation.name()))?;
    Ok((train, val))
}

fn run_train(c: &TrainRunConfig) -> Result<Summary, CliError> {
    let (train, val) = load_pair(&c.data)?;
    let mut curve = String::from("epoch,train_loss,val_loss\n");
    let outcome = fit_with_progress(&c.hyperparams, &train, &val, &c.fit, |epoch, tr, va| {
        let _ = writeln!(curve, "{epoch},{tr},{va}");
    })?;
    let ckpt = c.out.join("model.ckpt");
    outcome.net.save(&ckpt)?;
    let curve_path = c.out.join("history.csv");
    fs::write(&curve_path, curve).map_err(|e| file_err(&curve_path, e))?;
    write_manifest(&c.out, &["model.ckpt", "history.csv"])?;
    Ok(serde_json::json!({
        "command": "train",
        "object_type": train.object_type(),
        "best_epoch": outcome.history.best_epoch,
        "stopped_epoch": outcome.history.stopped_epoch,
        "val_loss": outcome.val_loss,
        "model": ckpt,
    }))
}

fn run_optimize(c: &OptimizeConfig) -> Result<Summary, CliError> {
    let (train, val) = load_pair(&c.data)?;
    let log = c.out.join("trials.jsonl");
    let result = optimize_logged(
        |index, point| {
            let hp = Hyperparams::from_point(point)?;
            let opts = FitOptions {
                seed: c.fit.seed.wrapping_add(index as u64),
                ..c.fit.clone()
            };
            fit(&hp, &train, &val, &opts).map(|o| o.val_loss)
        },
        &c.space,
        &c.tpe,
        Some(&log),
    )?;
    let best_hp = Hyperparams::from_point(&result.best.params)?;
    write_json(
        &c.out.join("best.json"),
        &serde_json::json!({
            "index": result.best.index,
            "loss": result.best.loss,
            "hyperparams": best_hp,
        }),
    )?;
    let curve = best_so_far(&result.history);
    let mut csv = String::from("trial,loss,best_so_far,provenance\n");
    for (t, b) in result.history.iter().zip(&curve) {
        let loss = t.loss.map(|l| l.to_string()).unwrap_or_default();
        let prov = serde_json::to_value(t.provenance).expect("serializes");
        let _ = writeln!(csv, "{},{loss},{b},{}", t.index, prov.as_str().unwrap_or(""));
    }
    let csv_path = c.out.join("convergence.csv");
    fs::write(&csv_path, csv).map_err(|e| file_err(&csv_path, e))?;
    let svg_path = c.out.join("convergence.svg");
    fs::write(&svg_path, convergence_svg(&result.history)).map_err(|e| file_err(&svg_path, e))?;
    write_manifest(&c.out, &["trials.jsonl", "best.json", "convergence.csv", "convergence.svg"])?;
    Ok(serde_json::json!({
        "command": "optimize",
        "trials": result.history.len(),
        "best_index": result.best.index,
        "best_loss": result.best.loss,
        "hyperparams": best_hp,
    }))
}

/// Trial losses and the best-so-far curve on a log scale.
pub fn convergence_svg(history: &[Trial]) -> String {
    let (w, h, pad) = (480.0, 320.0, 40.0);
    let losses: Vec<f64> = history.iter().filter_map(|t| t.loss).filter(|l| *l > 0.0).collect();
    let lo = losses.iter().copied().fold(f64::INFINITY, f64::min).log10();
    let hi = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max).log10();
    let span = if (hi - lo).is_finite() && hi > lo { hi - lo } else { 1.0 };
    let n = history.len().max(2) as f64 - 1.0;
    let px = |i: usize| pad + (w - 2.0 * pad) * i as f64 / n;
    let py = |l: f64| h - pad - (h - 2.0 * pad) * (l.log10() - lo) / span;
    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    svg.push('\n');
    let _ = writeln!(
        svg,
        r#"<rect x="{pad}" y="{pad}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        w - 2.0 * pad,
        h - 2.0 * pad
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">trial</text>"#,
        w / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="12" y="{}" font-size="12" transform="rotate(-90 12 {})" text-anchor="middle">log10 validation loss</text>"#,
        h / 2.0,
        h / 2.0
    );
    for t in history {
        if let Some(l) = t.loss.filter(|l| *l > 0.0) {
            let fill = match t.provenance {
                tpe::Provenance::Startup => "gray",
                tpe::Provenance::Tpe => "steelblue",
            };
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{fill}"/>"#,
                px(t.index),
                py(l)
            );
        }
    }
    let points: Vec<String> = best_so_far(history)
        .iter()
        .enumerate()
        .filter(|(_, b)| b.is_finite() && **b > 0.0)
        .map(|(i, b)| format!("{:.2},{:.2}", px(i), py(*b)))
        .collect();
    let _ = writeln!(
        svg,
        r#"<polyline points="{}" fill="none" stroke="black" stroke-width="1.5"/>"#,
        points.join(" ")
    );
    svg.push_str("</svg>\n");
    svg
}

fn run_evaluate(c: &EvaluateConfig) -> Result<Summary, CliError> {
    let net = PoseNet::load(&c.model)?;
    let test = Dataset::load(&c.data)?;
    let report = evaluate(&net, &test)?;
    report.write_json(&c.out.join("eval.json"))?;
    report.write_csv(&c.out.join("eval.csv"))?;
    let svg_path = c.out.join("eval.svg");
    fs::write(&svg_path, eval_svg(&report)).map_err(|e| file_err(&svg_path, e))?;
    let mut summary = report.summary_json();
    summary["command"] = "evaluate".into();
    Ok(summary)
}

/// One panel per component: labels in ascending order against raw and
/// smoothed predictions.
pub fn eval_svg(report: &posenet::EvalReport) -> String {
    let (pw, ph, pad) = (300.0, 240.0, 30.0);
    let n_comp = report.components.len();
    let width = pw * n_comp as f64;
    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{ph}" viewBox="0 0 {width} {ph}">"#
    );
    svg.push('\n');
    for (k, c) in report.components.iter().enumerate() {
        let ox = pw * k as f64;
        let all = c.sorted_labels.iter().chain(&c.sorted_predictions);
        let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
        let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let n = c.sorted_labels.len().max(2) as f64 - 1.0;
        let px = |i: usize| ox + pad + (pw - 2.0 * pad) * i as f64 / n;
        let py = |v: f64| ph - pad - (ph - 2.0 * pad) * (v - lo) / span;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="18" font-size="12" text-anchor="middle">{} ({}), MAE {:.3}</text>"#,
            ox + pw / 2.0,
            c.component,
            c.unit,
            c.mae
        );
        for (i, p) in c.sorted_predictions.iter().enumerate() {
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="1.2" fill="lightgray"/>"#,
                px(i),
                py(*p)
            );
        }
        for (series, colour) in [(&c.sorted_labels, "black"), (&c.smoothed, "crimson")] {
            let pts: Vec<String> = series
                .iter()
                .enumerate()
                .map(|(i, v)| format!("{:.2},{:.2}", px(i), py(*v)))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="1.2"/>"#,
                pts.join(" ")
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

fn run_servo(c: &ServoRunConfig) -> Result<Summary, CliError> {
    let sim = Simulator::new(c.sim.clone())?;
    let object = c.object.object();
    let object_type = c.object.object_type();
    let (start, _) = c.object.start();
    let config = c.object.config(c.steps);
    let mut net;
    let mut oracle;
    let estimator: &mut dyn Estimator = match (c.estimator, &c.model) {
        (EstimatorKind::Model, Some(path)) => {
            net = PoseNet::load(path)?;
            if net.object_type != object_type {
                return Err(CliError::Usage(format!(
                    "{}: model estimates {} poses but {} needs {}",
                    path.display(),
                    net.object_type.name(),
                    c.object.name(),
                    object_type.name()
                )));
            }
            &mut net
        }
        (EstimatorKind::Model, None) => return Err(CliError::Usage("--estimator model needs --model".into())),
        (EstimatorKind::Oracle, _) => {
            oracle = OracleEstimator {
                object: &object,
                object_type,
            };
            &mut oracle
        }
    };
    let traj = explore(estimator, &object, &start, &config, &sim)?;
    traj.write_csv(&c.out.join("trajectory.csv"))?;
    traj.write_svg(&c.out.join("trajectory.svg"))?;
    let depth_index = object_type
        .components()
        .iter()
        .position(|comp| *comp == crate::pose::Component::Depth)
        .expect("every object type has a depth component");
    let summary = serde_json::json!({
        "command": "servo",
        "object": c.object.name(),
        "status": traj.status.name(),
        "steps": traj.steps.len(),
        "mean_depth_error_mm": traj.mean_depth_error(REFERENCE_DEPTH, depth_index),
    });
    write_json(&c.out.join("summary.json"), &summary)?;
    write_manifest(&c.out, &["trajectory.csv", "trajectory.svg", "summary.json"])?;
    Ok(summary)
}

const COMMANDS: [&str; 6] = ["generate", "train", "optimize", "evaluate", "servo", "replay"];

/// Machine-readable failure line.
pub fn error_line(command: &str, err: &CliError) -> String {
    serde_json::json!({
        "status": "error",
        "command": command,
        "kind": err.kind(),
        "message": err.to_string(),
    })
    .to_string()
}

/// Parse `args`, run the command and return the process exit code. The
/// success summary goes to stdout, failures to stderr as one JSON line.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args: Vec<std::ffi::OsString> = args.into_iter().map(Into::into).collect();
    let attempted = args
        .iter()
        .skip(1)
        .filter_map(|a| a.to_str())
        .find(|a| COMMANDS.contains(a))
        .map(str::to_string);
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return 0;
            }
            // Clap's message is for people; the last line is for scripts.
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            eprintln!("{}", error_line(attempted.as_deref().unwrap_or(""), &CliError::Usage(first)));
            return 2;
        }
    };
    let threads = thread_count(cli.threads);
    let name = match &cli.command {
        Command::Generate(_) => "generate",
        Command::Train(_) => "train",
        Command::Optimize(_) => "optimize",
        Command::Evaluate(_) => "evaluate",
        Command::Servo(_) => "servo",
        Command::Replay(_) => "replay",
    };
    match resolve(cli.command).and_then(|config| execute(&config, threads)) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("{}", error_line(name, &e));
            1
        }
    }
}
