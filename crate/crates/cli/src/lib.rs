//! Command-line front end: `train`, `attack`, `eval` and `export-features`.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use advforge::attacks::{run_attack, AttackConfig, AttackError, AttackKind, LabelSource};
use advforge::data::{load_mnist_dir, make_synthetic, DataError, Dataset, ImageBatch, Source, Split};
use advforge::evaluation::{
    evaluate_grid, export_features, write_report, CellRequest, EvalError, Named, ReportFormat,
};
use advforge::models::{argmax_rows, Checkpoint, Classifier, Discriminator, ModelError};
use advforge::seeds::derive_seed;
use advforge::training::{train, TrainError};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::{ConfigError, RunConfig};

const DATA_ENV: &str = "ADVFORGE_DATA_DIR";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("cannot load {path}: {source}")]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: ModelError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("cannot write {path}: {source}")]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// 1 for configuration and flag errors, 2 for data, checkpoint and
    /// file errors, 3 when training hit a non-finite loss.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 1,
            CliError::Eval(EvalError::MissingSurrogate | EvalError::SurrogateId(_) | EvalError::LimitTooLarge { .. }) => 1,
            CliError::Attack(AttackError::InvalidConfig(_)) => 1,
            CliError::Train(TrainError::NonFinite { .. }) => 3,
            CliError::Train(TrainError::InvalidConfig(_)) => 1,
            CliError::Train(TrainError::Data(_)) => 2,
            CliError::Train(_) => 2,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "advforge", version, about = "Adversarial attacks, robust training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a classifier under one regime and write its checkpoint and log.
    Train(TrainArgs),
    /// Perturb a dataset against a checkpoint and write the tensors.
    Attack(AttackArgs),
    /// Score a checkpoint on the clean / fgsm / bim / pgd grid.
    Eval(EvalArgs),
    /// Write penultimate-layer features of a checkpoint as CSV.
    ExportFeatures(ExportArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Config file; missing keys take the defaults listed below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.epochs=1` or `--set epochs=1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Print the resolved config and exit.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DatasetArg {
    Mnist,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long, value_enum, default_value = "mnist")]
    pub dataset: DatasetArg,
    /// MNIST directory; falls back to $ADVFORGE_DATA_DIR, then data/mnist.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Keep only the first N items (0 keeps all).
    #[arg(long, default_value_t = 0)]
    pub subset: usize,
    #[arg(long, default_value_t = 4)]
    pub synthetic_classes: usize,
    #[arg(long, default_value_t = 16)]
    pub synthetic_side: usize,
    #[arg(long, default_value_t = 500)]
    pub synthetic_size: usize,
    /// Seed of the synthetic generator.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
}

#[derive(Debug, Args)]
pub struct AttackFlags {
    /// L-infinity budget on the [0, 1] pixel scale.
    #[arg(long, default_value_t = 0.3)]
    pub epsilon: f32,
    /// Per-iteration step (bim, pgd); fgsm always steps by epsilon.
    #[arg(long, default_value_t = 0.01)]
    pub step: f32,
    /// Iterations (bim, pgd); fgsm always takes one.
    #[arg(long, default_value_t = 40)]
    pub iters: usize,
    /// Uniform start inside the ball [default: true for pgd, false otherwise]
    #[arg(long)]
    pub random_start: Option<bool>,
    #[arg(long, default_value = "ground_truth")]
    pub labels: LabelSource,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl AttackFlags {
    fn config(&self, kind: AttackKind) -> AttackConfig {
        config::attack_from_flags(kind, self.epsilon, self.step, self.iters, self.random_start, self.labels, self.seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AttackArg {
    Fgsm,
    Bim,
    Pgd,
}

impl From<AttackArg> for AttackKind {
    fn from(a: AttackArg) -> Self {
        match a {
            AttackArg::Fgsm => AttackKind::Fgsm,
            AttackArg::Bim => AttackKind::Bim,
            AttackArg::Pgd => AttackKind::Pgd,
        }
    }
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "pgd")]
    pub attack: AttackArg,
    #[command(flatten)]
    pub flags: AttackFlags,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 250)]
    pub batch_size: usize,
    /// Parent of the run directory.
    #[arg(long, default_value = "runs")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GridArg {
    /// Clean plus the three white-box attacks.
    White,
    /// Adds black-box rows transferred from --surrogate.
    Full,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Independently trained copy used for black-box rows.
    #[arg(long)]
    pub surrogate: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "white")]
    pub grid: GridArg,
    #[command(flatten)]
    pub flags: AttackFlags,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 250)]
    pub batch_size: usize,
    #[arg(long, default_value = "runs")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Number of items, taken in dataset order.
    #[arg(long, default_value_t = 1000)]
    pub limit: usize,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "runs")]
    pub out_dir: PathBuf,
}

/// The keys `train` accepts and their defaults, for `--help`.
pub fn train_help_footer() -> String {
    let mut s = String::from("Config keys and defaults:\n");
    let d = RunConfig::default();
    for key in config::KEYS {
        s.push_str(&format!("  {key} = {}\n", d.get(key)));
    }
    s
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Attack(a) => cmd_attack(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::ExportFeatures(a) => cmd_export_features(&a),
    }
}

fn mnist_dir(explicit: Option<&Path>) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(DATA_ENV).map_or_else(|| PathBuf::from("data/mnist"), PathBuf::from),
    }
}

fn limited(ds: Dataset, limit: usize) -> Result<Dataset, CliError> {
    if limit == 0 || limit >= ds.len() {
        Ok(ds)
    } else {
        Ok(ds.take(limit)?)
    }
}

/// Lowercase hex of the first 6 bytes of SHA-256.
fn short_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes())[..6].iter().map(|b| format!("{b:02x}")).collect()
}

/// `<parent>/<command>-<hash>-<utc timestamp>`, made unique with a suffix.
fn run_dir(parent: &Path, command: &str, identity: &str) -> Result<PathBuf, CliError> {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = format!("{command}-{}-{stamp}", short_hash(identity));
    let mut dir = parent.join(&base);
    let mut n = 1;
    while dir.exists() {
        dir = parent.join(format!("{base}-{n}"));
        n += 1;
    }
    fs::create_dir_all(&dir).map_err(|source| CliError::Output {
        path: dir.clone(),
        source,
    })?;
    Ok(dir)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|source| CliError::Output {
        path: path.to_path_buf(),
        source,
    })
}

fn load_classifier(path: &Path) -> Result<Classifier, CliError> {
    let err = |source| CliError::Checkpoint {
        path: path.to_path_buf(),
        source,
    };
    let ckpt = Checkpoint::load(path).map_err(|e| err(e.into()))?;
    Classifier::from_checkpoint(&ckpt).map_err(err)
}

fn load_data(a: &DataArgs) -> Result<Dataset, CliError> {
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let ds = match a.dataset {
        DatasetArg::Mnist => load_mnist_dir(&mnist_dir(a.data_dir.as_deref()), split)?,
        DatasetArg::Synthetic => {
            let seed = derive_seed(a.data_seed, "synthetic", split as u64);
            make_synthetic(a.synthetic_size, a.synthetic_classes, a.synthetic_side, seed, split)?
        }
    };
    limited(ds, a.subset)
}

fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&a.overrides)?;
    cfg.validate()?;
    let canonical = cfg.to_canonical();
    if a.print_config {
        print!("{canonical}");
        return Ok(());
    }

    let d = &cfg.data;
    let (train_set, test_set) = match d.source {
        Source::Mnist => {
            let dir = mnist_dir((!d.dir.is_empty()).then(|| Path::new(&d.dir)));
            (load_mnist_dir(&dir, Split::Train)?, load_mnist_dir(&dir, Split::Test)?)
        }
        Source::Synthetic => {
            let (c, side) = (d.synthetic_classes, d.synthetic_side);
            (
                make_synthetic(d.synthetic_train_size, c, side, derive_seed(cfg.seed, "synthetic", 0), Split::Train)?,
                make_synthetic(d.synthetic_test_size, c, side, derive_seed(cfg.seed, "synthetic", 1), Split::Test)?,
            )
        }
    };
    let train_set = limited(train_set, d.train_limit)?;
    let test_set = limited(test_set, d.test_limit)?;

    let model = Classifier::build(&cfg.model_config())?;
    let disc = cfg
        .regime
        .needs_discriminator()
        .then(|| Discriminator::build(model.feature_width(), model.classes(), cfg.discriminator_seed()))
        .transpose()?;
    let dir = run_dir(Path::new(&cfg.output_dir), "train", &canonical)?;
    write(&dir.join("config.cfg"), &canonical)?;
    log::info!("run directory {}", dir.display());

    let tc = cfg.train_config();
    let eval = (tc.eval_size > 0).then_some(&test_set);
    let out = train(model, disc, &train_set, eval, &tc, &mut |rec, _, _| {
        log::info!("epoch {} total loss {:.4}", rec.epoch, rec.total_loss);
        Ok(())
    })?;
    let ckpt = dir.join("model.ckpt");
    out.model.to_checkpoint().save(&ckpt).map_err(|e| CliError::Checkpoint {
        path: ckpt.clone(),
        source: e.into(),
    })?;
    if let Some(disc) = &out.discriminator {
        let p = dir.join("discriminator.ckpt");
        disc.to_checkpoint().save(&p).map_err(|e| CliError::Checkpoint {
            path: p.clone(),
            source: e.into(),
        })?;
    }
    write(&dir.join("train_log.jsonl"), out.log.to_jsonl())?;

    if let Some(last) = out.log.records.last() {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.2}%", 100.0 * x));
        println!(
            "{} epoch {}/{}: total loss {:.4}, clean loss {:.4}, held-out clean {}, held-out pgd {}",
            cfg.regime,
            last.epoch,
            cfg.epochs,
            last.total_loss,
            last.clean_loss,
            fmt(last.clean_acc),
            fmt(last.adv_acc)
        );
    }
    println!("{}", dir.display());
    Ok(())
}

fn cmd_attack(a: &AttackArgs) -> Result<(), CliError> {
    if a.batch_size == 0 {
        return Err(CliError::Usage("--batch-size must be at least 1".into()));
    }
    let kind = AttackKind::from(a.attack);
    let cfg = a.flags.config(kind);
    cfg.validate()?;
    let model = load_classifier(&a.checkpoint)?;
    let ds = load_data(&a.data)?;

    let mut originals = Vec::with_capacity(ds.len());
    let mut perturbed = Vec::with_capacity(ds.len());
    let (mut correct, mut clean_correct) = (0usize, 0usize);
    for (bi, batch) in ds.ordered_batches(a.batch_size)?.enumerate() {
        let batch_cfg = AttackConfig {
            seed: derive_seed(cfg.seed, "eval-batch", bi as u64),
            ..cfg
        };
        let adv = run_attack(kind, &model, &batch, &batch_cfg)?;
        let hit = |pred: Vec<usize>| pred.iter().zip(batch.labels()).filter(|(p, l)| p == l).count();
        correct += hit(argmax_rows(&model.forward(&adv.perturbed)?));
        clean_correct += hit(argmax_rows(&model.forward(batch.images())?));
        originals.extend_from_slice(batch.images().data());
        perturbed.extend_from_slice(adv.perturbed.data());
    }
    let n = ds.len();
    let mut shape = vec![n];
    shape.extend_from_slice(&ds.item_shape());
    let labels = ds.labels().iter().map(|&l| l as f32).collect::<Vec<_>>();
    let tensor = |data: Vec<f32>, shape: Vec<usize>| advforge::Tensor::new(shape, data).map_err(ModelError::from);
    let sidecar = serde_json::json!({
        "attack": kind.to_string(),
        "config": cfg,
        "checkpoint": a.checkpoint.display().to_string(),
        "dataset": ds.id(),
        "n_examples": n,
        "accuracy": correct as f64 / n as f64,
        "clean_accuracy": clean_correct as f64 / n as f64,
    });
    let sidecar = serde_json::to_string_pretty(&sidecar).expect("json value");
    let ckpt = Checkpoint {
        records: vec![
            ("originals".into(), tensor(originals, shape.clone())?),
            ("perturbed".into(), tensor(perturbed, shape)?),
            ("labels".into(), tensor(labels, vec![n])?),
        ],
        metadata: serde_json::to_string(&cfg).expect("attack config serializes"),
    };
    // a fresh ImageBatch re-checks the pixel invariant before anything is written
    ImageBatch::new(ckpt.records[1].1.clone(), ds.labels().to_vec())?;

    let dir = run_dir(&a.out_dir, "attack", &sidecar)?;
    write(&dir.join("adversarial.ckpt"), ckpt.to_bytes())?;
    write(&dir.join("attack.json"), &sidecar)?;
    println!(
        "{kind} eps {} step {} iterations {}: accuracy {:.2}% (clean {:.2}%) on {n} examples",
        cfg.epsilon,
        cfg.step,
        cfg.iterations,
        100.0 * correct as f64 / n as f64,
        100.0 * clean_correct as f64 / n as f64
    );
    println!("{}", dir.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let black_box = a.grid == GridArg::Full;
    if black_box && a.surrogate.is_none() {
        return Err(EvalError::MissingSurrogate.into());
    }
    let preset = |kind| a.flags.config(kind);
    for k in AttackKind::ALL {
        preset(k).validate()?;
    }
    let mut cells = vec![CellRequest::clean()];
    cells.extend(AttackKind::ALL.iter().map(|&k| CellRequest::white_box(k, preset(k))));
    if black_box {
        cells.extend(AttackKind::ALL.iter().map(|&k| CellRequest::black_box(k, preset(k))));
    }
    let model = load_classifier(&a.checkpoint)?;
    let surrogate = match (&a.surrogate, black_box) {
        (Some(p), true) => Some(load_classifier(p)?),
        _ => None,
    };
    let ds = load_data(&a.data)?;
    let id = a.checkpoint.display().to_string();
    let sid = a.surrogate.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
    let report = evaluate_grid(
        Named { model: &model, id: &id },
        surrogate.as_ref().map(|m| Named { model: m, id: &sid }),
        &ds,
        &cells,
        a.batch_size,
    )?;
    let json = report.to_json();
    let dir = run_dir(&a.out_dir, "eval", &json)?;
    write_report(&report, &dir.join("report.json"), ReportFormat::Json)?;
    write_report(&report, &dir.join("report.csv"), ReportFormat::Csv)?;
    println!("{}", report.table());
    println!("{}", dir.display());
    Ok(())
}

fn cmd_export_features(a: &ExportArgs) -> Result<(), CliError> {
    let model = load_classifier(&a.checkpoint)?;
    let ds = load_data(&a.data)?;
    if a.limit > ds.len() {
        return Err(EvalError::LimitTooLarge {
            limit: a.limit,
            size: ds.len(),
        }
        .into());
    }
    let identity = format!("{}|{}|{}", a.checkpoint.display(), ds.id(), a.limit);
    let dir = run_dir(&a.out_dir, "features", &identity)?;
    let path = dir.join("features.csv");
    export_features(&model, &ds, a.limit, &path)?;
    println!("{}", path.display());
    Ok(())
}
