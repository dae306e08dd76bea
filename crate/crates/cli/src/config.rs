//! Run configuration: a flat `key = value` file with optional `[section]`
//! headers. Keys inside a section are prefixed with `section.`; `#` starts
//! a comment. Serialization is canonical: sections and keys in a fixed order.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use advforge::attacks::{AttackConfig, AttackKind, LabelSource};
use advforge::data::Source;
use advforge::models::{Architecture, ModelConfig};
use advforge::seeds::derive_seed;
use advforge::training::{AdamConfig, Regime, TrainConfig};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, found `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}` is ambiguous; use one of {candidates}")]
    Ambiguous { key: String, candidates: String },
    #[error("config key `{key}`: invalid value `{value}` ({reason})")]
    Value { key: String, value: String, reason: String },
    #[error("config key `{key}`: {reason}")]
    Invalid { key: String, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSettings {
    pub source: Source,
    /// Empty means unset: fall back to `ADVFORGE_DATA_DIR`, then `data/mnist`.
    pub dir: String,
    /// 0 keeps the whole split.
    pub train_limit: usize,
    pub test_limit: usize,
    pub synthetic_classes: usize,
    pub synthetic_side: usize,
    pub synthetic_train_size: usize,
    pub synthetic_test_size: usize,
}

/// Everything one training run needs. Every seed is derived from `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSettings,
    pub arch: Architecture,
    pub channels: Vec<usize>,
    pub regime: Regime,
    pub lambda1: f32,
    pub lambda2: f32,
    pub lr: f64,
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_size: usize,
    pub adam: AdamConfig,
    pub attack: AttackConfig,
    pub output_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::mnist(Regime::Cada, 0);
        Self {
            seed: 0,
            data: DataSettings {
                source: Source::Mnist,
                dir: String::new(),
                train_limit: 0,
                test_limit: 0,
                synthetic_classes: 4,
                synthetic_side: 16,
                synthetic_train_size: 2000,
                synthetic_test_size: 500,
            },
            arch: Architecture::Lenet,
            channels: vec![6, 16],
            regime: t.regime,
            lambda1: t.lambda1,
            lambda2: t.lambda2,
            lr: t.lr,
            lr_drop_epoch: t.lr_drop_epoch,
            lr_drop_factor: t.lr_drop_factor,
            epochs: t.epochs,
            batch_size: t.batch_size,
            eval_size: t.eval_size,
            adam: t.adam,
            attack: t.attack,
            output_dir: "runs".into(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, ConfigError> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
}

/// Canonical key order; sections are the prefixes before the first dot.
pub const KEYS: &[&str] = &[
    "seed",
    "data.source",
    "data.dir",
    "data.train_limit",
    "data.test_limit",
    "data.synthetic.classes",
    "data.synthetic.side",
    "data.synthetic.train_size",
    "data.synthetic.test_size",
    "model.arch",
    "model.channels",
    "train.regime",
    "train.lambda1",
    "train.lambda2",
    "train.lr",
    "train.lr_drop_epoch",
    "train.lr_drop_factor",
    "train.epochs",
    "train.batch_size",
    "train.eval_size",
    "train.adam.beta1",
    "train.adam.beta2",
    "train.adam.eps",
    "attack.epsilon",
    "attack.step",
    "attack.iterations",
    "attack.random_start",
    "attack.label_source",
    "output.dir",
];

/// Resolves a user-supplied key: an exact key, or the unique key whose
/// dotted suffix matches (`epochs` for `train.epochs`).
pub fn resolve_key(key: &str) -> Result<&'static str, ConfigError> {
    if let Some(k) = KEYS.iter().find(|k| **k == key) {
        return Ok(k);
    }
    let suffix = format!(".{key}");
    let hits: Vec<&'static str> = KEYS.iter().copied().filter(|k| k.ends_with(&suffix)).collect();
    match hits.as_slice() {
        [one] => Ok(one),
        [] => Err(ConfigError::UnknownKey(key.into())),
        many => Err(ConfigError::Ambiguous {
            key: key.into(),
            candidates: many.join(", "),
        }),
    }
}

impl RunConfig {
    pub fn get(&self, key: &str) -> String {
        let d = &self.data;
        match key {
            "seed" => self.seed.to_string(),
            "data.source" => d.source.to_string(),
            "data.dir" => d.dir.clone(),
            "data.train_limit" => d.train_limit.to_string(),
            "data.test_limit" => d.test_limit.to_string(),
            "data.synthetic.classes" => d.synthetic_classes.to_string(),
            "data.synthetic.side" => d.synthetic_side.to_string(),
            "data.synthetic.train_size" => d.synthetic_train_size.to_string(),
            "data.synthetic.test_size" => d.synthetic_test_size.to_string(),
            "model.arch" => self.arch.to_string(),
            "model.channels" => join(&self.channels),
            "train.regime" => self.regime.to_string(),
            "train.lambda1" => self.lambda1.to_string(),
            "train.lambda2" => self.lambda2.to_string(),
            "train.lr" => self.lr.to_string(),
            "train.lr_drop_epoch" => self.lr_drop_epoch.to_string(),
            "train.lr_drop_factor" => self.lr_drop_factor.to_string(),
            "train.epochs" => self.epochs.to_string(),
            "train.batch_size" => self.batch_size.to_string(),
            "train.eval_size" => self.eval_size.to_string(),
            "train.adam.beta1" => self.adam.beta1.to_string(),
            "train.adam.beta2" => self.adam.beta2.to_string(),
            "train.adam.eps" => self.adam.eps.to_string(),
            "attack.epsilon" => self.attack.epsilon.to_string(),
            "attack.step" => self.attack.step.to_string(),
            "attack.iterations" => self.attack.iterations.to_string(),
            "attack.random_start" => self.attack.random_start.to_string(),
            "attack.label_source" => self.attack.label_source.to_string(),
            "output.dir" => self.output_dir.clone(),
            _ => unreachable!("not a canonical key: {key}"),
        }
    }

    /// Sets one value; `key` may be a unique suffix of a canonical key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let key = resolve_key(key)?;
        let value = value.trim();
        let d = &mut self.data;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "data.source" => {
                d.source = match value {
                    "mnist" => Source::Mnist,
                    "synthetic" => Source::Synthetic,
                    _ => return Err(bad(key, value, "expected mnist or synthetic")),
                }
            }
            "data.dir" => d.dir = value.into(),
            "data.train_limit" => d.train_limit = parse(key, value)?,
            "data.test_limit" => d.test_limit = parse(key, value)?,
            "data.synthetic.classes" => d.synthetic_classes = parse(key, value)?,
            "data.synthetic.side" => d.synthetic_side = parse(key, value)?,
            "data.synthetic.train_size" => d.synthetic_train_size = parse(key, value)?,
            "data.synthetic.test_size" => d.synthetic_test_size = parse(key, value)?,
            "model.arch" => self.arch = parse(key, value)?,
            "model.channels" => self.channels = parse_list(key, value)?,
            "train.regime" => self.regime = parse(key, value)?,
            "train.lambda1" => self.lambda1 = parse(key, value)?,
            "train.lambda2" => self.lambda2 = parse(key, value)?,
            "train.lr" => self.lr = parse(key, value)?,
            "train.lr_drop_epoch" => self.lr_drop_epoch = parse(key, value)?,
            "train.lr_drop_factor" => self.lr_drop_factor = parse(key, value)?,
            "train.epochs" => self.epochs = parse(key, value)?,
            "train.batch_size" => self.batch_size = parse(key, value)?,
            "train.eval_size" => self.eval_size = parse(key, value)?,
            "train.adam.beta1" => self.adam.beta1 = parse(key, value)?,
            "train.adam.beta2" => self.adam.beta2 = parse(key, value)?,
            "train.adam.eps" => self.adam.eps = parse(key, value)?,
            "attack.epsilon" => self.attack.epsilon = parse(key, value)?,
            "attack.step" => self.attack.step = parse(key, value)?,
            "attack.iterations" => self.attack.iterations = parse(key, value)?,
            "attack.random_start" => self.attack.random_start = parse(key, value)?,
            "attack.label_source" => self.attack.label_source = parse(key, value)?,
            "output.dir" => self.output_dir = value.into(),
            _ => unreachable!(),
        }
        Ok(())
    }

    /// Parses a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.trim().into(),
            })?;
            let k = k.trim();
            let full = if section.is_empty() { k.to_string() } else { format!("{section}.{k}") };
            if !KEYS.contains(&full.as_str()) {
                return Err(ConfigError::UnknownKey(full));
            }
            cfg.set(&full, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), ConfigError> {
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::Syntax { line: 0, text: o.clone() })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Canonical text: top-level keys first, then one section per prefix.
    pub fn to_canonical(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for key in KEYS {
            let (sec, leaf) = key.split_once('.').unwrap_or(("", key));
            if sec != section {
                let _ = write!(out, "\n[{sec}]\n");
                section = sec;
            }
            let _ = writeln!(out, "{leaf} = {}", self.get(key));
        }
        out
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            arch: self.arch,
            input_shape: self.input_shape(),
            classes: self.classes(),
            channels: self.channels.clone(),
            seed: derive_seed(self.seed, "model-init", 0),
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        match self.data.source {
            Source::Mnist => [1, 28, 28],
            Source::Synthetic => [1, self.data.synthetic_side, self.data.synthetic_side],
        }
    }

    pub fn classes(&self) -> usize {
        match self.data.source {
            Source::Mnist => 10,
            Source::Synthetic => self.data.synthetic_classes,
        }
    }

    pub fn discriminator_seed(&self) -> u64 {
        derive_seed(self.seed, "disc-init", 0)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            regime: self.regime,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lr: self.lr,
            lr_drop_epoch: self.lr_drop_epoch,
            lr_drop_factor: self.lr_drop_factor,
            epochs: self.epochs,
            batch_size: self.batch_size,
            attack: AttackConfig {
                seed: derive_seed(self.seed, "attack", 0),
                ..self.attack
            },
            adam: self.adam,
            seed: derive_seed(self.seed, "shuffle", 0),
            eval_size: self.eval_size,
        }
    }

    /// Cross-field checks, reported against the most specific key.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let want = match self.arch {
            Architecture::Lenet => 2,
            Architecture::SmallCnn => 3,
        };
        if self.channels.len() != want {
            return Err(ConfigError::Invalid {
                key: "model.channels".into(),
                reason: format!("{} needs {want} widths, got {}", self.arch, self.channels.len()),
            });
        }
        if self.arch == Architecture::Lenet && self.data.source != Source::Mnist {
            return Err(ConfigError::Invalid {
                key: "model.arch".into(),
                reason: "lenet expects 28x28 MNIST inputs".into(),
            });
        }
        self.train_config().validate().map_err(|e| ConfigError::Invalid {
            key: "train".into(),
            reason: e.to_string(),
        })
    }
}

fn bad(key: &str, value: &str, reason: &str) -> ConfigError {
    ConfigError::Value {
        key: key.into(),
        value: value.into(),
        reason: reason.into(),
    }
}

/// Attack flags shared by `attack` and `eval`, resolved against a preset.
pub fn attack_from_flags(
    kind: AttackKind,
    epsilon: f32,
    step: f32,
    iterations: usize,
    random_start: Option<bool>,
    labels: LabelSource,
    seed: u64,
) -> AttackConfig {
    let base = AttackConfig::mnist(kind);
    let cfg = match kind {
        AttackKind::Fgsm => AttackConfig { epsilon, step: epsilon, ..base },
        _ => AttackConfig {
            epsilon,
            step,
            iterations,
            ..base
        },
    };
    AttackConfig {
        random_start: random_start.unwrap_or(cfg.random_start),
        label_source: labels,
        seed,
        ..cfg
    }
}
