//! L-infinity attacks: FGSM, BIM, PGD, and black-box transfer.
//!
//! Every iterate is projected onto `[x - eps, x + eps]` intersected with
//! `[0, 1]`, where `x` is the original image.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ImageBatch;
use crate::models::{Classifier, ModelError};
use crate::tensor::{sign, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack configuration: {0}")]
    InvalidConfig(String),
    #[error("surrogate and target disagree: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<TensorError> for AttackError {
    fn from(e: TensorError) -> Self {
        AttackError::Model(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    Bim,
    Pgd,
}

impl AttackKind {
    pub const ALL: [AttackKind; 3] = [AttackKind::Fgsm, AttackKind::Bim, AttackKind::Pgd];
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Bim => "bim",
            AttackKind::Pgd => "pgd",
        })
    }
}

impl FromStr for AttackKind {
    type Err = AttackError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fgsm" => Ok(AttackKind::Fgsm),
            "bim" => Ok(AttackKind::Bim),
            "pgd" => Ok(AttackKind::Pgd),
            other => Err(AttackError::InvalidConfig(format!(
                "unknown attack `{other}` (expected fgsm, bim or pgd)"
            ))),
        }
    }
}

/// Which labels the attacked loss uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    #[default]
    GroundTruth,
    /// The attacked model's own predictions, which avoids label leaking.
    ModelPredicted,
}

impl FromStr for LabelSource {
    type Err = AttackError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ground_truth" => Ok(LabelSource::GroundTruth),
            "model_predicted" => Ok(LabelSource::ModelPredicted),
            other => Err(AttackError::InvalidConfig(format!(
                "unknown label source `{other}` (expected ground_truth or model_predicted)"
            ))),
        }
    }
}

impl fmt::Display for LabelSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelSource::GroundTruth => "ground_truth",
            LabelSource::ModelPredicted => "model_predicted",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Total L-infinity budget on the `[0, 1]` pixel scale.
    pub epsilon: f32,
    /// Per-iteration step; unused by FGSM.
    pub step: f32,
    pub iterations: usize,
    pub random_start: bool,
    pub label_source: LabelSource,
    pub seed: u64,
}

impl AttackConfig {
    /// MNIST evaluation settings: eps 0.3, step 0.01, 40 iterations. Random
    /// start is on for PGD only.
    pub fn mnist(kind: AttackKind) -> Self {
        Self::preset(kind, 0.3, 0.01, 40)
    }

    /// CIFAR-shaped evaluation settings: eps 0.031, 20 iterations.
    pub fn cifar(kind: AttackKind) -> Self {
        Self::preset(kind, 0.031, 0.003, 20)
    }

    fn preset(kind: AttackKind, epsilon: f32, step: f32, iterations: usize) -> Self {
        let (step, iterations) = match kind {
            AttackKind::Fgsm => (epsilon, 1),
            _ => (step, iterations),
        };
        Self {
            epsilon,
            step,
            iterations,
            random_start: kind == AttackKind::Pgd,
            label_source: LabelSource::GroundTruth,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(AttackError::InvalidConfig(format!("epsilon {} is outside [0, 1]", self.epsilon)));
        }
        if self.iterations == 0 {
            return Err(AttackError::InvalidConfig("iterations must be at least 1".into()));
        }
        if self.iterations > 1 && !(self.step > 0.0 && self.step.is_finite()) {
            return Err(AttackError::InvalidConfig(format!(
                "step must be positive with {} iterations, got {}",
                self.iterations, self.step
            )));
        }
        Ok(())
    }
}

/// Clean batch, its perturbed copy, and the settings that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialBatch {
    pub originals: ImageBatch,
    pub perturbed: Tensor,
    pub kind: AttackKind,
    pub config: AttackConfig,
}

impl AdversarialBatch {
    /// The perturbed images paired with the original labels.
    pub fn as_batch(&self) -> ImageBatch {
        ImageBatch::with_indices(
            self.perturbed.clone(),
            self.originals.labels().to_vec(),
            self.originals.indices().to_vec(),
        )
        .expect("perturbed images stay in [0, 1]")
    }

    /// Largest absolute per-pixel change.
    pub fn linf(&self) -> f32 {
        self.originals
            .images()
            .max_abs_diff(&self.perturbed)
            .expect("perturbed has the original shape")
    }
}

fn attack_labels(model: &Classifier, batch: &ImageBatch, src: LabelSource) -> Result<Vec<usize>, AttackError> {
    Ok(match src {
        LabelSource::GroundTruth => batch.labels().to_vec(),
        LabelSource::ModelPredicted => model.predict(batch.images())?,
    })
}

/// `x + eps * sign(grad)` clamped to `[0, 1]`, one gradient query.
pub fn fgsm(model: &Classifier, batch: &ImageBatch, cfg: &AttackConfig) -> Result<AdversarialBatch, AttackError> {
    cfg.validate()?;
    let labels = attack_labels(model, batch, cfg.label_source)?;
    let x = batch.images();
    let (g, _) = model.input_gradient(x, &labels)?;
    let eps = cfg.epsilon;
    let data = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&xi, &gi)| (xi + eps * sign(gi)).clamp(0.0, 1.0))
        .collect();
    Ok(AdversarialBatch {
        originals: batch.clone(),
        perturbed: Tensor::new(x.shape().to_vec(), data)?,
        kind: AttackKind::Fgsm,
        config: *cfg,
    })
}

/// Iterated sign steps with projection around the original image.
pub fn bim(model: &Classifier, batch: &ImageBatch, cfg: &AttackConfig) -> Result<AdversarialBatch, AttackError> {
    iterate(model, batch, cfg, false, AttackKind::Bim)
}

/// BIM from a uniform random start in the eps-ball when `cfg.random_start`.
pub fn pgd(model: &Classifier, batch: &ImageBatch, cfg: &AttackConfig) -> Result<AdversarialBatch, AttackError> {
    iterate(model, batch, cfg, cfg.random_start, AttackKind::Pgd)
}

pub fn run_attack(
    kind: AttackKind,
    model: &Classifier,
    batch: &ImageBatch,
    cfg: &AttackConfig,
) -> Result<AdversarialBatch, AttackError> {
    match kind {
        AttackKind::Fgsm => fgsm(model, batch, cfg),
        AttackKind::Bim => bim(model, batch, cfg),
        AttackKind::Pgd => pgd(model, batch, cfg),
    }
}

/// Crafts examples on `surrogate` for use against `target`. The target is
/// only checked for shape compatibility; it is never queried.
pub fn transfer_attack(
    surrogate: &Classifier,
    target: &Classifier,
    batch: &ImageBatch,
    kind: AttackKind,
    cfg: &AttackConfig,
) -> Result<AdversarialBatch, AttackError> {
    let (s, t) = (surrogate.config(), target.config());
    if s.input_shape != t.input_shape || s.classes != t.classes {
        return Err(AttackError::Incompatible(format!(
            "surrogate takes {:?} with {} classes, target takes {:?} with {} classes",
            s.input_shape, s.classes, t.input_shape, t.classes
        )));
    }
    run_attack(kind, surrogate, batch, cfg)
}

fn iterate(
    model: &Classifier,
    batch: &ImageBatch,
    cfg: &AttackConfig,
    random_start: bool,
    kind: AttackKind,
) -> Result<AdversarialBatch, AttackError> {
    cfg.validate()?;
    let labels = attack_labels(model, batch, cfg.label_source)?;
    let x = batch.images();
    let shape = x.shape().to_vec();
    let eps = cfg.epsilon;
    let lo: Vec<f32> = x.data().iter().map(|&v| v - eps).collect();
    let hi: Vec<f32> = x.data().iter().map(|&v| v + eps).collect();

    let mut cur: Vec<f32> = if random_start {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        x.data()
            .iter()
            .map(|&v| {
                let u: f32 = rng.gen();
                (v + (2.0 * u - 1.0) * eps).clamp(0.0, 1.0)
            })
            .collect()
    } else {
        x.data().to_vec()
    };

    for _ in 0..cfg.iterations {
        let xt = Tensor::new(shape.clone(), cur)?;
        let (g, _) = model.input_gradient(&xt, &labels)?;
        cur = xt.into_data();
        for (i, (v, &gi)) in cur.iter_mut().zip(g.data()).enumerate() {
            *v = (*v + cfg.step * sign(gi)).clamp(lo[i], hi[i]).clamp(0.0, 1.0);
        }
    }
    Ok(AdversarialBatch {
        originals: batch.clone(),
        perturbed: Tensor::new(shape, cur)?,
        kind,
        config: *cfg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, Split};
    use crate::models::ModelConfig;

    fn setup() -> (Classifier, ImageBatch) {
        let model = Classifier::build(&ModelConfig::small_cnn([1, 16, 16], 2, [4, 4, 4], 3)).unwrap();
        let ds = make_synthetic(16, 2, 16, 1, Split::Test).unwrap();
        let batch = ds.gather(&(0..8).collect::<Vec<_>>());
        (model, batch)
    }

    #[test]
    fn zero_budget_is_identity() {
        let (m, b) = setup();
        for kind in AttackKind::ALL {
            let cfg = AttackConfig {
                epsilon: 0.0,
                ..AttackConfig::mnist(kind)
            };
            let cfg = AttackConfig { iterations: 3, ..cfg };
            let adv = run_attack(kind, &m, &b, &cfg).unwrap();
            assert!(adv.perturbed.bit_eq(b.images()), "{kind}");
        }
    }

    #[test]
    fn budget_and_range_hold() {
        let (m, b) = setup();
        let cfg = AttackConfig {
            iterations: 5,
            step: 0.2,
            ..AttackConfig::mnist(AttackKind::Pgd)
        };
        let adv = pgd(&m, &b, &cfg).unwrap();
        assert!(adv.linf() <= 0.3 + f32::EPSILON);
        assert!(adv.perturbed.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn config_validation() {
        let mut cfg = AttackConfig::mnist(AttackKind::Bim);
        cfg.epsilon = 1.5;
        assert!(cfg.validate().is_err());
        cfg.epsilon = 0.1;
        cfg.step = 0.0;
        assert!(cfg.validate().is_err());
        cfg.iterations = 1;
        assert!(cfg.validate().is_ok());
        cfg.iterations = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn presets() {
        let p = AttackConfig::mnist(AttackKind::Pgd);
        assert_eq!((p.epsilon, p.step, p.iterations, p.random_start), (0.3, 0.01, 40, true));
        assert!(!AttackConfig::mnist(AttackKind::Bim).random_start);
        assert_eq!(AttackConfig::cifar(AttackKind::Pgd).iterations, 20);
        assert_eq!("pgd".parse::<AttackKind>().unwrap(), AttackKind::Pgd);
        assert!("cw".parse::<AttackKind>().is_err());
    }

    #[test]
    fn incompatible_surrogate_rejected() {
        let (m, b) = setup();
        let other = Classifier::build(&ModelConfig::small_cnn([1, 16, 16], 3, [4, 4, 4], 3)).unwrap();
        let cfg = AttackConfig::mnist(AttackKind::Fgsm);
        assert!(matches!(
            transfer_attack(&other, &m, &b, AttackKind::Fgsm, &cfg),
            Err(AttackError::Incompatible(_))
        ));
    }
}
