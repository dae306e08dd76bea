//! Losses, Adam, and the five training regimes.
//!
//! | regime  | discriminator step                  | classifier step                                   |
//! |---------|-------------------------------------|---------------------------------------------------|
//! | vanilla | none                                | clean CE                                          |
//! | at      | none                                | clean CE + CE on PGD examples                     |
//! | da      | domain loss, trunk + `h_d`          | clean CE + l2 * domain loss (labels switched)     |
//! | ca      | none (joint with the classifier)    | clean CE + l1 * CE of `h_c`, trunk + `h_c` too    |
//! | cada    | domain loss, trunk + `h_d`          | clean CE + l1 * `h_c` CE + l2 * switched domain    |
//!
//! Outside `at`, the classifier head never sees adversarial examples.

use std::error::Error as StdError;
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{pgd, AdversarialBatch, AttackConfig, AttackError, AttackKind};
use crate::data::{Dataset, DataError, ImageBatch};
use crate::evaluation::{attack_accuracy, clean_accuracy, EvalError};
use crate::models::{BoundClassifier, BoundDiscriminator, Classifier, Discriminator, DiscriminatorPart, ModelError};
use crate::seeds::derive_seed;
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("regime {0} needs a discriminator")]
    MissingDiscriminator(Regime),
    #[error("regime {0} takes no discriminator")]
    UnexpectedDiscriminator(Regime),
    #[error("discriminator width {disc} does not match feature width {features}")]
    WidthMismatch { disc: usize, features: usize },
    #[error("clean sub-batch has {clean} items but adversarial sub-batch has {adv}")]
    SubBatchMismatch { clean: usize, adv: usize },
    #[error("generator-side domain loss needs a frozen discriminator binding")]
    TrainableDiscriminator,
    #[error("parameter slot {slot}: value has {param} elements, gradient has {grad}")]
    GradShape { slot: usize, param: usize, grad: usize },
    #[error("non-finite {term} loss ({value}) at epoch {epoch}, batch {batch}")]
    NonFinite {
        term: &'static str,
        value: f32,
        epoch: usize,
        batch: usize,
    },
    #[error("epoch callback failed: {0}")]
    Callback(Box<dyn StdError + Send + Sync>),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] Box<EvalError>),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Vanilla,
    At,
    Da,
    Ca,
    Cada,
}

impl Regime {
    pub const ALL: [Regime; 5] = [Regime::Vanilla, Regime::At, Regime::Da, Regime::Ca, Regime::Cada];

    pub fn needs_discriminator(self) -> bool {
        matches!(self, Regime::Da | Regime::Ca | Regime::Cada)
    }

    fn uses_adversaries(self) -> bool {
        self != Regime::Vanilla
    }

    fn has_domain_step(self) -> bool {
        matches!(self, Regime::Da | Regime::Cada)
    }

    fn has_class_head(self) -> bool {
        matches!(self, Regime::Ca | Regime::Cada)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Vanilla => "vanilla",
            Regime::At => "at",
            Regime::Da => "da",
            Regime::Ca => "ca",
            Regime::Cada => "cada",
        })
    }
}

impl FromStr for Regime {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Regime::ALL
            .into_iter()
            .find(|r| r.to_string() == s)
            .ok_or_else(|| TrainError::InvalidConfig(format!("unknown regime `{s}` (expected vanilla, at, da, ca or cada)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub regime: Regime,
    /// Weight of the `h_c` adversarial classification loss.
    pub lambda1: f32,
    /// Weight of the domain loss, applied on both sides.
    pub lambda2: f32,
    pub lr: f64,
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Training-time PGD; its seed roots the per-iteration start noise.
    pub attack: AttackConfig,
    pub adam: AdamConfig,
    /// Roots the per-epoch shuffles.
    pub seed: u64,
    /// Held-out items scored after each epoch; 0 skips the pass.
    pub eval_size: usize,
}

impl TrainConfig {
    /// MNIST settings: l1 = l2 = 0.5, lr 3e-4 dropped 10x at epoch 150,
    /// batch 64, PGD eps 0.3 / step 0.01 / 40 iterations, 20 epochs.
    pub fn mnist(regime: Regime, seed: u64) -> Self {
        Self {
            regime,
            lambda1: 0.5,
            lambda2: 0.5,
            lr: 3e-4,
            lr_drop_epoch: 150,
            lr_drop_factor: 0.1,
            epochs: 20,
            batch_size: 64,
            attack: AttackConfig::mnist(AttackKind::Pgd),
            adam: AdamConfig::default(),
            seed,
            eval_size: 1000,
        }
    }

    /// CIFAR-shaped settings: as MNIST but l2 = 1.0 and eps 0.031.
    pub fn cifar(regime: Regime, seed: u64) -> Self {
        Self {
            lambda2: 1.0,
            attack: AttackConfig::cifar(AttackKind::Pgd),
            ..Self::mnist(regime, seed)
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a nonnegative number, got {v}"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor.is_finite()) {
            return bad(format!("lr_drop_factor must be positive, got {}", self.lr_drop_factor));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad(format!("adam settings out of range: {a:?}"));
        }
        self.attack.validate()?;
        Ok(())
    }
}

/// Learning rate for 1-based `epoch`: `lr` before the drop epoch,
/// `lr * lr_drop_factor` from it on.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch >= cfg.lr_drop_epoch {
        cfg.lr * cfg.lr_drop_factor
    } else {
        cfg.lr
    }
}

/// Adam moments and step count for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamSlot {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step(param: &mut [f32], grad: &[f32], slot: &mut AdamSlot, cfg: &AdamConfig, lr: f64) {
    assert_eq!(param.len(), grad.len(), "adam_step: parameter and gradient lengths differ");
    assert_eq!(param.len(), slot.m.len(), "adam_step: parameter and moment lengths differ");
    slot.step += 1;
    let t = slot.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(&mut slot.m).zip(&mut slot.v) {
        let g = g as f64;
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let update = lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
        *p = (*p as f64 - update) as f32;
    }
}

/// Adam over an ordered parameter list. Only slots that are stepped advance,
/// so parameters left out of an update keep both their value and moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    slots: Vec<AdamSlot>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        Self {
            config,
            slots: params.iter().map(|p| AdamSlot::new(p.numel())).collect(),
        }
    }

    pub fn slots(&self) -> &[AdamSlot] {
        &self.slots
    }

    pub fn step(&mut self, slot: usize, param: &mut Tensor, grad: &[f32], lr: f64) -> Result<(), TrainError> {
        let s = &mut self.slots[slot];
        if param.numel() != grad.len() || s.m.len() != grad.len() {
            return Err(TrainError::GradShape {
                slot,
                param: param.numel(),
                grad: grad.len(),
            });
        }
        adam_step(param.data_mut(), grad, s, &self.config, lr);
        Ok(())
    }
}

/// Which player a domain loss trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainSide {
    /// Clean features labelled 1, adversarial 0; features are detached.
    Discriminator,
    /// Labels switched; the discriminator binding must be frozen.
    Generator,
}

/// Mean cross-entropy of the classifier on clean images.
pub fn loss_clean(tape: &mut Tape, f: &BoundClassifier<'_>, x: Var, labels: &[usize]) -> Result<Var, TrainError> {
    let logits = f.logits(tape, x)?;
    Ok(tape.softmax_cross_entropy(logits, labels)?)
}

/// Mean cross-entropy of `h_c` on adversarial features `phi(x_adv)`.
pub fn loss_adv_class(
    tape: &mut Tape,
    d: &BoundDiscriminator,
    z_adv: Var,
    labels: &[usize],
) -> Result<Var, TrainError> {
    let logits = d.class_logits(tape, z_adv)?;
    Ok(tape.softmax_cross_entropy(logits, labels)?)
}

/// Least-squares domain loss over clean and adversarial features, each term
/// averaged over its own sub-batch.
pub fn loss_domain(
    tape: &mut Tape,
    d: &BoundDiscriminator,
    z_clean: Var,
    z_adv: Var,
    side: DomainSide,
) -> Result<Var, TrainError> {
    let (nc, na) = (tape.shape(z_clean)[0], tape.shape(z_adv)[0]);
    if nc != na {
        return Err(TrainError::SubBatchMismatch { clean: nc, adv: na });
    }
    let (zc, za) = match side {
        DomainSide::Discriminator => (tape.detach(z_clean)?, tape.detach(z_adv)?),
        DomainSide::Generator => {
            if d.is_trainable() {
                return Err(TrainError::TrainableDiscriminator);
            }
            (z_clean, z_adv)
        }
    };
    let hc = d.domain(tape, zc)?;
    let ha = d.domain(tape, za)?;
    // the side labelled 1 contributes (h - 1)^2, the other h^2
    let (one, zero) = match side {
        DomainSide::Discriminator => (hc, ha),
        DomainSide::Generator => (ha, hc),
    };
    let shifted = tape.add_scalar(one, -1.0)?;
    let sq_one = tape.square(shifted)?;
    let t1 = tape.mean(sq_one)?;
    let sq_zero = tape.square(zero)?;
    let t2 = tape.mean(sq_zero)?;
    Ok(tape.add(t1, t2)?)
}

/// Loss values from one classifier step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepLosses {
    pub clean: f32,
    /// `h_c` loss (ca, cada) or the classifier's own adversarial loss (at).
    pub adv: Option<f32>,
    pub domain_generator: Option<f32>,
    pub domain_discriminator: Option<f32>,
    /// The minimized objective of the classifier step.
    pub total: f32,
}

impl StepLosses {
    /// `clean + w * adv + l2 * domain_generator`, with `w = 1` for `at`.
    pub fn recompose(&self, cfg: &TrainConfig) -> f64 {
        let w = if cfg.regime == Regime::At { 1.0 } else { cfg.lambda1 as f64 };
        self.clean as f64
            + w * self.adv.unwrap_or(0.0) as f64
            + cfg.lambda2 as f64 * self.domain_generator.unwrap_or(0.0) as f64
    }
}

/// One completed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub clean_loss: f64,
    pub adv_loss: Option<f64>,
    pub disc_loss: Option<f64>,
    pub total_loss: f64,
    /// Held-out clean accuracy.
    pub clean_acc: Option<f64>,
    /// Held-out accuracy under the training-time attack.
    pub adv_acc: Option<f64>,
    /// Seconds spent on the epoch, including the held-out pass.
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("epoch record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Self { records })
    }

    pub fn write(&self, path: &Path) -> io::Result<()> {
        fs::write(path, self.to_jsonl())
    }

    /// The log with wall-clock times zeroed, for run-to-run comparison.
    pub fn without_timing(&self) -> TrainLog {
        TrainLog {
            records: self
                .records
                .iter()
                .map(|r| EpochRecord {
                    wall_time: 0.0,
                    ..r.clone()
                })
                .collect(),
        }
    }
}

/// Owns a model, its optional discriminator, and two independent Adam states.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    model: Classifier,
    disc: Option<Discriminator>,
    opt_f: Adam,
    opt_d: Option<Adam>,
    iteration: u64,
    /// `(epoch, batch)` being trained, for diagnostics.
    position: (usize, usize),
}

impl Trainer {
    pub fn new(model: Classifier, disc: Option<Discriminator>, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        match (&disc, cfg.regime.needs_discriminator()) {
            (None, true) => return Err(TrainError::MissingDiscriminator(cfg.regime)),
            (Some(_), false) => return Err(TrainError::UnexpectedDiscriminator(cfg.regime)),
            (Some(d), true) => {
                if d.width() != model.feature_width() {
                    return Err(TrainError::WidthMismatch {
                        disc: d.width(),
                        features: model.feature_width(),
                    });
                }
                if d.config().classes != model.classes() {
                    return Err(TrainError::InvalidConfig(format!(
                        "discriminator has {} classes, classifier has {}",
                        d.config().classes,
                        model.classes()
                    )));
                }
            }
            (None, false) => {}
        }
        let opt_f = Adam::new(cfg.adam, &model.params());
        let opt_d = disc.as_ref().map(|d| Adam::new(cfg.adam, &d.params()));
        Ok(Self {
            cfg,
            model,
            disc,
            opt_f,
            opt_d,
            iteration: 0,
            position: (1, 0),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Classifier {
        &self.model
    }

    pub fn discriminator(&self) -> Option<&Discriminator> {
        self.disc.as_ref()
    }

    pub fn classifier_optimizer(&self) -> &Adam {
        &self.opt_f
    }

    pub fn discriminator_optimizer(&self) -> Option<&Adam> {
        self.opt_d.as_ref()
    }

    pub fn into_parts(self) -> (Classifier, Option<Discriminator>) {
        (self.model, self.disc)
    }

    /// PGD examples against the current classifier, seeded by iteration.
    pub fn adversaries(&self, batch: &ImageBatch) -> Result<AdversarialBatch, TrainError> {
        let cfg = AttackConfig {
            seed: derive_seed(self.cfg.attack.seed, "train-pgd", self.iteration),
            ..self.cfg.attack
        };
        Ok(pgd(&self.model, batch, &cfg)?)
    }

    /// Discriminator update (trunk and `h_d`) on the domain loss. Returns the
    /// unweighted domain loss.
    pub fn step_discriminator(&mut self, clean: &ImageBatch, adv: &Tensor, lr: f64) -> Result<f32, TrainError> {
        let disc = self.disc.as_ref().ok_or(TrainError::MissingDiscriminator(self.cfg.regime))?;
        let mut tape = Tape::new();
        let f = self.model.bind(&mut tape, false);
        let x = tape.constant(clean.images().clone());
        let xa = tape.constant(adv.clone());
        let z = f.features(&mut tape, x)?;
        let za = f.features(&mut tape, xa)?;
        let d = disc.bind(&mut tape, true);
        let loss = loss_domain(&mut tape, &d, z, za, DomainSide::Discriminator)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(self.non_finite("discriminator domain", value));
        }
        let objective = tape.scale(loss, self.cfg.lambda2)?;
        tape.backward(objective)?;
        let vars = d.param_vars();
        self.update_disc(&tape, &vars, &[DiscriminatorPart::Trunk, DiscriminatorPart::DomainHead], lr)?;
        Ok(value)
    }

    /// The classifier update for the configured regime; `ca` and `cada` also
    /// update the discriminator trunk and `h_c`, never `h_d`.
    pub fn step_classifier(&mut self, clean: &ImageBatch, adv: Option<&Tensor>, lr: f64) -> Result<StepLosses, TrainError> {
        let regime = self.cfg.regime;
        let labels = clean.labels();
        let mut tape = Tape::new();
        let f = self.model.bind(&mut tape, true);
        let x = tape.constant(clean.images().clone());
        let z = f.features(&mut tape, x)?;
        let logits = f.logits_from_features(&mut tape, z)?;
        let l_clean = tape.softmax_cross_entropy(logits, labels)?;
        let mut total = l_clean;
        let mut losses = StepLosses::default();
        let mut disc_vars = None;

        if regime.uses_adversaries() {
            let adv = adv.ok_or_else(|| TrainError::InvalidConfig(format!("regime {regime} needs adversarial examples")))?;
            let xa = tape.constant(adv.clone());
            if regime == Regime::At {
                let la = loss_clean(&mut tape, &f, xa, labels)?;
                losses.adv = Some(tape.value(la).data()[0]);
                total = tape.add(total, la)?;
            } else {
                let disc = self.disc.as_ref().ok_or(TrainError::MissingDiscriminator(regime))?;
                let za = f.features(&mut tape, xa)?;
                if regime.has_class_head() {
                    let d = disc.bind(&mut tape, true);
                    let la = loss_adv_class(&mut tape, &d, za, labels)?;
                    losses.adv = Some(tape.value(la).data()[0]);
                    let w = tape.scale(la, self.cfg.lambda1)?;
                    total = tape.add(total, w)?;
                    disc_vars = Some(d.param_vars());
                }
                if regime.has_domain_step() {
                    let frozen = disc.bind(&mut tape, false);
                    let lg = loss_domain(&mut tape, &frozen, z, za, DomainSide::Generator)?;
                    losses.domain_generator = Some(tape.value(lg).data()[0]);
                    let w = tape.scale(lg, self.cfg.lambda2)?;
                    total = tape.add(total, w)?;
                }
            }
        }
        losses.clean = tape.value(l_clean).data()[0];
        losses.total = tape.value(total).data()[0];
        for (term, v) in [
            ("clean", Some(losses.clean)),
            ("adversarial", losses.adv),
            ("generator domain", losses.domain_generator),
            ("total", Some(losses.total)),
        ] {
            if let Some(v) = v.filter(|v| !v.is_finite()) {
                return Err(self.non_finite(term, v));
            }
        }
        tape.backward(total)?;

        let f_vars = f.param_vars();
        for (slot, (param, var)) in self.model.params_mut().into_iter().zip(&f_vars).enumerate() {
            if let Some(g) = tape.grad(*var) {
                self.opt_f.step(slot, param, g, lr)?;
            }
        }
        if let Some(vars) = disc_vars {
            self.update_disc(&tape, &vars, &[DiscriminatorPart::Trunk, DiscriminatorPart::ClassHead], lr)?;
        }
        Ok(losses)
    }

    fn update_disc(&mut self, tape: &Tape, vars: &[Var], parts: &[DiscriminatorPart], lr: f64) -> Result<(), TrainError> {
        let (disc, opt) = match (self.disc.as_mut(), self.opt_d.as_mut()) {
            (Some(d), Some(o)) => (d, o),
            _ => return Err(TrainError::MissingDiscriminator(self.cfg.regime)),
        };
        let mut params = disc.params_mut();
        for &part in parts {
            for slot in Discriminator::part_range(part) {
                if let Some(g) = tape.grad(vars[slot]) {
                    opt.step(slot, params[slot], g, lr)?;
                }
            }
        }
        Ok(())
    }

    fn non_finite(&self, term: &'static str, value: f32) -> TrainError {
        TrainError::NonFinite {
            term,
            value,
            epoch: self.position.0,
            batch: self.position.1,
        }
    }

    /// Generates adversaries if the regime needs them, then runs the
    /// discriminator step (da, cada) and the classifier step.
    pub fn train_batch(&mut self, batch: &ImageBatch, lr: f64) -> Result<StepLosses, TrainError> {
        let adv = if self.cfg.regime.uses_adversaries() {
            Some(self.adversaries(batch)?.perturbed)
        } else {
            None
        };
        let disc_loss = match &adv {
            Some(a) if self.cfg.regime.has_domain_step() => Some(self.step_discriminator(batch, a, lr)?),
            _ => None,
        };
        let mut losses = self.step_classifier(batch, adv.as_ref(), lr)?;
        losses.domain_discriminator = disc_loss;
        self.iteration += 1;
        Ok(losses)
    }

    /// One pass over `data` in the seeded order for `epoch` (1-based).
    pub fn train_epoch(&mut self, data: &Dataset, epoch: usize, eval: Option<&Dataset>) -> Result<EpochRecord, TrainError> {
        let start = Instant::now();
        let lr = lr_schedule(epoch, &self.cfg);
        let batches = data.batches(self.cfg.batch_size, derive_seed(self.cfg.seed, "shuffle", epoch as u64))?;
        let mut sums = [0.0f64; 4];
        let mut n = 0usize;
        for (i, batch) in batches.enumerate() {
            self.position = (epoch, i);
            let l = self.train_batch(&batch, lr)?;
            let w = batch.len() as f64;
            sums[0] += w * l.clean as f64;
            sums[1] += w * l.adv.unwrap_or(0.0) as f64;
            sums[2] += w * l.domain_discriminator.unwrap_or(0.0) as f64;
            sums[3] += w * l.total as f64;
            n += batch.len();
        }
        let n = n as f64;
        let regime = self.cfg.regime;
        let (clean_acc, adv_acc) = match eval.filter(|_| self.cfg.eval_size > 0) {
            Some(ds) => {
                let ds = ds.take(self.cfg.eval_size.min(ds.len()))?;
                let attack = AttackConfig {
                    seed: derive_seed(self.cfg.attack.seed, "epoch-eval", epoch as u64),
                    ..self.cfg.attack
                };
                let bs = self.cfg.batch_size;
                let clean = clean_accuracy(&self.model, &ds, bs).map_err(Box::new)?;
                let adv = attack_accuracy(&self.model, &ds, AttackKind::Pgd, &attack, bs).map_err(Box::new)?;
                (Some(clean), Some(adv))
            }
            None => (None, None),
        };
        let record = EpochRecord {
            epoch,
            lr,
            clean_loss: sums[0] / n,
            adv_loss: (regime.uses_adversaries() && regime != Regime::Da).then_some(sums[1] / n),
            disc_loss: regime.has_domain_step().then_some(sums[2] / n),
            total_loss: sums[3] / n,
            clean_acc,
            adv_acc,
            wall_time: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch} ({regime}): loss {:.4}, clean acc {}, adv acc {}, {:.1}s",
            record.total_loss,
            fmt_acc(record.clean_acc),
            fmt_acc(record.adv_acc),
            record.wall_time
        );
        Ok(record)
    }
}

fn fmt_acc(a: Option<f64>) -> String {
    a.map_or_else(|| "-".into(), |v| format!("{:.2}%", 100.0 * v))
}

/// Result of a full run.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: Classifier,
    pub discriminator: Option<Discriminator>,
    pub log: TrainLog,
}

/// Invoked after every epoch with the record and the current networks.
pub type EpochHook<'a> =
    dyn FnMut(&EpochRecord, &Classifier, Option<&Discriminator>) -> Result<(), Box<dyn StdError + Send + Sync>> + 'a;

/// Trains for `cfg.epochs` epochs, scoring on `eval` after each.
pub fn train(
    model: Classifier,
    disc: Option<Discriminator>,
    data: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    on_epoch: &mut EpochHook<'_>,
) -> Result<TrainOutput, TrainError> {
    let mut trainer = Trainer::new(model, disc, cfg.clone())?;
    let mut log = TrainLog::default();
    for epoch in 1..=cfg.epochs {
        let record = trainer.train_epoch(data, epoch, eval)?;
        on_epoch(&record, trainer.model(), trainer.discriminator()).map_err(TrainError::Callback)?;
        log.records.push(record);
    }
    let (model, discriminator) = trainer.into_parts();
    Ok(TrainOutput {
        model,
        discriminator,
        log,
    })
}
