use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointError};
use super::layers::{bind_linear, Linear};
use super::{canonical_json, ModelError};
use crate::tensor::{Tape, Tensor, Var};

/// Trunk depth; each path through the discriminator is this plus one head.
pub const TRUNK_DEPTH: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    /// Feature width `D`, also the width of every hidden layer.
    pub width: usize,
    pub classes: usize,
    pub seed: u64,
}

/// Parameter groups of the discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscriminatorPart {
    Trunk,
    DomainHead,
    ClassHead,
}

/// Class-aware discriminator: a shared trunk of fully connected ReLU layers
/// feeding a scalar domain head `h_d` and a class head `h_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    trunk: Vec<Linear>,
    domain_head: Linear,
    class_head: Linear,
}

impl Discriminator {
    pub fn build(width: usize, classes: usize, seed: u64) -> Result<Self, ModelError> {
        if width == 0 {
            return Err(ModelError::InvalidConfig("discriminator width must be positive".into()));
        }
        if classes < 2 {
            return Err(ModelError::InvalidConfig(format!(
                "discriminator needs at least 2 classes, got {classes}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trunk = (0..TRUNK_DEPTH).map(|_| Linear::init(&mut rng, width, width)).collect();
        let domain_head = Linear::init(&mut rng, width, 1);
        let class_head = Linear::init(&mut rng, width, classes);
        Ok(Self {
            config: DiscriminatorConfig { width, classes, seed },
            trunk,
            domain_head,
            class_head,
        })
    }

    pub fn config(&self) -> DiscriminatorConfig {
        self.config
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn trunk(&self) -> &[Linear] {
        &self.trunk
    }

    pub fn domain_head(&self) -> &Linear {
        &self.domain_head
    }

    pub fn class_head(&self) -> &Linear {
        &self.class_head
    }

    pub fn class_head_mut(&mut self) -> &mut Linear {
        &mut self.class_head
    }

    /// Parameters ordered trunk, domain head, class head.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.trunk
            .iter_mut()
            .chain([&mut self.domain_head, &mut self.class_head])
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    fn layers(&self) -> impl Iterator<Item = &Linear> {
        self.trunk.iter().chain([&self.domain_head, &self.class_head])
    }

    /// Indices into [`Discriminator::params`] belonging to `part`.
    pub fn part_range(part: DiscriminatorPart) -> Range<usize> {
        let t = 2 * TRUNK_DEPTH;
        match part {
            DiscriminatorPart::Trunk => 0..t,
            DiscriminatorPart::DomainHead => t..t + 2,
            DiscriminatorPart::ClassHead => t + 2..t + 4,
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..TRUNK_DEPTH {
            names.push(format!("trunk.{i}.weight"));
            names.push(format!("trunk.{i}.bias"));
        }
        for head in ["domain_head", "class_head"] {
            names.push(format!("{head}.weight"));
            names.push(format!("{head}.bias"));
        }
        names
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundDiscriminator {
        let trunk = self.trunk.iter().map(|l| bind_linear(tape, l, trainable)).collect();
        BoundDiscriminator {
            width: self.config.width,
            trunk,
            domain: bind_linear(tape, &self.domain_head, trainable),
            class: bind_linear(tape, &self.class_head, trainable),
            trainable,
        }
    }

    /// `(h_d(z), h_c(z))` without gradient bookkeeping.
    pub fn forward(&self, z: &Tensor) -> Result<(Tensor, Tensor), ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let z = tape.constant(z.clone());
        let (d, c) = bound.forward(&mut tape, z)?;
        Ok((tape.value(d).clone(), tape.value(c).clone()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let records = self
            .param_names()
            .into_iter()
            .zip(self.params())
            .map(|(n, t)| {
                let mut t = t.clone();
                t.zero_grad();
                (n, t.with_requires_grad(false))
            })
            .collect();
        Checkpoint {
            records,
            metadata: canonical_json(&self.config).expect("discriminator config serializes"),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        let cfg: DiscriminatorConfig = serde_json::from_str(&ckpt.metadata).map_err(CheckpointError::Metadata)?;
        let mut disc = Self::build(cfg.width, cfg.classes, cfg.seed)?;
        for (name, param) in disc.param_names().iter().zip(disc.params_mut()) {
            let t = ckpt.get(name).ok_or_else(|| CheckpointError::MissingRecord(name.clone()))?;
            if t.shape() != param.shape() {
                return Err(CheckpointError::RecordShape {
                    name: name.clone(),
                    expected: param.shape().to_vec(),
                    found: t.shape().to_vec(),
                }
                .into());
            }
            param.data_mut().copy_from_slice(t.data());
        }
        Ok(disc)
    }
}

/// A discriminator whose parameters are recorded on one tape.
#[derive(Debug, Clone)]
pub struct BoundDiscriminator {
    width: usize,
    trunk: Vec<(Var, Var)>,
    domain: (Var, Var),
    class: (Var, Var),
    trainable: bool,
}

impl BoundDiscriminator {
    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    /// Shared trunk activations for features `z: [n, D]`.
    pub fn trunk(&self, tape: &mut Tape, z: Var) -> Result<Var, ModelError> {
        let s = tape.shape(z);
        if s.len() != 2 || s[1] != self.width {
            return Err(ModelError::InputShape {
                expected: vec![0, self.width],
                got: s.to_vec(),
            });
        }
        let mut h = z;
        for &(w, b) in &self.trunk {
            h = tape.linear(h, w, b)?;
            h = tape.relu(h)?;
        }
        Ok(h)
    }

    /// Domain score from trunk activations, shape `[n, 1]`.
    pub fn domain_from_trunk(&self, tape: &mut Tape, t: Var) -> Result<Var, ModelError> {
        Ok(tape.linear(t, self.domain.0, self.domain.1)?)
    }

    /// Class logits from trunk activations, shape `[n, C]`.
    pub fn class_from_trunk(&self, tape: &mut Tape, t: Var) -> Result<Var, ModelError> {
        Ok(tape.linear(t, self.class.0, self.class.1)?)
    }

    pub fn domain(&self, tape: &mut Tape, z: Var) -> Result<Var, ModelError> {
        let t = self.trunk(tape, z)?;
        self.domain_from_trunk(tape, t)
    }

    pub fn class_logits(&self, tape: &mut Tape, z: Var) -> Result<Var, ModelError> {
        let t = self.trunk(tape, z)?;
        self.class_from_trunk(tape, t)
    }

    /// Both heads over a single trunk evaluation.
    pub fn forward(&self, tape: &mut Tape, z: Var) -> Result<(Var, Var), ModelError> {
        let t = self.trunk(tape, z)?;
        Ok((self.domain_from_trunk(tape, t)?, self.class_from_trunk(tape, t)?))
    }

    /// Parameter vars in [`Discriminator::params`] order.
    pub fn param_vars(&self) -> Vec<Var> {
        self.trunk
            .iter()
            .chain([&self.domain, &self.class])
            .flat_map(|&(w, b)| [w, b])
            .collect()
    }
}
