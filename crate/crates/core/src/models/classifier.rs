use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, CheckpointError};
use super::layers::{bind_linear, bind_param, Block, Conv, Linear};
use super::{canonical_json, Architecture, ModelConfig, ModelError, LENET_HIDDEN};
use crate::tensor::{Conv2dSpec, Tape, Tensor, Var};

/// Feature extractor `phi` followed by a single fully connected head, so
/// that `f(x) = head(phi(x))`.
#[derive(Debug)]
pub struct Classifier {
    config: ModelConfig,
    features: Vec<Block>,
    head: Linear,
    gradient_queries: AtomicU64,
}

impl Clone for Classifier {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            features: self.features.clone(),
            head: self.head.clone(),
            gradient_queries: AtomicU64::new(0),
        }
    }
}

impl PartialEq for Classifier {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.features == other.features && self.head == other.head
    }
}

impl Classifier {
    /// Builds and initializes a classifier from `cfg.seed`.
    pub fn build(cfg: &ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let cin = cfg.input_shape[0];
        let pool = || Block::MaxPool { kernel: 2, stride: 2 };
        let mut features = Vec::new();
        match cfg.arch {
            Architecture::Lenet => {
                let (c1, c2) = (cfg.channels[0], cfg.channels[1]);
                features.push(Block::Conv(Conv::init(&mut rng, cin, c1, 5, Conv2dSpec { stride: 1, padding: 2 })));
                features.extend([Block::Relu, pool()]);
                features.push(Block::Conv(Conv::init(&mut rng, c1, c2, 5, Conv2dSpec::default())));
                features.extend([Block::Relu, pool(), Block::Flatten]);
                let flat = cfg.conv_output_width();
                features.push(Block::Linear(Linear::init(&mut rng, flat, LENET_HIDDEN[0])));
                features.push(Block::Relu);
                features.push(Block::Linear(Linear::init(&mut rng, LENET_HIDDEN[0], LENET_HIDDEN[1])));
                features.push(Block::Relu);
            }
            Architecture::SmallCnn => {
                let mut prev = cin;
                for &width in &cfg.channels {
                    let spec = Conv2dSpec { stride: 1, padding: 1 };
                    features.push(Block::Conv(Conv::init(&mut rng, prev, width, 3, spec)));
                    features.extend([Block::Relu, pool()]);
                    prev = width;
                }
                features.push(Block::Flatten);
            }
        }
        let head = Linear::init(&mut rng, cfg.feature_width(), cfg.classes);
        Ok(Self {
            config: cfg.clone(),
            features,
            head,
            gradient_queries: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn feature_width(&self) -> usize {
        self.config.feature_width()
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn blocks(&self) -> &[Block] {
        &self.features
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut Linear {
        &mut self.head
    }

    /// Parameters in a fixed order: extractor blocks first, head last.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.features.iter().flat_map(|b| b.params()).collect();
        out.extend([&self.head.weight, &self.head.bias]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.features.iter_mut().flat_map(|b| b.params_mut()).collect();
        out.extend([&mut self.head.weight, &mut self.head.bias]);
        out
    }

    /// Parameter names matching [`Classifier::params`] order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, b) in self.features.iter().enumerate() {
            if matches!(b, Block::Conv(_) | Block::Linear(_)) {
                names.push(format!("phi.{i}.weight"));
                names.push(format!("phi.{i}.bias"));
            }
        }
        names.push("head.weight".into());
        names.push("head.bias".into());
        names
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Number of extractor parameters; the head follows them in `params()`.
    pub fn feature_param_len(&self) -> usize {
        self.features.iter().map(|b| b.params().len()).sum()
    }

    /// Records all parameters on `tape`.
    pub fn bind<'a>(&'a self, tape: &mut Tape, trainable: bool) -> BoundClassifier<'a> {
        let blocks = self
            .features
            .iter()
            .map(|b| match b {
                Block::Conv(c) => Some((bind_param(tape, &c.weight, trainable), bind_param(tape, &c.bias, trainable))),
                Block::Linear(l) => Some(bind_linear(tape, l, trainable)),
                _ => None,
            })
            .collect();
        let head = bind_linear(tape, &self.head, trainable);
        BoundClassifier {
            model: self,
            blocks,
            head,
            trainable,
        }
    }

    pub(crate) fn check_input(&self, shape: &[usize]) -> Result<(), ModelError> {
        let [c, h, w] = self.config.input_shape;
        if shape.len() != 4 || shape[1..] != [c, h, w] {
            return Err(ModelError::InputShape {
                expected: vec![0, c, h, w],
                got: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Logits for a batch, without gradient bookkeeping.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let y = bound.logits(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    /// `phi(x)` for a batch.
    pub fn extract_features(&self, images: &Tensor) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let z = bound.features(&mut tape, x)?;
        Ok(tape.value(z).clone())
    }

    /// Applies the head alone to precomputed features.
    pub fn head_logits(&self, features: &Tensor) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let z = tape.constant(features.clone());
        let y = bound.logits_from_features(&mut tape, z)?;
        Ok(tape.value(y).clone())
    }

    /// Arg-max class per row; ties resolve to the lowest index.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>, ModelError> {
        Ok(argmax_rows(&self.forward(images)?))
    }

    /// Gradient of the mean cross-entropy with respect to the input images,
    /// plus the loss value. Parameters are recorded as constants, so no
    /// parameter gradient is formed. Each call is counted as one gradient query.
    pub fn input_gradient(&self, images: &Tensor, labels: &[usize]) -> Result<(Tensor, f32), ModelError> {
        self.gradient_queries.fetch_add(1, Ordering::Relaxed);
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.input(images.clone(), true);
        let logits = bound.logits(&mut tape, x)?;
        let loss = tape.softmax_cross_entropy(logits, labels)?;
        tape.backward(loss)?;
        let value = tape.value(loss).data()[0];
        let grad = tape
            .grad(x)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; images.numel()]);
        Ok((Tensor::new(images.shape().to_vec(), grad)?, value))
    }

    /// Input-gradient queries served so far.
    pub fn gradient_queries(&self) -> u64 {
        self.gradient_queries.load(Ordering::Relaxed)
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
            metadata: canonical_json(&self.config).expect("model config serializes"),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        let cfg: ModelConfig = serde_json::from_str(&ckpt.metadata).map_err(CheckpointError::Metadata)?;
        let mut model = Self::build(&cfg)?;
        let names = model.param_names();
        if ckpt.records.len() != names.len() {
            return Err(CheckpointError::RecordCount {
                expected: names.len(),
                found: ckpt.records.len(),
            }
            .into());
        }
        for (name, param) in names.iter().zip(model.params_mut()) {
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
        Ok(model)
    }
}

/// Per-row arg-max with ties resolved to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// A classifier whose parameters are recorded on one tape.
#[derive(Debug)]
pub struct BoundClassifier<'a> {
    model: &'a Classifier,
    blocks: Vec<Option<(Var, Var)>>,
    head: (Var, Var),
    trainable: bool,
}

impl BoundClassifier<'_> {
    pub fn model(&self) -> &Classifier {
        self.model
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn features(&self, tape: &mut Tape, x: Var) -> Result<Var, ModelError> {
        self.model.check_input(tape.shape(x))?;
        let mut h = x;
        for (block, params) in self.model.features.iter().zip(&self.blocks) {
            h = block.forward(tape, h, *params)?;
        }
        Ok(h)
    }

    pub fn logits_from_features(&self, tape: &mut Tape, z: Var) -> Result<Var, ModelError> {
        Ok(tape.linear(z, self.head.0, self.head.1)?)
    }

    pub fn logits(&self, tape: &mut Tape, x: Var) -> Result<Var, ModelError> {
        let z = self.features(tape, x)?;
        self.logits_from_features(tape, z)
    }

    /// Parameter vars in [`Classifier::params`] order.
    pub fn param_vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.blocks.iter().flatten().flat_map(|&(w, b)| [w, b]).collect();
        out.extend([self.head.0, self.head.1]);
        out
    }
}
