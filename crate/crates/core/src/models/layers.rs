use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Conv2dSpec, Tape, Tensor, TensorError, Var};

/// Fan-in scaled uniform weights, bound `sqrt(6 / fan_in)`.
pub(crate) fn uniform_weights(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, data)
        .expect("weight shape is positive")
        .with_requires_grad(true)
}

fn zero_bias(n: usize) -> Tensor {
    Tensor::zeros(vec![n])
        .expect("bias width is positive")
        .with_requires_grad(true)
}

/// Fully connected layer, `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub(crate) fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: uniform_weights(rng, vec![fan_in, fan_out], fan_in),
            bias: zero_bias(fan_out),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Square-kernel convolution with bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub spec: Conv2dSpec,
}

impl Conv {
    pub(crate) fn init(rng: &mut ChaCha8Rng, cin: usize, cout: usize, kernel: usize, spec: Conv2dSpec) -> Self {
        let fan_in = cin * kernel * kernel;
        Self {
            weight: uniform_weights(rng, vec![cout, cin, kernel, kernel], fan_in),
            bias: zero_bias(cout),
            spec,
        }
    }
}

/// One stage of a feature extractor.
#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Conv(Conv),
    Relu,
    MaxPool { kernel: usize, stride: usize },
    Flatten,
    Linear(Linear),
}

impl Block {
    pub(crate) fn params(&self) -> Vec<&Tensor> {
        match self {
            Block::Conv(c) => vec![&c.weight, &c.bias],
            Block::Linear(l) => vec![&l.weight, &l.bias],
            _ => Vec::new(),
        }
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Block::Conv(c) => vec![&mut c.weight, &mut c.bias],
            Block::Linear(l) => vec![&mut l.weight, &mut l.bias],
            _ => Vec::new(),
        }
    }

    /// Runs the block; `params` holds this block's `(weight, bias)` vars.
    pub(crate) fn forward(&self, tape: &mut Tape, x: Var, params: Option<(Var, Var)>) -> Result<Var, TensorError> {
        match (self, params) {
            (Block::Conv(c), Some((w, b))) => tape.conv2d(x, w, Some(b), c.spec),
            (Block::Linear(_), Some((w, b))) => tape.linear(x, w, b),
            (Block::Relu, _) => tape.relu(x),
            (Block::MaxPool { kernel, stride }, _) => tape.max_pool2d(x, *kernel, *stride),
            (Block::Flatten, _) => tape.flatten(x),
            _ => unreachable!("parametric block bound without parameters"),
        }
    }
}

/// Records `t` on the tape, differentiable only when `trainable`.
pub(crate) fn bind_param(tape: &mut Tape, t: &Tensor, trainable: bool) -> Var {
    let mut value = t.clone();
    value.zero_grad();
    tape.input(value, trainable)
}

pub(crate) fn bind_linear(tape: &mut Tape, l: &Linear, trainable: bool) -> (Var, Var) {
    (bind_param(tape, &l.weight, trainable), bind_param(tape, &l.bias, trainable))
}
