//! Network definitions: the LeNet-style and small convolutional classifiers,
//! the class-aware discriminator, and the named-tensor checkpoint format.

mod checkpoint;
mod classifier;
mod discriminator;
mod layers;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::TensorError;

pub use checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use classifier::{argmax_rows, BoundClassifier, Classifier};
pub use discriminator::{BoundDiscriminator, Discriminator, DiscriminatorConfig, DiscriminatorPart};
pub use layers::{Block, Conv, Linear};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown architecture `{0}` (expected lenet or small_cnn)")]
    UnknownArchitecture(String),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("input shape {got:?} does not match model input {expected:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Lenet,
    SmallCnn,
}

impl FromStr for Architecture {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lenet" => Ok(Self::Lenet),
            "small_cnn" => Ok(Self::SmallCnn),
            other => Err(ModelError::UnknownArchitecture(other.to_string())),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Lenet => "lenet",
            Self::SmallCnn => "small_cnn",
        })
    }
}

/// Classifier hyperparameters; together with `seed` they determine the
/// initial parameters exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Architecture,
    /// `[channels, height, width]`.
    pub input_shape: [usize; 3],
    pub classes: usize,
    /// Convolution widths: two for lenet, three for small_cnn.
    pub channels: Vec<usize>,
    pub seed: u64,
}

/// Hidden widths of LeNet's fully connected layers; the second is the
/// feature width seen by the discriminator.
pub const LENET_HIDDEN: [usize; 2] = [120, 84];

impl ModelConfig {
    /// LeNet on 1x28x28 inputs with 10 classes.
    pub fn lenet(seed: u64) -> Self {
        Self {
            arch: Architecture::Lenet,
            input_shape: [1, 28, 28],
            classes: 10,
            channels: vec![6, 16],
            seed,
        }
    }

    pub fn small_cnn(input_shape: [usize; 3], classes: usize, channels: [usize; 3], seed: u64) -> Self {
        Self {
            arch: Architecture::SmallCnn,
            input_shape,
            classes,
            channels: channels.to_vec(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.classes < 2 {
            return bad(format!("classes must be at least 2, got {}", self.classes));
        }
        if self.input_shape.contains(&0) {
            return bad(format!("input shape {:?} has a zero dimension", self.input_shape));
        }
        if self.channels.contains(&0) {
            return bad("channel widths must be positive".into());
        }
        let [_, h, w] = self.input_shape;
        match self.arch {
            Architecture::Lenet => {
                if self.channels.len() != 2 {
                    return bad(format!("lenet takes 2 channel widths, got {}", self.channels.len()));
                }
                // conv5 pad2 keeps size, pool halves, conv5 shrinks by 4, pool halves
                if h / 2 < 5 || w / 2 < 5 {
                    return bad(format!("lenet needs inputs of at least 10x10, got {h}x{w}"));
                }
            }
            Architecture::SmallCnn => {
                if self.channels.len() != 3 {
                    return bad(format!("small_cnn takes 3 channel widths, got {}", self.channels.len()));
                }
                if h < 8 || w < 8 {
                    return bad(format!("small_cnn needs inputs of at least 8x8, got {h}x{w}"));
                }
            }
        }
        Ok(())
    }

    /// Width `D` of the feature vector produced by the extractor.
    pub fn feature_width(&self) -> usize {
        let [_, h, w] = self.input_shape;
        match self.arch {
            Architecture::Lenet => LENET_HIDDEN[1],
            Architecture::SmallCnn => self.channels[2] * (h / 8) * (w / 8),
        }
    }

    /// Width of the flattened convolutional output.
    pub(crate) fn conv_output_width(&self) -> usize {
        let [_, h, w] = self.input_shape;
        match self.arch {
            Architecture::Lenet => self.channels[1] * ((h / 2 - 4) / 2) * ((w / 2 - 4) / 2),
            Architecture::SmallCnn => self.feature_width(),
        }
    }
}

/// JSON with object keys in sorted order and no insignificant whitespace.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String, serde_json::Error> {
    fn sort(v: serde_json::Value) -> serde_json::Value {
        match v {
            serde_json::Value::Object(map) => {
                let mut entries: Vec<_> = map.into_iter().collect();
                entries.sort_by(|a, b| a.0.cmp(&b.0));
                serde_json::Value::Object(entries.into_iter().map(|(k, v)| (k, sort(v))).collect())
            }
            serde_json::Value::Array(items) => serde_json::Value::Array(items.into_iter().map(sort).collect()),
            other => other,
        }
    }
    serde_json::to_string(&sort(serde_json::to_value(value)?))
}
