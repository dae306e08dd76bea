use thiserror::Error;

/// Failures raised by tensor construction, operators and backward.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} needs {expected} elements but data holds {actual}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: invalid shape {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("conv2d: kernel {kernel:?} is larger than padded input {padded:?}")]
    KernelTooLarge {
        kernel: (usize, usize),
        padded: (usize, usize),
    },
    #[error("label {label} at batch index {index} is outside [0, {classes})")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable was not recorded on this tape")]
    OffTape,
    #[error("{0}: empty batch")]
    EmptyBatch(&'static str),
}
