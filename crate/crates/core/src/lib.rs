//! Adversarial robustness toolkit: a small reverse-mode tensor engine,
//! L-infinity attacks (FGSM, BIM, PGD), five training regimes including
//! class-aware domain adaptation, and a white-box/black-box evaluation grid.

pub mod attacks;
pub mod data;
pub mod evaluation;
pub mod models;
pub mod par;
pub mod seeds;
pub mod tensor;
pub mod training;

pub use tensor::{Conv2dSpec, Tape, Tensor, TensorError, Var};
