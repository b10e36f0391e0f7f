//! Dense tensors, reverse-mode gradients and the finite-difference oracle.

mod gradcheck;
pub mod kernels;
pub mod ops;
mod params;
mod rng;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, RELATIVE_ERROR_FLOOR};
pub use params::{Gradients, ParamBuilder, ParamId, ParamSet};
pub use rng::{RngSnapshot, RngState};
pub use scalar::Scalar;
pub use tape::{check_rate as validate_dropout_rate, Probe, Tape, Var};
pub use tensor::Tensor;

use serde::{Deserialize, Serialize};

/// Train mode enables dropout; eval mode is deterministic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}
