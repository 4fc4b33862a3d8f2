//! Dense matrix arithmetic, deterministic RNG, and reverse-mode
//! differentiation.

pub mod matrix;
pub mod rng;
pub mod tape;

pub use matrix::{dot, l2_norm, Matrix};
pub use rng::{Domain, RngSnapshot, RngState};
pub use tape::{Gradients, NodeId, Tape};

use crate::error::{Error, Result};

/// Inverted-dropout mask: entries are 0 with probability `rate`, otherwise
/// 1/(1-rate), so that applying the mask at train time leaves inference as
/// the identity.
pub fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut RngState) -> Result<Matrix> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    let keep_scale = 1.0 / (1.0 - rate);
    let mut mask = Matrix::zeros(rows, cols);
    for v in mask.data_mut() {
        *v = if rng.uniform() < rate {
            0.0
        } else {
            keep_scale
        };
    }
    Ok(mask)
}

/// Dropout as an operation: identity outside training, masked and rescaled
/// inside it.
pub fn dropout(x: &Matrix, rate: f64, rng: &mut RngState, training: bool) -> Result<Matrix> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.rows(), x.cols(), rate, rng)?;
    Ok(x.elementwise_mul(&mask))
}
