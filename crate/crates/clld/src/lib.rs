//! Multi-task text classification with label-distance contrastive learning.
//!
//! A softmax classifier and a contrastive task share one encoder. The
//! contrastive task duplicates each batch through the encoder with
//! independent dropout masks, scores all pairs by rescaled cosine
//! similarity, amplifies hard-to-distinguish class pairs through a label
//! distance matrix, and minimizes a KL divergence against the
//! positive-pair distribution. The distance matrix can be fixed by hand or
//! adapted from the validation confusion matrix during training.

pub mod cli;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod ldm;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod trainer;

pub use error::{Error, Result};
