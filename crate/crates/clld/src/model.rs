//! The shared encoder, classification head, and projection head.
//!
//! Encoder: two dense layers with a tanh in between and dropout on the
//! hidden activations. Classifier: dropout on the encoding, then affine +
//! softmax. Projector: a two-layer tanh MLP over the encoding, used only by
//! the contrastive task. Contrastive positives come from feeding the same
//! batch through the encoder twice with independent dropout masks and
//! stacking the projections as [copy A; copy B], so row i and row i+M always
//! originate from the same example.

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::numerics::{dropout_mask, Domain, Matrix, RngState};

pub const ENCODER_DROPOUT: f64 = 0.1;
pub const CLASSIFIER_DROPOUT: f64 = 0.5;

/// Layer widths: features -> hidden -> encoding, projection width, classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelDims {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub encode_dim: usize,
    pub project_dim: usize,
    pub n_classes: usize,
}

/// All trainable tensors. Dense layers are stored input-major: y = x W + b.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub enc_w1: Matrix,
    pub enc_b1: Matrix,
    pub enc_w2: Matrix,
    pub enc_b2: Matrix,
    pub cls_w: Matrix,
    pub cls_b: Matrix,
    pub proj_w1: Matrix,
    pub proj_b1: Matrix,
    pub proj_w2: Matrix,
    pub proj_b2: Matrix,
}

/// Canonical tensor order used by the optimizer and the checkpoint format.
pub const PARAM_NAMES: [&str; 10] = [
    "enc_w1", "enc_b1", "enc_w2", "enc_b2", "cls_w", "cls_b", "proj_w1", "proj_b1", "proj_w2",
    "proj_b2",
];

/// Which tensors receive weight decay (matrices yes, biases no).
pub const PARAM_DECAY: [bool; 10] = [
    true, false, true, false, true, false, true, false, true, false,
];

fn glorot(rows: usize, cols: usize, rng: &mut RngState) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::random_uniform(rows, cols, limit, rng)
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases, drawn from the init stream of
    /// `seed` in a fixed order.
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let mut rng = RngState::for_domain(seed, Domain::Init);
        Self {
            enc_w1: glorot(dims.feature_dim, dims.hidden_dim, &mut rng),
            enc_b1: Matrix::zeros(1, dims.hidden_dim),
            enc_w2: glorot(dims.hidden_dim, dims.encode_dim, &mut rng),
            enc_b2: Matrix::zeros(1, dims.encode_dim),
            cls_w: glorot(dims.encode_dim, dims.n_classes, &mut rng),
            cls_b: Matrix::zeros(1, dims.n_classes),
            proj_w1: glorot(dims.encode_dim, dims.project_dim, &mut rng),
            proj_b1: Matrix::zeros(1, dims.project_dim),
            proj_w2: glorot(dims.project_dim, dims.project_dim, &mut rng),
            proj_b2: Matrix::zeros(1, dims.project_dim),
            dims,
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Matrix); 10] {
        [
            ("enc_w1", &self.enc_w1),
            ("enc_b1", &self.enc_b1),
            ("enc_w2", &self.enc_w2),
            ("enc_b2", &self.enc_b2),
            ("cls_w", &self.cls_w),
            ("cls_b", &self.cls_b),
            ("proj_w1", &self.proj_w1),
            ("proj_b1", &self.proj_b1),
            ("proj_w2", &self.proj_w2),
            ("proj_b2", &self.proj_b2),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Matrix); 10] {
        [
            ("enc_w1", &mut self.enc_w1),
            ("enc_b1", &mut self.enc_b1),
            ("enc_w2", &mut self.enc_w2),
            ("enc_b2", &mut self.enc_b2),
            ("cls_w", &mut self.cls_w),
            ("cls_b", &mut self.cls_b),
            ("proj_w1", &mut self.proj_w1),
            ("proj_b1", &mut self.proj_b1),
            ("proj_w2", &mut self.proj_w2),
            ("proj_b2", &mut self.proj_b2),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Encoder forward with dropout disabled: deterministic.
    pub fn encode_inference(&self, features: &Matrix) -> Matrix {
        let hidden = features
            .matmul(&self.enc_w1)
            .add_row_broadcast(&self.enc_b1)
            .map(f64::tanh);
        hidden.matmul(&self.enc_w2).add_row_broadcast(&self.enc_b2)
    }

    /// Encoder forward with a fresh dropout mask on the hidden activations.
    pub fn encode_training(&self, features: &Matrix, rng: &mut RngState) -> Matrix {
        let hidden = features
            .matmul(&self.enc_w1)
            .add_row_broadcast(&self.enc_b1)
            .map(f64::tanh);
        let mask = dropout_mask(hidden.rows(), hidden.cols(), ENCODER_DROPOUT, rng)
            .expect("encoder dropout rate is a valid constant");
        hidden
            .elementwise_mul(&mask)
            .matmul(&self.enc_w2)
            .add_row_broadcast(&self.enc_b2)
    }

    /// Class probabilities from encodings, no dropout.
    pub fn classify_inference(&self, encodings: &Matrix) -> Matrix {
        encodings
            .matmul(&self.cls_w)
            .add_row_broadcast(&self.cls_b)
            .row_softmax()
    }

    /// Class probabilities with dropout on the encodings.
    pub fn classify_training(&self, encodings: &Matrix, rng: &mut RngState) -> Matrix {
        let mask = dropout_mask(encodings.rows(), encodings.cols(), CLASSIFIER_DROPOUT, rng)
            .expect("classifier dropout rate is a valid constant");
        encodings
            .elementwise_mul(&mask)
            .matmul(&self.cls_w)
            .add_row_broadcast(&self.cls_b)
            .row_softmax()
    }

    /// Projection head over encodings.
    pub fn project(&self, encodings: &Matrix) -> Matrix {
        let hidden = encodings
            .matmul(&self.proj_w1)
            .add_row_broadcast(&self.proj_b1)
            .map(f64::tanh);
        hidden
            .matmul(&self.proj_w2)
            .add_row_broadcast(&self.proj_b2)
    }

    /// Encode the batch twice with independent dropout masks, project both
    /// copies, and stack them as [copy A; copy B]. Labels are repeated to
    /// match. `DuplicationNoise::None` is the explicit no-noise override for
    /// tests; without it the positives would collapse to exact duplicates.
    pub fn project_duplicated(
        &self,
        features: &Matrix,
        labels: &[usize],
        rng: &mut RngState,
        noise: DuplicationNoise,
    ) -> Result<(Matrix, Vec<usize>)> {
        if features.rows() < 2 {
            return Err(Error::Contract(format!(
                "duplication needs a batch of >= 2 rows, got {}",
                features.rows()
            )));
        }
        let (v_a, v_b) = match noise {
            DuplicationNoise::Dropout => (
                self.encode_training(features, rng),
                self.encode_training(features, rng),
            ),
            DuplicationNoise::None => {
                let v = self.encode_inference(features);
                (v.clone(), v)
            }
        };
        let h = self.project(&v_a).vstack(&self.project(&v_b));
        let mut labels_dup = labels.to_vec();
        labels_dup.extend_from_slice(labels);
        Ok((h, labels_dup))
    }

    /// Full training-mode forward: encoding, class probabilities, duplicated
    /// projections.
    pub fn forward_training(&self, batch: &Batch, rng: &mut RngState) -> Result<EncodedBatch> {
        let v = self.encode_training(&batch.features, rng);
        let p = self.classify_training(&v, rng);
        let (h, labels_dup) = self.project_duplicated(
            &batch.features,
            &batch.labels,
            rng,
            DuplicationNoise::Dropout,
        )?;
        Ok(EncodedBatch {
            v,
            p,
            h,
            labels_dup,
        })
    }
}

/// Noise source for the duplicated encoder passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DuplicationNoise {
    Dropout,
    /// Test-only override: both copies are the clean encoding.
    None,
}

/// Outputs of one training-mode forward pass.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    /// MxD encodings feeding the classifier.
    pub v: Matrix,
    /// MxN class probabilities.
    pub p: Matrix,
    /// 2M x P projections, copy A stacked over copy B.
    pub h: Matrix,
    pub labels_dup: Vec<usize>,
}
