//! Similarity matrices and the multi-task losses.
//!
//! For a dropout-duplicated batch of 2M projections this module builds the
//! pairwise similarity matrix (cosine rescaled into [0,1], diagonal masked),
//! the positive-pair indicator matrix, the per-batch label distance mask,
//! and their element-wise product, then reduces them to the contrastive
//! KL loss and the classification cross entropy.

use crate::error::{Error, Result};
use crate::ldm::LabelDistanceMatrix;
use crate::numerics::{dot, l2_norm, Matrix};

/// Exact sentinel placed on similarity diagonals. Kept finite (rather than
/// -inf) so downstream arithmetic stays finite; its softmax contribution
/// underflows to zero in double precision.
pub const DIAGONAL_MASK: f64 = -1e6;

/// Cosine similarity rescaled into [0,1]: 0.5 * (a.b / max(|a||b|, xi) + 1).
/// The xi guard keeps zero vectors finite: they score 0.5 against anything.
pub fn cos_sim_01(a: &[f64], b: &[f64], xi: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine operands differ in length");
    let denom = (l2_norm(a) * l2_norm(b)).max(xi);
    0.5 * (dot(a, b) / denom + 1.0)
}

/// Pairwise similarity of the rows of `h` with the diagonal set to the mask
/// sentinel.
pub fn build_simm(h: &Matrix, xi: f64) -> Matrix {
    let n = h.rows();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        out.set(i, i, DIAGONAL_MASK);
        for j in (i + 1)..n {
            let s = cos_sim_01(h.row(i), h.row(j), xi);
            out.set(i, j, s);
            out.set(j, i, s);
        }
    }
    out
}

/// Positive-pair indicator: t[i][j] = 1 iff i != j and labels match.
pub fn build_label_matrix(labels_dup: &[usize]) -> Matrix {
    let n = labels_dup.len();
    let mut t = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j && labels_dup[i] == labels_dup[j] {
                t.set(i, j, 1.0);
            }
        }
    }
    t
}

/// Per-batch label distance mask: entry (i,j) is the class distance between
/// the labels of samples i and j. The one-hot sandwich in the definition
/// reduces to a lookup.
pub fn build_ldmm(labels_dup: &[usize], ldm: &LabelDistanceMatrix) -> Result<Matrix> {
    let n_classes = ldm.n_classes();
    let n = labels_dup.len();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let (a, b) = (labels_dup[i], labels_dup[j]);
            if a >= n_classes || b >= n_classes {
                return Err(Error::Contract(format!(
                    "label {} out of range for {} classes",
                    a.max(b),
                    n_classes
                )));
            }
            out.set(i, j, ldm.distance(a, b));
        }
    }
    Ok(out)
}

/// Element-wise product SimM * LDMM. Distance entries are >= 1, so the
/// masked diagonal stays at or below the sentinel.
pub fn combine(simm: &Matrix, ldmm: &Matrix) -> Matrix {
    simm.elementwise_mul(ldmm)
}

/// The four per-batch matrices of the contrastive task.
#[derive(Debug, Clone)]
pub struct SimilarityBundle {
    pub simm: Matrix,
    pub label_matrix: Matrix,
    pub ldmm: Matrix,
    pub simldm: Matrix,
}

impl SimilarityBundle {
    pub fn build(
        h: &Matrix,
        labels_dup: &[usize],
        ldm: &LabelDistanceMatrix,
        xi: f64,
    ) -> Result<Self> {
        let simm = build_simm(h, xi);
        let label_matrix = build_label_matrix(labels_dup);
        let ldmm = build_ldmm(labels_dup, ldm)?;
        let simldm = combine(&simm, &ldmm);
        Ok(Self {
            simm,
            label_matrix,
            ldmm,
            simldm,
        })
    }
}

/// The contrastive loss with its row distributions.
#[derive(Debug, Clone)]
pub struct ContrastiveLoss {
    pub value: f64,
    /// Row-softmax of the masked similarity logits.
    pub q: Matrix,
    /// Row-normalized positive indicator.
    pub z: Matrix,
}

/// Mean over rows of KL(z_i || q_i), with q the row-softmax of `simldm` and
/// z the row-normalized label matrix. Rows of `t` must each contain at least
/// one positive (guaranteed by dropout duplication). Terms with z = 0
/// contribute nothing.
pub fn contrastive_loss(simldm: &Matrix, t: &Matrix) -> Result<ContrastiveLoss> {
    assert_eq!(
        simldm.shape(),
        t.shape(),
        "similarity and label matrices must agree in shape"
    );
    let n = t.rows();
    let log_q = simldm.row_log_softmax();
    let q = log_q.map(f64::exp);
    let mut z = Matrix::zeros(n, n);
    let mut total = 0.0;
    for i in 0..n {
        let row_sum: f64 = t.row(i).iter().sum();
        if row_sum == 0.0 {
            return Err(Error::Contract(format!(
                "label matrix row {i} has no positive pair"
            )));
        }
        let mut row_kl = 0.0;
        for j in 0..n {
            let z_ij = t.at(i, j) / row_sum;
            z.set(i, j, z_ij);
            if z_ij > 0.0 {
                row_kl += z_ij * (z_ij.ln() - log_q.at(i, j));
            }
        }
        total += row_kl;
    }
    Ok(ContrastiveLoss {
        value: total / n as f64,
        q,
        z,
    })
}

/// Mean negative log-likelihood of the true class under `p`.
pub fn classification_loss(p: &Matrix, labels: &[usize]) -> f64 {
    assert_eq!(p.rows(), labels.len(), "one label per probability row");
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| p.at(i, y).ln())
        .sum();
    -total / labels.len() as f64
}

/// Convex combination lambda * L_c + (1 - lambda) * L_s.
pub fn total_loss(classification: f64, contrastive: f64, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!(
            "lambda must be in [0, 1], got {lambda}"
        )));
    }
    Ok(lambda * classification + (1.0 - lambda) * contrastive)
}


#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn cosine_always_in_unit_interval(
            a in proptest::collection::vec(-10.0f64..10.0, 4),
            b in proptest::collection::vec(-10.0f64..10.0, 4),
        ) {
            let s = cos_sim_01(&a, &b, 1e-8);
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&s));
        }

        #[test]
        fn kl_loss_is_nonnegative(
            values in proptest::collection::vec(-3.0f64..3.0, 4 * 3),
            flip in any::<bool>(),
        ) {
            let h = Matrix::from_vec(4, 3, values);
            let labels_dup = if flip { vec![0, 1, 0, 1] } else { vec![0, 0, 0, 0] };
            let simm = build_simm(&h, 1e-8);
            let t = build_label_matrix(&labels_dup);
            let loss = contrastive_loss(&simm, &t).unwrap();
            prop_assert!(loss.value >= -1e-12);
        }
    }
}
