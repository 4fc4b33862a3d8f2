//! Independent reference computations: naive scalar double-loop losses and
//! central finite-difference gradients.
//!
//! These deliberately avoid the matrix pipeline (plain scalar loops, no
//! shared softmax helpers) so that agreement with the trained path is
//! meaningful evidence rather than a tautology. They back both the test
//! suite and the `oracle-check` command.

use crate::contrastive;
use crate::data::Batch;
use crate::error::Result;
use crate::ldm::{identity_ldm, static_ldm, LabelDistanceMatrix};
use crate::model::{ModelDims, ModelParams};
use crate::numerics::{Domain, Matrix, RngState};
use crate::trainer::{build_step_tape, step_loss_value, Mode};

/// Scalar double-loop of the contrastive KL loss, straight from its
/// definition: q is a plain exp/sum softmax per row, z the row-normalized
/// indicator, and 0*log(0) terms are skipped.
pub fn contrastive_loss_double_loop(simldm: &Matrix, t: &Matrix) -> f64 {
    let n = simldm.rows();
    let mut total = 0.0;
    for i in 0..n {
        let mut denom = 0.0;
        for j in 0..n {
            denom += simldm.at(i, j).exp();
        }
        let mut t_row = 0.0;
        for j in 0..n {
            t_row += t.at(i, j);
        }
        for j in 0..n {
            let z = t.at(i, j) / t_row;
            if z > 0.0 {
                let q = simldm.at(i, j).exp() / denom;
                total -= z * q.ln() - z * z.ln();
            }
        }
    }
    total / n as f64
}

/// Scalar double-loop of the classification cross entropy with an explicit
/// one-hot indicator.
pub fn classification_loss_double_loop(p: &Matrix, labels: &[usize]) -> f64 {
    let m = p.rows();
    let n = p.cols();
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate().take(m) {
        for c in 0..n {
            let indicator = if c == label { 1.0 } else { 0.0 };
            total -= indicator * p.at(i, c).ln();
        }
    }
    total / m as f64
}

/// Outcome of one named oracle comparison.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_error.is_finite() && self.max_error < self.tolerance
    }
}

/// Random projections/probabilities/labels for one comparison instance.
struct LossInstance {
    h: Matrix,
    p: Matrix,
    labels: Vec<usize>,
    labels_dup: Vec<usize>,
    ldm: LabelDistanceMatrix,
}

fn random_loss_instance(m: usize, n_classes: usize, rng: &mut RngState) -> LossInstance {
    let project_dim = 5;
    let h = Matrix::random_uniform(2 * m, project_dim, 1.5, rng);
    let logits = Matrix::random_uniform(m, n_classes, 2.0, rng);
    let p = logits.row_softmax();
    let labels: Vec<usize> = (0..m).map(|_| rng.below(n_classes)).collect();
    let mut labels_dup = labels.clone();
    labels_dup.extend_from_slice(&labels);
    let ldm = static_ldm(n_classes, &[(0, 1)], 1.0 + 4.0 * rng.uniform()).unwrap();
    LossInstance {
        h,
        p,
        labels,
        labels_dup,
        ldm,
    }
}

/// Matrix-pipeline loss vs the scalar double loops over random instances.
pub fn check_loss_equivalence(seed: u64, instances: usize) -> Result<CheckOutcome> {
    let mut rng = RngState::for_domain(seed, Domain::Synthetic);
    let lambda = 0.5;
    let mut max_error: f64 = 0.0;
    for _ in 0..instances {
        let inst = random_loss_instance(4, 3, &mut rng);
        let simm = contrastive::build_simm(&inst.h, 1e-8);
        let ldmm = contrastive::build_ldmm(&inst.labels_dup, &inst.ldm)?;
        let simldm = contrastive::combine(&simm, &ldmm);
        let t = contrastive::build_label_matrix(&inst.labels_dup);

        let pipeline_s = contrastive::contrastive_loss(&simldm, &t)?.value;
        let pipeline_c = contrastive::classification_loss(&inst.p, &inst.labels);
        let pipeline_total = contrastive::total_loss(pipeline_c, pipeline_s, lambda)?;

        let oracle_s = contrastive_loss_double_loop(&simldm, &t);
        let oracle_c = classification_loss_double_loop(&inst.p, &inst.labels);
        let oracle_total = lambda * oracle_c + (1.0 - lambda) * oracle_s;

        max_error = max_error
            .max((pipeline_s - oracle_s).abs())
            .max((pipeline_c - oracle_c).abs())
            .max((pipeline_total - oracle_total).abs());
    }
    Ok(CheckOutcome {
        name: "loss-double-loop".into(),
        max_error,
        tolerance: 1e-12,
    })
}

/// When every row of t has exactly one positive, the KL loss must equal the
/// mean softmax cross entropy of the positive logits.
pub fn check_kl_single_positive_reduction(seed: u64, instances: usize) -> Result<CheckOutcome> {
    let mut rng = RngState::for_domain(seed, Domain::Synthetic);
    let mut max_error: f64 = 0.0;
    for _ in 0..instances {
        let m = 4;
        let h = Matrix::random_uniform(2 * m, 5, 1.5, &mut rng);
        // Distinct labels: row i's only positive is its duplicate i +/- m.
        let labels: Vec<usize> = (0..m).collect();
        let mut labels_dup = labels.clone();
        labels_dup.extend_from_slice(&labels);
        let ldm = identity_ldm(m)?;
        let simldm = contrastive::combine(
            &contrastive::build_simm(&h, 1e-8),
            &contrastive::build_ldmm(&labels_dup, &ldm)?,
        );
        let t = contrastive::build_label_matrix(&labels_dup);
        let kl = contrastive::contrastive_loss(&simldm, &t)?.value;

        // Scalar cross entropy of each row's positive logit.
        let two_m = 2 * m;
        let mut ce = 0.0;
        for i in 0..two_m {
            let twin = if i < m { i + m } else { i - m };
            let mut denom = 0.0;
            for j in 0..two_m {
                denom += simldm.at(i, j).exp();
            }
            ce -= (simldm.at(i, twin).exp() / denom).ln();
        }
        ce /= two_m as f64;
        max_error = max_error.max((kl - ce).abs());
    }
    Ok(CheckOutcome {
        name: "kl-single-positive-reduction".into(),
        max_error,
        tolerance: 1e-12,
    })
}

fn gradient_check_dims() -> ModelDims {
    ModelDims {
        feature_dim: 32,
        hidden_dim: 8,
        encode_dim: 8,
        project_dim: 4,
        n_classes: 3,
    }
}

fn mode_ldm(mode: Mode, n_classes: usize, tau: f64) -> Result<Option<LabelDistanceMatrix>> {
    Ok(match mode {
        Mode::Ct => None,
        Mode::CtCl => Some(identity_ldm(n_classes)?),
        Mode::CtClsld => Some(static_ldm(n_classes, &[(0, 1)], tau)?),
        // The adaptive mode optimizes the same objective as the static one
        // between updates; a representative non-trivial matrix stands in.
        Mode::CtClald => Some(static_ldm(n_classes, &[(1, 2)], tau)?),
    })
}

/// Analytic gradients of the full objective vs central finite differences
/// (step 1e-4) on a small model, for the given mode and mixing weight.
///
/// Relative error uses a 1e-6 denominator floor so that entries whose true
/// gradient sits below finite-difference resolution do not dominate.
pub fn check_gradients_with_lambda(
    mode: Mode,
    lambda: f64,
    seed: u64,
    perturbation: f64,
) -> Result<CheckOutcome> {
    let dims = gradient_check_dims();
    let m = 4;
    let tau = 5.0;
    let xi = 1e-8;
    let params = ModelParams::init(dims, seed);
    let mut data_rng = RngState::for_domain(seed, Domain::Synthetic);
    let batch = Batch {
        features: Matrix::random_uniform(m, dims.feature_dim, 1.0, &mut data_rng),
        labels: (0..m).map(|_| data_rng.below(dims.n_classes)).collect(),
    };
    let ldm = mode_ldm(mode, dims.n_classes, tau)?;
    let dropout_rng = RngState::for_domain(seed, Domain::Dropout);

    let st = build_step_tape(
        &params,
        &batch,
        ldm.as_ref(),
        lambda,
        xi,
        &mut dropout_rng.clone(),
    )?;
    let grads = st.tape.backward(st.loss);
    let mut analytic: Vec<Matrix> = st
        .param_nodes
        .iter()
        .map(|&id| grads.get(id, &st.tape))
        .collect();
    if perturbation != 0.0 {
        // Self-test hook: corrupt one entry so the comparison must fail.
        analytic[0].data_mut()[0] += perturbation;
    }

    let step = 1e-4;
    let mut max_error: f64 = 0.0;
    for (tensor_idx, tensor_grad) in analytic.iter().enumerate() {
        for entry in 0..tensor_grad.data().len() {
            let probe = |delta: f64| -> Result<f64> {
                let mut perturbed = params.clone();
                perturbed.tensors_mut()[tensor_idx].1.data_mut()[entry] += delta;
                step_loss_value(
                    &perturbed,
                    &batch,
                    ldm.as_ref(),
                    lambda,
                    xi,
                    &mut dropout_rng.clone(),
                )
            };
            let fd = (probe(step)? - probe(-step)?) / (2.0 * step);
            let a = tensor_grad.data()[entry];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            max_error = max_error.max((a - fd).abs() / denom);
        }
    }
    Ok(CheckOutcome {
        name: format!("gradient-{}", mode.as_str()),
        max_error,
        tolerance: 1e-4,
    })
}

pub fn check_gradients(mode: Mode, seed: u64, perturbation: f64) -> Result<CheckOutcome> {
    check_gradients_with_lambda(mode, 0.5, seed, perturbation)
}

/// Every oracle comparison, in reporting order. A nonzero `perturbation`
/// corrupts the first analytic gradient and must make that check fail.
pub fn run_all(seed: u64, perturbation: f64) -> Result<Vec<CheckOutcome>> {
    Ok(vec![
        check_loss_equivalence(seed, 20)?,
        check_kl_single_positive_reduction(seed, 10)?,
        check_gradients(Mode::Ct, seed, perturbation)?,
        check_gradients(Mode::CtCl, seed, perturbation)?,
        check_gradients(Mode::CtClsld, seed, perturbation)?,
    ])
}
