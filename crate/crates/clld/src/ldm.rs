//! Label distance matrices: identity, static (manual confusable pairs), and
//! adaptive (driven by the validation confusion matrix with a linearly
//! decaying update intensity).
//!
//! Invariants maintained everywhere: unit diagonal, symmetry, off-diagonal
//! entries in [1, tau].

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LdmMode {
    Identity,
    Static,
    Adaptive,
}

/// NxN nonnegative weights encoding how strongly each pair of classes should
/// be pushed apart.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelDistanceMatrix {
    distances: Matrix,
    mode: LdmMode,
}

impl LabelDistanceMatrix {
    pub fn n_classes(&self) -> usize {
        self.distances.rows()
    }

    pub fn mode(&self) -> LdmMode {
        self.mode
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.distances.at(i, j)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.distances
    }

    pub fn from_matrix(distances: Matrix, mode: LdmMode) -> Result<Self> {
        if distances.rows() != distances.cols() {
            return Err(Error::MatrixFile(format!(
                "label distance matrix must be square, got {}x{}",
                distances.rows(),
                distances.cols()
            )));
        }
        let ldm = Self { distances, mode };
        ldm.check_invariants()?;
        Ok(ldm)
    }

    fn check_invariants(&self) -> Result<()> {
        let n = self.n_classes();
        for i in 0..n {
            if self.distances.at(i, i) != 1.0 {
                return Err(Error::Contract(format!(
                    "label distance diagonal must be 1, got {} at ({i},{i})",
                    self.distances.at(i, i)
                )));
            }
            for j in 0..n {
                let v = self.distances.at(i, j);
                if !v.is_finite() || v < 1.0 {
                    return Err(Error::Contract(format!(
                        "label distance entries must be finite and >= 1, got {v} at ({i},{j})"
                    )));
                }
                if (v - self.distances.at(j, i)).abs() > 1e-12 {
                    return Err(Error::Contract(format!(
                        "label distance matrix must be symmetric at ({i},{j})"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// All-ones matrix: contrastive learning with no label distance.
pub fn identity_ldm(n_classes: usize) -> Result<LabelDistanceMatrix> {
    if n_classes < 2 {
        return Err(Error::Config(format!(
            "label distance matrix needs >= 2 classes, got {n_classes}"
        )));
    }
    Ok(LabelDistanceMatrix {
        distances: Matrix::from_vec(n_classes, n_classes, vec![1.0; n_classes * n_classes]),
        mode: LdmMode::Identity,
    })
}

/// Manually selected confusable pairs at distance tau, 1 elsewhere.
pub fn static_ldm(
    n_classes: usize,
    pairs: &[(usize, usize)],
    tau: f64,
) -> Result<LabelDistanceMatrix> {
    if tau < 1.0 {
        return Err(Error::Config(format!("tau must be >= 1, got {tau}")));
    }
    let mut ldm = identity_ldm(n_classes)?;
    for &(i, j) in pairs {
        if i == j {
            return Err(Error::Config(format!(
                "static pair ({i},{j}) must name two distinct classes"
            )));
        }
        if i >= n_classes || j >= n_classes {
            return Err(Error::Config(format!(
                "static pair ({i},{j}) out of range for {n_classes} classes"
            )));
        }
        ldm.distances.set(i, j, tau);
        ldm.distances.set(j, i, tau);
    }
    ldm.mode = LdmMode::Static;
    Ok(ldm)
}

/// Counts of true class (row) against predicted class (column).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn count(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class][predicted]
    }

    pub fn rows(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes()).map(|i| self.counts[i][i]).sum()
    }
}

pub fn confusion_matrix(
    y_true: &[usize],
    y_pred: &[usize],
    n_classes: usize,
) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Contract(format!(
            "confusion matrix inputs differ in length: {} vs {}",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut counts = vec![vec![0u64; n_classes]; n_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= n_classes || p >= n_classes {
            return Err(Error::Contract(format!(
                "label out of range: true {t}, predicted {p}, n_classes {n_classes}"
            )));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

/// Candidate distance matrix from validation confusion: symmetrized
/// off-diagonal confusion counts, max-normalized into [1, tau]. A perfectly
/// diagonal confusion matrix yields the identity matrix.
pub fn ldm_from_confusion(cm: &ConfusionMatrix, tau: f64) -> Result<LabelDistanceMatrix> {
    if tau < 1.0 {
        return Err(Error::Config(format!("tau must be >= 1, got {tau}")));
    }
    let n = cm.n_classes();
    let mut ldm = identity_ldm(n)?;
    ldm.mode = LdmMode::Adaptive;

    let mut max_confusion = 0u64;
    for i in 0..n {
        for j in (i + 1)..n {
            max_confusion = max_confusion.max(cm.count(i, j) + cm.count(j, i));
        }
    }
    if max_confusion == 0 {
        return Ok(ldm);
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let c = (cm.count(i, j) + cm.count(j, i)) as f64;
            let d = 1.0 + (tau - 1.0) * c / max_confusion as f64;
            ldm.distances.set(i, j, d);
            ldm.distances.set(j, i, d);
        }
    }
    Ok(ldm)
}

/// Interpolate toward `target` with weight epsilon = 1 - steps/total, then
/// re-establish the invariants (clamp into [1, tau], unit diagonal).
pub fn update_ldm(
    current: &LabelDistanceMatrix,
    target: &LabelDistanceMatrix,
    training_steps: usize,
    total_steps: usize,
    tau: f64,
) -> Result<LabelDistanceMatrix> {
    if training_steps > total_steps || total_steps == 0 {
        return Err(Error::Contract(format!(
            "training_steps {training_steps} must lie in [0, total_steps={total_steps}]"
        )));
    }
    if current.n_classes() != target.n_classes() {
        return Err(Error::Contract(format!(
            "cannot interpolate distance matrices of sizes {} and {}",
            current.n_classes(),
            target.n_classes()
        )));
    }
    let epsilon = 1.0 - training_steps as f64 / total_steps as f64;
    let n = current.n_classes();
    let mut distances = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let cur = current.distances.at(i, j);
            let tgt = target.distances.at(i, j);
            let v = (cur + epsilon * (tgt - cur)).clamp(1.0, tau);
            distances.set(i, j, if i == j { 1.0 } else { v });
        }
    }
    Ok(LabelDistanceMatrix {
        distances,
        mode: LdmMode::Adaptive,
    })
}

/// When the adaptive update runs: warmup (epoch > n/5, strict) and cadence
/// (every 10*k training steps, where k is the steps between evaluations).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdaptiveSchedule {
    pub num_epoch: usize,
    pub eval_steps: usize,
    pub total_steps: usize,
}

impl AdaptiveSchedule {
    pub fn new(num_epoch: usize, eval_steps: usize, total_steps: usize) -> Result<Self> {
        if num_epoch < 5 {
            return Err(Error::Config(format!(
                "adaptive schedule needs num_epoch >= 5, got {num_epoch}"
            )));
        }
        if eval_steps < 1 {
            return Err(Error::Config("eval_steps must be >= 1".into()));
        }
        Ok(Self {
            num_epoch,
            eval_steps,
            total_steps,
        })
    }
}

pub fn should_update(schedule: &AdaptiveSchedule, epoch: usize, training_steps: usize) -> bool {
    // epoch > n/5 in exact integer arithmetic.
    let past_warmup = epoch * 5 > schedule.num_epoch;
    let on_cadence = training_steps.is_multiple_of(10 * schedule.eval_steps);
    past_warmup && on_cadence
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_all_ones() {
        let ldm = identity_ldm(3).unwrap();
        assert_eq!(ldm.matrix().data(), &[1.0; 9]);
        assert_eq!(ldm.mode(), LdmMode::Identity);
        ldm.check_invariants().unwrap();
    }

    #[test]
    fn static_pairs_at_tau() {
        let ldm = static_ldm(3, &[(0, 1)], 5.0).unwrap();
        assert_eq!(ldm.distance(0, 1), 5.0);
        assert_eq!(ldm.distance(1, 0), 5.0);
        assert_eq!(ldm.distance(0, 2), 1.0);
        assert_eq!(ldm.distance(0, 0), 1.0);
    }

    #[test]
    fn static_empty_pairs_is_identity() {
        let ldm = static_ldm(4, &[], 5.0).unwrap();
        assert_eq!(ldm.matrix(), identity_ldm(4).unwrap().matrix());
    }

    #[test]
    fn static_tau_one_is_identity_regardless_of_pairs() {
        let ldm = static_ldm(4, &[(0, 3), (1, 2)], 1.0).unwrap();
        assert_eq!(ldm.matrix(), identity_ldm(4).unwrap().matrix());
    }

    #[test]
    fn static_rejects_self_pair() {
        assert!(static_ldm(3, &[(1, 1)], 5.0).is_err());
    }

    #[test]
    fn confusion_counts() {
        let cm = confusion_matrix(&[0, 1], &[0, 1], 2).unwrap();
        assert_eq!(cm.count(0, 0), 1);
        assert_eq!(cm.count(1, 1), 1);
        assert_eq!(cm.count(0, 1), 0);

        let cm = confusion_matrix(&[0, 0], &[1, 1], 2).unwrap();
        assert_eq!(cm.count(0, 1), 2);
    }

    #[test]
    fn confusion_row_sums_are_class_counts() {
        let y_true = [0, 0, 1, 2, 2, 2];
        let y_pred = [0, 1, 1, 0, 2, 2];
        let cm = confusion_matrix(&y_true, &y_pred, 3).unwrap();
        for class in 0..3 {
            let row_sum: u64 = cm.rows()[class].iter().sum();
            let count = y_true.iter().filter(|&&t| t == class).count() as u64;
            assert_eq!(row_sum, count);
        }
    }

    #[test]
    fn confusion_length_mismatch_errors() {
        assert!(confusion_matrix(&[0, 1], &[0], 2).is_err());
    }

    #[test]
    fn ldm_from_perfect_confusion_is_identity() {
        let cm = confusion_matrix(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        let ldm = ldm_from_confusion(&cm, 5.0).unwrap();
        assert_eq!(ldm.matrix(), identity_ldm(3).unwrap().matrix());
    }

    #[test]
    fn ldm_from_single_confused_pair_hits_tau() {
        let cm = confusion_matrix(&[0, 0, 1, 2], &[1, 1, 0, 2], 3).unwrap();
        let ldm = ldm_from_confusion(&cm, 5.0).unwrap();
        assert_eq!(ldm.distance(0, 1), 5.0);
        assert_eq!(ldm.distance(0, 2), 1.0);
        assert_eq!(ldm.distance(1, 2), 1.0);
    }

    #[test]
    fn ldm_from_confusion_scales_linearly() {
        // c01 = 10 (max), c02 = 5, tau = 5:
        // d01 = 1 + 4*10/10 = 5, d02 = 1 + 4*5/10 = 3.
        let mut y_true = Vec::new();
        let mut y_pred = Vec::new();
        for _ in 0..10 {
            y_true.push(0);
            y_pred.push(1);
        }
        for _ in 0..5 {
            y_true.push(0);
            y_pred.push(2);
        }
        let cm = confusion_matrix(&y_true, &y_pred, 3).unwrap();
        let ldm = ldm_from_confusion(&cm, 5.0).unwrap();
        assert!((ldm.distance(0, 1) - 5.0).abs() < 1e-12);
        assert!((ldm.distance(0, 2) - 3.0).abs() < 1e-12);
        ldm.check_invariants().unwrap();
    }

    #[test]
    fn update_endpoints() {
        let current = static_ldm(3, &[(0, 1)], 5.0).unwrap();
        let target = identity_ldm(3).unwrap();
        // epsilon = 0 at the end of training: unchanged.
        let at_end = update_ldm(&current, &target, 100, 100, 5.0).unwrap();
        assert_eq!(at_end.matrix(), current.matrix());
        // epsilon = 1 at step 0: replaced.
        let at_start = update_ldm(&current, &target, 0, 100, 5.0).unwrap();
        assert_eq!(at_start.matrix(), target.matrix());
    }

    #[test]
    fn update_midpoint() {
        let current = identity_ldm(2).unwrap();
        let target = static_ldm(2, &[(0, 1)], 5.0).unwrap();
        let mid = update_ldm(&current, &target, 50, 100, 5.0).unwrap();
        assert!((mid.distance(0, 1) - 3.0).abs() < 1e-12);
        assert_eq!(mid.distance(0, 0), 1.0);
    }

    #[test]
    fn update_is_affine_and_keeps_invariants() {
        let current = static_ldm(4, &[(0, 1)], 5.0).unwrap();
        let target = static_ldm(4, &[(2, 3)], 5.0).unwrap();
        for steps in [0, 10, 25, 60, 100] {
            let updated = update_ldm(&current, &target, steps, 100, 5.0).unwrap();
            updated.check_invariants().unwrap();
            let epsilon = 1.0 - steps as f64 / 100.0;
            for i in 0..4 {
                for j in 0..4 {
                    let expect = current.distance(i, j)
                        + epsilon * (target.distance(i, j) - current.distance(i, j));
                    assert!(
                        (updated.distance(i, j) - expect).abs() < 1e-12,
                        "clamping should be a no-op when both operands are valid"
                    );
                }
            }
        }
    }

    #[test]
    fn invariants_survive_any_update_sequence() {
        use crate::numerics::{Domain, RngState};
        let mut rng = RngState::for_domain(31, Domain::Synthetic);
        let n = 5;
        let tau = 5.0;
        let mut ldm = identity_ldm(n).unwrap();
        let total_steps = 1000;
        for round in 0..40 {
            // Random confusion counts, random schedule position.
            let mut y_true = Vec::new();
            let mut y_pred = Vec::new();
            for _ in 0..200 {
                y_true.push(rng.below(n));
                y_pred.push(rng.below(n));
            }
            let cm = confusion_matrix(&y_true, &y_pred, n).unwrap();
            let candidate = ldm_from_confusion(&cm, tau).unwrap();
            let steps = rng.below(total_steps + 1);
            ldm = update_ldm(&ldm, &candidate, steps, total_steps, tau).unwrap();
            ldm.check_invariants()
                .unwrap_or_else(|e| panic!("round {round}: {e}"));
        }
    }

    #[test]
    fn warmup_gate_is_strict() {
        let sched = AdaptiveSchedule::new(50, 10, 500).unwrap();
        assert!(
            !should_update(&sched, 10, 100),
            "epoch == n/5 must not fire"
        );
        assert!(should_update(&sched, 11, 100));
        assert!(
            !should_update(&sched, 11, 101),
            "off-cadence step must not fire"
        );
    }

    #[test]
    fn cadence_fires_on_multiples_of_ten_k() {
        let sched = AdaptiveSchedule::new(50, 7, 3500).unwrap();
        for steps in 0..300 {
            let fired = should_update(&sched, 20, steps);
            assert_eq!(fired, steps % 70 == 0, "step {steps}");
        }
    }
}
