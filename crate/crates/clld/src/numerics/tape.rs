//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records one forward pass as a sequence of matrix operations;
//! [`Tape::backward`] walks the recording in reverse and accumulates
//! gradients for every node. The op set is exactly what the training loss
//! needs — dense layers, tanh, dropout-style constant masks, row
//! log-softmax, the pairwise similarity map, and the two loss reductions —
//! and every rule is validated against central finite differences in the
//! oracle checks.

use super::matrix::{dot, l2_norm, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRowBroadcast(NodeId, NodeId),
    Tanh(NodeId),
    /// Elementwise product with a constant (dropout masks, distance masks).
    MulConstant(NodeId, Matrix),
    ElementwiseMul(NodeId, NodeId),
    /// [top; bottom] row stacking.
    VStack(NodeId, NodeId),
    Scale(NodeId, f64),
    RowLogSoftmax(NodeId),
    /// Pairwise rescaled cosine similarity with the -1e6 diagonal sentinel.
    PairwiseCosine01 {
        input: NodeId,
        xi: f64,
    },
    /// -(1/rows) * sum_i logp[i][label_i]; a 1x1 node.
    NegMeanLogPick {
        logp: NodeId,
        labels: Vec<usize>,
    },
    /// offset - scale * sum_ij weights[i][j] * logp[i][j]; a 1x1 node. The
    /// offset is a constant, so only `weights` and `scale` matter backward.
    NegWeightedSum {
        logp: NodeId,
        weights: Matrix,
        scale: f64,
    },
    /// alpha*a + beta*b on 1x1 nodes.
    AddScaled(NodeId, NodeId, f64, f64),
}

struct Node {
    value: Matrix,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let m = self.value(id);
        assert_eq!(m.shape(), (1, 1), "node is not a scalar");
        m.at(0, 0)
    }

    /// A source node: model parameter or input batch.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).add(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    pub fn add_row_broadcast(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let value = self.value(a).add_row_broadcast(self.value(row));
        self.push(value, Op::AddRowBroadcast(a, row))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn mul_constant(&mut self, a: NodeId, constant: Matrix) -> NodeId {
        let value = self.value(a).elementwise_mul(&constant);
        self.push(value, Op::MulConstant(a, constant))
    }

    pub fn elementwise_mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).elementwise_mul(self.value(b));
        self.push(value, Op::ElementwiseMul(a, b))
    }

    pub fn vstack(&mut self, top: NodeId, bottom: NodeId) -> NodeId {
        let value = self.value(top).vstack(self.value(bottom));
        self.push(value, Op::VStack(top, bottom))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.value(a).scale(factor);
        self.push(value, Op::Scale(a, factor))
    }

    pub fn row_log_softmax(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).row_log_softmax();
        self.push(value, Op::RowLogSoftmax(a))
    }

    /// Pairwise similarity of the rows of `input`, rescaled into [0,1], with
    /// the diagonal set to exactly -1e6.
    pub fn pairwise_cosine01(&mut self, input: NodeId, xi: f64) -> NodeId {
        let value = pairwise_cosine01_forward(self.value(input), xi);
        self.push(value, Op::PairwiseCosine01 { input, xi })
    }

    /// Mean negative log-likelihood of the picked entries: the
    /// classification loss applied to a log-probability matrix.
    pub fn neg_mean_log_pick(&mut self, logp: NodeId, labels: Vec<usize>) -> NodeId {
        let lp = self.value(logp);
        assert_eq!(lp.rows(), labels.len(), "one label per row required");
        let m = labels.len() as f64;
        let sum: f64 = labels.iter().enumerate().map(|(i, &y)| lp.at(i, y)).sum();
        let value = Matrix::from_vec(1, 1, vec![-sum / m]);
        self.push(value, Op::NegMeanLogPick { logp, labels })
    }

    /// offset - scale * <weights, logp>; gradients flow into logp only.
    pub fn neg_weighted_sum(
        &mut self,
        logp: NodeId,
        weights: Matrix,
        scale: f64,
        offset: f64,
    ) -> NodeId {
        let lp = self.value(logp);
        assert_eq!(lp.shape(), weights.shape(), "weight shape mismatch");
        let inner: f64 = lp
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&l, &w)| l * w)
            .sum();
        let value = Matrix::from_vec(1, 1, vec![offset - scale * inner]);
        self.push(
            value,
            Op::NegWeightedSum {
                logp,
                weights,
                scale,
            },
        )
    }

    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, alpha: f64, beta: f64) -> NodeId {
        let value = self.value(a).scale(alpha).add(&self.value(b).scale(beta));
        self.push(value, Op::AddScaled(a, b, alpha, beta))
    }

    /// Reverse pass from a scalar node. Returns per-node gradients.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::from_vec(1, 1, vec![1.0]));

        for idx in (0..self.nodes.len()).rev() {
            let upstream = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            // Re-insert so callers can still read this node's gradient.
            grads[idx] = Some(upstream.clone());

            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = upstream.matmul(&self.value(*b).transpose());
                    let gb = self.value(*a).transpose().matmul(&upstream);
                    accumulate(&mut grads, *a, &ga, self);
                    accumulate(&mut grads, *b, &gb, self);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &upstream, self);
                    accumulate(&mut grads, *b, &upstream, self);
                }
                Op::AddRowBroadcast(a, row) => {
                    accumulate(&mut grads, *a, &upstream, self);
                    let grow = upstream.col_sums();
                    accumulate(&mut grads, *row, &grow, self);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[idx].value;
                    let ga = upstream.elementwise_mul(&y.map(|t| 1.0 - t * t));
                    accumulate(&mut grads, *a, &ga, self);
                }
                Op::MulConstant(a, constant) => {
                    let ga = upstream.elementwise_mul(constant);
                    accumulate(&mut grads, *a, &ga, self);
                }
                Op::ElementwiseMul(a, b) => {
                    let ga = upstream.elementwise_mul(self.value(*b));
                    let gb = upstream.elementwise_mul(self.value(*a));
                    accumulate(&mut grads, *a, &ga, self);
                    accumulate(&mut grads, *b, &gb, self);
                }
                Op::VStack(top, bottom) => {
                    let split = self.value(*top).rows();
                    let gtop = upstream.rows_range(0, split);
                    let gbottom = upstream.rows_range(split, upstream.rows());
                    accumulate(&mut grads, *top, &gtop, self);
                    accumulate(&mut grads, *bottom, &gbottom, self);
                }
                Op::Scale(a, factor) => {
                    let ga = upstream.scale(*factor);
                    accumulate(&mut grads, *a, &ga, self);
                }
                Op::RowLogSoftmax(a) => {
                    // d logp = g - softmax(x) * rowsum(g)
                    let y = &self.nodes[idx].value;
                    let mut ga = upstream.clone();
                    for i in 0..ga.rows() {
                        let gsum: f64 = upstream.row(i).iter().sum();
                        let probs = y.row(i);
                        for (j, g) in ga.row_mut(i).iter_mut().enumerate() {
                            *g -= probs[j].exp() * gsum;
                        }
                    }
                    accumulate(&mut grads, *a, &ga, self);
                }
                Op::PairwiseCosine01 { input, xi } => {
                    let ga = pairwise_cosine01_backward(self.value(*input), &upstream, *xi);
                    accumulate(&mut grads, *input, &ga, self);
                }
                Op::NegMeanLogPick { logp, labels } => {
                    let u = upstream.at(0, 0);
                    let lp = self.value(*logp);
                    let mut ga = Matrix::zeros(lp.rows(), lp.cols());
                    let m = labels.len() as f64;
                    for (i, &y) in labels.iter().enumerate() {
                        ga.set(i, y, -u / m);
                    }
                    accumulate(&mut grads, *logp, &ga, self);
                }
                Op::NegWeightedSum {
                    logp,
                    weights,
                    scale,
                } => {
                    let u = upstream.at(0, 0);
                    let ga = weights.scale(-u * scale);
                    accumulate(&mut grads, *logp, &ga, self);
                }
                Op::AddScaled(a, b, alpha, beta) => {
                    accumulate(&mut grads, *a, &upstream.scale(*alpha), self);
                    accumulate(&mut grads, *b, &upstream.scale(*beta), self);
                }
            }
        }

        Gradients { grads }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate(grads: &mut [Option<Matrix>], target: NodeId, delta: &Matrix, tape: &Tape) {
    match &mut grads[target.0] {
        Some(g) => g.add_scaled_assign(delta, 1.0),
        slot @ None => {
            let (r, c) = tape.value(target).shape();
            let mut g = Matrix::zeros(r, c);
            g.add_scaled_assign(delta, 1.0);
            *slot = Some(g);
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for `id`; zero matrix of the right shape if the node did not
    /// influence the loss.
    pub fn get(&self, id: NodeId, tape: &Tape) -> Matrix {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = tape.value(id).shape();
                Matrix::zeros(r, c)
            }
        }
    }
}

/// Similarity of rows i and j: 0.5 * (h_i . h_j / max(|h_i||h_j|, xi) + 1),
/// clamped diagonal at exactly -1e6.
fn pairwise_cosine01_forward(h: &Matrix, xi: f64) -> Matrix {
    let n = h.rows();
    let norms: Vec<f64> = (0..n).map(|i| l2_norm(h.row(i))).collect();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                out.set(i, j, crate::contrastive::DIAGONAL_MASK);
                continue;
            }
            let denom = (norms[i] * norms[j]).max(xi);
            out.set(i, j, 0.5 * (dot(h.row(i), h.row(j)) / denom + 1.0));
        }
    }
    out
}

fn pairwise_cosine01_backward(h: &Matrix, upstream: &Matrix, xi: f64) -> Matrix {
    let n = h.rows();
    let d = h.cols();
    let norms: Vec<f64> = (0..n).map(|i| l2_norm(h.row(i))).collect();
    let mut grad = Matrix::zeros(n, d);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let u = upstream.at(i, j);
            if u == 0.0 {
                continue;
            }
            let hi = h.row(i);
            let hj = h.row(j);
            let s = dot(hi, hj);
            let prod = norms[i] * norms[j];
            if prod > xi {
                // d/dh_i [s / (|h_i||h_j|)] = h_j/prod - s * h_i / (|h_i|^2 * prod)
                let ci = s / (norms[i] * norms[i] * prod);
                let row = grad.row_mut(i);
                for k in 0..d {
                    row[k] += u * 0.5 * (hj[k] / prod - ci * hi[k]);
                }
            } else {
                // Guard active: denominator is the constant xi.
                let row = grad.row_mut(i);
                for k in 0..d {
                    row[k] += u * 0.5 * hj[k] / xi;
                }
            }
            // Symmetric role of j as the second operand of sim(h_i, h_j).
            if prod > xi {
                let cj = s / (norms[j] * norms[j] * prod);
                let row = grad.row_mut(j);
                for k in 0..d {
                    row[k] += u * 0.5 * (hi[k] / prod - cj * hj[k]);
                }
            } else {
                let row = grad.row_mut(j);
                for k in 0..d {
                    row[k] += u * 0.5 * hi[k] / xi;
                }
            }
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{Domain, RngState};

    #[test]
    fn grad_of_sum_is_ones() {
        // L = sum(W) via weights of ones in the reduction.
        let mut tape = Tape::new();
        let w = tape.leaf(Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let loss = tape.neg_weighted_sum(w, Matrix::from_vec(2, 2, vec![1.0; 4]), -1.0, 0.0);
        assert_eq!(tape.scalar(loss), 10.0);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(w, &tape), Matrix::from_vec(2, 2, vec![1.0; 4]));
    }

    #[test]
    fn grad_of_half_squared_norm_is_input() {
        // L = 0.5 * |v|^2, dL/dv = v.
        let v = Matrix::from_rows(&[&[1.0, -2.0, 3.0]]);
        let mut tape = Tape::new();
        let node = tape.leaf(v.clone());
        let squared = tape.elementwise_mul(node, node);
        let loss = tape.neg_weighted_sum(squared, Matrix::from_vec(1, 3, vec![1.0; 3]), -0.5, 0.0);
        assert_eq!(tape.scalar(loss), 0.5 * (1.0 + 4.0 + 9.0));
        let grads = tape.backward(loss);
        let g = grads.get(node, &tape);
        for (got, want) in g.data().iter().zip(v.data()) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn matmul_chain_matches_finite_differences() {
        let mut rng = RngState::for_domain(42, Domain::Init);
        let a0 = Matrix::random_uniform(3, 4, 1.0, &mut rng);
        let b0 = Matrix::random_uniform(4, 2, 1.0, &mut rng);
        let labels = vec![0, 1, 0];

        let loss_of = |a: &Matrix, b: &Matrix| {
            let mut tape = Tape::new();
            let an = tape.leaf(a.clone());
            let bn = tape.leaf(b.clone());
            let prod = tape.matmul(an, bn);
            let act = tape.tanh(prod);
            let logp = tape.row_log_softmax(act);
            let loss = tape.neg_mean_log_pick(logp, labels.clone());
            tape.scalar(loss)
        };

        let mut tape = Tape::new();
        let an = tape.leaf(a0.clone());
        let bn = tape.leaf(b0.clone());
        let prod = tape.matmul(an, bn);
        let act = tape.tanh(prod);
        let logp = tape.row_log_softmax(act);
        let loss = tape.neg_mean_log_pick(logp, labels.clone());
        let grads = tape.backward(loss);

        let step = 1e-5;
        let ga = grads.get(an, &tape);
        for idx in 0..a0.data().len() {
            let mut plus = a0.clone();
            plus.data_mut()[idx] += step;
            let mut minus = a0.clone();
            minus.data_mut()[idx] -= step;
            let fd = (loss_of(&plus, &b0) - loss_of(&minus, &b0)) / (2.0 * step);
            assert!(
                (ga.data()[idx] - fd).abs() < 1e-8,
                "entry {idx}: analytic {} vs fd {fd}",
                ga.data()[idx]
            );
        }
        let gb = grads.get(bn, &tape);
        for idx in 0..b0.data().len() {
            let mut plus = b0.clone();
            plus.data_mut()[idx] += step;
            let mut minus = b0.clone();
            minus.data_mut()[idx] -= step;
            let fd = (loss_of(&a0, &plus) - loss_of(&a0, &minus)) / (2.0 * step);
            assert!((gb.data()[idx] - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn pairwise_cosine_gradient_matches_finite_differences() {
        let mut rng = RngState::for_domain(9, Domain::Init);
        let h0 = Matrix::random_uniform(4, 3, 1.0, &mut rng);
        // Weighted sum of the similarity matrix as a scalar probe. The
        // diagonal weights must be zero: the -1e6 sentinel would blow up the
        // loss magnitude and drown the finite differences in cancellation.
        let mut weights = Matrix::random_uniform(4, 4, 1.0, &mut rng);
        for i in 0..4 {
            weights.set(i, i, 0.0);
        }

        let loss_of = |h: &Matrix| {
            let mut tape = Tape::new();
            let hn = tape.leaf(h.clone());
            let sim = tape.pairwise_cosine01(hn, 1e-8);
            let loss = tape.neg_weighted_sum(sim, weights.clone(), -1.0, 0.0);
            tape.scalar(loss)
        };

        let mut tape = Tape::new();
        let hn = tape.leaf(h0.clone());
        let sim = tape.pairwise_cosine01(hn, 1e-8);
        let loss = tape.neg_weighted_sum(sim, weights.clone(), -1.0, 0.0);
        let grads = tape.backward(loss);
        let gh = grads.get(hn, &tape);

        let step = 1e-6;
        for idx in 0..h0.data().len() {
            let mut plus = h0.clone();
            plus.data_mut()[idx] += step;
            let mut minus = h0.clone();
            minus.data_mut()[idx] -= step;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * step);
            assert!(
                (gh.data()[idx] - fd).abs() < 1e-6,
                "entry {idx}: analytic {} vs fd {fd}",
                gh.data()[idx]
            );
        }
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let used = tape.leaf(Matrix::from_rows(&[&[1.0, 1.0]]));
        let unused = tape.leaf(Matrix::zeros(3, 3));
        let loss = tape.neg_weighted_sum(used, Matrix::from_vec(1, 2, vec![1.0; 2]), 1.0, 0.0);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(unused, &tape), Matrix::zeros(3, 3));
    }
}
