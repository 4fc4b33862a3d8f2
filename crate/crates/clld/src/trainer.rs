//! Training orchestration: the multi-task step, AdamW, per-epoch validation
//! with early stopping, and the adaptive label-distance schedule.
//!
//! Everything downstream of (config, corpus, seed) is deterministic:
//! parameter init, batch order, dropout masks, and the distance-matrix
//! updates all draw from fixed streams, so two runs with the same inputs
//! produce bit-identical parameters and reports.

use std::collections::BTreeMap;

use crate::contrastive;
use crate::data::{batch_iter, Batch, Corpus, Example, Featurizer, LabelSpace};
use crate::error::{Error, Result};
use crate::ldm::{
    confusion_matrix, identity_ldm, ldm_from_confusion, should_update, static_ldm, update_ldm,
    AdaptiveSchedule, ConfusionMatrix, LabelDistanceMatrix, LdmMode,
};
use crate::model::{
    ModelDims, ModelParams, CLASSIFIER_DROPOUT, ENCODER_DROPOUT, PARAM_DECAY, PARAM_NAMES,
};
use crate::numerics::{dropout_mask, Domain, Matrix, NodeId, RngSnapshot, RngState, Tape};

const ADAM_EPSILON: f64 = 1e-8;

/// Ablation modes: classification only, plus contrastive, plus static label
/// distance, plus adaptive label distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Ct,
    CtCl,
    CtClsld,
    CtClald,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Ct => "ct",
            Mode::CtCl => "ct_cl",
            Mode::CtClsld => "ct_clsld",
            Mode::CtClald => "ct_clald",
        }
    }
}

/// Hyperparameters for one run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Multi-task mixing weight: loss = lambda * L_c + (1 - lambda) * L_s.
    pub lambda: f64,
    /// Maximum label-distance amplification.
    pub tau: f64,
    /// Division guard in the cosine similarity.
    pub xi: f64,
    pub batch_size: usize,
    pub num_epoch: usize,
    /// Stop after this many epochs without validation improvement.
    pub patience: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Confusable class pairs for ct_clsld mode.
    pub static_pairs: Vec<(usize, usize)>,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub encode_dim: usize,
    pub project_dim: usize,
    pub ngram_max: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::CtClald,
            lambda: 0.5,
            tau: 5.0,
            xi: 1e-8,
            batch_size: 32,
            num_epoch: 50,
            patience: 10,
            learning_rate: 1e-3,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            static_pairs: Vec::new(),
            feature_dim: 4096,
            hidden_dim: 256,
            encode_dim: 128,
            project_dim: 64,
            ngram_max: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda must be in [0, 1], got {}",
                self.lambda
            )));
        }
        if self.tau < 1.0 {
            return Err(Error::Config(format!("tau must be >= 1, got {}", self.tau)));
        }
        if self.xi <= 0.0 {
            return Err(Error::Config(format!(
                "xi must be positive, got {}",
                self.xi
            )));
        }
        if self.patience < 1 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if self.num_epoch < 1 {
            return Err(Error::Config("num_epoch must be >= 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!(
                "beta1/beta2 must be in [0, 1), got {}/{}",
                self.beta1, self.beta2
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        if self.mode != Mode::CtClsld && !self.static_pairs.is_empty() {
            return Err(Error::Config(
                "static_pairs is only meaningful in ct_clsld mode".into(),
            ));
        }
        Ok(())
    }

    pub fn dims(&self, n_classes: usize) -> ModelDims {
        ModelDims {
            feature_dim: self.feature_dim,
            hidden_dim: self.hidden_dim,
            encode_dim: self.encode_dim,
            project_dim: self.project_dim,
            n_classes,
        }
    }

    pub fn featurizer(&self) -> Result<Featurizer> {
        Featurizer::new(self.feature_dim, self.ngram_max)
    }

    fn initial_ldm(&self, n_classes: usize) -> Result<LabelDistanceMatrix> {
        match self.mode {
            Mode::Ct | Mode::CtCl | Mode::CtClald => identity_ldm(n_classes),
            Mode::CtClsld => static_ldm(n_classes, &self.static_pairs, self.tau),
        }
    }
}

/// Scalar loss components of one step. The total is always exactly
/// lambda * classification + (1 - lambda) * contrastive when a contrastive
/// term exists, and equals the classification loss in ct mode.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub total: f64,
    pub classification: f64,
    pub contrastive: Option<f64>,
}

/// First/second moment buffers, one per tensor in canonical order.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: usize,
}

impl OptimState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Matrix> = params
            .tensors()
            .iter()
            .map(|(_, t)| Matrix::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One decoupled-weight-decay adaptive-moment update. Decay multiplies the
/// weight matrices (not biases) by (1 - lr * wd) before the moment-based
/// step.
pub fn adamw_update(
    params: &mut ModelParams,
    grads: &[Matrix],
    optim: &mut OptimState,
    config: &TrainConfig,
) {
    optim.step += 1;
    let t = optim.step as i32;
    let bias_c1 = 1.0 - config.beta1.powi(t);
    let bias_c2 = 1.0 - config.beta2.powi(t);
    let lr = config.learning_rate;

    for (i, (_, tensor)) in params.tensors_mut().into_iter().enumerate() {
        if PARAM_DECAY[i] && config.weight_decay > 0.0 {
            for w in tensor.data_mut() {
                *w *= 1.0 - lr * config.weight_decay;
            }
        }
        let m = &mut optim.m[i];
        let v = &mut optim.v[i];
        for ((w, &g), (m_e, v_e)) in tensor
            .data_mut()
            .iter_mut()
            .zip(grads[i].data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *m_e = config.beta1 * *m_e + (1.0 - config.beta1) * g;
            *v_e = config.beta2 * *v_e + (1.0 - config.beta2) * g * g;
            let m_hat = *m_e / bias_c1;
            let v_hat = *v_e / bias_c2;
            *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
        }
    }
}

/// Mutable training-loop state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: usize,
    pub epoch: usize,
    pub best_val_accuracy: f64,
    pub best_epoch: usize,
    pub epochs_without_improvement: usize,
    pub optim: OptimState,
    pub ldm: LabelDistanceMatrix,
    pub rng: RngState,
}

impl TrainState {
    pub fn new(params: &ModelParams, config: &TrainConfig, n_classes: usize) -> Result<Self> {
        Ok(Self {
            step: 0,
            epoch: 0,
            best_val_accuracy: f64::NEG_INFINITY,
            best_epoch: 0,
            epochs_without_improvement: 0,
            optim: OptimState::new(params),
            ldm: config.initial_ldm(n_classes)?,
            rng: RngState::for_domain(config.seed, Domain::Dropout),
        })
    }
}

pub(crate) struct StepTape {
    pub tape: Tape,
    pub loss: NodeId,
    pub param_nodes: [NodeId; 10],
    pub classification: f64,
    pub contrastive: Option<f64>,
}

fn encode_on_tape(tape: &mut Tape, x: NodeId, nodes: &[NodeId; 10], rng: &mut RngState) -> NodeId {
    let [enc_w1, enc_b1, enc_w2, enc_b2, ..] = *nodes;
    let a1 = tape.matmul(x, enc_w1);
    let a1b = tape.add_row_broadcast(a1, enc_b1);
    let t1 = tape.tanh(a1b);
    let (rows, cols) = tape.value(t1).shape();
    let mask = dropout_mask(rows, cols, ENCODER_DROPOUT, rng)
        .expect("encoder dropout rate is a valid constant");
    let dropped = tape.mul_constant(t1, mask);
    let a2 = tape.matmul(dropped, enc_w2);
    tape.add_row_broadcast(a2, enc_b2)
}

fn project_on_tape(tape: &mut Tape, v: NodeId, nodes: &[NodeId; 10]) -> NodeId {
    let [.., proj_w1, proj_b1, proj_w2, proj_b2] = *nodes;
    let a1 = tape.matmul(v, proj_w1);
    let a1b = tape.add_row_broadcast(a1, proj_b1);
    let t1 = tape.tanh(a1b);
    let a2 = tape.matmul(t1, proj_w2);
    tape.add_row_broadcast(a2, proj_b2)
}

/// Record the full training loss for one batch. `ldm = None` is the
/// classification-only path (ct mode); otherwise the duplicated contrastive
/// branch is included and combined with weight lambda.
///
/// Mask draw order is fixed: encoder, classifier, then the two duplicated
/// encoder passes.
pub(crate) fn build_step_tape(
    params: &ModelParams,
    batch: &Batch,
    ldm: Option<&LabelDistanceMatrix>,
    lambda: f64,
    xi: f64,
    rng: &mut RngState,
) -> Result<StepTape> {
    let mut tape = Tape::new();
    let x = tape.leaf(batch.features.clone());
    let param_nodes: [NodeId; 10] = {
        let tensors = params.tensors();
        std::array::from_fn(|i| tape.leaf(tensors[i].1.clone()))
    };

    // Classification branch.
    let v = encode_on_tape(&mut tape, x, &param_nodes, rng);
    let (rows, cols) = tape.value(v).shape();
    let cls_mask = dropout_mask(rows, cols, CLASSIFIER_DROPOUT, rng)
        .expect("classifier dropout rate is a valid constant");
    let v_dropped = tape.mul_constant(v, cls_mask);
    let logits_raw = tape.matmul(v_dropped, param_nodes[4]);
    let logits = tape.add_row_broadcast(logits_raw, param_nodes[5]);
    let log_p = tape.row_log_softmax(logits);
    let l_c = tape.neg_mean_log_pick(log_p, batch.labels.clone());
    let classification = tape.scalar(l_c);

    let Some(ldm) = ldm else {
        return Ok(StepTape {
            tape,
            loss: l_c,
            param_nodes,
            classification,
            contrastive: None,
        });
    };

    // Contrastive branch: two independently-dropped encoder passes.
    if batch.size() < 2 {
        return Err(Error::Contract(format!(
            "contrastive step needs a batch of >= 2, got {}",
            batch.size()
        )));
    }
    let v_a = encode_on_tape(&mut tape, x, &param_nodes, rng);
    let v_b = encode_on_tape(&mut tape, x, &param_nodes, rng);
    let h_a = project_on_tape(&mut tape, v_a, &param_nodes);
    let h_b = project_on_tape(&mut tape, v_b, &param_nodes);
    let h = tape.vstack(h_a, h_b);

    let mut labels_dup = batch.labels.clone();
    labels_dup.extend_from_slice(&batch.labels);
    let two_m = labels_dup.len();

    let simm = tape.pairwise_cosine01(h, xi);
    let ldmm = contrastive::build_ldmm(&labels_dup, ldm)?;
    let simldm = tape.mul_constant(simm, ldmm);
    let log_q = tape.row_log_softmax(simldm);

    // z = row-normalized label matrix; the z*log(z) entropy part of the KL
    // does not depend on the parameters and enters as a constant offset.
    let t = contrastive::build_label_matrix(&labels_dup);
    let mut z = Matrix::zeros(two_m, two_m);
    let mut entropy_offset = 0.0;
    for i in 0..two_m {
        let row_sum: f64 = t.row(i).iter().sum();
        if row_sum == 0.0 {
            return Err(Error::Contract(format!(
                "label matrix row {i} has no positive pair"
            )));
        }
        for j in 0..two_m {
            let z_ij = t.at(i, j) / row_sum;
            z.set(i, j, z_ij);
            if z_ij > 0.0 {
                entropy_offset += z_ij * z_ij.ln();
            }
        }
    }
    let scale = 1.0 / two_m as f64;
    let l_s = tape.neg_weighted_sum(log_q, z, scale, entropy_offset * scale);
    let contrastive_value = tape.scalar(l_s);

    let loss = tape.add_scaled(l_c, l_s, lambda, 1.0 - lambda);
    Ok(StepTape {
        tape,
        loss,
        param_nodes,
        classification,
        contrastive: Some(contrastive_value),
    })
}

/// Loss value only, for finite-difference probes. Draws masks from `rng`
/// exactly like [`build_step_tape`], so cloning the generator reproduces the
/// same forward.
pub(crate) fn step_loss_value(
    params: &ModelParams,
    batch: &Batch,
    ldm: Option<&LabelDistanceMatrix>,
    lambda: f64,
    xi: f64,
    rng: &mut RngState,
) -> Result<f64> {
    let st = build_step_tape(params, batch, ldm, lambda, xi, rng)?;
    Ok(st.tape.scalar(st.loss))
}

/// One optimization step: forward, backward, AdamW update.
pub fn train_step(
    batch: &Batch,
    params: &mut ModelParams,
    state: &mut TrainState,
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    let ldm = match config.mode {
        Mode::Ct => None,
        _ => Some(&state.ldm),
    };
    let st = build_step_tape(params, batch, ldm, config.lambda, config.xi, &mut state.rng)?;
    let breakdown = LossBreakdown {
        total: st.tape.scalar(st.loss),
        classification: st.classification,
        contrastive: st.contrastive,
    };
    if !breakdown.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            classification: breakdown.classification,
            contrastive: breakdown.contrastive,
        });
    }
    let grads = st.tape.backward(st.loss);
    let grad_tensors: Vec<Matrix> = st
        .param_nodes
        .iter()
        .map(|&id| grads.get(id, &st.tape))
        .collect();
    adamw_update(params, &grad_tensors, &mut state.optim, config);
    state.step += 1;
    Ok(breakdown)
}

/// Per-class precision/recall with support counts.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub support: u64,
}

/// Validation/test metrics for one split.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub classification_loss: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
}

/// Dropout-free evaluation. Argmax ties break toward the lower class index.
pub fn evaluate(
    split: &[Example],
    params: &ModelParams,
    featurizer: &Featurizer,
    label_space: &LabelSpace,
) -> Result<EvalReport> {
    if split.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty split".into()));
    }
    let refs: Vec<&Example> = split.iter().collect();
    let features = featurizer.matrix(&refs);
    let v = params.encode_inference(&features);
    let p = params.classify_inference(&v);

    let labels: Vec<usize> = split.iter().map(|e| e.label_id).collect();
    let mut predictions = Vec::with_capacity(split.len());
    for i in 0..p.rows() {
        let row = p.row(i);
        let mut best = 0;
        for (j, &value) in row.iter().enumerate() {
            if value > row[best] {
                best = j;
            }
        }
        predictions.push(best);
    }

    let n = label_space.len();
    let confusion = confusion_matrix(&labels, &predictions, n)?;
    let accuracy = confusion.trace() as f64 / confusion.total() as f64;
    let classification_loss = contrastive::classification_loss(&p, &labels);

    let per_class = (0..n)
        .map(|c| {
            let predicted: u64 = (0..n).map(|t| confusion.count(t, c)).sum();
            let actual: u64 = (0..n).map(|q| confusion.count(c, q)).sum();
            let hit = confusion.count(c, c);
            ClassMetrics {
                label: label_space.name(c).to_string(),
                precision: if predicted == 0 {
                    0.0
                } else {
                    hit as f64 / predicted as f64
                },
                recall: if actual == 0 {
                    0.0
                } else {
                    hit as f64 / actual as f64
                },
                support: actual,
            }
        })
        .collect();

    Ok(EvalReport {
        accuracy,
        classification_loss,
        per_class,
        confusion,
    })
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub l_c: f64,
    pub l_s: Option<f64>,
    pub val_accuracy: f64,
    pub ldm_updated: bool,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub best_params: ModelParams,
    pub final_params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub ldm: LabelDistanceMatrix,
    /// Snapshot after every adaptive update, in firing order.
    pub ldm_history: Vec<LabelDistanceMatrix>,
    pub state: TrainState,
}

/// Steps contributed by one epoch over `n` examples: full batches plus a
/// partial batch when it keeps at least 2 examples.
fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n / batch_size + usize::from(n % batch_size >= 2)
}

pub fn fit(corpus: &Corpus, config: &TrainConfig) -> Result<FitResult> {
    fit_from(corpus, config, None)
}

/// Resumable fit: when `resume` carries a saved run, training continues from
/// its epoch counter with restored parameters, moments, distance matrix, and
/// generator position.
pub fn fit_from(
    corpus: &Corpus,
    config: &TrainConfig,
    resume: Option<ResumePoint>,
) -> Result<FitResult> {
    config.validate()?;
    let n_classes = corpus.label_space.len();
    if n_classes < 2 {
        return Err(Error::Config(format!(
            "training needs >= 2 classes, got {n_classes}"
        )));
    }
    for pair in &config.static_pairs {
        if pair.0 >= n_classes || pair.1 >= n_classes {
            return Err(Error::Config(format!(
                "static pair {pair:?} out of range for {n_classes} classes"
            )));
        }
    }
    if corpus.train.is_empty() || corpus.validation.is_empty() {
        return Err(Error::Config(
            "training requires non-empty train and validation splits".into(),
        ));
    }
    let featurizer = config.featurizer()?;

    let spe = steps_per_epoch(corpus.train.len(), config.batch_size);
    if spe == 0 {
        return Err(Error::Config(
            "train split too small for one batch of >= 2 examples".into(),
        ));
    }
    let schedule = if config.mode == Mode::CtClald {
        Some(AdaptiveSchedule::new(
            config.num_epoch,
            spe,
            config.num_epoch * spe,
        )?)
    } else {
        None
    };

    let (mut params, mut state, mut best_params, mut history, mut ldm_history) = match resume {
        Some(point) => (
            point.params,
            point.state,
            point.best_params,
            point.history,
            point.ldm_history,
        ),
        None => {
            let params = ModelParams::init(config.dims(n_classes), config.seed);
            let state = TrainState::new(&params, config, n_classes)?;
            let best = params.clone();
            (params, state, best, Vec::new(), Vec::new())
        }
    };

    for epoch in (state.epoch + 1)..=config.num_epoch {
        state.epoch = epoch;
        let batches = batch_iter(
            &corpus.train,
            &featurizer,
            config.batch_size,
            config.seed,
            epoch as u64,
        )?;
        let mut sum_total = 0.0;
        let mut sum_c = 0.0;
        let mut sum_s = 0.0;
        let mut has_s = false;
        for batch in &batches {
            let breakdown = train_step(batch, &mut params, &mut state, config)?;
            sum_total += breakdown.total;
            sum_c += breakdown.classification;
            if let Some(s) = breakdown.contrastive {
                sum_s += s;
                has_s = true;
            }
        }
        let n_batches = batches.len() as f64;

        let val_report = evaluate(
            &corpus.validation,
            &params,
            &featurizer,
            &corpus.label_space,
        )?;

        let mut ldm_updated = false;
        if let Some(schedule) = &schedule {
            if should_update(schedule, epoch, state.step) {
                let candidate = ldm_from_confusion(&val_report.confusion, config.tau)?;
                state.ldm = update_ldm(
                    &state.ldm,
                    &candidate,
                    state.step,
                    schedule.total_steps,
                    config.tau,
                )?;
                ldm_updated = true;
                ldm_history.push(state.ldm.clone());
            }
        }

        history.push(EpochRecord {
            epoch,
            train_loss: sum_total / n_batches,
            l_c: sum_c / n_batches,
            l_s: has_s.then_some(sum_s / n_batches),
            val_accuracy: val_report.accuracy,
            ldm_updated,
        });

        if val_report.accuracy > state.best_val_accuracy {
            state.best_val_accuracy = val_report.accuracy;
            state.best_epoch = epoch;
            state.epochs_without_improvement = 0;
            best_params = params.clone();
        } else {
            state.epochs_without_improvement += 1;
        }
        if state.epochs_without_improvement >= config.patience {
            break;
        }
    }

    Ok(FitResult {
        best_params,
        final_params: params,
        history,
        ldm: state.ldm.clone(),
        ldm_history,
        state,
    })
}

/// Restored mid-run training state.
pub struct ResumePoint {
    pub params: ModelParams,
    pub best_params: ModelParams,
    pub state: TrainState,
    pub history: Vec<EpochRecord>,
    pub ldm_history: Vec<LabelDistanceMatrix>,
}

// ---------------------------------------------------------------------------
// Checkpoint format (versioned JSON).

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TensorData {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl TensorData {
    fn from_matrix(m: &Matrix) -> Self {
        Self {
            rows: m.rows(),
            cols: m.cols(),
            data: m.data().to_vec(),
        }
    }

    fn to_matrix(&self) -> Result<Matrix> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::Checkpoint(format!(
                "tensor data length {} does not match {}x{}",
                self.data.len(),
                self.rows,
                self.cols
            )));
        }
        Ok(Matrix::from_vec(self.rows, self.cols, self.data.clone()))
    }
}

fn tensor_map(params: &ModelParams) -> BTreeMap<String, TensorData> {
    params
        .tensors()
        .iter()
        .map(|(name, m)| (name.to_string(), TensorData::from_matrix(m)))
        .collect()
}

fn params_from_map(map: &BTreeMap<String, TensorData>, dims: ModelDims) -> Result<ModelParams> {
    let mut params = ModelParams::init(dims, 0);
    for (name, tensor) in params.tensors_mut() {
        let data = map
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        let loaded = data.to_matrix()?;
        if loaded.shape() != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                loaded.shape(),
                tensor.shape()
            )));
        }
        *tensor = loaded;
    }
    Ok(params)
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LdmData {
    pub mode: LdmMode,
    pub rows: Vec<Vec<f64>>,
}

impl LdmData {
    pub fn from_ldm(ldm: &LabelDistanceMatrix) -> Self {
        let n = ldm.n_classes();
        Self {
            mode: ldm.mode(),
            rows: (0..n)
                .map(|i| (0..n).map(|j| ldm.distance(i, j)).collect())
                .collect(),
        }
    }

    pub fn to_ldm(&self) -> Result<LabelDistanceMatrix> {
        let n = self.rows.len();
        let mut m = Matrix::zeros(n, n);
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Checkpoint("distance matrix is not square".into()));
            }
            for (j, &v) in row.iter().enumerate() {
                m.set(i, j, v);
            }
        }
        LabelDistanceMatrix::from_matrix(m, self.mode)
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ResumeData {
    pub final_tensors: BTreeMap<String, TensorData>,
    pub optim_m: BTreeMap<String, TensorData>,
    pub optim_v: BTreeMap<String, TensorData>,
    pub optim_step: usize,
    pub rng: RngSnapshot,
    pub epoch: usize,
    pub step: usize,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub epochs_without_improvement: usize,
    pub history: Vec<EpochRecord>,
    pub ldm_history: Vec<LdmData>,
}

/// Everything a finished (or interrupted) run needs to be evaluated or
/// resumed: the best parameters as the primary payload, plus optimizer
/// moments, distance matrix, and generator state.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainCheckpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub label_space: LabelSpace,
    pub dims: ModelDims,
    /// Best-validation parameters; what `eval` consumes.
    pub tensors: BTreeMap<String, TensorData>,
    pub ldm: LdmData,
    pub resume: ResumeData,
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

impl TrainCheckpoint {
    pub fn from_fit(result: &FitResult, config: &TrainConfig, label_space: &LabelSpace) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: config.clone(),
            label_space: label_space.clone(),
            dims: result.best_params.dims,
            tensors: tensor_map(&result.best_params),
            ldm: LdmData::from_ldm(&result.ldm),
            resume: ResumeData {
                final_tensors: tensor_map(&result.final_params),
                optim_m: PARAM_NAMES
                    .iter()
                    .zip(&result.state.optim.m)
                    .map(|(name, m)| (name.to_string(), TensorData::from_matrix(m)))
                    .collect(),
                optim_v: PARAM_NAMES
                    .iter()
                    .zip(&result.state.optim.v)
                    .map(|(name, m)| (name.to_string(), TensorData::from_matrix(m)))
                    .collect(),
                optim_step: result.state.optim.step,
                rng: result.state.rng.save(),
                epoch: result.state.epoch,
                step: result.state.step,
                best_epoch: result.state.best_epoch,
                best_val_accuracy: result.state.best_val_accuracy,
                epochs_without_improvement: result.state.epochs_without_improvement,
                history: result.history.clone(),
                ldm_history: result.ldm_history.iter().map(LdmData::from_ldm).collect(),
            },
        }
    }

    fn check_version(&self) -> Result<()> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format version {}",
                self.format_version
            )));
        }
        Ok(())
    }

    pub fn best_params(&self) -> Result<ModelParams> {
        self.check_version()?;
        params_from_map(&self.tensors, self.dims)
    }

    pub fn to_resume_point(&self) -> Result<ResumePoint> {
        self.check_version()?;
        let params = params_from_map(&self.resume.final_tensors, self.dims)?;
        let best_params = self.best_params()?;
        let collect = |map: &BTreeMap<String, TensorData>| -> Result<Vec<Matrix>> {
            PARAM_NAMES
                .iter()
                .map(|name| {
                    map.get(*name)
                        .ok_or_else(|| Error::Checkpoint(format!("missing moment tensor {name}")))
                        .and_then(TensorData::to_matrix)
                })
                .collect()
        };
        let state = TrainState {
            step: self.resume.step,
            epoch: self.resume.epoch,
            best_val_accuracy: self.resume.best_val_accuracy,
            best_epoch: self.resume.best_epoch,
            epochs_without_improvement: self.resume.epochs_without_improvement,
            optim: OptimState {
                m: collect(&self.resume.optim_m)?,
                v: collect(&self.resume.optim_v)?,
                step: self.resume.optim_step,
            },
            ldm: self.ldm.to_ldm()?,
            rng: RngState::restore(&self.resume.rng),
        };
        Ok(ResumePoint {
            params,
            best_params,
            state,
            history: self.resume.history.clone(),
            ldm_history: self
                .resume
                .ldm_history
                .iter()
                .map(LdmData::to_ldm)
                .collect::<Result<Vec<_>>>()?,
        })
    }
}
