//! Structure-preserving training at desk scale.
//!
//! Networks start from a decomposed form. The zero pattern of each
//! coefficient matrix is frozen at initialization; non-zero entries move
//! between adjacent power-of-2 buckets driven by accumulated gradient
//! signs (an integer counter per entry, threshold `theta_c`, gradients
//! below `theta_g` ignored), so no high-precision latent copy of the
//! coefficients ever exists. The basis, biases and the dense head train by
//! plain SGD, with optional stochastic weight averaging on the basis.
//!
//! Everything is deterministic given the seed: data generation, batch
//! order, and every update.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::decompose::{sd_decompose, DecomposeError, SdConfig, SdLayerGroup};
use crate::mat::Mat;
use crate::quant::{ExponentSet, Pow2Matrix, Pow2Value};
use crate::rebuild::{
    forward_trace, softmax, softmax_metrics, Batch, DenseLayer, RebuildError, SdDenseLayer,
    ToyLayer, ToyNet,
};
use crate::reshape::{reshape_dense, Provenance, ReshapeError};
use crate::tensor_io::{TensorKind, WeightTensor};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Direction a positive gradient pushes an exponent.
///
/// `Paper` switches the bucket up on a positive gradient; `Descent` flips
/// the signal to follow standard gradient descent. The default stays
/// `Paper` so the discrepancy is visible rather than silently corrected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SignConvention {
    Paper,
    Descent,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// Gradient magnitudes below this contribute no switch signal.
    pub theta_g: f64,
    /// Consistent signals required before a bucket switch fires.
    pub theta_c: i32,
    pub lr_b: f64,
    /// Learning rate for biases and dense (head) layers.
    pub lr_dense: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// First epoch (0-based) contributing basis snapshots to SWA.
    pub swa_start_epoch: Option<usize>,
    pub sign_convention: SignConvention,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            theta_g: 5e-3,
            theta_c: 7,
            lr_b: 0.02,
            lr_dense: 0.05,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            swa_start_epoch: None,
            sign_convention: SignConvention::Paper,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.theta_c < 1 {
            return Err(TrainError::Parameter("theta_c must be >= 1".into()));
        }
        if self.theta_g < 0.0 || self.theta_g.is_nan() {
            return Err(TrainError::Parameter("theta_g must be >= 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Parameter("epochs and batch_size must be positive".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Per-class Gaussian blob spec; regeneration from the seed is exact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataSpec {
    pub seed: u64,
    pub feature_dim: usize,
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Distance scale of class means from the origin.
    pub separation: f64,
    /// Isotropic noise standard deviation.
    pub noise: f64,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            seed: 0,
            feature_dim: 16,
            classes: 4,
            train_per_class: 150,
            test_per_class: 75,
            separation: 3.0,
            noise: 1.0,
        }
    }
}

/// Generated samples grouped by class.
#[derive(Debug, Clone)]
pub struct RawData {
    pub spec: DataSpec,
    pub train: Vec<Vec<Vec<f64>>>,
    pub test: Vec<Vec<Vec<f64>>>,
}

/// A labeled design matrix.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub x: Mat,
    pub y: Vec<usize>,
    pub classes: usize,
}

/// Train/test pair for one task.
#[derive(Debug, Clone)]
pub struct TaskSplit {
    pub train: LabeledSet,
    pub test: LabeledSet,
}

/// Deterministically generate per-class Gaussian data from the seed.
pub fn gen_data(spec: &DataSpec) -> Result<RawData, TrainError> {
    if spec.classes < 2 {
        return Err(TrainError::Parameter("need at least 2 classes".into()));
    }
    if spec.feature_dim == 0 || spec.train_per_class == 0 || spec.test_per_class == 0 {
        return Err(TrainError::Parameter("dims and sample counts must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut means = Vec::with_capacity(spec.classes);
    for _ in 0..spec.classes {
        let v: Vec<f64> = (0..spec.feature_dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        means.push(v.into_iter().map(|a| a / norm * spec.separation).collect::<Vec<f64>>());
    }
    let sample = |mean: &[f64], rng: &mut ChaCha8Rng| -> Vec<f64> {
        mean.iter().map(|&m| m + spec.noise * rng.sample::<f64, _>(StandardNormal)).collect()
    };
    let mut train = Vec::with_capacity(spec.classes);
    let mut test = Vec::with_capacity(spec.classes);
    for mean in &means {
        train.push((0..spec.train_per_class).map(|_| sample(mean, &mut rng)).collect());
        test.push((0..spec.test_per_class).map(|_| sample(mean, &mut rng)).collect());
    }
    Ok(RawData { spec: *spec, train, test })
}

fn assemble(samples: &[(&[f64], usize)], dim: usize, classes: usize) -> LabeledSet {
    let mut data = Vec::with_capacity(samples.len() * dim);
    let mut y = Vec::with_capacity(samples.len());
    for (row, label) in samples {
        data.extend_from_slice(row);
        y.push(*label);
    }
    LabeledSet { x: Mat::from_vec(samples.len(), dim, data), y, classes }
}

/// Fine-tuning split: within every class the training samples partition
/// into two halves (alpha gets even indices, beta odd); both tasks share
/// the full test set, so every class is present everywhere.
pub fn split_finetune(raw: &RawData) -> (TaskSplit, TaskSplit) {
    let dim = raw.spec.feature_dim;
    let classes = raw.spec.classes;
    let mut alpha = Vec::new();
    let mut beta = Vec::new();
    let mut test = Vec::new();
    for (class, samples) in raw.train.iter().enumerate() {
        for (i, s) in samples.iter().enumerate() {
            if i % 2 == 0 {
                alpha.push((s.as_slice(), class));
            } else {
                beta.push((s.as_slice(), class));
            }
        }
    }
    for (class, samples) in raw.test.iter().enumerate() {
        for s in samples {
            test.push((s.as_slice(), class));
        }
    }
    let test_set = assemble(&test, dim, classes);
    (
        TaskSplit { train: assemble(&alpha, dim, classes), test: test_set.clone() },
        TaskSplit { train: assemble(&beta, dim, classes), test: test_set },
    )
}

/// Adaptation split: classes partition into two disjoint tasks. The first
/// `a_classes` become task A, the rest task B; labels are re-indexed from
/// zero within each task.
pub fn split_adaptation(
    raw: &RawData,
    a_classes: usize,
) -> Result<(TaskSplit, TaskSplit), TrainError> {
    let classes = raw.spec.classes;
    if a_classes == 0 || a_classes >= classes {
        return Err(TrainError::Parameter(format!(
            "adaptation split needs 0 < a_classes < {classes}"
        )));
    }
    let dim = raw.spec.feature_dim;
    let build = |range: std::ops::Range<usize>| -> TaskSplit {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (label, class) in range.clone().enumerate() {
            for s in &raw.train[class] {
                train.push((s.as_slice(), label));
            }
            for s in &raw.test[class] {
                test.push((s.as_slice(), label));
            }
        }
        let k = range.len();
        TaskSplit { train: assemble(&train, dim, k), test: assemble(&test, dim, k) }
    };
    Ok((build(0..a_classes), build(a_classes..classes)))
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

/// Per-layer gradients of the mean softmax cross-entropy.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<Mat>,
    pub biases: Vec<Vec<f64>>,
    pub loss: f64,
    pub accuracy: f64,
}

/// Analytic backprop through the ReLU dense stack.
pub fn backprop(net: &ToyNet, batch: &Batch) -> Result<Gradients, TrainError> {
    let trace = forward_trace(net, &batch.x)?;
    let (loss, accuracy) = softmax_metrics(&trace.logits, &batch.y)?;
    let n = batch.x.rows();
    let classes = trace.logits.cols();
    let scale = 1.0 / n as f64;
    let probs = softmax(&trace.logits);
    let mut dz = Mat::zeros(n, classes);
    for i in 0..n {
        for j in 0..classes {
            let onehot = if batch.y[i] == j { 1.0 } else { 0.0 };
            dz.set(i, j, (probs.get(i, j) - onehot) * scale);
        }
    }

    let layers = net.layers.len();
    let mut weights = vec![Mat::zeros(0, 0); layers];
    let mut biases = vec![Vec::new(); layers];
    for li in (0..layers).rev() {
        weights[li] = dz.transpose().matmul(&trace.acts[li]);
        let mut db = vec![0.0; dz.cols()];
        for i in 0..dz.rows() {
            for j in 0..dz.cols() {
                db[j] += dz.get(i, j);
            }
        }
        biases[li] = db;
        if li > 0 {
            let w = net.layers[li].weight()?;
            let dh = dz.matmul(&w);
            let mut next = Mat::zeros(n, dh.cols());
            for i in 0..n {
                for j in 0..dh.cols() {
                    if trace.preacts[li - 1].get(i, j) > 0.0 {
                        next.set(i, j, dh.get(i, j));
                    }
                }
            }
            dz = next;
        }
    }
    Ok(Gradients { weights, biases, loss, accuracy })
}

/// Chain rule through `W = C_e * B`: `dB = C_e^T dW`, `dC_e = dW B^T`.
/// The coefficients enter as their numeric values.
pub fn grads_factored(d_w: &Mat, c_e_numeric: &Mat, basis: &Mat) -> (Mat, Mat) {
    (c_e_numeric.transpose().matmul(d_w), d_w.matmul(&basis.transpose()))
}

// ---------------------------------------------------------------------------
// Bucket switch updates
// ---------------------------------------------------------------------------

/// Per-entry integer counters and parked signs for one coefficient matrix.
/// Together with the (sign, exponent) pairs in `C_e` itself this is the
/// complete training state for the coefficients; there is no real-valued
/// shadow.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SwitchState {
    rows: usize,
    cols: usize,
    counters: Vec<i32>,
    /// Retained sign for entries currently parked at zero (0 elsewhere).
    parked_signs: Vec<i8>,
    /// True where the initial coefficient was zero; those stay zero.
    frozen: Vec<bool>,
}

impl SwitchState {
    /// Freeze the current zero pattern of `c_e`.
    pub fn new(c_e: &Pow2Matrix) -> Self {
        let (rows, cols) = (c_e.rows(), c_e.cols());
        let frozen = c_e.data().iter().map(|v| v.is_zero()).collect();
        SwitchState {
            rows,
            cols,
            counters: vec![0; rows * cols],
            parked_signs: vec![0; rows * cols],
            frozen,
        }
    }

    pub fn counters(&self) -> &[i32] {
        &self.counters
    }

    pub fn frozen(&self) -> &[bool] {
        &self.frozen
    }

    pub fn parked_signs(&self) -> &[i8] {
        &self.parked_signs
    }

    pub fn max_abs_counter(&self) -> i32 {
        self.counters.iter().map(|c| c.abs()).max().unwrap_or(0)
    }

    /// Entries that are non-zero despite a frozen mask position.
    pub fn mask_violations(&self, c_e: &Pow2Matrix) -> u64 {
        c_e.data()
            .iter()
            .zip(&self.frozen)
            .filter(|(v, &frozen)| frozen && !v.is_zero())
            .count() as u64
    }
}

/// One bucket-switch update over a coefficient matrix.
///
/// Frozen positions never move. Gradients below `theta_g` carry no signal;
/// otherwise the gradient sign (flipped under the descent convention)
/// accumulates into the entry's counter, and when the counter reaches
/// `±theta_c` the exponent steps one bucket: up saturates at `p_max`, down
/// past `p_min` parks the entry at zero with its sign retained, and an
/// up-trigger on a parked entry revives it at `2^p_min`. Counters reset to
/// zero after every trigger.
pub fn bucket_step(
    c_e: &mut Pow2Matrix,
    grad: &Mat,
    state: &mut SwitchState,
    cfg: &TrainConfig,
    p: ExponentSet,
) -> Result<(), TrainError> {
    if grad.rows() != c_e.rows() || grad.cols() != c_e.cols() {
        return Err(TrainError::Parameter("gradient dims do not match coefficients".into()));
    }
    if state.rows != c_e.rows() || state.cols != c_e.cols() {
        return Err(TrainError::Parameter("switch state dims do not match coefficients".into()));
    }
    let cols = c_e.cols();
    for i in 0..c_e.rows() {
        for j in 0..cols {
            let idx = i * cols + j;
            if state.frozen[idx] {
                continue;
            }
            let g = grad.get(i, j);
            if g.abs() < cfg.theta_g || g == 0.0 {
                continue;
            }
            let mut signal: i32 = if g > 0.0 { 1 } else { -1 };
            if cfg.sign_convention == SignConvention::Descent {
                signal = -signal;
            }
            let counter = &mut state.counters[idx];
            *counter = (*counter + signal).clamp(-cfg.theta_c, cfg.theta_c);
            if *counter == cfg.theta_c {
                match c_e.get(i, j) {
                    Pow2Value::NonZero { sign, exp } => {
                        if exp < p.p_max {
                            c_e.set(i, j, Pow2Value::non_zero(sign, exp + 1));
                        }
                        // At p_max the value stays put.
                    }
                    Pow2Value::Zero => {
                        let sign = state.parked_signs[idx];
                        if sign != 0 {
                            c_e.set(i, j, Pow2Value::non_zero(sign, p.p_min));
                            state.parked_signs[idx] = 0;
                        }
                    }
                }
                *counter = 0;
            } else if *counter == -cfg.theta_c {
                if let Pow2Value::NonZero { sign, exp } = c_e.get(i, j) {
                    if exp > p.p_min {
                        c_e.set(i, j, Pow2Value::non_zero(sign, exp - 1));
                    } else {
                        c_e.set(i, j, Pow2Value::Zero);
                        state.parked_signs[idx] = sign;
                    }
                }
                // Parked entries stay parked on a down trigger.
                *counter = 0;
            }
        }
    }
    Ok(())
}

/// Plain SGD step: `B -= lr * dB`.
pub fn sgd_step(b: &mut Mat, grad: &Mat, lr: f64) {
    for (v, g) in b.data_mut().iter_mut().zip(grad.data()) {
        *v -= lr * g;
    }
}

/// Running mean of snapshots: `avg_(k+1) = (avg_k * k + b) / (k + 1)`.
pub fn swa_update(avg: &Mat, b: &Mat, count: usize) -> Mat {
    let k = count as f64;
    avg.scale(k / (k + 1.0)).add(&b.scale(1.0 / (k + 1.0)))
}

/// Snapshot accumulator for one basis matrix.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SwaAverager {
    avg: Option<Mat>,
    count: usize,
}

impl SwaAverager {
    pub fn new() -> Self {
        SwaAverager { avg: None, count: 0 }
    }

    pub fn update(&mut self, b: &Mat) {
        self.avg = Some(match &self.avg {
            None => b.clone(),
            Some(avg) => swa_update(avg, b, self.count),
        });
        self.count += 1;
    }

    pub fn mean(&self) -> Option<&Mat> {
        self.avg.as_ref()
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// One metrics record, emitted per epoch and split as a JSON line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub ce_sparsity: f64,
    pub mask_violations: u64,
}

/// Metrics trace as JSON lines.
pub fn metrics_to_jsonl(metrics: &[EpochMetrics]) -> String {
    let mut out = String::new();
    for m in metrics {
        out.push_str(&serde_json::to_string(m).expect("metrics serialize"));
        out.push('\n');
    }
    out
}

/// Aggregate step-level invariant checks from a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepStats {
    pub steps: u64,
    pub max_abs_counter: i32,
    pub mask_violations_total: u64,
    pub feasible_after_every_step: bool,
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub stats: StepStats,
}

/// Trains a toy net whose hidden layers are in SD form: rebuild, forward,
/// backprop, bucket-switch the coefficients, SGD the basis and the dense
/// parameters.
pub struct SdTrainer {
    pub net: ToyNet,
    cfg: TrainConfig,
    /// Per layer: per-form switch states (None for dense layers).
    states: Vec<Option<Vec<SwitchState>>>,
    /// Per layer: per-form basis averagers (mirrors `states`).
    swa: Vec<Option<Vec<SwaAverager>>>,
}

impl SdTrainer {
    pub fn new(net: ToyNet, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let mut states = Vec::with_capacity(net.layers.len());
        let mut swa = Vec::with_capacity(net.layers.len());
        for layer in &net.layers {
            match layer {
                ToyLayer::Dense(_) => {
                    states.push(None);
                    swa.push(None);
                }
                ToyLayer::Sd(l) => {
                    states.push(Some(
                        l.group.forms.iter().map(|f| SwitchState::new(&f.c_e)).collect(),
                    ));
                    swa.push(Some(vec![SwaAverager::new(); l.group.forms.len()]));
                }
            }
        }
        Ok(SdTrainer { net, cfg, states, swa })
    }

    /// Overall zero fraction across all coefficient matrices.
    pub fn ce_sparsity(&self) -> f64 {
        let mut zeros = 0usize;
        let mut total = 0usize;
        for layer in &self.net.layers {
            if let ToyLayer::Sd(l) = layer {
                for f in &l.group.forms {
                    total += f.c_e.data().len();
                    zeros += f.c_e.data().len() - f.c_e.count_nonzero();
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            zeros as f64 / total as f64
        }
    }

    pub fn mask_violations(&self) -> u64 {
        let mut count = 0;
        for (layer, states) in self.net.layers.iter().zip(&self.states) {
            if let (ToyLayer::Sd(l), Some(states)) = (layer, states) {
                for (f, s) in l.group.forms.iter().zip(states) {
                    count += s.mask_violations(&f.c_e);
                }
            }
        }
        count
    }

    fn check_step_invariants(&self) -> Result<(bool, i32), TrainError> {
        let mut feasible = true;
        let mut max_counter = 0;
        for (layer, states) in self.net.layers.iter().zip(&self.states) {
            if let (ToyLayer::Sd(l), Some(states)) = (layer, states) {
                for (f, s) in l.group.forms.iter().zip(states) {
                    feasible &= f.c_e.is_feasible(f.pset);
                    max_counter = max_counter.max(s.max_abs_counter());
                }
            }
        }
        if self.mask_violations() > 0 {
            return Err(TrainError::Internal("frozen-mask violation".into()));
        }
        Ok((feasible, max_counter))
    }

    /// Evaluation view of the net: once SWA is active the averaged basis
    /// substitutes the live one.
    fn eval_net(&self, swa_active: bool) -> ToyNet {
        if !swa_active {
            return self.net.clone();
        }
        let mut net = self.net.clone();
        for (layer, avgs) in net.layers.iter_mut().zip(&self.swa) {
            if let (ToyLayer::Sd(l), Some(avgs)) = (layer, avgs) {
                for (f, a) in l.group.forms.iter_mut().zip(avgs) {
                    if let Some(mean) = a.mean() {
                        f.basis = mean.clone();
                        f.basis_fixed = None;
                    }
                }
                l.clear_cache();
            }
        }
        net
    }

    fn evaluate(&self, set: &LabeledSet, swa_active: bool) -> Result<(f64, f64), TrainError> {
        let net = self.eval_net(swa_active);
        let trace = forward_trace(&net, &set.x)?;
        Ok(softmax_metrics(&trace.logits, &set.y)?)
    }

    /// Run the configured number of epochs over the task. With
    /// `validate_every_step` the feasibility, counter-bound and frozen-mask
    /// invariants are checked after every batch.
    pub fn run(
        &mut self,
        task: &TaskSplit,
        validate_every_step: bool,
    ) -> Result<TrainOutcome, TrainError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let n = task.train.x.rows();
        let dim = task.train.x.cols();
        let mut metrics = Vec::new();
        let mut stats = StepStats {
            steps: 0,
            max_abs_counter: 0,
            mask_violations_total: 0,
            feasible_after_every_step: true,
        };

        // Epoch 0: the state before any training (a reset head sits at
        // chance level).
        let mut swa_active = false;
        let (loss, acc) = self.evaluate(&task.train, swa_active)?;
        metrics.push(self.record(0, "train", loss, acc));
        let (loss, acc) = self.evaluate(&task.test, swa_active)?;
        metrics.push(self.record(0, "test", loss, acc));

        for epoch in 0..self.cfg.epochs {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            for chunk in order.chunks(self.cfg.batch_size) {
                let batch = gather(&task.train, chunk, dim);
                self.step(&batch)?;
                stats.steps += 1;
                if validate_every_step {
                    let (feasible, max_counter) = self.check_step_invariants()?;
                    stats.feasible_after_every_step &= feasible;
                    stats.max_abs_counter = stats.max_abs_counter.max(max_counter);
                }
            }
            if let Some(start) = self.cfg.swa_start_epoch {
                if epoch >= start {
                    self.snapshot_swa();
                    swa_active = true;
                }
            }
            let violations = self.mask_violations();
            stats.mask_violations_total += violations;
            if violations > 0 {
                return Err(TrainError::Internal(format!(
                    "frozen-mask violation at epoch {epoch}"
                )));
            }
            let (loss, acc) = self.evaluate(&task.train, swa_active)?;
            metrics.push(self.record(epoch + 1, "train", loss, acc));
            let (loss, acc) = self.evaluate(&task.test, swa_active)?;
            metrics.push(self.record(epoch + 1, "test", loss, acc));
        }
        Ok(TrainOutcome { metrics, stats })
    }

    fn record(&self, epoch: usize, split: &str, loss: f64, accuracy: f64) -> EpochMetrics {
        EpochMetrics {
            epoch,
            split: split.to_string(),
            loss,
            accuracy,
            ce_sparsity: self.ce_sparsity(),
            mask_violations: self.mask_violations(),
        }
    }

    /// One batch: backprop, factored gradients, bucket switches and SGD.
    fn step(&mut self, batch: &Batch) -> Result<(), TrainError> {
        let grads = backprop(&self.net, batch)?;
        for (li, layer) in self.net.layers.iter_mut().enumerate() {
            match layer {
                ToyLayer::Dense(l) => {
                    sgd_step(&mut l.w, &grads.weights[li], self.cfg.lr_dense);
                    for (b, g) in l.bias.iter_mut().zip(&grads.biases[li]) {
                        *b -= self.cfg.lr_dense * g;
                    }
                }
                ToyLayer::Sd(l) => {
                    for (b, g) in l.bias.iter_mut().zip(&grads.biases[li]) {
                        *b -= self.cfg.lr_dense * g;
                    }
                    let states = self.states[li].as_mut().expect("sd layer has switch states");
                    for (f, state) in l.group.forms.iter_mut().zip(states) {
                        let d_w = slice_grad_block(
                            &grads.weights[li],
                            &f.provenance,
                            f.c_e.rows(),
                            f.basis.cols(),
                        );
                        let (d_b, d_c) = grads_factored(&d_w, &f.c_e.to_mat(), &f.basis);
                        bucket_step(&mut f.c_e, &d_c, state, &self.cfg, f.pset)?;
                        sgd_step(&mut f.basis, &d_b, self.cfg.lr_b);
                        f.basis_fixed = None;
                        f.recon_error = None;
                    }
                    l.clear_cache();
                }
            }
        }
        Ok(())
    }

    fn snapshot_swa(&mut self) {
        for (layer, avgs) in self.net.layers.iter().zip(self.swa.iter_mut()) {
            if let (ToyLayer::Sd(l), Some(avgs)) = (layer, avgs) {
                for (f, a) in l.group.forms.iter().zip(avgs.iter_mut()) {
                    a.update(&f.basis);
                }
            }
        }
    }

    /// Serialize the coefficient training state: signs, exponents,
    /// counters, parked signs and the frozen mask. Integers and booleans
    /// only; a test walks the tree asserting no real-valued number exists.
    pub fn coeff_state_json(&self) -> serde_json::Value {
        let mut layers = Vec::new();
        for (layer, states) in self.net.layers.iter().zip(&self.states) {
            if let (ToyLayer::Sd(l), Some(states)) = (layer, states) {
                let mut forms = Vec::new();
                for (f, s) in l.group.forms.iter().zip(states) {
                    let signs: Vec<i8> = f
                        .c_e
                        .data()
                        .iter()
                        .map(|v| match v {
                            Pow2Value::Zero => 0,
                            Pow2Value::NonZero { sign, .. } => *sign,
                        })
                        .collect();
                    let exps: Vec<i32> = f
                        .c_e
                        .data()
                        .iter()
                        .map(|v| match v {
                            Pow2Value::Zero => 0,
                            Pow2Value::NonZero { exp, .. } => *exp,
                        })
                        .collect();
                    forms.push(serde_json::json!({
                        "rows": f.c_e.rows(),
                        "cols": f.c_e.cols(),
                        "signs": signs,
                        "exponents": exps,
                        "counters": s.counters(),
                        "parked_signs": s.parked_signs(),
                        "frozen": s.frozen(),
                    }));
                }
                layers.push(serde_json::json!({ "layer": l.group.name, "forms": forms }));
            }
        }
        serde_json::json!({ "layers": layers })
    }
}

/// Slice the dense-weight gradient exactly the way the weight itself was
/// reshaped (pad cells read as zero).
fn slice_grad_block(d_w: &Mat, prov: &Provenance, rows: usize, n: usize) -> Mat {
    debug_assert_eq!(prov.kind, TensorKind::Dense2d);
    let c = prov.shape[1];
    let mut out = Mat::zeros(rows, n);
    for local in 0..rows {
        for sj in 0..n {
            let col = (prov.row_offset + local) * n + sj;
            if col < c {
                out.set(local, sj, d_w.get(prov.filter, col));
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Net construction and experiments
// ---------------------------------------------------------------------------

/// Random dense net with the given layer widths.
pub fn random_dense_net(dims: &[usize], seed: u64) -> Result<ToyNet, TrainError> {
    if dims.len() < 2 {
        return Err(TrainError::Parameter("need at least input and output widths".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    for pair in dims.windows(2) {
        let (input, output) = (pair[0], pair[1]);
        let scale = (2.0 / input as f64).sqrt();
        let w = Mat::from_vec(
            output,
            input,
            (0..output * input).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect(),
        );
        layers.push(ToyLayer::Dense(DenseLayer { w, bias: vec![0.0; output] }));
    }
    Ok(ToyNet::new(layers)?)
}

/// Decompose every hidden layer of a dense net into SD form; the head
/// (last layer) stays dense.
pub fn sd_net_from_dense(
    net: &ToyNet,
    sd_cfg: &SdConfig,
    fc_basis_width: usize,
    block_rows: usize,
) -> Result<ToyNet, TrainError> {
    let mut layers = Vec::with_capacity(net.layers.len());
    for (li, layer) in net.layers.iter().enumerate() {
        let is_head = li + 1 == net.layers.len();
        match layer {
            ToyLayer::Dense(l) if !is_head => {
                let group = decompose_dense_weight(
                    &l.w,
                    &format!("layer{li}"),
                    sd_cfg,
                    fc_basis_width,
                    block_rows,
                )?;
                layers.push(ToyLayer::Sd(SdDenseLayer::new(group, l.bias.clone())?));
            }
            other => layers.push(other.clone()),
        }
    }
    Ok(ToyNet::new(layers)?)
}

/// Decompose one dense weight matrix into a layer group.
pub fn decompose_dense_weight(
    w: &Mat,
    name: &str,
    sd_cfg: &SdConfig,
    fc_basis_width: usize,
    block_rows: usize,
) -> Result<SdLayerGroup, TrainError> {
    let tensor = WeightTensor::new(
        name,
        TensorKind::Dense2d,
        vec![w.rows(), w.cols()],
        w.data().iter().map(|&v| v as f32).collect(),
    )
    .map_err(|e| TrainError::Parameter(e.to_string()))?;
    let mats = reshape_dense(&tensor, fc_basis_width, block_rows)?;
    let mut forms = Vec::with_capacity(mats.len());
    for m in &mats {
        forms.push(sd_decompose(m, sd_cfg)?.0);
    }
    Ok(SdLayerGroup {
        name: name.to_string(),
        kind: TensorKind::Dense2d,
        shape: vec![w.rows(), w.cols()],
        kept_channels: None,
        forms,
    })
}

/// Replace the head with a fresh random dense layer of `classes` outputs.
pub fn reset_head(net: &mut ToyNet, classes: usize, seed: u64) -> Result<(), TrainError> {
    let last =
        net.layers.last_mut().ok_or_else(|| TrainError::Parameter("empty net".into()))?;
    let input = last.in_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = (2.0 / input as f64).sqrt();
    let w = Mat::from_vec(
        classes,
        input,
        (0..classes * input).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect(),
    );
    *last = ToyLayer::Dense(DenseLayer { w, bias: vec![0.0; classes] });
    Ok(())
}

/// Plain dense SGD training; the unconstrained baseline.
pub fn train_dense(
    net: &mut ToyNet,
    task: &TaskSplit,
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>, TrainError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = task.train.x.rows();
    let dim = task.train.x.cols();
    let mut metrics = Vec::new();
    let eval = |net: &ToyNet, set: &LabeledSet| -> Result<(f64, f64), TrainError> {
        let trace = forward_trace(net, &set.x)?;
        Ok(softmax_metrics(&trace.logits, &set.y)?)
    };
    let (loss, acc) = eval(net, &task.test)?;
    metrics.push(EpochMetrics {
        epoch: 0,
        split: "test".into(),
        loss,
        accuracy: acc,
        ce_sparsity: 0.0,
        mask_violations: 0,
    });
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = gather(&task.train, chunk, dim);
            let grads = backprop(net, &batch)?;
            for (li, layer) in net.layers.iter_mut().enumerate() {
                match layer {
                    ToyLayer::Dense(l) => {
                        sgd_step(&mut l.w, &grads.weights[li], cfg.lr_dense);
                        for (b, g) in l.bias.iter_mut().zip(&grads.biases[li]) {
                            *b -= cfg.lr_dense * g;
                        }
                    }
                    ToyLayer::Sd(_) => {
                        return Err(TrainError::Parameter(
                            "train_dense expects a fully dense net".into(),
                        ))
                    }
                }
            }
        }
        let (loss, acc) = eval(net, &task.test)?;
        metrics.push(EpochMetrics {
            epoch: epoch + 1,
            split: "test".into(),
            loss,
            accuracy: acc,
            ce_sparsity: 0.0,
            mask_violations: 0,
        });
    }
    Ok(metrics)
}

fn gather(set: &LabeledSet, indices: &[usize], dim: usize) -> Batch {
    let mut data = Vec::with_capacity(indices.len() * dim);
    let mut y = Vec::with_capacity(indices.len());
    for &i in indices {
        data.extend_from_slice(set.x.row(i));
        y.push(set.y[i]);
    }
    Batch { x: Mat::from_vec(indices.len(), dim, data), y }
}

/// Outcome of an alternating retrain run.
pub struct RetrainOutcome {
    pub best_groups: Vec<SdLayerGroup>,
    pub best_accuracy: f64,
    pub best_alternation: usize,
    pub accuracy_trace: Vec<f64>,
    /// Largest per-block reconstruction error at each projection.
    pub error_trace: Vec<f64>,
}

/// Alternate one dense training epoch with a full re-projection of the
/// hidden layers into SD form; returns the best-accuracy feasible snapshot.
/// Zero alternations reduce to a single projection.
pub fn alternating_retrain(
    net: &mut ToyNet,
    task: &TaskSplit,
    sd_cfg: &SdConfig,
    fc_basis_width: usize,
    block_rows: usize,
    train_cfg: &TrainConfig,
    alternations: usize,
) -> Result<RetrainOutcome, TrainError> {
    let project = |net: &mut ToyNet| -> Result<Vec<SdLayerGroup>, TrainError> {
        let mut groups = Vec::new();
        let count = net.layers.len();
        for (li, layer) in net.layers.iter_mut().enumerate() {
            if li + 1 == count {
                continue;
            }
            if let ToyLayer::Dense(l) = layer {
                let group = decompose_dense_weight(
                    &l.w,
                    &format!("layer{li}"),
                    sd_cfg,
                    fc_basis_width,
                    block_rows,
                )?;
                l.w = crate::rebuild::rebuild_group_mat(&group)?;
                groups.push(group);
            }
        }
        Ok(groups)
    };

    let eval = |net: &ToyNet| -> Result<f64, TrainError> {
        let trace = forward_trace(net, &task.test.x)?;
        Ok(softmax_metrics(&trace.logits, &task.test.y)?.1)
    };
    let max_error = |groups: &[SdLayerGroup]| -> f64 {
        groups
            .iter()
            .flat_map(|g| g.forms.iter().filter_map(|f| f.recon_error))
            .fold(0.0_f64, f64::max)
    };

    let mut best_groups = project(net)?;
    let mut best_accuracy = eval(net)?;
    let mut best_alternation = 0;
    let mut accuracy_trace = vec![best_accuracy];
    let mut error_trace = vec![max_error(&best_groups)];

    let epoch_cfg = TrainConfig { epochs: 1, ..*train_cfg };
    for alt in 1..=alternations {
        let seeded = TrainConfig { seed: train_cfg.seed.wrapping_add(alt as u64), ..epoch_cfg };
        train_dense(net, task, &seeded)?;
        let groups = project(net)?;
        let acc = eval(net)?;
        accuracy_trace.push(acc);
        error_trace.push(max_error(&groups));
        if acc > best_accuracy {
            best_accuracy = acc;
            best_groups = groups;
            best_alternation = alt;
        }
    }
    Ok(RetrainOutcome {
        best_groups,
        best_accuracy,
        best_alternation,
        accuracy_trace,
        error_trace,
    })
}

// ---------------------------------------------------------------------------
// Packaged experiments (also driven by the CLI)
// ---------------------------------------------------------------------------

/// Adaptation experiment: pretrain dense on task A, reset the head, then
/// SD-constrained training on task B next to an unconstrained dense
/// baseline with the identical head reset.
pub struct AdaptationOutcome {
    pub sd: TrainOutcome,
    pub dense_trace: Vec<EpochMetrics>,
    pub sd_test_accuracy: f64,
    pub dense_test_accuracy: f64,
}

pub fn adaptation_experiment(
    seed: u64,
    sd_cfg: &SdConfig,
    cfg: &TrainConfig,
) -> Result<AdaptationOutcome, TrainError> {
    let spec = DataSpec { seed, ..DataSpec::default() };
    let raw = gen_data(&spec)?;
    let (task_a, task_b) = split_adaptation(&raw, spec.classes / 2)?;

    let mut pre = random_dense_net(&[spec.feature_dim, 32, task_a.train.classes], seed ^ 0x9e37)?;
    let pre_cfg =
        TrainConfig { epochs: 30, seed: seed.wrapping_add(1), swa_start_epoch: None, ..*cfg };
    train_dense(&mut pre, &task_a, &pre_cfg)?;

    let mut sd_net = sd_net_from_dense(&pre, sd_cfg, 3, 64)?;
    reset_head(&mut sd_net, task_b.train.classes, seed.wrapping_add(2))?;
    let mut trainer = SdTrainer::new(sd_net, *cfg)?;
    let sd = trainer.run(&task_b, false)?;

    let mut dense_net = pre.clone();
    reset_head(&mut dense_net, task_b.train.classes, seed.wrapping_add(2))?;
    let dense_trace = train_dense(&mut dense_net, &task_b, cfg)?;

    let sd_test_accuracy = final_test_accuracy(&sd.metrics);
    let dense_test_accuracy = dense_trace.last().map(|m| m.accuracy).unwrap_or(0.0);
    Ok(AdaptationOutcome { sd, dense_trace, sd_test_accuracy, dense_test_accuracy })
}

/// Fine-tuning experiment: pretrain on the alpha half, decompose, continue
/// SD-constrained training on the beta half (no head reset).
pub fn finetune_experiment(
    seed: u64,
    sd_cfg: &SdConfig,
    cfg: &TrainConfig,
    validate_every_step: bool,
) -> Result<(SdTrainer, TrainOutcome), TrainError> {
    let spec = DataSpec { seed, ..DataSpec::default() };
    let raw = gen_data(&spec)?;
    let (alpha, beta) = split_finetune(&raw);

    let mut pre = random_dense_net(&[spec.feature_dim, 24, spec.classes], seed ^ 0x9e37)?;
    let pre_cfg =
        TrainConfig { epochs: 20, seed: seed.wrapping_add(1), swa_start_epoch: None, ..*cfg };
    train_dense(&mut pre, &alpha, &pre_cfg)?;

    let sd_net = sd_net_from_dense(&pre, sd_cfg, 3, 64)?;
    let mut trainer = SdTrainer::new(sd_net, *cfg)?;
    let outcome = trainer.run(&beta, validate_every_step)?;
    Ok((trainer, outcome))
}

/// Final test accuracy from a metrics trace.
pub fn final_test_accuracy(metrics: &[EpochMetrics]) -> f64 {
    metrics.iter().rev().find(|m| m.split == "test").map(|m| m.accuracy).unwrap_or(0.0)
}

/// Errors from training simulation.
#[derive(Debug)]
pub enum TrainError {
    Parameter(String),
    /// Invariant failure that aborts the run (e.g. a frozen-mask violation).
    Internal(String),
    Numerical(String),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Parameter(m) => write!(f, "parameter error: {m}"),
            TrainError::Internal(m) => write!(f, "internal invariant failure: {m}"),
            TrainError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<RebuildError> for TrainError {
    fn from(e: RebuildError) -> Self {
        match e {
            RebuildError::Validation(m) => TrainError::Parameter(m),
            RebuildError::Numeric(m) => TrainError::Numerical(m),
        }
    }
}

impl From<DecomposeError> for TrainError {
    fn from(e: DecomposeError) -> Self {
        match e {
            DecomposeError::Numerical { iteration, detail } => {
                TrainError::Numerical(format!("iteration {iteration}: {detail}"))
            }
            other => TrainError::Parameter(other.to_string()),
        }
    }
}

impl From<ReshapeError> for TrainError {
    fn from(e: ReshapeError) -> Self {
        TrainError::Parameter(e.to_string())
    }
}
