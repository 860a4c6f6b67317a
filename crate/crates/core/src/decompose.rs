//! The alternating decomposition engine.
//!
//! Factors a reshaped weight matrix `W` (m x n) as `C_e * B` where `B` is a
//! small dense n x n basis and `C_e` is sparse with power-of-2 non-zeros.
//! The loop alternates three steps until the quantization difference drops
//! below `tol` or `max_iter` is reached:
//!
//! 1. normalize the columns of `C_e`, fold the scales into the basis rows,
//!    and project every entry onto the power-of-2 set;
//! 2. re-fit `B` then `C_e` by ridge-regularized least squares;
//! 3. sparsify `C_e` (element threshold and/or row pruning).
//!
//! After the loop the coefficients are re-quantized once more and the basis
//! re-fit, so the returned form always satisfies the value-set constraint.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::mat::Mat;
use crate::quant::{
    normalize_and_quantize_columns, ExponentSet, FixedPointMatrix, Pow2Matrix,
};
use crate::reshape::{
    reshape_conv_with, reshape_dense, Provenance, ReshapedMatrix, DEFAULT_BLOCK_ROWS,
    DEFAULT_FC_BASIS_WIDTH,
};
use crate::tensor_io::{Container, TensorKind, WeightTensor};

/// How step 3 sparsifies the coefficient matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SparsityMode {
    /// Hard-threshold individual entries.
    Element,
    /// Zero out the smallest-norm rows to meet a keep fraction.
    Vector,
    /// Element threshold followed by row pruning.
    ElementVector,
}

/// Decomposition parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdConfig {
    /// Element-sparsity threshold; entries with |c| below it are zeroed.
    pub theta: f64,
    /// Convergence tolerance on the quantization difference.
    pub tol: f64,
    pub max_iter: usize,
    pub pset: ExponentSet,
    pub sparsity_mode: SparsityMode,
    /// Fraction of rows kept in vector mode.
    pub vector_keep: f64,
    /// Ridge regularizer on every least-squares solve. Keeps the normal
    /// equations nonsingular when `C_e` has zero columns.
    pub ridge: f64,
}

impl Default for SdConfig {
    fn default() -> Self {
        SdConfig {
            theta: 4e-3,
            tol: 1e-10,
            max_iter: 30,
            pset: ExponentSet::default(),
            sparsity_mode: SparsityMode::Element,
            vector_keep: 1.0,
            ridge: 1e-12,
        }
    }
}

impl SdConfig {
    pub fn validate(&self) -> Result<(), DecomposeError> {
        if self.theta < 0.0 || !self.theta.is_finite() {
            return Err(DecomposeError::Config("theta must be finite and >= 0".into()));
        }
        if self.tol <= 0.0 || self.tol.is_nan() {
            return Err(DecomposeError::Config("tol must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(DecomposeError::Config("max_iter must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.vector_keep) {
            return Err(DecomposeError::Config("vector_keep must lie in [0, 1]".into()));
        }
        if self.ridge <= 0.0 || self.ridge.is_nan() {
            return Err(DecomposeError::Config("ridge must be positive".into()));
        }
        Ok(())
    }
}

/// The decomposed pair for one reshaped block.
#[derive(Debug, Clone, PartialEq)]
pub struct SdForm {
    /// Sparse power-of-2 coefficients, m x r (r = n by construction).
    pub c_e: Pow2Matrix,
    /// Dense basis, r x n, column scales already folded in.
    pub basis: Mat,
    /// Fixed-point basis, present once the form has been encoded or decoded.
    pub basis_fixed: Option<FixedPointMatrix>,
    pub scales_folded: bool,
    /// `||W - C_e * B||_F` against the source block; `None` for forms
    /// decoded from a model file (no source available).
    pub recon_error: Option<f64>,
    pub iterations_used: usize,
    pub pset: ExponentSet,
    pub provenance: Provenance,
}

/// One per-iteration diagnostic record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub recon_error: f64,
    /// Fraction of exactly-zero entries in `C_e`.
    pub sparsity: f64,
    /// `||B - I||_F`, distance from the basis initialization.
    pub basis_drift: f64,
}

/// Which least-squares half-step a residual check belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FitStage {
    Basis,
    Coeff,
}

/// Residual before/after one least-squares fit, for monotonicity checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FitCheck {
    pub stage: FitStage,
    pub before: f64,
    pub after: f64,
}

/// Evolution diagnostics for one decomposition run.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EvolutionTrace {
    pub initial_sparsity: f64,
    pub iterations: Vec<IterationRecord>,
    pub fit_checks: Vec<FitCheck>,
}

/// `||W - C * B||_F`.
pub fn recon_residual(w: &Mat, c: &Mat, b: &Mat) -> f64 {
    w.sub(&c.matmul(b)).frobenius_norm()
}

/// Fit the basis: `B = argmin ||W - C*B||_F^2` via the ridge-regularized
/// normal equations `(C^T C + ridge*I) B = C^T W`.
pub fn fit_basis(w: &Mat, c: &Mat, ridge: f64) -> Mat {
    let r = c.cols();
    let ct = c.transpose();
    let mut g = ct.matmul(c);
    for i in 0..r {
        g.set(i, i, g.get(i, i) + ridge);
    }
    let rhs = ct.matmul(w);
    Mat::solve(&g, &rhs).expect("ridge-regularized normal equations are positive definite")
}

/// Fit the coefficients row-wise: `C = W B^T (B B^T + ridge*I)^{-1}`.
///
/// With `allowed` supplied (training-mode masks, pad pins), entries where
/// `allowed[i*r + j]` is false stay exactly zero and the remaining entries
/// of each row solve the reduced system.
pub fn fit_coeff(w: &Mat, b: &Mat, ridge: f64, allowed: Option<&[bool]>) -> Mat {
    let (m, n) = (w.rows(), w.cols());
    let r = b.rows();
    assert_eq!(b.cols(), n, "basis width mismatch");

    let Some(mask) = allowed else {
        let bt = b.transpose();
        let mut g = b.matmul(&bt);
        for i in 0..r {
            g.set(i, i, g.get(i, i) + ridge);
        }
        let rhs = b.matmul(&w.transpose());
        let x = Mat::solve(&g, &rhs)
            .expect("ridge-regularized normal equations are positive definite");
        return x.transpose();
    };

    assert_eq!(mask.len(), m * r, "mask size mismatch");
    let mut c = Mat::zeros(m, r);
    for i in 0..m {
        let free: Vec<usize> = (0..r).filter(|&j| mask[i * r + j]).collect();
        if free.is_empty() {
            continue;
        }
        let k = free.len();
        let mut g = Mat::zeros(k, k);
        for (a, &ja) in free.iter().enumerate() {
            for (bb, &jb) in free.iter().enumerate() {
                let mut s = 0.0;
                for col in 0..n {
                    s += b.get(ja, col) * b.get(jb, col);
                }
                if a == bb {
                    s += ridge;
                }
                g.set(a, bb, s);
            }
        }
        let mut rhs = Mat::zeros(k, 1);
        for (a, &ja) in free.iter().enumerate() {
            let mut s = 0.0;
            for col in 0..n {
                s += b.get(ja, col) * w.get(i, col);
            }
            rhs.set(a, 0, s);
        }
        let x = Mat::solve(&g, &rhs)
            .expect("ridge-regularized normal equations are positive definite");
        for (a, &ja) in free.iter().enumerate() {
            c.set(i, ja, x.get(a, 0));
        }
    }
    c
}

/// Zero entries with `|c| < theta`; others pass through unchanged.
pub fn sparsify_element(c: &mut Mat, theta: f64) {
    for v in c.data_mut() {
        if v.abs() < theta {
            *v = 0.0;
        }
    }
}

/// Zero out the `floor(m * (1 - keep))` smallest-norm rows entirely. Ties
/// break by pruning the lower row index first.
pub fn sparsify_vector(c: &mut Mat, keep: f64) {
    let m = c.rows();
    let prune = ((m as f64) * (1.0 - keep)).floor() as usize;
    let prune = prune.min(m);
    if prune == 0 {
        return;
    }
    let mut order: Vec<(f64, usize)> = (0..m)
        .map(|i| (c.row(i).iter().map(|v| v * v).sum::<f64>().sqrt(), i))
        .collect();
    order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let cols = c.cols();
    for &(_, i) in order.iter().take(prune) {
        for j in 0..cols {
            c.set(i, j, 0.0);
        }
    }
}

/// Per-layer channel keep mask from batch-norm scaling factors:
/// `mask[ch] = |scales[ch]| >= threshold`. Refuses to empty a layer.
pub fn channel_mask(scales: &[f32], threshold: f64) -> Result<Vec<bool>, DecomposeError> {
    let mask: Vec<bool> = scales.iter().map(|s| f64::from(s.abs()) >= threshold).collect();
    if !mask.iter().any(|&k| k) {
        return Err(DecomposeError::Validation(
            "channel threshold would drop every channel".into(),
        ));
    }
    Ok(mask)
}

/// Decompose one reshaped block. Implements the three-step loop with a
/// final re-quantize and basis re-fit; pad cells from the reshape stay
/// pinned to zero in `C_e` throughout.
pub fn sd_decompose(
    w: &ReshapedMatrix,
    cfg: &SdConfig,
) -> Result<(SdForm, EvolutionTrace), DecomposeError> {
    cfg.validate()?;
    if !w.values.is_finite() {
        return Err(DecomposeError::Validation("input block contains non-finite values".into()));
    }
    let target = &w.values;
    let (m, n) = (target.rows(), target.cols());

    let pins = {
        let pad_cells = w.pad_cells();
        if pad_cells.is_empty() {
            None
        } else {
            let mut allowed = vec![true; m * n];
            for idx in pad_cells {
                allowed[idx] = false;
            }
            Some(allowed)
        }
    };

    let mut c_real = target.clone();
    let mut basis = Mat::eye(n);
    let mut trace = EvolutionTrace {
        initial_sparsity: zero_fraction(&c_real),
        iterations: Vec::new(),
        fit_checks: Vec::new(),
    };

    let mut delta = f64::INFINITY;
    let mut k = 0usize;
    while delta >= cfg.tol && k < cfg.max_iter {
        // Step 1: column-normalize, quantize, fold scales into basis rows.
        let (c_q, scales) = normalize_and_quantize_columns(&c_real, cfg.pset);
        delta = quantization_difference(&c_real, &scales, &c_q);
        fold_scales(&mut basis, &scales);
        let c_num = c_q.to_mat();
        ensure_finite(&basis, k + 1, "basis after scale folding")?;

        // Step 2: fit B, then fit C_e.
        let before = recon_residual(target, &c_num, &basis);
        basis = fit_basis(target, &c_num, cfg.ridge);
        ensure_finite(&basis, k + 1, "basis fit")?;
        trace.fit_checks.push(FitCheck {
            stage: FitStage::Basis,
            before,
            after: recon_residual(target, &c_num, &basis),
        });

        let before = recon_residual(target, &c_num, &basis);
        c_real = fit_coeff(target, &basis, cfg.ridge, pins.as_deref());
        ensure_finite(&c_real, k + 1, "coefficient fit")?;
        trace.fit_checks.push(FitCheck {
            stage: FitStage::Coeff,
            before,
            after: recon_residual(target, &c_real, &basis),
        });

        // Step 3: sparsify.
        match cfg.sparsity_mode {
            SparsityMode::Element => sparsify_element(&mut c_real, cfg.theta),
            SparsityMode::Vector => sparsify_vector(&mut c_real, cfg.vector_keep),
            SparsityMode::ElementVector => {
                sparsify_element(&mut c_real, cfg.theta);
                sparsify_vector(&mut c_real, cfg.vector_keep);
            }
        }

        k += 1;
        trace.iterations.push(IterationRecord {
            recon_error: recon_residual(target, &c_real, &basis),
            sparsity: zero_fraction(&c_real),
            basis_drift: basis.sub(&Mat::eye(n)).frobenius_norm(),
        });
    }

    // Re-quantize C_e and re-fit B.
    let (c_q, scales) = normalize_and_quantize_columns(&c_real, cfg.pset);
    fold_scales(&mut basis, &scales);
    let c_num = c_q.to_mat();
    let before = recon_residual(target, &c_num, &basis);
    basis = fit_basis(target, &c_num, cfg.ridge);
    ensure_finite(&basis, k, "final basis fit")?;
    trace.fit_checks.push(FitCheck {
        stage: FitStage::Basis,
        before,
        after: recon_residual(target, &c_num, &basis),
    });

    let recon_error = recon_residual(target, &c_num, &basis);
    Ok((
        SdForm {
            c_e: c_q,
            basis,
            basis_fixed: None,
            scales_folded: true,
            recon_error: Some(recon_error),
            iterations_used: k,
            pset: cfg.pset,
            provenance: w.provenance.clone(),
        },
        trace,
    ))
}

fn zero_fraction(c: &Mat) -> f64 {
    if c.data().is_empty() {
        return 0.0;
    }
    c.data().iter().filter(|v| **v == 0.0).count() as f64 / c.data().len() as f64
}

/// Frobenius norm of (normalized C) - (quantized C).
fn quantization_difference(c: &Mat, scales: &[f64], q: &Pow2Matrix) -> f64 {
    let mut sum = 0.0;
    for i in 0..c.rows() {
        for j in 0..c.cols() {
            let d = c.get(i, j) / scales[j] - q.get(i, j).value();
            sum += d * d;
        }
    }
    sum.sqrt()
}

fn fold_scales(basis: &mut Mat, scales: &[f64]) {
    let cols = basis.cols();
    for (j, &s) in scales.iter().enumerate() {
        for col in 0..cols {
            basis.set(j, col, basis.get(j, col) * s);
        }
    }
}

fn ensure_finite(m: &Mat, iteration: usize, what: &str) -> Result<(), DecomposeError> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(DecomposeError::Numerical {
            iteration,
            detail: format!("non-finite values in {what}"),
        })
    }
}

// ---------------------------------------------------------------------------
// Whole-model orchestration
// ---------------------------------------------------------------------------

/// Per-layer override, usually parsed from a JSON document keyed by layer
/// name: `{"layer": {"theta": .., "keep": .., "skip": .., "pmin": .., "pmax": ..}}`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerOverride {
    pub theta: Option<f64>,
    pub keep: Option<f64>,
    pub skip: Option<bool>,
    pub pmin: Option<i32>,
    pub pmax: Option<i32>,
    pub channel_threshold: Option<f64>,
}

pub type LayerConfigMap = BTreeMap<String, LayerOverride>;

/// Model-level decomposition options.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOptions {
    pub cfg: SdConfig,
    pub fc_basis_width: usize,
    pub block_rows: usize,
    /// Channel-pruning threshold applied where the container carries
    /// channel scales (or per-layer overrides say so).
    pub channel_threshold: Option<f64>,
    pub overrides: LayerConfigMap,
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions {
            cfg: SdConfig::default(),
            fc_basis_width: DEFAULT_FC_BASIS_WIDTH,
            block_rows: DEFAULT_BLOCK_ROWS,
            channel_threshold: None,
            overrides: LayerConfigMap::new(),
        }
    }
}

impl ModelOptions {
    fn resolve(&self, layer: &str) -> Result<(SdConfig, bool, Option<f64>), DecomposeError> {
        let mut cfg = self.cfg;
        let mut skip = false;
        let mut channel_threshold = self.channel_threshold;
        if let Some(o) = self.overrides.get(layer) {
            if let Some(t) = o.theta {
                cfg.theta = t;
            }
            if let Some(k) = o.keep {
                cfg.vector_keep = k;
                if cfg.sparsity_mode == SparsityMode::Element {
                    cfg.sparsity_mode = SparsityMode::ElementVector;
                }
            }
            if o.pmin.is_some() || o.pmax.is_some() {
                cfg.pset = ExponentSet::new(
                    o.pmin.unwrap_or(cfg.pset.p_min),
                    o.pmax.unwrap_or(cfg.pset.p_max),
                )
                .map_err(|e| DecomposeError::Config(format!("layer '{layer}': {e}")))?;
            }
            if let Some(s) = o.skip {
                skip = s;
            }
            if o.channel_threshold.is_some() {
                channel_threshold = o.channel_threshold;
            }
        }
        Ok((cfg, skip, channel_threshold))
    }
}

/// One layer of a decomposed model: either a group of SD forms or the
/// original dense tensor for layers left out of the decomposition.
#[derive(Debug, Clone, PartialEq)]
pub enum SdModelLayer {
    Sd(SdLayerGroup),
    /// Layer kept dense (skip list), stored as-is and flagged.
    Dense(WeightTensor),
}

impl SdModelLayer {
    pub fn name(&self) -> &str {
        match self {
            SdModelLayer::Sd(g) => &g.name,
            SdModelLayer::Dense(t) => &t.name,
        }
    }
}

/// All SD forms for one source tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SdLayerGroup {
    pub name: String,
    pub kind: TensorKind,
    /// Original (pre-pruning) tensor shape.
    pub shape: Vec<usize>,
    /// Output channels that survived channel pruning; `None` when channel
    /// pruning was not applied.
    pub kept_channels: Option<Vec<usize>>,
    pub forms: Vec<SdForm>,
}

/// A decomposed model plus per-layer evolution traces.
#[derive(Debug, Clone, PartialEq)]
pub struct SdModel {
    pub layers: Vec<SdModelLayer>,
}

/// Per-layer failure; decomposition continues past failing layers.
#[derive(Debug)]
pub struct LayerFailure {
    pub layer: String,
    pub error: DecomposeError,
}

/// Result of decomposing a whole container.
#[derive(Debug)]
pub struct DecomposeOutcome {
    pub model: SdModel,
    pub traces: Vec<(String, Vec<EvolutionTrace>)>,
    pub failures: Vec<LayerFailure>,
}

/// Decompose every eligible tensor of a container. Layers on the skip list
/// stay dense; failures are recorded per layer and the remaining layers
/// still run. Blocks within a layer decompose in parallel with
/// input-ordered results.
pub fn decompose_model(
    container: &Container,
    options: &ModelOptions,
) -> Result<DecomposeOutcome, DecomposeError> {
    options.cfg.validate()?;
    let mut layers = Vec::new();
    let mut traces = Vec::new();
    let mut failures = Vec::new();

    for tensor in &container.tensors {
        let (cfg, skip, channel_threshold) = options.resolve(&tensor.name)?;
        if skip {
            layers.push(SdModelLayer::Dense(tensor.clone()));
            continue;
        }

        match decompose_layer(tensor, container, options, &cfg, channel_threshold) {
            Ok((group, layer_traces)) => {
                traces.push((tensor.name.clone(), layer_traces));
                layers.push(SdModelLayer::Sd(group));
            }
            Err(error) => {
                failures.push(LayerFailure { layer: tensor.name.clone(), error });
            }
        }
    }

    Ok(DecomposeOutcome { model: SdModel { layers }, traces, failures })
}

fn decompose_layer(
    tensor: &WeightTensor,
    container: &Container,
    options: &ModelOptions,
    cfg: &SdConfig,
    channel_threshold: Option<f64>,
) -> Result<(SdLayerGroup, Vec<EvolutionTrace>), DecomposeError> {
    // Channel pruning happens once, up front, before any reshaping.
    let mut kept_channels = None;
    let mut working = tensor.clone();
    if let Some(threshold) = channel_threshold {
        if let Some(scales) =
            container.layer_meta.get(&tensor.name).and_then(|m| m.channel_scales.as_ref())
        {
            if scales.len() != tensor.shape[0] {
                return Err(DecomposeError::Validation(format!(
                    "layer '{}': {} channel scales for {} output channels",
                    tensor.name,
                    scales.len(),
                    tensor.shape[0]
                )));
            }
            let mask = channel_mask(scales, threshold)?;
            let kept: Vec<usize> =
                mask.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect();
            if kept.len() != mask.len() {
                working = select_channels(tensor, &kept);
                kept_channels = Some(kept);
            }
        }
    }

    let mats = match working.kind {
        TensorKind::Dense2d => reshape_dense(&working, options.fc_basis_width, options.block_rows),
        TensorKind::Conv4d => {
            reshape_conv_with(&working, options.block_rows, options.fc_basis_width)
        }
    }
    .map_err(|e| DecomposeError::Validation(e.to_string()))?;

    let results: Vec<Result<(SdForm, EvolutionTrace), DecomposeError>> =
        mats.par_iter().map(|mat| sd_decompose(mat, cfg)).collect();

    let mut forms = Vec::with_capacity(results.len());
    let mut layer_traces = Vec::with_capacity(results.len());
    for r in results {
        let (form, trace) = r?;
        forms.push(form);
        layer_traces.push(trace);
    }
    Ok((
        SdLayerGroup {
            name: tensor.name.clone(),
            kind: tensor.kind,
            shape: tensor.shape.clone(),
            kept_channels,
            forms,
        },
        layer_traces,
    ))
}

/// Restrict a tensor to the listed output channels.
fn select_channels(tensor: &WeightTensor, kept: &[usize]) -> WeightTensor {
    let per_channel: usize = tensor.shape[1..].iter().product();
    let mut data = Vec::with_capacity(kept.len() * per_channel);
    for &ch in kept {
        data.extend_from_slice(&tensor.data[ch * per_channel..(ch + 1) * per_channel]);
    }
    let mut shape = tensor.shape.clone();
    shape[0] = kept.len();
    WeightTensor::new(tensor.name.clone(), tensor.kind, shape, data)
        .expect("channel selection preserves tensor invariants")
}

/// Errors from decomposition.
#[derive(Debug)]
pub enum DecomposeError {
    Config(String),
    Validation(String),
    /// Non-finite intermediate values, naming the iteration that produced
    /// them.
    Numerical { iteration: usize, detail: String },
}

impl fmt::Display for DecomposeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecomposeError::Config(m) => write!(f, "config error: {m}"),
            DecomposeError::Validation(m) => write!(f, "validation error: {m}"),
            DecomposeError::Numerical { iteration, detail } => {
                write!(f, "numerical failure at iteration {iteration}: {detail}")
            }
        }
    }
}

impl std::error::Error for DecomposeError {}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{pow2, Pow2Value};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plain(values: Mat) -> ReshapedMatrix {
        let (rows, cols) = (values.rows(), values.cols());
        ReshapedMatrix {
            values,
            provenance: Provenance {
                tensor: "t".into(),
                kind: TensorKind::Dense2d,
                shape: vec![1, rows * cols],
                filter: 0,
                block: 0,
                row_offset: 0,
                total_rows: rows,
                pad: 0,
            },
        }
    }

    fn random_mat(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Mat {
        Mat::from_vec(m, n, (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn fit_basis_recovers_identity_for_square_nonsingular() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random_mat(&mut rng, 4, 4);
        let b = fit_basis(&w, &w, 1e-12);
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((b.get(i, j) - want).abs() < 1e-9, "B[{i}][{j}] = {}", b.get(i, j));
            }
        }
    }

    #[test]
    fn fit_basis_zero_coefficients_gives_zero_basis() {
        let w = Mat::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = fit_basis(&w, &Mat::zeros(2, 2), 1e-12);
        assert_eq!(b, Mat::zeros(2, 2));
    }

    #[test]
    fn fit_basis_matches_brute_force_least_squares() {
        // Independent oracle: residual at the normal-equation solution is
        // no larger than at any perturbed candidate.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let w = random_mat(&mut rng, 8, 3);
            let c = random_mat(&mut rng, 8, 3);
            let b = fit_basis(&w, &c, 1e-12);
            let base = recon_residual(&w, &c, &b);
            for _ in 0..30 {
                let mut probe = b.clone();
                let i = rng.gen_range(0..3);
                let j = rng.gen_range(0..3);
                probe.set(i, j, probe.get(i, j) + rng.gen_range(-1e-3..1e-3));
                assert!(recon_residual(&w, &c, &probe) + 1e-12 >= base);
            }
        }
    }

    #[test]
    fn fit_coeff_identity_basis_returns_w() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random_mat(&mut rng, 5, 3);
        let c = fit_coeff(&w, &Mat::eye(3), 1e-12, None);
        for i in 0..5 {
            for j in 0..3 {
                assert!((c.get(i, j) - w.get(i, j)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fit_coeff_zero_basis_returns_zero() {
        let w = Mat::from_vec(2, 3, vec![1.0; 6]);
        let c = fit_coeff(&w, &Mat::zeros(3, 3), 1e-12, None);
        assert_eq!(c, Mat::zeros(2, 3));
    }

    #[test]
    fn fit_coeff_fully_masked_row_stays_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = random_mat(&mut rng, 3, 3);
        let b = random_mat(&mut rng, 3, 3);
        let mut allowed = vec![true; 9];
        for j in 0..3 {
            allowed[3 + j] = false; // row 1 fully pinned
        }
        let c = fit_coeff(&w, &b, 1e-12, Some(&allowed));
        for j in 0..3 {
            assert_eq!(c.get(1, j), 0.0);
        }
        // Residual of the pinned row equals the row norm.
        let residual_row: f64 = {
            let rec = c.matmul(&b);
            (0..3).map(|j| (w.get(1, j) - rec.get(1, j)).powi(2)).sum::<f64>().sqrt()
        };
        let row_norm: f64 = (0..3).map(|j| w.get(1, j).powi(2)).sum::<f64>().sqrt();
        assert!((residual_row - row_norm).abs() < 1e-12);
    }

    #[test]
    fn fit_coeff_masked_rows_solve_reduced_system() {
        // Oracle: the masked solution beats any perturbation of the free
        // entries while pinned entries are exactly zero.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random_mat(&mut rng, 4, 3);
        let b = random_mat(&mut rng, 3, 3);
        let allowed: Vec<bool> = (0..12).map(|_| rng.gen_bool(0.6)).collect();
        let c = fit_coeff(&w, &b, 1e-12, Some(&allowed));
        for i in 0..4 {
            for j in 0..3 {
                if !allowed[i * 3 + j] {
                    assert_eq!(c.get(i, j), 0.0);
                }
            }
        }
        let base = recon_residual(&w, &c, &b);
        for _ in 0..40 {
            let i = rng.gen_range(0..4);
            let j = rng.gen_range(0..3);
            if !allowed[i * 3 + j] {
                continue;
            }
            let mut probe = c.clone();
            probe.set(i, j, probe.get(i, j) + rng.gen_range(-1e-3..1e-3));
            assert!(recon_residual(&w, &probe, &b) + 1e-12 >= base);
        }
    }

    #[test]
    fn sparsify_element_examples() {
        let mut c = Mat::from_vec(1, 2, vec![0.001, 0.5]);
        sparsify_element(&mut c, 4e-3);
        assert_eq!(c.data(), &[0.0, 0.5]);

        let mut c = Mat::from_vec(1, 2, vec![0.001, 0.5]);
        sparsify_element(&mut c, 0.0);
        assert_eq!(c.data(), &[0.001, 0.5]);

        let mut c = Mat::from_vec(1, 3, vec![0.001, 0.002, -0.003]);
        sparsify_element(&mut c, 4e-3);
        assert_eq!(c.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn sparsify_vector_prunes_smallest_rows() {
        let mut c = Mat::from_vec(4, 1, vec![4.0, 3.0, 2.0, 1.0]);
        sparsify_vector(&mut c, 0.5);
        assert_eq!(c.data(), &[4.0, 3.0, 0.0, 0.0]);

        let mut c = Mat::from_vec(2, 2, vec![1.0, 1.0, 2.0, 2.0]);
        sparsify_vector(&mut c, 1.0);
        assert_eq!(c.data(), &[1.0, 1.0, 2.0, 2.0]);

        let mut c = Mat::from_vec(2, 2, vec![1.0, 1.0, 2.0, 2.0]);
        sparsify_vector(&mut c, 0.0);
        assert_eq!(c.data(), &[0.0; 4]);
    }

    #[test]
    fn sparsify_vector_tie_breaks_by_lower_index() {
        let mut c = Mat::from_vec(3, 1, vec![1.0, 1.0, 1.0]);
        sparsify_vector(&mut c, 0.5); // prune floor(3*0.5) = 1 row
        assert_eq!(c.data(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn channel_mask_examples() {
        assert_eq!(channel_mask(&[0.9, 0.01, 0.5], 0.1).unwrap(), vec![true, false, true]);
        assert_eq!(channel_mask(&[0.9, 0.01], 0.0).unwrap(), vec![true, true]);
        assert!(channel_mask(&[0.01, 0.02], 0.1).is_err());
    }

    #[test]
    fn identity_is_a_fixed_point() {
        let cfg = SdConfig { theta: 0.1, ..SdConfig::default() };
        let (form, _) = sd_decompose(&plain(Mat::eye(4)), &cfg).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { Pow2Value::non_zero(1, 0) } else { Pow2Value::Zero };
                assert_eq!(form.c_e.get(i, j), want);
            }
        }
        assert!(form.recon_error.unwrap() <= 1e-9);
        assert!(form.iterations_used <= 2);
    }

    #[test]
    fn scale_two_folds_into_basis() {
        let (form, _) = sd_decompose(&plain(Mat::eye(3).scale(2.0)), &SdConfig::default()).unwrap();
        for i in 0..3 {
            assert_eq!(form.c_e.get(i, i), Pow2Value::non_zero(1, 0));
            assert!((form.basis.get(i, i) - 2.0).abs() < 1e-9);
        }
        assert!(form.recon_error.unwrap() <= 1e-9);
    }

    /// Planted instance: orthonormal power-of-2 columns with an identity
    /// basis on the live rows decompose back to themselves.
    #[test]
    fn planted_recovery_is_exact() {
        let c1 = [0.5, 0.5, 0.5, 0.5];
        let c2 = [0.5, -0.5, 0.5, -0.5];
        let mut w = Mat::zeros(4, 3);
        for i in 0..4 {
            w.set(i, 0, c1[i]);
            w.set(i, 1, c2[i]);
        }
        let (form, _) = sd_decompose(&plain(w), &SdConfig::default()).unwrap();
        assert!(form.recon_error.unwrap() <= 1e-9, "error {}", form.recon_error.unwrap());
        for i in 0..4 {
            assert_eq!(form.c_e.get(i, 0), Pow2Value::non_zero(1, -1));
            assert_eq!(form.c_e.get(i, 1), Pow2Value::non_zero(if i % 2 == 0 { 1 } else { -1 }, -1));
            assert_eq!(form.c_e.get(i, 2), Pow2Value::Zero);
        }
    }

    #[test]
    fn decompose_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = random_mat(&mut rng, 24, 3);
        let cfg = SdConfig::default();
        let (a, ta) = sd_decompose(&plain(w.clone()), &cfg).unwrap();
        let (b, tb) = sd_decompose(&plain(w), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
    }

    #[test]
    fn outputs_are_feasible_and_vector_bound_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for trial in 0..20 {
            let m = rng.gen_range(2..40);
            let w = random_mat(&mut rng, m, 3);
            let keep = [1.0, 0.5, 0.25][trial % 3];
            let cfg = SdConfig {
                sparsity_mode: SparsityMode::ElementVector,
                vector_keep: keep,
                ..SdConfig::default()
            };
            let (form, trace) = sd_decompose(&plain(w), &cfg).unwrap();
            assert!(form.c_e.is_feasible(cfg.pset));
            let bound = (m as f64 * keep).ceil() as usize;
            assert!(
                form.c_e.count_nonzero_rows() <= bound,
                "{} rows live, keep bound {bound}",
                form.c_e.count_nonzero_rows()
            );
            // Random entries are never exactly zero, so the first
            // sparsification can only raise the zero fraction.
            assert!(trace.iterations[0].sparsity >= trace.initial_sparsity);
        }
    }

    #[test]
    fn fit_steps_never_increase_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10 {
            let m = rng.gen_range(2..60);
            let w = random_mat(&mut rng, m, 3);
            let (_, trace) = sd_decompose(&plain(w.clone()), &SdConfig::default()).unwrap();
            // The absolute term is the ridge-bias floor for residuals that
            // are already ~0; the relative bound governs everywhere else.
            let scale = w.frobenius_norm();
            for check in &trace.fit_checks {
                assert!(
                    check.after <= check.before * (1.0 + 1e-9) + 1e-10 * scale,
                    "{:?}: {} -> {}",
                    check.stage,
                    check.before,
                    check.after
                );
            }
        }
    }

    #[test]
    fn pad_cells_stay_pinned() {
        // 1x10 FC row with S=3 pads two cells; they must come out Zero.
        let w = WeightTensor::new(
            "fc",
            TensorKind::Dense2d,
            vec![1, 10],
            (0..10).map(|i| 0.3 + 0.05 * i as f32).collect(),
        )
        .unwrap();
        let mats = reshape_dense(&w, 3, 64).unwrap();
        let (form, _) = sd_decompose(&mats[0], &SdConfig::default()).unwrap();
        assert_eq!(form.c_e.get(3, 1), Pow2Value::Zero);
        assert_eq!(form.c_e.get(3, 2), Pow2Value::Zero);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let w = Mat::from_vec(1, 2, vec![f64::INFINITY, 0.0]);
        assert!(matches!(
            sd_decompose(&plain(w), &SdConfig::default()),
            Err(DecomposeError::Validation(_))
        ));
    }

    #[test]
    fn decompose_model_mixed_layers_and_skip() {
        let conv = WeightTensor::new(
            "conv1",
            TensorKind::Conv4d,
            vec![2, 4, 3, 3],
            (0..72).map(|i| ((i * 37 % 100) as f32 - 50.0) / 60.0).collect(),
        )
        .unwrap();
        let fc = WeightTensor::new(
            "fc1",
            TensorKind::Dense2d,
            vec![3, 7],
            (0..21).map(|i| ((i * 29 % 90) as f32 - 45.0) / 50.0).collect(),
        )
        .unwrap();
        let skip = WeightTensor::new("head", TensorKind::Dense2d, vec![2, 2], vec![1.0; 4]).unwrap();

        let mut options = ModelOptions::default();
        options.overrides.insert("head".into(), LayerOverride { skip: Some(true), ..Default::default() });

        let container = Container::new(vec![conv, fc, skip]);
        let outcome = decompose_model(&container, &options).unwrap();
        assert!(outcome.failures.is_empty());
        assert_eq!(outcome.model.layers.len(), 3);
        assert!(matches!(&outcome.model.layers[0], SdModelLayer::Sd(g) if g.forms.len() == 2));
        assert!(matches!(&outcome.model.layers[1], SdModelLayer::Sd(g) if g.forms.len() == 3));
        assert!(matches!(&outcome.model.layers[2], SdModelLayer::Dense(t) if t.name == "head"));
    }

    #[test]
    fn channel_scale_length_mismatch_is_a_validation_error() {
        let conv = WeightTensor::new(
            "conv1",
            TensorKind::Conv4d,
            vec![3, 2, 3, 3],
            vec![0.5; 54],
        )
        .unwrap();
        let mut container = Container::new(vec![conv]);
        container.layer_meta.insert(
            "conv1".into(),
            crate::tensor_io::LayerMeta { channel_scales: Some(vec![0.9, 0.5]), config: None },
        );
        let options = ModelOptions { channel_threshold: Some(0.1), ..ModelOptions::default() };
        let outcome = decompose_model(&container, &options).unwrap();
        assert_eq!(outcome.failures.len(), 1);
        assert!(matches!(outcome.failures[0].error, DecomposeError::Validation(_)));
    }

    #[test]
    fn decompose_model_applies_channel_pruning_once() {
        let conv = WeightTensor::new(
            "conv1",
            TensorKind::Conv4d,
            vec![3, 2, 3, 3],
            (0..54).map(|i| ((i * 13 % 80) as f32 - 40.0) / 45.0).collect(),
        )
        .unwrap();
        let mut container = Container::new(vec![conv]);
        container.layer_meta.insert(
            "conv1".into(),
            crate::tensor_io::LayerMeta {
                channel_scales: Some(vec![0.9, 0.01, 0.5]),
                config: None,
            },
        );
        let options =
            ModelOptions { channel_threshold: Some(0.1), ..ModelOptions::default() };
        let outcome = decompose_model(&container, &options).unwrap();
        match &outcome.model.layers[0] {
            SdModelLayer::Sd(g) => {
                assert_eq!(g.kept_channels.as_deref(), Some(&[0usize, 2][..]));
                assert_eq!(g.forms.len(), 2);
                assert_eq!(g.shape, vec![3, 2, 3, 3]);
            }
            other => panic!("expected SD layer, got {other:?}"),
        }
    }

    #[test]
    fn quantize_then_fit_changes_product_within_rounding() {
        // Column scaling folded into the basis preserves C*B up to the
        // power-of-2 rounding error, checked against a dense recompute.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let c = random_mat(&mut rng, 10, 3);
        let b = random_mat(&mut rng, 3, 3);
        let product_before = c.matmul(&b);
        let (q, scales) = normalize_and_quantize_columns(&c, ExponentSet::default());
        let mut folded = b.clone();
        fold_scales(&mut folded, &scales);
        let product_after = q.to_mat().matmul(&folded);
        // Rounding error per entry is bounded by a third of the magnitude
        // (nearest power-of-2 within the clamp region), so the products stay
        // close; the exact bound is loose but the drift must be modest.
        let drift = product_before.sub(&product_after).frobenius_norm();
        assert!(drift < 0.5 * product_before.frobenius_norm() + 1e-9, "drift {drift}");
        // And with exact power-of-2 unit-norm columns the product is exact.
        let mut exact = Mat::zeros(4, 2);
        for i in 0..4 {
            exact.set(i, 0, 0.5);
            exact.set(i, 1, if i % 2 == 0 { 0.5 } else { -0.5 });
        }
        let b2 = random_mat(&mut rng, 2, 2);
        let before = exact.matmul(&b2);
        let (q2, scales2) = normalize_and_quantize_columns(&exact, ExponentSet::default());
        let mut folded2 = b2.clone();
        fold_scales(&mut folded2, &scales2);
        let after = q2.to_mat().matmul(&folded2);
        assert!(before.sub(&after).frobenius_norm() < 1e-12);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let bad = SdConfig { tol: 0.0, ..SdConfig::default() };
        assert!(bad.validate().is_err());
        let bad = SdConfig { max_iter: 0, ..SdConfig::default() };
        assert!(bad.validate().is_err());
        let bad = SdConfig { vector_keep: 1.5, ..SdConfig::default() };
        assert!(bad.validate().is_err());
        let bad = SdConfig { theta: -1.0, ..SdConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn power_of_two_columns_survive_normalization() {
        // Column norms that are themselves powers of two keep entries on
        // the grid after normalization.
        let mut w = Mat::zeros(4, 2);
        for i in 0..4 {
            w.set(i, 0, pow2(-1));
            w.set(i, 1, pow2(-2));
        }
        let (q, scales) = normalize_and_quantize_columns(&w, ExponentSet::default());
        assert_eq!(scales, vec![1.0, 0.5]);
        for i in 0..4 {
            assert_eq!(q.get(i, 0), Pow2Value::non_zero(1, -1));
            assert_eq!(q.get(i, 1), Pow2Value::non_zero(1, -1));
        }
    }
}
