//! Weight reconstruction and forward evaluation.
//!
//! Rebuilding computes `W = C_e * B` with shift-and-add semantics: every
//! term `c * b` with `c = sign * 2^p` is the exact binary-exponent scaling
//! of `b` plus a sign flip, accumulated in increasing column order. Since
//! power-of-2 scaling is exact absent under/overflow, the result equals the
//! naive real-multiply product bit for bit.
//!
//! Toy networks here are stacks of dense (or SD-form) layers with ReLU
//! activations and a softmax cross-entropy head; they exist to drive the
//! training simulation and the forward-equivalence checks, not to execute
//! conv layers.

use std::fmt;

use serde::Serialize;

use crate::decompose::SdLayerGroup;
use crate::mat::Mat;
use crate::quant::{pow2, Pow2Matrix, Pow2Value};
use crate::reshape::{inverse_reshape, inverse_reshape_mat, ReshapedMatrix};
use crate::tensor_io::{TensorKind, WeightTensor};

/// Shift-and-add product `C_e * B`. Exact: equals the naive dense multiply
/// bit for bit (both accumulate in increasing column index order from a
/// `+0.0` accumulator).
pub fn rebuild(c: &Pow2Matrix, b: &Mat) -> Result<Mat, RebuildError> {
    if c.cols() != b.rows() {
        return Err(RebuildError::Validation(format!(
            "coefficients {}x{} against basis {}x{}",
            c.rows(),
            c.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let mut out = Mat::zeros(c.rows(), b.cols());
    for i in 0..c.rows() {
        for j in 0..b.cols() {
            let mut sum = 0.0_f64;
            for k in 0..c.cols() {
                match c.get(i, k) {
                    Pow2Value::Zero => {}
                    Pow2Value::NonZero { sign, exp } => {
                        let scaled = b.get(k, j) * pow2(exp);
                        sum += if sign < 0 { -scaled } else { scaled };
                    }
                }
            }
            out.set(i, j, sum);
        }
    }
    if b.is_finite() && !out.is_finite() {
        return Err(RebuildError::Numeric("exponent overflow while scaling".into()));
    }
    Ok(out)
}

/// Rebuild all blocks of a layer group and reassemble the dense tensor.
/// Channel-pruned groups come back at the original shape with zeroed
/// pruned channels.
pub fn rebuild_group_tensor(group: &SdLayerGroup) -> Result<WeightTensor, RebuildError> {
    let mats = rebuild_blocks(group)?;
    let reduced = inverse_reshape(&mats).map_err(|e| RebuildError::Validation(e.to_string()))?;
    match &group.kept_channels {
        None => Ok(reduced),
        Some(kept) => {
            let per_channel: usize = group.shape[1..].iter().product();
            let mut data = vec![0.0_f32; group.shape.iter().product()];
            for (row, &ch) in kept.iter().enumerate() {
                data[ch * per_channel..(ch + 1) * per_channel]
                    .copy_from_slice(&reduced.data[row * per_channel..(row + 1) * per_channel]);
            }
            WeightTensor::new(group.name.clone(), group.kind, group.shape.clone(), data)
                .map_err(|e| RebuildError::Validation(e.to_string()))
        }
    }
}

/// Rebuild a dense2d group as an f64 matrix (no f32 cast), for forward
/// evaluation.
pub fn rebuild_group_mat(group: &SdLayerGroup) -> Result<Mat, RebuildError> {
    if group.kind != TensorKind::Dense2d || group.kept_channels.is_some() {
        return Err(RebuildError::Validation(format!(
            "layer '{}' is not a plain dense2d group",
            group.name
        )));
    }
    let mats = rebuild_blocks(group)?;
    inverse_reshape_mat(&mats).map_err(|e| RebuildError::Validation(e.to_string()))
}

fn rebuild_blocks(group: &SdLayerGroup) -> Result<Vec<ReshapedMatrix>, RebuildError> {
    group
        .forms
        .iter()
        .map(|f| {
            Ok(ReshapedMatrix {
                values: rebuild(&f.c_e, &f.basis)?,
                provenance: f.provenance.clone(),
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Toy networks
// ---------------------------------------------------------------------------

/// Plain dense layer: `out x in` weight plus per-output bias.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub w: Mat,
    pub bias: Vec<f64>,
}

/// Dense layer held in SD form; the weight is rebuilt on every forward
/// call unless a cache has been explicitly refreshed.
#[derive(Debug, Clone, PartialEq)]
pub struct SdDenseLayer {
    pub group: SdLayerGroup,
    pub bias: Vec<f64>,
    /// Explicit rebuild cache for test speed; cleared by training updates.
    pub cached: Option<Mat>,
}

impl SdDenseLayer {
    pub fn new(group: SdLayerGroup, bias: Vec<f64>) -> Result<Self, RebuildError> {
        if group.kind != TensorKind::Dense2d {
            return Err(RebuildError::Validation(format!(
                "layer '{}' must be dense2d to serve in a toy net",
                group.name
            )));
        }
        Ok(SdDenseLayer { group, bias, cached: None })
    }

    pub fn weight(&self) -> Result<Mat, RebuildError> {
        match &self.cached {
            Some(w) => Ok(w.clone()),
            None => rebuild_group_mat(&self.group),
        }
    }

    pub fn refresh_cache(&mut self) -> Result<(), RebuildError> {
        self.cached = Some(rebuild_group_mat(&self.group)?);
        Ok(())
    }

    pub fn clear_cache(&mut self) {
        self.cached = None;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ToyLayer {
    Dense(DenseLayer),
    Sd(SdDenseLayer),
}

impl ToyLayer {
    pub fn out_dim(&self) -> usize {
        match self {
            ToyLayer::Dense(l) => l.w.rows(),
            ToyLayer::Sd(l) => l.group.shape[0],
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            ToyLayer::Dense(l) => l.w.cols(),
            ToyLayer::Sd(l) => l.group.shape[1],
        }
    }

    pub fn weight(&self) -> Result<Mat, RebuildError> {
        match self {
            ToyLayer::Dense(l) => Ok(l.w.clone()),
            ToyLayer::Sd(l) => l.weight(),
        }
    }

    pub fn bias(&self) -> &[f64] {
        match self {
            ToyLayer::Dense(l) => &l.bias,
            ToyLayer::Sd(l) => &l.bias,
        }
    }
}

/// Stack of dense/SD layers, ReLU between layers, softmax cross-entropy
/// head on the last layer's outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet {
    pub layers: Vec<ToyLayer>,
}

impl ToyNet {
    pub fn new(layers: Vec<ToyLayer>) -> Result<Self, RebuildError> {
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(RebuildError::Validation(format!(
                    "layer dims do not chain: {} -> {}",
                    pair[0].out_dim(),
                    pair[1].in_dim()
                )));
            }
        }
        for layer in &layers {
            if layer.bias().len() != layer.out_dim() {
                return Err(RebuildError::Validation("bias length must match out dim".into()));
            }
        }
        Ok(ToyNet { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim())
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim())
    }
}

/// A labeled batch: `x` is N x d, `y` holds class indices.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Mat,
    pub y: Vec<usize>,
}

/// Forward activations kept around for backprop: `acts[0]` is the input,
/// `acts[i]` the post-ReLU output of layer i-1, `preacts[i]` the
/// pre-activation of layer i.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub acts: Vec<Mat>,
    pub preacts: Vec<Mat>,
    pub logits: Mat,
}

/// One forward pass keeping intermediates.
pub fn forward_trace(net: &ToyNet, x: &Mat) -> Result<ForwardTrace, RebuildError> {
    if net.layers.is_empty() {
        return Err(RebuildError::Validation("empty net".into()));
    }
    if x.cols() != net.in_dim() {
        return Err(RebuildError::Validation(format!(
            "input dim {} does not match net input {}",
            x.cols(),
            net.in_dim()
        )));
    }
    let mut acts = vec![x.clone()];
    let mut preacts = Vec::with_capacity(net.layers.len());
    let mut h = x.clone();
    for (li, layer) in net.layers.iter().enumerate() {
        let w = layer.weight()?;
        let bias = layer.bias();
        let mut z = h.matmul(&w.transpose());
        for i in 0..z.rows() {
            for j in 0..z.cols() {
                z.set(i, j, z.get(i, j) + bias[j]);
            }
        }
        preacts.push(z.clone());
        if li + 1 < net.layers.len() {
            let mut a = z;
            for v in a.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            acts.push(a.clone());
            h = a;
        } else {
            h = z;
        }
    }
    Ok(ForwardTrace { logits: h, acts, preacts })
}

/// Forward pass with loss and accuracy against labels.
#[derive(Debug, Clone)]
pub struct ForwardResult {
    pub logits: Mat,
    pub loss: f64,
    pub accuracy: f64,
}

pub fn forward(net: &ToyNet, batch: &Batch) -> Result<ForwardResult, RebuildError> {
    if batch.y.len() != batch.x.rows() {
        return Err(RebuildError::Validation("label count must match batch rows".into()));
    }
    let trace = forward_trace(net, &batch.x)?;
    let (loss, accuracy) = softmax_metrics(&trace.logits, &batch.y)?;
    Ok(ForwardResult { logits: trace.logits, loss, accuracy })
}

/// Row-wise softmax probabilities (max-shifted for stability).
pub fn softmax(logits: &Mat) -> Mat {
    let mut out = Mat::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &v in row {
            denom += (v - max).exp();
        }
        for j in 0..logits.cols() {
            out.set(i, j, (logits.get(i, j) - max).exp() / denom);
        }
    }
    out
}

/// Mean cross-entropy and accuracy; argmax ties resolve to the lowest
/// class index.
pub fn softmax_metrics(logits: &Mat, labels: &[usize]) -> Result<(f64, f64), RebuildError> {
    if labels.len() != logits.rows() {
        return Err(RebuildError::Validation("label count must match logits rows".into()));
    }
    let probs = softmax(logits);
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        if y >= logits.cols() {
            return Err(RebuildError::Validation(format!("label {y} out of range")));
        }
        loss -= probs.get(i, y).max(1e-300).ln();
        let mut best = 0;
        for j in 1..logits.cols() {
            if logits.get(i, j) > logits.get(i, best) {
                best = j;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    let n = labels.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

// ---------------------------------------------------------------------------
// Equivalent-FLOPs counting
// ---------------------------------------------------------------------------

/// Layer geometry for operation counting. Only conv and FC layers count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerDims {
    Conv { m: usize, c: usize, r: usize, s: usize, e: usize, f: usize },
    Fc { m: usize, c: usize },
}

impl LayerDims {
    /// Dense multiply-accumulate count.
    pub fn dense_macs(&self) -> u64 {
        match *self {
            LayerDims::Conv { m, c, r, s, e, f } => (m * c * r * s) as u64 * (e * f) as u64,
            LayerDims::Fc { m, c } => (m * c) as u64,
        }
    }

    pub fn weight_count(&self) -> u64 {
        match *self {
            LayerDims::Conv { m, c, r, s, .. } => (m * c * r * s) as u64,
            LayerDims::Fc { m, c } => (m * c) as u64,
        }
    }
}

/// Shift-add rebuild work: one shift-and-add per non-zero coefficient per
/// basis column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RebuildCount {
    pub ce_nonzeros: u64,
    pub basis_cols: u64,
}

/// Operation counts with bit-width-scaled equivalent FLOPs. One MAC is one
/// multiply plus one add; multiplies scale by `max(weight bits, activation
/// bits) / 32`, adds count 1 FLOP at 32-bit accumulation, and rebuild
/// shift-adds count as adds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlopsReport {
    /// MAC count after weight-density scaling.
    pub mac_count: f64,
    pub shift_add_rebuild_count: u64,
    pub equivalent_flops: f64,
    pub rebuild_overhead_fraction: f64,
}

/// Count equivalent FLOPs for one layer. `weight_density` is the non-zero
/// weight fraction; bits must lie in 1..=32.
pub fn count_flops(
    dims: &LayerDims,
    weight_density: f64,
    weight_bits: u32,
    activation_bits: u32,
    rebuild: Option<RebuildCount>,
) -> FlopsReport {
    assert!((1..=32).contains(&weight_bits), "weight bits must lie in 1..=32");
    assert!((1..=32).contains(&activation_bits), "activation bits must lie in 1..=32");
    assert!((0.0..=1.0).contains(&weight_density), "density must lie in [0, 1]");
    let macs = dims.dense_macs() as f64 * weight_density;
    let mult_scale = f64::from(weight_bits.max(activation_bits)) / 32.0;
    let shift_adds = rebuild.map_or(0, |r| r.ce_nonzeros * r.basis_cols);
    let mac_flops = macs * (mult_scale + 1.0);
    let rebuild_flops = shift_adds as f64;
    let total = mac_flops + rebuild_flops;
    FlopsReport {
        mac_count: macs,
        shift_add_rebuild_count: shift_adds,
        equivalent_flops: total,
        rebuild_overhead_fraction: if total > 0.0 { rebuild_flops / total } else { 0.0 },
    }
}

/// Errors from rebuilding and forward evaluation.
#[derive(Debug)]
pub enum RebuildError {
    Validation(String),
    Numeric(String),
}

impl fmt::Display for RebuildError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RebuildError::Validation(m) => write!(f, "validation error: {m}"),
            RebuildError::Numeric(m) => write!(f, "numeric error: {m}"),
        }
    }
}

impl std::error::Error for RebuildError {}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::ExponentSet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_feasible(rng: &mut ChaCha8Rng, m: usize, r: usize) -> Pow2Matrix {
        let p = ExponentSet::default();
        let mut c = Pow2Matrix::zeros(m, r);
        for i in 0..m {
            for j in 0..r {
                if rng.gen_bool(0.5) {
                    continue;
                }
                c.set(
                    i,
                    j,
                    Pow2Value::non_zero(
                        if rng.gen_bool(0.5) { 1 } else { -1 },
                        rng.gen_range(p.p_min..=p.p_max),
                    ),
                );
            }
        }
        c
    }

    #[test]
    fn rebuild_hand_example() {
        // Row (+2^-1, 0, -2^0) against column (0.5, 7.0, 0.25):
        // 0.25 + 0 - 0.25 = 0.
        let mut c = Pow2Matrix::zeros(1, 3);
        c.set(0, 0, Pow2Value::non_zero(1, -1));
        c.set(0, 2, Pow2Value::non_zero(-1, 0));
        let b = Mat::from_vec(3, 1, vec![0.5, 7.0, 0.25]);
        let out = rebuild(&c, &b).unwrap();
        assert_eq!(out.get(0, 0), 0.0);
    }

    #[test]
    fn rebuild_identity_coefficients_returns_basis() {
        let mut c = Pow2Matrix::zeros(3, 3);
        for i in 0..3 {
            c.set(i, i, Pow2Value::non_zero(1, 0));
        }
        let b = Mat::from_vec(3, 2, vec![1.5, -2.0, 0.25, 3.0, -0.125, 9.0]);
        assert_eq!(rebuild(&c, &b).unwrap(), b);
    }

    #[test]
    fn rebuild_matches_naive_multiply_bit_for_bit() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let m = rng.gen_range(1..12);
            let r = rng.gen_range(1..5);
            let n = rng.gen_range(1..5);
            let c = random_feasible(&mut rng, m, r);
            let b = Mat::from_vec(r, n, (0..r * n).map(|_| rng.gen_range(-3.0..3.0)).collect());
            let fast = rebuild(&c, &b).unwrap();
            let naive = c.to_mat().matmul(&b);
            for (x, y) in fast.data().iter().zip(naive.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn single_dense_identity_layer_passes_input_through() {
        let net = ToyNet::new(vec![ToyLayer::Dense(DenseLayer {
            w: Mat::eye(3),
            bias: vec![0.0; 3],
        })])
        .unwrap();
        let mut x = Mat::zeros(1, 3);
        x.set(0, 0, 1.0);
        let out = forward_trace(&net, &x).unwrap();
        assert_eq!(out.logits, x);
    }

    #[test]
    fn sd_net_forward_equals_dense_net_with_rebuilt_weights() {
        use crate::decompose::{sd_decompose, SdConfig, SdLayerGroup};
        use crate::reshape::reshape_dense;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = WeightTensor::new(
            "fc",
            TensorKind::Dense2d,
            vec![4, 6],
            (0..24).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        )
        .unwrap();
        let mats = reshape_dense(&w, 3, 64).unwrap();
        let mut forms = Vec::new();
        for m in &mats {
            forms.push(sd_decompose(m, &SdConfig::default()).unwrap().0);
        }
        let group = SdLayerGroup {
            name: "fc".into(),
            kind: TensorKind::Dense2d,
            shape: vec![4, 6],
            kept_channels: None,
            forms,
        };
        let rebuilt = rebuild_group_mat(&group).unwrap();
        let bias: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.2..0.2)).collect();
        let sd_net =
            ToyNet::new(vec![ToyLayer::Sd(SdDenseLayer::new(group, bias.clone()).unwrap())])
                .unwrap();
        let dense_net =
            ToyNet::new(vec![ToyLayer::Dense(DenseLayer { w: rebuilt, bias })]).unwrap();
        let x = Mat::from_vec(5, 6, (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let a = forward_trace(&sd_net, &x).unwrap();
        let b = forward_trace(&dense_net, &x).unwrap();
        for (u, v) in a.logits.data().iter().zip(b.logits.data()) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn forward_rejects_dim_mismatch() {
        let net = ToyNet::new(vec![ToyLayer::Dense(DenseLayer {
            w: Mat::eye(3),
            bias: vec![0.0; 3],
        })])
        .unwrap();
        let x = Mat::zeros(1, 2);
        assert!(matches!(forward_trace(&net, &x), Err(RebuildError::Validation(_))));
        assert!(ToyNet::new(vec![
            ToyLayer::Dense(DenseLayer { w: Mat::zeros(3, 2), bias: vec![0.0; 3] }),
            ToyLayer::Dense(DenseLayer { w: Mat::zeros(2, 4), bias: vec![0.0; 2] }),
        ])
        .is_err());
    }

    #[test]
    fn conv_flops_closed_form() {
        let dims = LayerDims::Conv { m: 64, c: 64, r: 3, s: 3, e: 32, f: 32 };
        let report = count_flops(&dims, 1.0, 32, 32, None);
        assert_eq!(report.equivalent_flops, 75_497_472.0);
        assert_eq!(report.mac_count, 37_748_736.0);
        assert_eq!(report.rebuild_overhead_fraction, 0.0);
    }

    #[test]
    fn flops_scale_with_density_and_bits() {
        let dims = LayerDims::Conv { m: 64, c: 64, r: 3, s: 3, e: 32, f: 32 };
        let report = count_flops(&dims, 0.25, 8, 8, None);
        let macs = 37_748_736.0 * 0.25;
        assert_eq!(report.mac_count, macs);
        assert_eq!(report.equivalent_flops, macs * (8.0 / 32.0) + macs);
    }

    #[test]
    fn rebuild_overhead_stays_below_one_percent_at_high_sparsity() {
        // A conv layer whose coefficients are 80% sparse: rebuild cost is
        // one shift-add per non-zero per basis column, once per inference.
        let dims = LayerDims::Conv { m: 64, c: 64, r: 3, s: 3, e: 32, f: 32 };
        let ce_cells = (3 * 64 * 3 * 64) as u64; // (S*C) x S per filter, M filters
        let nonzeros = ce_cells / 5;
        let report = count_flops(
            &dims,
            0.2,
            8,
            8,
            Some(RebuildCount { ce_nonzeros: nonzeros, basis_cols: 3 }),
        );
        assert!(report.rebuild_overhead_fraction < 0.01, "{}", report.rebuild_overhead_fraction);
    }

    #[test]
    fn flops_monotone_in_density_and_bits() {
        let dims = LayerDims::Fc { m: 128, c: 256 };
        let mut prev = 0.0;
        for density in [0.1, 0.3, 0.7, 1.0] {
            let r = count_flops(&dims, density, 8, 8, None);
            assert!(r.equivalent_flops >= prev);
            prev = r.equivalent_flops;
        }
        let mut prev = 0.0;
        for bits in [1, 4, 8, 16, 32] {
            let r = count_flops(&dims, 1.0, bits, 8, None);
            assert!(r.equivalent_flops >= prev);
            prev = r.equivalent_flops;
        }
    }

    #[test]
    fn softmax_metrics_balanced_case() {
        let logits = Mat::zeros(4, 2);
        let (loss, acc) = softmax_metrics(&logits, &[0, 1, 0, 1]).unwrap();
        assert!((loss - (2.0_f64).ln()).abs() < 1e-12);
        // Ties resolve to class 0.
        assert_eq!(acc, 0.5);
    }
}
