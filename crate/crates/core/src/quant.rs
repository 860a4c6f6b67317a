//! Power-of-2 coefficient quantization and 8-bit fixed-point basis
//! quantization.
//!
//! The permitted coefficient values form `{0} ∪ {±2^p | p_min <= p <= p_max}`.
//! Projection onto that set is a total function: values beyond the largest
//! magnitude clamp to it, ties break toward the candidate of smaller
//! magnitude (zero beats `2^p_min`, `2^p` beats `2^(p+1)`).

use serde::{Deserialize, Serialize};

use crate::mat::Mat;

/// Contiguous exponent range `p_min..=p_max` governing the power-of-2 set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExponentSet {
    pub p_min: i32,
    pub p_max: i32,
}

impl ExponentSet {
    pub fn new(p_min: i32, p_max: i32) -> Result<Self, QuantError> {
        if p_min > p_max {
            return Err(QuantError::EmptyExponentRange { p_min, p_max });
        }
        // Keep 2^p exactly representable as a normal f32 and the symbol
        // alphabet within the 4-bit exponent field of the codec.
        if p_min < -126 || p_max > 126 || (p_max - p_min) >= 16 {
            return Err(QuantError::ExponentRangeTooWide { p_min, p_max });
        }
        Ok(ExponentSet { p_min, p_max })
    }

    pub fn len(&self) -> usize {
        (self.p_max - self.p_min + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, exp: i32) -> bool {
        exp >= self.p_min && exp <= self.p_max
    }
}

impl Default for ExponentSet {
    /// Eight exponents, suiting unit-norm columns whose entries lie in [-1, 1].
    fn default() -> Self {
        ExponentSet { p_min: -7, p_max: 0 }
    }
}

/// A signed power of two or exact zero; the element type of the coefficient
/// matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pow2Value {
    Zero,
    NonZero { sign: i8, exp: i32 },
}

impl Pow2Value {
    pub fn non_zero(sign: i8, exp: i32) -> Self {
        debug_assert!(sign == 1 || sign == -1);
        Pow2Value::NonZero { sign, exp }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Pow2Value::Zero)
    }

    /// Numeric value: `sign * 2^exp`, exact in f64 for the supported range.
    pub fn value(&self) -> f64 {
        match *self {
            Pow2Value::Zero => 0.0,
            Pow2Value::NonZero { sign, exp } => f64::from(sign) * pow2(exp),
        }
    }
}

/// `2^exp` as an exact f64 (all intermediates are powers of two).
#[inline]
pub fn pow2(exp: i32) -> f64 {
    2.0_f64.powi(exp)
}

/// Project a finite real onto the power-of-2 set, minimizing absolute
/// distance; ties break toward the smaller magnitude.
pub fn nearest_pow2(x: f64, p: ExponentSet) -> Pow2Value {
    debug_assert!(x.is_finite());
    if x == 0.0 {
        return Pow2Value::Zero;
    }
    let mut best = Pow2Value::Zero;
    let mut best_dist = x.abs();
    let mut best_mag = 0.0;
    let sign: i8 = if x < 0.0 { -1 } else { 1 };
    // Only same-signed candidates can beat zero; scan the whole range.
    for exp in p.p_min..=p.p_max {
        let mag = pow2(exp);
        let dist = (x.abs() - mag).abs();
        if dist < best_dist || (dist == best_dist && mag < best_mag) {
            best = Pow2Value::NonZero { sign, exp };
            best_dist = dist;
            best_mag = mag;
        }
    }
    best
}

/// Grid of power-of-2 values with the zero pattern doubling as the sparsity
/// mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pow2Matrix {
    rows: usize,
    cols: usize,
    data: Vec<Pow2Value>,
}

impl Pow2Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Pow2Matrix { rows, cols, data: vec![Pow2Value::Zero; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Pow2Value>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Pow2Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[Pow2Value] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Pow2Value {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: Pow2Value) {
        self.data[i * self.cols + j] = v;
    }

    /// Materialize numeric values (exact).
    pub fn to_mat(&self) -> Mat {
        Mat::from_vec(self.rows, self.cols, self.data.iter().map(|v| v.value()).collect())
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|v| !v.is_zero()).count()
    }

    /// Fraction of zero entries.
    pub fn sparsity(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        1.0 - self.count_nonzero() as f64 / self.data.len() as f64
    }

    /// Every non-zero exponent lies inside `p`.
    pub fn is_feasible(&self, p: ExponentSet) -> bool {
        self.data.iter().all(|v| match v {
            Pow2Value::Zero => true,
            Pow2Value::NonZero { exp, .. } => p.contains(*exp),
        })
    }

    pub fn count_nonzero_rows(&self) -> usize {
        (0..self.rows)
            .filter(|&i| (0..self.cols).any(|j| !self.get(i, j).is_zero()))
            .count()
    }
}

/// Normalize each column of `c` to unit Euclidean norm and project every
/// entry onto the power-of-2 set. Returns the quantized matrix and the
/// column scales; the caller folds `scales[j]` into row `j` of the basis so
/// the product is preserved up to rounding. All-zero columns get scale 1.
pub fn normalize_and_quantize_columns(c: &Mat, p: ExponentSet) -> (Pow2Matrix, Vec<f64>) {
    let (m, r) = (c.rows(), c.cols());
    let mut scales = vec![1.0; r];
    for j in 0..r {
        let norm = (0..m).map(|i| c.get(i, j) * c.get(i, j)).sum::<f64>().sqrt();
        if norm > 0.0 {
            scales[j] = norm;
        }
    }
    let mut q = Pow2Matrix::zeros(m, r);
    for i in 0..m {
        for j in 0..r {
            q.set(i, j, nearest_pow2(c.get(i, j) / scales[j], p));
        }
    }
    (q, scales)
}

/// 8-bit symmetric fixed-point matrix: value = `q * delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointMatrix {
    rows: usize,
    cols: usize,
    q: Vec<i8>,
    delta: f32,
}

impl FixedPointMatrix {
    pub fn new(rows: usize, cols: usize, q: Vec<i8>, delta: f32) -> Self {
        assert_eq!(q.len(), rows * cols);
        assert!(delta > 0.0);
        FixedPointMatrix { rows, cols, q, delta }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn q(&self) -> &[i8] {
        &self.q
    }

    pub fn delta(&self) -> f32 {
        self.delta
    }
}

/// Quantize a finite real matrix to 8-bit fixed point with per-matrix scale
/// `delta = max|B| / 127` (1.0 for an all-zero matrix). Rounding is
/// half-away-from-zero, clamped to [-127, 127].
pub fn quantize_basis(b: &Mat) -> FixedPointMatrix {
    let max_abs = b.max_abs();
    // The scale is carried as f32 on the wire; quantize against the stored
    // value so encode/decode is self-consistent.
    let delta = if max_abs == 0.0 { 1.0_f32 } else { (max_abs / 127.0) as f32 };
    let delta_f64 = f64::from(delta);
    let q = b
        .data()
        .iter()
        .map(|&v| {
            let scaled = (v / delta_f64).round();
            scaled.clamp(-127.0, 127.0) as i8
        })
        .collect();
    FixedPointMatrix::new(b.rows(), b.cols(), q, delta)
}

/// Elementwise `q * delta`.
pub fn dequantize_basis(f: &FixedPointMatrix) -> Mat {
    let delta = f64::from(f.delta());
    Mat::from_vec(f.rows(), f.cols(), f.q().iter().map(|&q| f64::from(q) * delta).collect())
}

/// Errors from exponent-set construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QuantError {
    EmptyExponentRange { p_min: i32, p_max: i32 },
    ExponentRangeTooWide { p_min: i32, p_max: i32 },
}

impl std::fmt::Display for QuantError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            QuantError::EmptyExponentRange { p_min, p_max } => {
                write!(f, "empty exponent range: p_min {p_min} > p_max {p_max}")
            }
            QuantError::ExponentRangeTooWide { p_min, p_max } => {
                write!(f, "exponent range [{p_min}, {p_max}] unsupported (max 16 exponents in [-126, 126])")
            }
        }
    }
}

impl std::error::Error for QuantError {}
