//! Mapping between weight tensors and the 2-D matrices the decomposition
//! operates on, and its exact inverse.
//!
//! FC rows of width `C` become `ceil(C/S) x S` matrices (zero-padded tail);
//! conv filters of shape `(C, S, S)` become `(S*C) x S` matrices. Tall
//! matrices are sliced along the first dimension into blocks of at most
//! `block_rows` rows to keep the least-squares systems small. Every non-pad
//! cell of every emitted matrix maps to exactly one source cell.

use std::collections::HashSet;
use std::fmt;

use crate::mat::Mat;
use crate::tensor_io::{IoError, TensorKind, WeightTensor};

/// Basis width used for FC layers (and 1x1 conv layers) unless configured.
pub const DEFAULT_FC_BASIS_WIDTH: usize = 3;
/// Default slice height for tall reshaped matrices.
pub const DEFAULT_BLOCK_ROWS: usize = 64;

/// Where a reshaped block came from, sufficient to put it back exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub tensor: String,
    pub kind: TensorKind,
    /// Original tensor shape.
    pub shape: Vec<usize>,
    /// Filter index (conv) or row index (FC).
    pub filter: usize,
    /// Block index within this filter's full matrix.
    pub block: usize,
    /// First row of this block within the full per-filter matrix.
    pub row_offset: usize,
    /// Row count of the full per-filter matrix.
    pub total_rows: usize,
    /// Zero-pad cells in this block (tail of the final row; < n).
    pub pad: usize,
}

/// One `m x n` slice of a reshaped tensor, with enough provenance to invert
/// the mapping exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ReshapedMatrix {
    pub values: Mat,
    pub provenance: Provenance,
}

impl ReshapedMatrix {
    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    /// Basis width (matrix column count).
    pub fn n(&self) -> usize {
        self.values.cols()
    }

    /// Flat cell indices (into the m x n block) that are padding.
    pub fn pad_cells(&self) -> Vec<usize> {
        let (m, n, pad) = (self.rows(), self.n(), self.provenance.pad);
        (0..pad).map(|k| m * n - 1 - k).collect()
    }
}

/// Reshape an FC weight `[M, C]` into per-row `ceil(C/S) x S` matrices,
/// sliced into blocks of at most `block_rows` rows.
pub fn reshape_dense(
    w: &WeightTensor,
    s: usize,
    block_rows: usize,
) -> Result<Vec<ReshapedMatrix>, ReshapeError> {
    if w.kind != TensorKind::Dense2d {
        return Err(ReshapeError::UnsupportedShape(format!(
            "reshape_dense requires dense2d, got {:?}",
            w.kind
        )));
    }
    let (m, c) = (w.shape[0], w.shape[1]);
    reshape_rows(&w.name, w.kind, &w.shape, m, c, &w.data, s, block_rows)
}

/// Reshape a conv weight `[M, C, R, S]` (square kernels). For `S > 1` each
/// filter becomes an `(S*C) x S` matrix; `S = 1` layers take the FC path on
/// the `[M, C]` view with the default FC basis width.
pub fn reshape_conv(
    w: &WeightTensor,
    block_rows: usize,
) -> Result<Vec<ReshapedMatrix>, ReshapeError> {
    reshape_conv_with(w, block_rows, DEFAULT_FC_BASIS_WIDTH)
}

/// [`reshape_conv`] with an explicit basis width for the 1x1 (FC) path.
pub fn reshape_conv_with(
    w: &WeightTensor,
    block_rows: usize,
    fc_s: usize,
) -> Result<Vec<ReshapedMatrix>, ReshapeError> {
    if w.kind != TensorKind::Conv4d {
        return Err(ReshapeError::UnsupportedShape(format!(
            "reshape_conv requires conv4d, got {:?}",
            w.kind
        )));
    }
    let (m, c, r, s) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    if r != s {
        return Err(ReshapeError::UnsupportedShape(format!(
            "non-square kernel R={r} S={s} in '{}'",
            w.name
        )));
    }
    if s == 1 {
        // The [M, C, 1, 1] view is already the flat [M, C] layout.
        return reshape_rows(&w.name, w.kind, &w.shape, m, c, &w.data, fc_s, block_rows);
    }
    if block_rows == 0 {
        return Err(ReshapeError::Parameter("block_rows must be positive".into()));
    }
    let total_rows = s * c;
    let mut out = Vec::new();
    for filter in 0..m {
        let base = filter * c * r * s;
        let mut row_offset = 0;
        let mut block = 0;
        while row_offset < total_rows {
            let rows = block_rows.min(total_rows - row_offset);
            let mut values = Mat::zeros(rows, s);
            for local in 0..rows {
                let row = row_offset + local;
                let (ci, ri) = (row / r, row % r);
                for sj in 0..s {
                    values.set(local, sj, f64::from(w.data[base + (ci * r + ri) * s + sj]));
                }
            }
            out.push(ReshapedMatrix {
                values,
                provenance: Provenance {
                    tensor: w.name.clone(),
                    kind: w.kind,
                    shape: w.shape.clone(),
                    filter,
                    block,
                    row_offset,
                    total_rows,
                    pad: 0,
                },
            });
            row_offset += rows;
            block += 1;
        }
    }
    Ok(out)
}

/// Shared row-slicing path for FC layers and 1x1 conv layers.
fn reshape_rows(
    name: &str,
    kind: TensorKind,
    shape: &[usize],
    m: usize,
    c: usize,
    data: &[f32],
    s: usize,
    block_rows: usize,
) -> Result<Vec<ReshapedMatrix>, ReshapeError> {
    if s == 0 {
        return Err(ReshapeError::Parameter("basis width S must be positive".into()));
    }
    if block_rows == 0 {
        return Err(ReshapeError::Parameter("block_rows must be positive".into()));
    }
    let total_rows = c.div_ceil(s);
    let pad_total = total_rows * s - c;
    let mut out = Vec::new();
    for filter in 0..m {
        let mut row_offset = 0;
        let mut block = 0;
        while row_offset < total_rows {
            let rows = block_rows.min(total_rows - row_offset);
            let is_last = row_offset + rows == total_rows;
            let mut values = Mat::zeros(rows, s);
            for local in 0..rows {
                for sj in 0..s {
                    let col = (row_offset + local) * s + sj;
                    if col < c {
                        values.set(local, sj, f64::from(data[filter * c + col]));
                    }
                }
            }
            out.push(ReshapedMatrix {
                values,
                provenance: Provenance {
                    tensor: name.to_string(),
                    kind,
                    shape: shape.to_vec(),
                    filter,
                    block,
                    row_offset,
                    total_rows,
                    pad: if is_last { pad_total } else { 0 },
                },
            });
            row_offset += rows;
            block += 1;
        }
    }
    Ok(out)
}

/// Reassemble one tensor from its reshaped blocks, dropping padded cells.
/// Every source cell must be covered exactly once.
pub fn inverse_reshape(mats: &[ReshapedMatrix]) -> Result<WeightTensor, ReshapeError> {
    let (name, kind, shape, values) = assemble_f64(mats)?;
    let data: Vec<f32> = values.iter().map(|&v| v as f32).collect();
    WeightTensor::new(name, kind, shape, data).map_err(|e| ReshapeError::Assembly(e.to_string()))
}

/// Reassemble a dense2d group as an f64 matrix without the f32 cast, for
/// exact forward evaluation.
pub fn inverse_reshape_mat(mats: &[ReshapedMatrix]) -> Result<Mat, ReshapeError> {
    let (name, kind, shape, values) = assemble_f64(mats)?;
    if kind != TensorKind::Dense2d {
        return Err(ReshapeError::Assembly(format!(
            "'{name}' is not a dense2d tensor; cannot view as a matrix"
        )));
    }
    Ok(Mat::from_vec(shape[0], shape[1], values))
}

fn assemble_f64(
    mats: &[ReshapedMatrix],
) -> Result<(String, TensorKind, Vec<usize>, Vec<f64>), ReshapeError> {
    let first = mats
        .first()
        .ok_or_else(|| ReshapeError::Assembly("no blocks to assemble".into()))?;
    let (name, kind, shape) =
        (&first.provenance.tensor, first.provenance.kind, first.provenance.shape.clone());
    let count: usize = shape.iter().product();
    let mut data = vec![0.0_f64; count];
    let mut covered = vec![false; count];
    let mut seen_blocks = HashSet::new();

    for mat in mats {
        let p = &mat.provenance;
        if p.tensor != *name || p.kind != kind || p.shape != shape {
            return Err(ReshapeError::Assembly(format!(
                "blocks from different tensors: '{}' vs '{}'",
                p.tensor, name
            )));
        }
        if !seen_blocks.insert((p.filter, p.block)) {
            return Err(ReshapeError::Assembly(format!(
                "duplicate block {} of filter {} in '{}'",
                p.block, p.filter, name
            )));
        }
        let n = mat.n();
        for local in 0..mat.rows() {
            let row = p.row_offset + local;
            for sj in 0..n {
                let idx = match source_index(kind, &shape, n, p.filter, row, sj) {
                    Some(i) => i,
                    None => continue, // padded cell; dropped
                };
                if covered[idx] {
                    return Err(ReshapeError::Assembly(format!(
                        "cell {idx} of '{name}' covered twice"
                    )));
                }
                covered[idx] = true;
                data[idx] = mat.values.get(local, sj);
            }
        }
    }
    if let Some(gap) = covered.iter().position(|c| !c) {
        return Err(ReshapeError::Assembly(format!(
            "incomplete coverage of '{name}': cell {gap} missing"
        )));
    }
    Ok((name.clone(), kind, shape, data))
}

/// Flat source index of block cell `(row, col)` of `filter`, or `None` for
/// padding.
fn source_index(
    kind: TensorKind,
    shape: &[usize],
    n: usize,
    filter: usize,
    row: usize,
    col: usize,
) -> Option<usize> {
    match kind {
        TensorKind::Dense2d => {
            let c = shape[1];
            let src = row * n + col;
            (src < c).then_some(filter * c + src)
        }
        TensorKind::Conv4d => {
            let (c, r, s) = (shape[1], shape[2], shape[3]);
            if s == 1 {
                // FC path over the [M, C] view.
                let src = row * n + col;
                (src < c).then_some(filter * c + src)
            } else {
                let (ci, ri) = (row / r, row % r);
                Some(((filter * c + ci) * r + ri) * s + col)
            }
        }
    }
}

/// Errors from reshape and reassembly.
#[derive(Debug)]
pub enum ReshapeError {
    Parameter(String),
    UnsupportedShape(String),
    Assembly(String),
}

impl fmt::Display for ReshapeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReshapeError::Parameter(m) => write!(f, "parameter error: {m}"),
            ReshapeError::UnsupportedShape(m) => write!(f, "unsupported shape: {m}"),
            ReshapeError::Assembly(m) => write!(f, "assembly error: {m}"),
        }
    }
}

impl std::error::Error for ReshapeError {}

impl From<IoError> for ReshapeError {
    fn from(e: IoError) -> Self {
        ReshapeError::Assembly(e.to_string())
    }
}
