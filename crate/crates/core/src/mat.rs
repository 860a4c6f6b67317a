//! Minimal dense row-major matrix with the few operations the
//! decomposition and training loops need.
//!
//! All solves go through Gaussian elimination with partial pivoting on
//! small systems (the normal equations are `r x r` with `r` = basis width,
//! typically 3), so results are bit-deterministic regardless of thread
//! count or BLAS backend.

use std::fmt;

/// Dense `rows x cols` matrix of `f64`, row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn eye(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    /// Build from row-major data. Panics if the length does not match.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must equal rows*cols");
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    /// `self * other`, accumulating in index order for determinism.
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut sum = 0.0;
                for k in 0..self.cols {
                    sum += self.get(i, k) * other.get(k, j);
                }
                out.set(i, j, sum);
            }
        }
        out
    }

    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Mat { rows: self.rows, cols: self.cols, data }
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Mat { rows: self.rows, cols: self.cols, data }
    }

    pub fn scale(&self, s: f64) -> Mat {
        let data = self.data.iter().map(|a| a * s).collect();
        Mat { rows: self.rows, cols: self.cols, data }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Solve `A x = b` for square `A` (consumed as a copy) and multi-column
    /// `b`, via Gaussian elimination with partial pivoting. Pivot order is a
    /// pure function of the input, so the result is deterministic.
    pub fn solve(a: &Mat, b: &Mat) -> Result<Mat, SingularMatrix> {
        assert_eq!(a.rows, a.cols, "solve requires a square system");
        assert_eq!(a.rows, b.rows, "rhs row count must match");
        let n = a.rows;
        let nrhs = b.cols;
        let mut lhs = a.data.clone();
        let mut rhs = b.data.clone();

        for col in 0..n {
            // Partial pivot: largest |entry| in this column, lowest row on ties.
            let mut pivot_row = col;
            let mut pivot_val = lhs[col * n + col].abs();
            for r in (col + 1)..n {
                let v = lhs[r * n + col].abs();
                if v > pivot_val {
                    pivot_val = v;
                    pivot_row = r;
                }
            }
            if pivot_val == 0.0 {
                return Err(SingularMatrix { column: col });
            }
            if pivot_row != col {
                for j in 0..n {
                    lhs.swap(col * n + j, pivot_row * n + j);
                }
                for j in 0..nrhs {
                    rhs.swap(col * nrhs + j, pivot_row * nrhs + j);
                }
            }
            let pivot = lhs[col * n + col];
            for r in (col + 1)..n {
                let factor = lhs[r * n + col] / pivot;
                if factor == 0.0 {
                    continue;
                }
                lhs[r * n + col] = 0.0;
                for j in (col + 1)..n {
                    lhs[r * n + j] -= factor * lhs[col * n + j];
                }
                for j in 0..nrhs {
                    rhs[r * nrhs + j] -= factor * rhs[col * nrhs + j];
                }
            }
        }

        // Back substitution.
        let mut x = vec![0.0; n * nrhs];
        for col in 0..nrhs {
            for i in (0..n).rev() {
                let mut sum = rhs[i * nrhs + col];
                for j in (i + 1)..n {
                    sum -= lhs[i * n + j] * x[j * nrhs + col];
                }
                x[i * nrhs + col] = sum / lhs[i * n + i];
            }
        }
        Ok(Mat::from_vec(n, nrhs, x))
    }
}

/// Exactly singular system (zero pivot column) encountered during a solve.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SingularMatrix {
    pub column: usize,
}

impl fmt::Display for SingularMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "singular system: zero pivot at column {}", self.column)
    }
}

impl std::error::Error for SingularMatrix {}
