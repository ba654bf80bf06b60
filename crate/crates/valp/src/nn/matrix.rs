use super::NnError;
use std::fmt;

/// Row-major matrix of 64-bit reals.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Square identity.
    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "matrix data length {} does not match {}x{}",
            data.len(),
            rows,
            cols
        );
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn shape_err(op: &'static str, expected: String, got: String) -> NnError {
        NnError::Shape { op, expected, got }
    }

    /// `self · rhs`, ikj loop order.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix, NnError> {
        if self.cols != rhs.rows {
            return Err(Self::shape_err(
                "matmul",
                format!("lhs cols == rhs rows ({})", self.cols),
                format!("{}x{} · {}x{}", self.rows, self.cols, rhs.rows, rhs.cols),
            ));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · rhs` without materializing the transpose.
    pub fn tr_matmul(&self, rhs: &Matrix) -> Result<Matrix, NnError> {
        if self.rows != rhs.rows {
            return Err(Self::shape_err(
                "tr_matmul",
                format!("lhs rows == rhs rows ({})", self.rows),
                format!("{}x{} ᵀ· {}x{}", self.rows, self.cols, rhs.rows, rhs.cols),
            ));
        }
        let mut out = Matrix::zeros(self.cols, rhs.cols);
        for k in 0..self.rows {
            for i in 0..self.cols {
                let a = self.data[k * self.cols + i];
                if a == 0.0 {
                    continue;
                }
                let brow = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                let orow = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · rhsᵀ`.
    pub fn matmul_tr(&self, rhs: &Matrix) -> Result<Matrix, NnError> {
        if self.cols != rhs.cols {
            return Err(Self::shape_err(
                "matmul_tr",
                format!("lhs cols == rhs cols ({})", self.cols),
                format!("{}x{} · {}x{}ᵀ", self.rows, self.cols, rhs.rows, rhs.cols),
            ));
        }
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let arow = &self.data[i * self.cols..(i + 1) * self.cols];
            for j in 0..rhs.rows {
                let brow = &rhs.data[j * rhs.cols..(j + 1) * rhs.cols];
                let mut s = 0.0;
                for (&a, &b) in arow.iter().zip(brow) {
                    s += a * b;
                }
                out.data[i * rhs.rows + j] = s;
            }
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<(), NnError> {
        if self.shape() != other.shape() {
            return Err(Self::shape_err(
                "add_assign",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn map<F: Fn(f64) -> f64>(&self, f: F) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Broadcast-add a row vector to every row.
    pub fn add_row_broadcast(&mut self, bias: &[f64]) -> Result<(), NnError> {
        if bias.len() != self.cols {
            return Err(Self::shape_err(
                "add_row_broadcast",
                format!("bias len {}", self.cols),
                format!("{}", bias.len()),
            ));
        }
        for r in 0..self.rows {
            for (v, &b) in self.row_mut(r).iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(())
    }

    /// Horizontal concatenation; all parts must share the row count.
    pub fn concat_cols(parts: &[&Matrix]) -> Result<Matrix, NnError> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = parts[0].rows;
        for p in parts {
            if p.rows != rows {
                return Err(Self::shape_err(
                    "concat_cols",
                    format!("{rows} rows"),
                    format!("{} rows", p.rows),
                ));
            }
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut at = 0;
            for p in parts {
                out.data[r * cols + at..r * cols + at + p.cols].copy_from_slice(p.row(r));
                at += p.cols;
            }
        }
        Ok(out)
    }

    /// Split columns into consecutive blocks of the given widths.
    pub fn split_cols(&self, widths: &[usize]) -> Result<Vec<Matrix>, NnError> {
        let total: usize = widths.iter().sum();
        if total != self.cols {
            return Err(Self::shape_err(
                "split_cols",
                format!("widths summing to {}", self.cols),
                format!("{total}"),
            ));
        }
        let mut out = Vec::with_capacity(widths.len());
        let mut at = 0;
        for &w in widths {
            let mut part = Matrix::zeros(self.rows, w);
            for r in 0..self.rows {
                part.data[r * w..(r + 1) * w]
                    .copy_from_slice(&self.data[r * self.cols + at..r * self.cols + at + w]);
            }
            out.push(part);
            at += w;
        }
        Ok(out)
    }

    /// New matrix from a subset of this one's rows (gather, duplicates allowed).
    pub fn gather_rows(&self, indices: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(indices.len(), self.cols);
        for (i, &src) in indices.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.row(src));
        }
        out
    }

    /// Sum of squared entries of (self - other), divided by the entry count.
    pub fn mean_sq_diff(&self, other: &Matrix) -> Result<f64, NnError> {
        if self.shape() != other.shape() {
            return Err(Self::shape_err(
                "mean_sq_diff",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        let mut s = 0.0;
        for (a, b) in self.data.iter().zip(&other.data) {
            let d = a - b;
            s += d * d;
        }
        Ok(s / self.data.len() as f64)
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        if self.rows * self.cols <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}
