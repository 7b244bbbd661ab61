//! Dense row-major `f64` matrices and the handful of kernels the transformer
//! needs, plus a central-difference gradient checker.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const GRAD_CHECK_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("data length {len} does not match {rows}x{cols}")]
    Length { rows: usize, cols: usize, len: usize },
    #[error("non-finite value at coordinate {0}")]
    NonFinite(usize),
}

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Build from row-major data, rejecting wrong lengths and non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::Length {
                rows,
                cols,
                len: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite(i));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Build from nested rows; panics on ragged input. Intended for fixtures.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    /// Entries drawn i.i.d. from N(0, std²).
    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same(&self, other: &Matrix, op: &'static str) -> Result<(), NumericsError> {
        if self.shape() != other.shape() {
            return Err(NumericsError::Shape {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, NumericsError> {
        if self.cols != other.rows {
            return Err(NumericsError::Shape {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let o_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix, NumericsError> {
        if self.cols != other.cols {
            return Err(NumericsError::Shape {
                op: "matmul_t",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix, NumericsError> {
        if self.rows != other.rows {
            return Err(NumericsError::Shape {
                op: "t_matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let a_row = self.row(r);
            let b_row = other.row(r);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix, NumericsError> {
        self.check_same(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<(), NumericsError> {
        self.check_same(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, k: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * k).collect(),
        }
    }

    pub fn scale_assign(&mut self, k: f64) {
        for v in &mut self.data {
            *v *= k;
        }
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix, NumericsError> {
        self.check_same(other, "hadamard")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Columns `[start, start + width)` as a new matrix.
    pub fn column_block(&self, start: usize, width: usize) -> Matrix {
        assert!(start + width <= self.cols, "column block out of range");
        let mut out = Matrix::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + width]);
        }
        out
    }

    /// Write `block` into columns starting at `start`.
    pub fn set_column_block(&mut self, start: usize, block: &Matrix) {
        assert_eq!(block.rows, self.rows, "row count mismatch");
        assert!(start + block.cols <= self.cols, "column block out of range");
        for r in 0..self.rows {
            let w = block.cols;
            self.row_mut(r)[start..start + w].copy_from_slice(block.row(r));
        }
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Backward of row softmax: given `p = softmax(s)` and `dL/dp`, return `dL/ds`.
pub fn softmax_rows_backward(p: &Matrix, dp: &Matrix) -> Matrix {
    let mut ds = Matrix::zeros(p.rows, p.cols);
    for r in 0..p.rows {
        let pr = p.row(r);
        let dpr = dp.row(r);
        let inner = dot(pr, dpr);
        for (c, d) in ds.row_mut(r).iter_mut().enumerate() {
            *d = pr[c] * (dpr[c] - inner);
        }
    }
    ds
}

/// Intermediate values of a layer-norm forward pass needed by its backward.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    /// Standardized input before gain and bias.
    pub normalized: Matrix,
    /// `1 / sqrt(var + eps)` per row.
    pub inv_std: Vec<f64>,
}

/// Standardize each row (population variance), then apply `gain` and `bias`.
pub fn layer_norm(m: &Matrix, gain: &[f64], bias: &[f64], eps: f64) -> Result<Matrix, NumericsError> {
    layer_norm_with_cache(m, gain, bias, eps).map(|(out, _)| out)
}

pub fn layer_norm_with_cache(
    m: &Matrix,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> Result<(Matrix, LayerNormCache), NumericsError> {
    if gain.len() != m.cols || bias.len() != m.cols {
        return Err(NumericsError::Shape {
            op: "layer_norm",
            left: m.shape(),
            right: (gain.len(), bias.len()),
        });
    }
    let n = m.cols as f64;
    let mut normalized = Matrix::zeros(m.rows, m.cols);
    let mut out = Matrix::zeros(m.rows, m.cols);
    let mut inv_std = Vec::with_capacity(m.rows);
    for r in 0..m.rows {
        let row = m.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std.push(inv);
        for c in 0..m.cols {
            let xhat = (row[c] - mean) * inv;
            normalized[(r, c)] = xhat;
            out[(r, c)] = xhat * gain[c] + bias[c];
        }
    }
    Ok((out, LayerNormCache { normalized, inv_std }))
}

/// Gradients of a layer-norm: `(d_input, d_gain, d_bias)`.
pub fn layer_norm_backward(cache: &LayerNormCache, gain: &[f64], d_out: &Matrix) -> (Matrix, Vec<f64>, Vec<f64>) {
    let (rows, cols) = d_out.shape();
    let n = cols as f64;
    let mut d_in = Matrix::zeros(rows, cols);
    let mut d_gain = vec![0.0; cols];
    let mut d_bias = vec![0.0; cols];
    let mut d_norm = vec![0.0; cols];
    for r in 0..rows {
        let xhat = cache.normalized.row(r);
        let dy = d_out.row(r);
        for c in 0..cols {
            d_gain[c] += dy[c] * xhat[c];
            d_bias[c] += dy[c];
            d_norm[c] = dy[c] * gain[c];
        }
        let sum_d: f64 = d_norm.iter().sum();
        let sum_dx: f64 = dot(&d_norm, xhat);
        let inv = cache.inv_std[r];
        for (c, d) in d_in.row_mut(r).iter_mut().enumerate() {
            *d = inv / n * (n * d_norm[c] - sum_d - xhat[c] * sum_dx);
        }
    }
    (d_in, d_gain, d_bias)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GradCheckError {
    #[error("gradient has {got} coordinates, point has {expected}")]
    Length { expected: usize, got: usize },
    #[error("step must be positive, got {0}")]
    Step(f64),
    #[error("objective is not finite near coordinate {0}")]
    NonFinite(usize),
}

/// Compare an analytic gradient against central differences.
///
/// Returns the maximum over coordinates of
/// `|a - n| / max(1e-8, |a| + |n|)` where `n = (f(x + h eᵢ) - f(x - h eᵢ)) / 2h`.
pub fn grad_check<F>(mut f: F, analytic: &[f64], point: &[f64], h: f64) -> Result<f64, GradCheckError>
where
    F: FnMut(&[f64]) -> f64,
{
    if analytic.len() != point.len() {
        return Err(GradCheckError::Length {
            expected: point.len(),
            got: analytic.len(),
        });
    }
    if h.is_nan() || h <= 0.0 {
        return Err(GradCheckError::Step(h));
    }
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(&x);
        x[i] = orig - h;
        let minus = f(&x);
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(GradCheckError::NonFinite(i));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_examples() {
        for x in [-1e300, -3.5, 0.0, 7.0, 1e300] {
            assert_eq!(softmax_rows(&Matrix::from_rows(&[&[x]])).data(), &[1.0]);
        }
        let u = softmax_rows(&Matrix::from_rows(&[&[2.5, 2.5, 2.5, 2.5]]));
        assert!(u.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
        let p = softmax_rows(&Matrix::from_rows(&[&[0.0, 3f64.ln()]]));
        assert!((p[(0, 0)] - 0.25).abs() < 1e-15);
        assert!((p[(0, 1)] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_examples() {
        let constant = Matrix::from_rows(&[&[3.0, 3.0, 3.0]]);
        let out = layer_norm(&constant, &[1.0; 3], &[0.0; 3], LAYER_NORM_EPS).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        let pm = Matrix::from_rows(&[&[1.0, -1.0]]);
        let out = layer_norm(&pm, &[1.0; 2], &[0.0; 2], 1e-15).unwrap();
        assert!((out[(0, 0)] - 1.0).abs() < 1e-12 && (out[(0, 1)] + 1.0).abs() < 1e-12);

        assert!(matches!(
            layer_norm(&pm, &[1.0; 3], &[0.0; 2], 1e-5),
            Err(NumericsError::Shape { .. })
        ));
    }

    #[test]
    fn layer_norm_matches_scalar_oracle() {
        let m = Matrix::from_rows(&[&[1.0, 2.0, 4.0], &[-3.0, 0.5, 0.25]]);
        let gain = [0.5, -1.0, 2.0];
        let bias = [0.1, 0.0, -0.2];
        let out = layer_norm(&m, &gain, &bias, 1e-5).unwrap();
        // Scalar reference: explicit mean, population variance, affine.
        for r in 0..2 {
            let row = m.row(r);
            let mean = (row[0] + row[1] + row[2]) / 3.0;
            let var = ((row[0] - mean).powi(2) + (row[1] - mean).powi(2) + (row[2] - mean).powi(2)) / 3.0;
            for c in 0..3 {
                let want = (row[c] - mean) / (var + 1e-5).sqrt() * gain[c] + bias[c];
                assert!((out[(r, c)] - want).abs() < 1e-14);
            }
        }
        // Row 0: mean 7/3, var 14/9.
        let want00 = (1.0 - 7.0 / 3.0) / (14.0f64 / 9.0 + 1e-5).sqrt() * 0.5 + 0.1;
        assert!((out[(0, 0)] - want00).abs() < 1e-14);
    }

    #[test]
    fn grad_check_examples() {
        let err = grad_check(|x| x[0] * x[0], &[6.0], &[3.0], 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
        assert_eq!(grad_check(|_| 4.2, &[0.0, 0.0], &[1.0, 2.0], 1e-5).unwrap(), 0.0);
        assert!(matches!(
            grad_check(|x| x[0].ln(), &[1.0], &[0.0], 1e-5),
            Err(GradCheckError::NonFinite(0))
        ));
        assert!(grad_check(|x| x[0], &[1.0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Matrix::random_normal(3, 5, 1.0, &mut rng);
        let gain: Vec<f64> = (0..5).map(|i| 0.5 + 0.1 * i as f64).collect();
        let bias = vec![0.3; 5];
        let w = Matrix::random_normal(3, 5, 1.0, &mut rng);
        let loss = |x: &Matrix, g: &[f64], b: &[f64]| {
            let y = layer_norm(x, g, b, 1e-5).unwrap();
            dot(y.data(), w.data())
        };
        let (_, cache) = layer_norm_with_cache(&x, &gain, &bias, 1e-5).unwrap();
        let (dx, dg, db) = layer_norm_backward(&cache, &gain, &w);
        let err = grad_check(
            |p| loss(&Matrix::from_vec(3, 5, p.to_vec()).unwrap(), &gain, &bias),
            dx.data(),
            x.data(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "dx {err}");
        let err = grad_check(|p| loss(&x, p, &bias), &dg, &gain, 1e-5).unwrap();
        assert!(err < 1e-6, "dgain {err}");
        let err = grad_check(|p| loss(&x, &gain, p), &db, &bias, 1e-5).unwrap();
        assert!(err < 1e-6, "dbias {err}");
    }

    #[test]
    fn softmax_and_gelu_derivatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = Matrix::random_normal(2, 4, 1.0, &mut rng);
        let w = Matrix::random_normal(2, 4, 1.0, &mut rng);
        let p = softmax_rows(&s);
        let ds = softmax_rows_backward(&p, &w);
        let err = grad_check(
            |v| dot(softmax_rows(&Matrix::from_vec(2, 4, v.to_vec()).unwrap()).data(), w.data()),
            ds.data(),
            s.data(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
        for x in [-3.0, -0.7, 0.0, 0.4, 2.5] {
            let err = grad_check(|v| gelu(v[0]), &[gelu_derivative(x)], &[x], 1e-5).unwrap();
            assert!(err < 1e-7, "gelu' at {x}: {err}");
        }
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Matrix::random_normal(3, 4, 1.0, &mut rng);
        let b = Matrix::random_normal(5, 4, 1.0, &mut rng);
        let direct = a.matmul(&b.transpose()).unwrap();
        assert!(direct.max_abs_diff(&a.matmul_t(&b).unwrap()) < 1e-14);
        let c = Matrix::random_normal(3, 2, 1.0, &mut rng);
        assert!(a.transpose().matmul(&c).unwrap().max_abs_diff(&a.t_matmul(&c).unwrap()) < 1e-14);
        assert!(a.matmul(&c).is_err());
        assert_eq!(Matrix::identity(3).matmul(&c).unwrap(), c);
    }

    #[test]
    fn from_vec_validates() {
        assert!(Matrix::from_vec(2, 2, vec![0.0; 3]).is_err());
        assert_eq!(
            Matrix::from_vec(1, 2, vec![0.0, f64::NAN]),
            Err(NumericsError::NonFinite(1))
        );
    }

    #[test]
    fn logistic_is_stable() {
        assert_eq!(logistic(0.0), 0.5);
        assert!(logistic(-800.0) >= 0.0 && logistic(800.0) == 1.0);
        assert!((logistic(2.0) + logistic(-2.0) - 1.0).abs() < 1e-15);
    }

    fn matrix(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = Matrix> {
        prop::collection::vec(-1.0..1.0f64, rows * cols)
            .prop_map(move |v| Matrix::from_vec(rows, cols, v.into_iter().map(|x| x * scale).collect()).unwrap())
    }

    proptest! {
        #[test]
        fn softmax_rows_normalize(m in (1usize..6, 1usize..8).prop_flat_map(|(r, c)| matrix(r, c, 1e3))) {
            let p = softmax_rows(&m);
            for r in 0..p.rows() {
                let s: f64 = p.row(r).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                prop_assert!(p.row(r).iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn softmax_shift_invariant(m in matrix(3, 5, 10.0), k in -50.0..50.0f64) {
            let shifted = m.map(|v| v + k);
            prop_assert!(softmax_rows(&m).max_abs_diff(&softmax_rows(&shifted)) < 1e-12);
        }

        #[test]
        fn layer_norm_standardizes(m in matrix(4, 6, 5.0)) {
            let strict = layer_norm(&m, &[1.0; 6], &[0.0; 6], 1e-12).unwrap();
            let default = layer_norm(&m, &[1.0; 6], &[0.0; 6], LAYER_NORM_EPS).unwrap();
            for r in 0..4 {
                let row = m.row(r);
                let mean_in = row.iter().sum::<f64>() / 6.0;
                let var_in = row.iter().map(|v| (v - mean_in).powi(2)).sum::<f64>() / 6.0;
                prop_assume!(var_in > 1e-4);
                let stats = |o: &[f64]| {
                    let mean = o.iter().sum::<f64>() / 6.0;
                    (mean, o.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0)
                };
                let (mean, var) = stats(strict.row(r));
                prop_assert!(mean.abs() < 1e-10);
                prop_assert!((var - 1.0).abs() < 1e-6);
                // With a non-negligible eps the variance is var / (var + eps).
                let (mean, var) = stats(default.row(r));
                prop_assert!(mean.abs() < 1e-10);
                prop_assert!((var - var_in / (var_in + LAYER_NORM_EPS)).abs() < 1e-10);
            }
        }

        #[test]
        fn matmul_associative(a in matrix(3, 4, 1.0), b in matrix(4, 2, 1.0), c in matrix(2, 5, 1.0)) {
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
            prop_assert!(left.max_abs_diff(&right) / scale < 1e-9);
        }
    }
}
