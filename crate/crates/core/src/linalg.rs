//! Dense row-major kernels with exact backward passes.

use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("matrix data", rows * cols, data.len()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::dim("matrix row", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn row_vector(data: &[f64]) -> Self {
        Matrix {
            rows: 1,
            cols: data.len(),
            data: data.to_vec(),
        }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self * rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::dim("matmul inner", self.cols, rhs.rows));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self^T * rhs`.
    pub fn t_matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows {
            return Err(Error::dim("t_matmul rows", self.rows, rhs.rows));
        }
        let mut out = Matrix::zeros(self.cols, rhs.cols);
        for k in 0..self.rows {
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * rhs^T`.
    pub fn matmul_t(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(Error::dim("matmul_t inner", self.cols, rhs.cols));
        }
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            for j in 0..rhs.rows {
                out.data[i * rhs.rows + j] = dot(self.row(i), rhs.row(j));
            }
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape());
        axpy(1.0, &other.data, &mut self.data);
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`.
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[derive(Debug, Clone)]
pub struct LnCache {
    pub xhat: Matrix,
    pub inv_std: Vec<f64>,
}

/// Row-wise layer normalisation with learnable affine.
pub fn layer_norm_forward(x: &Matrix, gamma: &[f64], beta: &[f64], eps: f64) -> Result<(Matrix, LnCache)> {
    let d = x.cols();
    if gamma.len() != d {
        return Err(Error::dim("layer_norm gamma", d, gamma.len()));
    }
    if beta.len() != d {
        return Err(Error::dim("layer_norm beta", d, beta.len()));
    }
    let mut xhat = Matrix::zeros(x.rows(), d);
    let mut y = Matrix::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        let xh = xhat.row_mut(r);
        for (o, v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
        for (c, o) in y.row_mut(r).iter_mut().enumerate() {
            *o = gamma[c] * xhat.get(r, c) + beta[c];
        }
    }
    Ok((y, LnCache { xhat, inv_std }))
}

pub struct LnGrads {
    pub dx: Matrix,
    pub dgamma: Vec<f64>,
    pub dbeta: Vec<f64>,
}

pub fn layer_norm_backward(dy: &Matrix, gamma: &[f64], cache: &LnCache) -> Result<LnGrads> {
    let (rows, d) = cache.xhat.shape();
    if dy.shape() != (rows, d) {
        return Err(Error::ShapeMismatch {
            name: "layer_norm dY".into(),
            expected: vec![rows, d],
            found: vec![dy.rows(), dy.cols()],
        });
    }
    if gamma.len() != d {
        return Err(Error::dim("layer_norm gamma", d, gamma.len()));
    }
    let mut dx = Matrix::zeros(rows, d);
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let g = dy.row(r);
        let xh = cache.xhat.row(r);
        for c in 0..d {
            dgamma[c] += g[c] * xh[c];
            dbeta[c] += g[c];
            dxhat[c] = g[c] * gamma[c];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dot(&dxhat, xh) / d as f64;
        let is = cache.inv_std[r];
        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = is * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
        }
    }
    Ok(LnGrads { dx, dgamma, dbeta })
}

#[derive(Debug, Clone)]
pub struct SoftmaxCache {
    pub probs: Matrix,
}

/// Numerically stable row softmax (max-subtracted).
pub fn softmax_rows(s: &Matrix) -> Result<(Matrix, SoftmaxCache)> {
    if !s.is_finite() {
        return Err(Error::non_finite("softmax input"));
    }
    let mut a = s.clone();
    for r in 0..a.rows() {
        let row = a.row_mut(r);
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
    Ok((a.clone(), SoftmaxCache { probs: a }))
}

pub fn softmax_backward(da: &Matrix, cache: &SoftmaxCache) -> Result<Matrix> {
    let p = &cache.probs;
    if da.shape() != p.shape() {
        return Err(Error::ShapeMismatch {
            name: "softmax dA".into(),
            expected: vec![p.rows(), p.cols()],
            found: vec![da.rows(), da.cols()],
        });
    }
    let mut ds = Matrix::zeros(p.rows(), p.cols());
    for r in 0..p.rows() {
        let inner = dot(da.row(r), p.row(r));
        for (c, o) in ds.row_mut(r).iter_mut().enumerate() {
            *o = p.get(r, c) * (da.get(r, c) - inner);
        }
    }
    Ok(ds)
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// d/dx gelu(x) = Phi(x) + x * phi(x).
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = FRAC_1_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

#[derive(Debug, Clone)]
pub struct AffineCache {
    pub input: Matrix,
}

/// `Y = X W + b`, with `W` stored as in x out.
pub fn affine_forward(x: &Matrix, w: &Matrix, b: &[f64]) -> Result<(Matrix, AffineCache)> {
    if b.len() != w.cols() {
        return Err(Error::dim("affine bias", w.cols(), b.len()));
    }
    let mut y = x.matmul(w)?;
    for r in 0..y.rows() {
        axpy(1.0, b, y.row_mut(r));
    }
    Ok((y, AffineCache { input: x.clone() }))
}

pub struct AffineGrads {
    pub dx: Matrix,
    pub dw: Matrix,
    pub db: Vec<f64>,
}

pub fn affine_backward(dy: &Matrix, w: &Matrix, cache: &AffineCache) -> Result<AffineGrads> {
    if dy.rows() != cache.input.rows() || dy.cols() != w.cols() {
        return Err(Error::ShapeMismatch {
            name: "affine dY".into(),
            expected: vec![cache.input.rows(), w.cols()],
            found: vec![dy.rows(), dy.cols()],
        });
    }
    let dx = dy.matmul_t(w)?;
    let dw = cache.input.t_matmul(dy)?;
    let mut db = vec![0.0; w.cols()];
    for r in 0..dy.rows() {
        axpy(1.0, dy.row(r), &mut db);
    }
    Ok(AffineGrads { dx, dw, db })
}
