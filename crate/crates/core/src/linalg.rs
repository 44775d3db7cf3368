//! Dense row-major matrices, Householder QR with a non-negative diagonal,
//! and the weight initialisers used by the RNN.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::RngStream;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    DimensionMismatch { op: &'static str, left: (usize, usize), right: (usize, usize) },
    #[error("matrix is rank deficient: |R[{index},{index}]| = {value:e}")]
    Singular { index: usize, value: f64 },
    #[error("QR needs rows >= cols, got {rows}x{cols}")]
    WideMatrix { rows: usize, cols: usize },
    #[error("buffer of length {len} cannot hold a {rows}x{cols} matrix")]
    BadBuffer { rows: usize, cols: usize, len: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::BadBuffer { rows, cols, len: data.len() });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self { rows: rows.len(), cols, data: rows.concat() }
    }

    pub fn from_diag(diag: &[T]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
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

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn scaled(&self, k: T) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| v * k).collect() }
    }

    pub fn sub(&self, other: &Self) -> Result<Self, LinalgError> {
        if self.shape() != other.shape() {
            return Err(LinalgError::DimensionMismatch { op: "sub", left: self.shape(), right: other.shape() });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    /// `self * v`.
    pub fn matvec(&self, v: &[T]) -> Result<Vec<T>, LinalgError> {
        if v.len() != self.cols {
            return Err(LinalgError::DimensionMismatch { op: "matvec", left: self.shape(), right: (v.len(), 1) });
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `self^T * v`.
    pub fn matvec_t(&self, v: &[T]) -> Result<Vec<T>, LinalgError> {
        if v.len() != self.rows {
            return Err(LinalgError::DimensionMismatch { op: "matvec_t", left: self.shape(), right: (v.len(), 1) });
        }
        let mut out = vec![T::zero(); self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        Ok(out)
    }

    /// Scales row `i` by `d[i]`, i.e. `diag(d) * self`.
    pub fn scale_rows(&mut self, d: &[T]) {
        assert_eq!(d.len(), self.rows);
        for (i, &di) in d.iter().enumerate() {
            for v in self.row_mut(i) {
                *v *= di;
            }
        }
    }

    /// Determinant by LU with partial pivoting. Square matrices only.
    pub fn determinant(&self) -> Result<T, LinalgError> {
        if self.rows != self.cols {
            return Err(LinalgError::DimensionMismatch { op: "determinant", left: self.shape(), right: self.shape() });
        }
        let n = self.rows;
        let mut a = self.clone();
        let mut det = T::one();
        for k in 0..n {
            let p = (k..n).max_by(|&x, &y| a[(x, k)].abs().partial_cmp(&a[(y, k)].abs()).unwrap()).unwrap();
            if a[(p, k)] == T::zero() {
                return Ok(T::zero());
            }
            if p != k {
                for j in 0..n {
                    let t = a[(k, j)];
                    a[(k, j)] = a[(p, j)];
                    a[(p, j)] = t;
                }
                det = -det;
            }
            det *= a[(k, k)];
            for i in k + 1..n {
                let f = a[(i, k)] / a[(k, k)];
                for j in k..n {
                    let v = a[(k, j)];
                    a[(i, j)] -= f * v;
                }
            }
        }
        Ok(det)
    }
}

impl<T> std::ops::Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn norm2<T: Scalar>(v: &[T]) -> T {
    dot(v, v).sqrt()
}

/// Operand orientation for [`gemm_into`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    N,
    T,
}

/// `c <- alpha * op(a) * op(b) + beta * c`.
pub fn gemm_into<T: Scalar>(
    alpha: T,
    a: &Matrix<T>,
    op_a: Op,
    b: &Matrix<T>,
    op_b: Op,
    beta: T,
    c: &mut Matrix<T>,
) -> Result<(), LinalgError> {
    let (m, ka, rsa, csa) = match op_a {
        Op::N => (a.rows, a.cols, a.cols as isize, 1),
        Op::T => (a.cols, a.rows, 1, a.cols as isize),
    };
    let (kb, n, rsb, csb) = match op_b {
        Op::N => (b.rows, b.cols, b.cols as isize, 1),
        Op::T => (b.cols, b.rows, 1, b.cols as isize),
    };
    if ka != kb || c.rows != m || c.cols != n {
        return Err(LinalgError::DimensionMismatch { op: "gemm", left: (m, ka), right: (kb, n) });
    }
    let rsc = c.cols as isize;
    T::gemm(m, ka, n, alpha, &a.data, rsa, csa, &b.data, rsb, csb, beta, &mut c.data, rsc, 1);
    Ok(())
}

/// Standard matrix product.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>, LinalgError> {
    if a.cols != b.rows {
        return Err(LinalgError::DimensionMismatch { op: "matmul", left: a.shape(), right: b.shape() });
    }
    let mut c = Matrix::zeros(a.rows, b.cols);
    gemm_into(T::one(), a, Op::N, b, Op::N, T::zero(), &mut c)?;
    Ok(c)
}

/// Relative tolerance on `|R_ii|` below which [`qr_pos`] reports rank
/// deficiency.
pub const QR_RANK_TOL: f64 = 1e-12;

/// Householder QR with the sign convention `R_ii >= 0`.
///
/// For an `m x n` input with `m >= n` this returns the thin factors
/// `Q` (`m x n`, orthonormal columns) and `R` (`n x n`, upper triangular).
/// Fails with [`LinalgError::Singular`] when some `|R_ii|` is at most
/// [`QR_RANK_TOL`] times the largest column norm of `a`.
pub fn qr_pos<T: Scalar>(a: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>), LinalgError> {
    let scale = (0..a.cols).map(|j| norm2(&a.column(j))).fold(T::zero(), T::max);
    qr_pos_with_tol(a, T::lit(QR_RANK_TOL) * scale)
}

/// [`qr_pos`] with an absolute rank tolerance on the diagonal of `R`.
pub fn qr_pos_with_tol<T: Scalar>(a: &Matrix<T>, tol: T) -> Result<(Matrix<T>, Matrix<T>), LinalgError> {
    let (m, n) = a.shape();
    if m < n {
        return Err(LinalgError::WideMatrix { rows: m, cols: n });
    }
    let mut r = a.clone();
    // Householder vectors, stored per column
    let mut vs: Vec<Vec<T>> = Vec::with_capacity(n);
    let two = T::lit(2.0);
    for k in 0..n {
        let mut v: Vec<T> = (k..m).map(|i| r[(i, k)]).collect();
        let alpha = norm2(&v);
        if alpha == T::zero() {
            vs.push(Vec::new());
            continue;
        }
        let sign = if v[0] >= T::zero() { T::one() } else { -T::one() };
        v[0] += sign * alpha;
        let vnorm2 = dot(&v, &v);
        if vnorm2 == T::zero() {
            vs.push(Vec::new());
            continue;
        }
        for j in k..n {
            let mut proj = T::zero();
            for i in k..m {
                proj += v[i - k] * r[(i, j)];
            }
            let f = two * proj / vnorm2;
            for i in k..m {
                r[(i, j)] -= f * v[i - k];
            }
        }
        vs.push(v);
    }

    // Q = H_0 H_1 ... H_{n-1} applied to the first n columns of I
    let mut q = Matrix::zeros(m, n);
    for j in 0..n {
        q[(j, j)] = T::one();
    }
    for k in (0..n).rev() {
        let v = &vs[k];
        if v.is_empty() {
            continue;
        }
        let vnorm2 = dot(v, v);
        for j in 0..n {
            let mut proj = T::zero();
            for i in k..m {
                proj += v[i - k] * q[(i, j)];
            }
            let f = two * proj / vnorm2;
            for i in k..m {
                q[(i, j)] -= f * v[i - k];
            }
        }
    }

    let mut rr = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            rr[(i, j)] = r[(i, j)];
        }
    }
    for i in 0..n {
        if rr[(i, i)] < T::zero() {
            for j in i..n {
                rr[(i, j)] = -rr[(i, j)];
            }
            for row in 0..m {
                q[(row, i)] = -q[(row, i)];
            }
        }
        if rr[(i, i)] <= tol {
            return Err(LinalgError::Singular { index: i, value: rr[(i, i)].as_f64() });
        }
    }
    Ok((q, rr))
}

/// Construction used for "random orthogonal" recurrent weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrthogonalScheme {
    /// `Q` factor of an i.i.d. standard normal matrix.
    #[default]
    QrGaussian,
    /// Block-diagonal random 2x2 rotations (plus a `+-1` entry for odd sizes).
    BlockRotation,
}

/// Random orthogonal `size x size` matrix.
pub fn init_orthogonal<T: Scalar>(size: usize, rng: &mut RngStream) -> Matrix<T> {
    init_orthogonal_with(size, OrthogonalScheme::QrGaussian, rng)
}

pub fn init_orthogonal_with<T: Scalar>(size: usize, scheme: OrthogonalScheme, rng: &mut RngStream) -> Matrix<T> {
    assert!(size >= 1, "orthogonal init needs size >= 1");
    match scheme {
        OrthogonalScheme::QrGaussian => loop {
            let g = Matrix::from_fn(size, size, |_, _| rng.normal::<T>());
            // a Gaussian matrix is singular with probability zero; redraw if it happens
            if let Ok((q, _)) = qr_pos(&g) {
                return q;
            }
        },
        OrthogonalScheme::BlockRotation => {
            let mut m = Matrix::zeros(size, size);
            let mut i = 0;
            while i + 1 < size {
                let theta = std::f64::consts::PI * (2.0 * rng.uniform() - 1.0);
                let (s, c) = theta.sin_cos();
                m[(i, i)] = T::lit(c);
                m[(i, i + 1)] = T::lit(-s);
                m[(i + 1, i)] = T::lit(s);
                m[(i + 1, i + 1)] = T::lit(c);
                i += 2;
            }
            if i < size {
                m[(i, i)] = if rng.uniform() < 0.5 { -T::one() } else { T::one() };
            }
            m
        }
    }
}

/// Variance rule for Gaussian weight initialisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GaussianScheme {
    /// Variance `2 / (fan_in + fan_out)`.
    GlorotNormal,
    /// Variance `2 / fan_in`.
    Kaiming,
}

impl GaussianScheme {
    pub fn variance(self, rows: usize, cols: usize) -> f64 {
        // weights map cols -> rows
        let (fan_in, fan_out) = (cols as f64, rows as f64);
        match self {
            GaussianScheme::GlorotNormal => 2.0 / (fan_in + fan_out),
            GaussianScheme::Kaiming => 2.0 / fan_in,
        }
    }
}

/// `rows x cols` matrix of i.i.d. centred normals; `cols` is the fan-in.
pub fn init_gaussian<T: Scalar>(rows: usize, cols: usize, scheme: GaussianScheme, rng: &mut RngStream) -> Matrix<T> {
    assert!(rows >= 1 && cols >= 1, "gaussian init needs positive dimensions");
    let std = T::lit(scheme.variance(rows, cols).sqrt());
    Matrix::from_fn(rows, cols, |_, _| rng.normal::<T>() * std)
}

/// Fixed, non-degenerate start vector for power iteration.
fn power_start<T: Scalar>(n: usize) -> Vec<T> {
    let v: Vec<T> = (0..n).map(|i| T::lit(1.0 + (i as f64 * 0.618_033_988_749_895).fract())).collect();
    let nv = norm2(&v);
    v.into_iter().map(|x| x / nv).collect()
}

/// Largest singular value by `iters` rounds of power iteration on `A^T A`.
///
/// The estimate after round `k` is `sqrt(|A^T A v_k| / |v_k|)`, which is
/// nondecreasing in `k` for the fixed start vector.
pub fn spectral_norm<T: Scalar>(a: &Matrix<T>, iters: usize) -> T {
    let mut v = power_start::<T>(a.cols);
    let mut lambda = T::zero();
    let mut av = vec![T::zero(); a.rows];
    for _ in 0..iters.max(1) {
        for (i, o) in av.iter_mut().enumerate() {
            *o = dot(a.row(i), &v);
        }
        let mut w = vec![T::zero(); a.cols];
        for (i, &s) in av.iter().enumerate() {
            for (wj, &aij) in w.iter_mut().zip(a.row(i)) {
                *wj += aij * s;
            }
        }
        let nw = norm2(&w);
        if nw == T::zero() {
            return T::zero();
        }
        lambda = nw;
        for (vj, wj) in v.iter_mut().zip(&w) {
            *vj = *wj / nw;
        }
    }
    lambda.sqrt()
}
