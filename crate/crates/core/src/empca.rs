//! Expectation-maximization PCA.
//!
//! Fits a `d`-dimensional principal subspace by alternating two
//! least-squares problems on the centered data `Xc` with a `d x D` basis
//! `C`:
//!
//! * E-step: latent coordinates `Z = Xc C^T (C C^T)^-1`
//! * M-step: basis `C = (Z^T Z)^-1 Z^T Xc`
//!
//! Sparse binary input is never densified. Centering is folded into the
//! products: `Xc C^T = X C^T - 1 (C mu)^T` and `Z^T Xc = Z^T X - (Z^T 1) mu^T`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::DenseMatrix;
use crate::error::{Error, Result};
use crate::linalg;
use crate::mbn::SparseBinaryMatrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpcaConfig {
    pub target_dim: usize,
    pub max_iters: usize,
    /// Convergence threshold on the Frobenius distance between successive
    /// subspace projectors.
    pub tol: f64,
    pub seed: u64,
}

impl EmpcaConfig {
    pub fn new(target_dim: usize, seed: u64) -> Self {
        EmpcaConfig { target_dim, max_iters: 200, tol: 1e-7, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_dim < 1 {
            return Err(Error::argument("target_dim must be >= 1"));
        }
        if self.max_iters < 1 {
            return Err(Error::argument("max_iters must be >= 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::argument(format!("tol must be positive, got {}", self.tol)));
        }
        Ok(())
    }
}

/// Mean vector plus orthonormal projection rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel<T> {
    mean: Vec<T>,
    basis: DenseMatrix<T>,
}

impl<T: Scalar> PcaModel<T> {
    pub fn new(mean: Vec<T>, basis: DenseMatrix<T>) -> Result<Self> {
        if basis.cols() != mean.len() {
            return Err(Error::DimensionMismatch { expected: mean.len(), found: basis.cols() });
        }
        if basis.rows() > basis.cols() {
            return Err(Error::argument("basis has more rows than input dimensions"));
        }
        Ok(PcaModel { mean, basis })
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    /// `d_out x d_in`, orthonormal rows.
    pub fn basis(&self) -> &DenseMatrix<T> {
        &self.basis
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.basis.rows()
    }

    pub fn project<X: PcaInput<T> + ?Sized>(&self, x: &X) -> Result<DenseMatrix<T>> {
        if x.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), found: x.cols() });
        }
        Ok(x.centered_times_bt(&self.mean, &self.basis))
    }
}

/// Data EM-PCA can consume without densifying.
pub trait PcaInput<T: Scalar>: Sync {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    fn column_means(&self) -> Vec<T>;
    /// `(X - 1 mu^T) B^T`, n x d.
    fn centered_times_bt(&self, mean: &[T], b: &DenseMatrix<T>) -> DenseMatrix<T>;
    /// `Z^T (X - 1 mu^T)`, d x D.
    fn zt_times_centered(&self, z: &DenseMatrix<T>, mean: &[T]) -> DenseMatrix<T>;
    /// `||X - 1 mu^T||_F^2`.
    fn centered_sq_norm(&self, mean: &[T]) -> T;
}

impl<T: Scalar> PcaInput<T> for DenseMatrix<T> {
    fn rows(&self) -> usize {
        DenseMatrix::rows(self)
    }

    fn cols(&self) -> usize {
        DenseMatrix::cols(self)
    }

    fn column_means(&self) -> Vec<T> {
        let mut mean = vec![T::zero(); self.cols()];
        for row in self.row_iter() {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        let n = T::from_count(self.rows().max(1));
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    fn centered_times_bt(&self, mean: &[T], b: &DenseMatrix<T>) -> DenseMatrix<T> {
        let d = b.rows();
        let mut out = Vec::with_capacity(self.rows() * d);
        let mut centered = vec![T::zero(); self.cols()];
        for row in self.row_iter() {
            for ((c, &v), &m) in centered.iter_mut().zip(row).zip(mean) {
                *c = v - m;
            }
            out.extend(b.row_iter().map(|bj| crate::scalar::dot(&centered, bj)));
        }
        DenseMatrix::from_parts_unchecked(self.rows(), d, out)
    }

    fn zt_times_centered(&self, z: &DenseMatrix<T>, mean: &[T]) -> DenseMatrix<T> {
        let mut w = linalg::matmul_at(z, self);
        fold_mean_into_zt(&mut w, z, mean);
        w
    }

    fn centered_sq_norm(&self, mean: &[T]) -> T {
        self.row_iter().fold(T::zero(), |acc, row| acc + crate::scalar::squared_distance(row, mean))
    }
}

impl<T: Scalar> PcaInput<T> for SparseBinaryMatrix {
    fn rows(&self) -> usize {
        SparseBinaryMatrix::rows(self)
    }

    fn cols(&self) -> usize {
        SparseBinaryMatrix::cols(self)
    }

    fn column_means(&self) -> Vec<T> {
        let mut counts = vec![0usize; self.cols()];
        for &c in self.indices() {
            counts[c as usize] += 1;
        }
        let n = T::from_count(self.rows().max(1));
        counts.into_iter().map(|c| T::from_count(c) / n).collect()
    }

    fn centered_times_bt(&self, mean: &[T], b: &DenseMatrix<T>) -> DenseMatrix<T> {
        let d = b.rows();
        let shift: Vec<T> = b.row_iter().map(|bj| crate::scalar::dot(bj, mean)).collect();
        let mut out = Vec::with_capacity(self.rows() * d);
        for i in 0..self.rows() {
            let active = self.row(i);
            for (bj, &s) in b.row_iter().zip(&shift) {
                let hit = active.iter().fold(T::zero(), |acc, &a| acc + bj[a as usize]);
                out.push(hit - s);
            }
        }
        DenseMatrix::from_parts_unchecked(self.rows(), d, out)
    }

    fn zt_times_centered(&self, z: &DenseMatrix<T>, mean: &[T]) -> DenseMatrix<T> {
        let d = z.cols();
        let cols = self.cols();
        let mut w = DenseMatrix::zeros(d, cols);
        for i in 0..self.rows() {
            let zi = z.row(i);
            for &a in self.row(i) {
                for (r, &zv) in zi.iter().enumerate() {
                    w.values_mut()[r * cols + a as usize] += zv;
                }
            }
        }
        fold_mean_into_zt(&mut w, z, mean);
        w
    }

    fn centered_sq_norm(&self, mean: &[T]) -> T {
        // sum_i |x_i|^2 - n |mu|^2
        let total = T::from_count(self.nnz());
        let mu2 = mean.iter().fold(T::zero(), |acc, &m| acc + m * m);
        (total - T::from_count(self.rows()) * mu2).max(T::zero())
    }
}

fn fold_mean_into_zt<T: Scalar>(w: &mut DenseMatrix<T>, z: &DenseMatrix<T>, mean: &[T]) {
    let d = z.cols();
    let mut col_sums = vec![T::zero(); d];
    for row in z.row_iter() {
        for (s, &v) in col_sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    for (r, &s) in col_sums.iter().enumerate() {
        for (wv, &m) in w.row_mut(r).iter_mut().zip(mean) {
            *wv -= s * m;
        }
    }
}

/// Fit diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpcaTrace<T> {
    /// Residual `||Xc - Xc Q^T Q||^2` of the initial basis and after every
    /// EM iteration.
    pub reconstruction_errors: Vec<T>,
    pub iterations: usize,
    pub converged: bool,
}

pub fn fit_empca<T: Scalar, X: PcaInput<T> + ?Sized>(x: &X, config: &EmpcaConfig) -> Result<PcaModel<T>> {
    fit(x, config, false).map(|(m, _)| m)
}

/// Like [`fit_empca`] but also records the per-iteration reconstruction
/// error.
pub fn fit_empca_traced<T: Scalar, X: PcaInput<T> + ?Sized>(
    x: &X,
    config: &EmpcaConfig,
) -> Result<(PcaModel<T>, EmpcaTrace<T>)> {
    fit(x, config, true)
}

fn fit<T: Scalar, X: PcaInput<T> + ?Sized>(
    x: &X,
    config: &EmpcaConfig,
    record: bool,
) -> Result<(PcaModel<T>, EmpcaTrace<T>)> {
    config.validate()?;
    let (n, dim, d) = (x.rows(), x.cols(), config.target_dim);
    if n < 2 {
        return Err(Error::InsufficientSamples { layer: None, needed: 2, found: n });
    }
    if d > dim {
        return Err(Error::argument(format!("target_dim {d} exceeds input dimension {dim}")));
    }
    let mean = x.column_means();
    let total = if record { x.centered_sq_norm(&mean) } else { T::zero() };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init: Vec<T> = (0..d * dim).map(|_| T::of(StandardNormal.sample(&mut rng))).collect();
    let mut c = DenseMatrix::from_parts_unchecked(d, dim, init);
    let mut q = c.clone();
    linalg::orthonormalize_rows(&mut q);

    let mut trace = EmpcaTrace { reconstruction_errors: Vec::new(), iterations: 0, converged: false };
    if record {
        trace.reconstruction_errors.push(residual(x, &mean, &q, total));
    }
    let tol = T::of(config.tol);
    for it in 0..config.max_iters {
        // E-step
        let y = x.centered_times_bt(&mean, &c);
        let g = gram_rows(&c);
        let l = linalg::cholesky_regularized(g.values(), d);
        let mut z = y;
        for i in 0..n {
            linalg::cholesky_solve(&l, d, z.row_mut(i));
        }
        // M-step
        let h = linalg::matmul_at(&z, &z);
        let l = linalg::cholesky_regularized(h.values(), d);
        let mut w = x.zt_times_centered(&z, &mean);
        solve_columns(&l, d, &mut w);
        c = w;

        let mut q_new = c.clone();
        linalg::orthonormalize_rows(&mut q_new);
        let change = subspace_distance(&q_new, &q);
        q = q_new;
        trace.iterations = it + 1;
        if record {
            trace.reconstruction_errors.push(residual(x, &mean, &q, total));
        }
        if change < tol {
            trace.converged = true;
            break;
        }
    }

    let basis = principal_axes(x, &mean, q);
    Ok((PcaModel { mean, basis }, trace))
}

/// `B B^T` for a row basis.
fn gram_rows<T: Scalar>(b: &DenseMatrix<T>) -> DenseMatrix<T> {
    linalg::matmul_bt(b, b)
}

/// Overwrites every column `w[:, j]` with `(L L^T)^-1 w[:, j]`.
fn solve_columns<T: Scalar>(l: &[T], d: usize, w: &mut DenseMatrix<T>) {
    let cols = w.cols();
    let mut buf = vec![T::zero(); d];
    for j in 0..cols {
        for (r, b) in buf.iter_mut().enumerate() {
            *b = w.get(r, j);
        }
        linalg::cholesky_solve(l, d, &mut buf);
        for (r, &b) in buf.iter().enumerate() {
            w.values_mut()[r * cols + j] = b;
        }
    }
}

/// Frobenius norm of `P_a - P_b` for orthonormal row bases, computed as
/// `sqrt(2) * ||A - (A B^T) B||_F` to avoid cancellation near convergence.
pub fn subspace_distance<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> T {
    let overlap = linalg::matmul_bt(a, b);
    let mut acc = T::zero();
    for i in 0..a.rows() {
        let mut r = a.row(i).to_vec();
        for (j, bj) in b.row_iter().enumerate() {
            let s = overlap.get(i, j);
            for (rv, &bv) in r.iter_mut().zip(bj) {
                *rv -= s * bv;
            }
        }
        acc += crate::scalar::dot(&r, &r);
    }
    (T::of(2.0) * acc).sqrt()
}

fn residual<T: Scalar, X: PcaInput<T> + ?Sized>(x: &X, mean: &[T], q: &DenseMatrix<T>, total: T) -> T {
    let p = x.centered_times_bt(mean, q);
    let kept = p.values().iter().fold(T::zero(), |acc, &v| acc + v * v);
    (total - kept).max(T::zero())
}

/// Rotates an orthonormal basis within its span onto the principal axes of
/// the projected data (descending variance), with the largest-magnitude
/// entry of every row made positive.
fn principal_axes<T: Scalar, X: PcaInput<T> + ?Sized>(x: &X, mean: &[T], q: DenseMatrix<T>) -> DenseMatrix<T> {
    let d = q.rows();
    let p = x.centered_times_bt(mean, &q);
    let cov = linalg::matmul_at(&p, &p);
    let (_, vectors) = linalg::symmetric_eigen(cov.values(), d);
    let mut rotated = DenseMatrix::zeros(d, q.cols());
    for (r, v) in vectors.iter().enumerate() {
        let row: &mut [T] = rotated.row_mut(r);
        for (k, &vk) in v.iter().enumerate() {
            for (o, &qv) in row.iter_mut().zip(q.row(k)) {
                *o += vk * qv;
            }
        }
    }
    linalg::orthonormalize_rows(&mut rotated);
    for r in 0..d {
        let row = rotated.row_mut(r);
        let pivot = row.iter().fold(T::zero(), |best, &v| if v.abs() > best.abs() { v } else { best });
        if pivot < T::zero() {
            row.iter_mut().for_each(|v| *v = -*v);
        }
    }
    rotated
}

/// `(x - mean) basis^T` row by row.
pub fn pca_project<T: Scalar, X: PcaInput<T> + ?Sized>(model: &PcaModel<T>, x: &X) -> Result<DenseMatrix<T>> {
    model.project(x)
}
