//! Small dense kernels: row-major matrix products, SPD solves on tiny
//! systems, Gram-Schmidt and a Jacobi eigensolver for d x d symmetric
//! matrices.

use rayon::prelude::*;

use crate::dataset::DenseMatrix;
use crate::scalar::Scalar;

/// Ridge added to a near-singular normal matrix.
pub const RIDGE: f64 = 1e-12;

/// `a * b^T` for row-major `a` (n x k) and `b` (m x k). Each output entry is
/// reduced in a fixed order, so results do not depend on the thread count.
pub fn matmul_bt<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> DenseMatrix<T> {
    assert_eq!(a.cols(), b.cols(), "inner dimensions differ");
    let m = b.rows();
    let mut out = vec![T::zero(); a.rows() * m];
    if m > 0 {
        out.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
            let ai = a.row(i);
            for (o, bj) in row.iter_mut().zip(b.row_iter()) {
                *o = crate::scalar::dot(ai, bj);
            }
        });
    }
    DenseMatrix::from_parts_unchecked(a.rows(), m, out)
}

/// `a^T * b` for `a` (n x p) and `b` (n x q), giving p x q. Rows of `a` are
/// accumulated in index order.
pub fn matmul_at<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> DenseMatrix<T> {
    assert_eq!(a.rows(), b.rows(), "row counts differ");
    let (p, q) = (a.cols(), b.cols());
    let mut out = vec![T::zero(); p * q];
    if q > 0 {
        out.par_chunks_mut(q).enumerate().for_each(|(r, row)| {
            for i in 0..a.rows() {
                let s = a.get(i, r);
                if s == T::zero() {
                    continue;
                }
                for (o, &v) in row.iter_mut().zip(b.row(i)) {
                    *o += s * v;
                }
            }
        });
    }
    DenseMatrix::from_parts_unchecked(p, q, out)
}

/// `a * b` for row-major `a` (n x k) and `b` (k x m).
pub fn matmul<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> DenseMatrix<T> {
    assert_eq!(a.cols(), b.rows(), "inner dimensions differ");
    let m = b.cols();
    let mut out = vec![T::zero(); a.rows() * m];
    if m > 0 {
        out.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
            for (k, &s) in a.row(i).iter().enumerate() {
                if s == T::zero() {
                    continue;
                }
                for (o, &v) in row.iter_mut().zip(b.row(k)) {
                    *o += s * v;
                }
            }
        });
    }
    DenseMatrix::from_parts_unchecked(a.rows(), m, out)
}

/// Cholesky factor of a symmetric d x d matrix (row-major), or `None` when
/// a pivot is not safely positive.
fn cholesky<T: Scalar>(a: &[T], d: usize) -> Option<Vec<T>> {
    let scale = (0..d).map(|i| a[i * d + i].abs()).fold(T::zero(), T::max);
    let floor = scale * T::epsilon() * T::from_count(d.max(1));
    let mut l = vec![T::zero(); d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if !(s > floor) || !s.is_finite() {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Some(l)
}

/// Factorizes `a`, adding `RIDGE * I` (growing tenfold per retry) when it is
/// not numerically positive definite.
pub fn cholesky_regularized<T: Scalar>(a: &[T], d: usize) -> Vec<T> {
    if let Some(l) = cholesky(a, d) {
        return l;
    }
    let mut ridge = RIDGE;
    loop {
        let mut b = a.to_vec();
        for i in 0..d {
            b[i * d + i] += T::of(ridge);
        }
        if let Some(l) = cholesky(&b, d) {
            return l;
        }
        ridge *= 10.0;
        assert!(ridge < 1e300, "matrix cannot be regularized");
    }
}

/// Solves `L L^T x = b` in place.
pub fn cholesky_solve<T: Scalar>(l: &[T], d: usize, b: &mut [T]) {
    for i in 0..d {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * d + k] * b[k];
        }
        b[i] = s / l[i * d + i];
    }
    for i in (0..d).rev() {
        let mut s = b[i];
        for k in i + 1..d {
            s -= l[k * d + i] * b[k];
        }
        b[i] = s / l[i * d + i];
    }
}

/// Orthonormalizes rows in place (modified Gram-Schmidt, two passes).
/// A row that collapses is replaced by the first standard basis vector that
/// survives orthogonalization, so the result always has orthonormal rows
/// when `rows <= cols`.
pub fn orthonormalize_rows<T: Scalar>(m: &mut DenseMatrix<T>) {
    let (rows, cols) = (m.rows(), m.cols());
    assert!(rows <= cols, "cannot orthonormalize {rows} rows in {cols} dimensions");
    let tiny = T::of(1e-10);
    let mut next_axis = 0;
    for i in 0..rows {
        let orig = norm(m.row(i));
        let mut ok = orig > T::zero() && orig.is_finite() && reduce_against(m, i, orig, tiny);
        while !ok {
            let row = m.row_mut(i);
            row.iter_mut().for_each(|v| *v = T::zero());
            row[next_axis] = T::one();
            next_axis += 1;
            ok = reduce_against(m, i, T::one(), tiny);
        }
    }
}

fn reduce_against<T: Scalar>(m: &mut DenseMatrix<T>, i: usize, orig: T, tiny: T) -> bool {
    let cols = m.cols();
    for _pass in 0..2 {
        for j in 0..i {
            let (head, tail) = m.values_mut().split_at_mut(i * cols);
            let rj = &head[j * cols..(j + 1) * cols];
            let ri = &mut tail[..cols];
            let p = crate::scalar::dot(ri, rj);
            for (a, &b) in ri.iter_mut().zip(rj) {
                *a -= p * b;
            }
        }
    }
    let n = norm(m.row(i));
    if !(n > tiny * orig) {
        return false;
    }
    m.row_mut(i).iter_mut().for_each(|v| *v /= n);
    true
}

pub fn norm<T: Scalar>(v: &[T]) -> T {
    crate::scalar::dot(v, v).sqrt()
}

/// Eigen-decomposition of a symmetric d x d matrix by cyclic Jacobi
/// rotations. Returns eigenvalues in descending order and the matching
/// eigenvectors as rows.
pub fn symmetric_eigen<T: Scalar>(a: &[T], d: usize) -> (Vec<T>, Vec<Vec<T>>) {
    let mut m = a.to_vec();
    let mut v = vec![T::zero(); d * d];
    for i in 0..d {
        v[i * d + i] = T::one();
    }
    for _sweep in 0..100 {
        let off: T = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .fold(T::zero(), |acc, (i, j)| acc + m[i * d + j] * m[i * d + j]);
        let diag: T = (0..d).fold(T::zero(), |acc, i| acc + m[i * d + i] * m[i * d + i]);
        if off <= T::epsilon() * T::epsilon() * diag || off == T::zero() {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = m[p * d + q];
                if apq == T::zero() {
                    continue;
                }
                let theta = (m[q * d + q] - m[p * d + p]) / (T::of(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..d {
                    let mkp = m[k * d + p];
                    let mkq = m[k * d + q];
                    m[k * d + p] = c * mkp - s * mkq;
                    m[k * d + q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let mpk = m[p * d + k];
                    let mqk = m[q * d + k];
                    m[p * d + k] = c * mpk - s * mqk;
                    m[q * d + k] = s * mpk + c * mqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| m[j * d + j].partial_cmp(&m[i * d + i]).unwrap_or(std::cmp::Ordering::Equal));
    let values = order.iter().map(|&i| m[i * d + i]).collect();
    let vectors = order.iter().map(|&i| (0..d).map(|k| v[k * d + i]).collect()).collect();
    (values, vectors)
}
