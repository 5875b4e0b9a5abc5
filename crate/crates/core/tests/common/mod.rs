//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use compressive_mbn::{DenseMatrix, LabelVector};
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::test_runner::Config as ProptestConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Proptest settings without on-disk failure persistence.
pub fn cases(n: u32) -> ProptestConfig {
    ProptestConfig { cases: n, failure_persistence: None, ..ProptestConfig::default() }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_matrix(rows: usize, cols: usize, lo: f64, hi: f64, seed: u64) -> DenseMatrix<f64> {
    let mut r = rng(seed);
    DenseMatrix::from_vec(rows, cols, (0..rows * cols).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

pub fn to_nalgebra(m: &DenseMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.values())
}

/// Top-`d` eigenvectors (as rows) of the sample covariance, via nalgebra.
pub fn covariance_top_eigenvectors(x: &DenseMatrix<f64>, d: usize) -> (DMatrix<f64>, Vec<f64>) {
    let m = to_nalgebra(x);
    let mean = m.row_mean();
    let mut c = m.clone();
    for mut row in c.row_iter_mut() {
        row -= &mean;
    }
    let cov = c.transpose() * &c;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut top = DMatrix::zeros(d, x.cols());
    for (r, &i) in order.iter().take(d).enumerate() {
        top.set_row(r, &eig.eigenvectors.column(i).transpose());
    }
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    (top, values)
}

/// Largest principal angle (radians) between the row spaces of `a` and `b`,
/// computed from the sine side so that tiny angles keep full precision.
pub fn max_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let qa = a.transpose().qr().q().transpose();
    let qb = b.transpose().qr().q().transpose();
    let residual = &qa - (&qa * qb.transpose()) * &qb;
    let s = residual.singular_values().max().min(1.0);
    s.asin()
}

/// Minimum within-cluster sum of squares over every assignment of the rows
/// to at most `k` clusters.
pub fn exhaustive_kmeans_optimum(x: &DenseMatrix<f64>, k: usize) -> f64 {
    let n = x.rows();
    let mut best = f64::INFINITY;
    let mut assign = vec![0usize; n];
    loop {
        best = best.min(partition_cost(x, &assign, k));
        let mut i = 0;
        loop {
            if i == n {
                return best;
            }
            assign[i] += 1;
            if assign[i] < k {
                break;
            }
            assign[i] = 0;
            i += 1;
        }
    }
}

fn partition_cost(x: &DenseMatrix<f64>, assign: &[usize], k: usize) -> f64 {
    let dim = x.cols();
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for (i, &c) in assign.iter().enumerate() {
        counts[c] += 1;
        for j in 0..dim {
            sums[c * dim + j] += x.get(i, j);
        }
    }
    assign
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            (0..dim)
                .map(|j| {
                    let d = x.get(i, j) - sums[c * dim + j] / counts[c] as f64;
                    d * d
                })
                .sum::<f64>()
        })
        .sum()
}

/// NMI from the contingency table, in bits, with the sqrt normalization.
pub fn nmi_bits(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut table = vec![vec![0.0; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1.0;
    }
    let pa: Vec<f64> = table.iter().map(|r| r.iter().sum::<f64>() / n).collect();
    let pb: Vec<f64> = (0..kb).map(|j| table.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let h = |p: &[f64]| -> f64 { p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.log2()).sum() };
    let (ha, hb) = (h(&pa), h(&pb));
    if ha == 0.0 || hb == 0.0 {
        return 0.0;
    }
    let mut mi = 0.0;
    for x in 0..ka {
        for y in 0..kb {
            let p = table[x][y] / n;
            if p > 0.0 {
                mi += p * (p / (pa[x] * pb[y])).log2();
            }
        }
    }
    mi / (ha * hb).sqrt()
}

pub fn labels(v: &[usize]) -> LabelVector {
    LabelVector::from_labels(v.to_vec())
}
