//! Hard clustering of embeddings (k-means with restarts), indicator-vector
//! encoding of cluster labels, and normalized mutual information.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DenseMatrix, LabelVector};
use crate::error::{Error, Result};
use crate::scalar::{squared_distance, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmeansConfig {
    pub k: usize,
    pub n_restarts: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl KmeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        KmeansConfig { k, n_restarts: 10, max_iters: 300, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::argument("k-means needs k >= 1"));
        }
        if self.n_restarts < 1 {
            return Err(Error::argument("k-means needs n_restarts >= 1"));
        }
        if self.max_iters < 1 {
            return Err(Error::argument("k-means needs max_iters >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansResult<T> {
    pub labels: LabelVector,
    pub centers: DenseMatrix<T>,
    /// Sum of squared distances to the assigned centers.
    pub inertia: T,
}

/// Best-inertia Lloyd run over `n_restarts` random initializations.
///
/// Restart `r` draws `k` distinct rows uniformly from ChaCha8 stream `r` of
/// the configured seed, redrawing while that row set was already used by an
/// earlier restart (unless every set has been used). Ties in inertia go to
/// the lowest restart index.
pub fn kmeans<T: Scalar>(x: &DenseMatrix<T>, config: &KmeansConfig) -> Result<KmeansResult<T>> {
    config.validate()?;
    if x.rows() < config.k {
        return Err(Error::InsufficientSamples { layer: None, needed: config.k, found: x.rows() });
    }
    let inits = initial_rows(x.rows(), config);
    let runs: Vec<KmeansResult<T>> = inits
        .into_par_iter()
        .map(|rows| lloyd(x, x.select_rows(&rows), config.max_iters).0)
        .collect();
    let mut best: Option<KmeansResult<T>> = None;
    for run in runs {
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn initial_rows(n: usize, config: &KmeansConfig) -> Vec<Vec<usize>> {
    let available = binomial_capped(n, config.k, config.n_restarts);
    let mut seen: BTreeSet<Vec<usize>> = BTreeSet::new();
    let mut inits = Vec::with_capacity(config.n_restarts);
    for r in 0..config.n_restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(r as u64);
        let fresh = seen.len() < available;
        loop {
            let rows = index::sample(&mut rng, n, config.k).into_vec();
            let mut key = rows.clone();
            key.sort_unstable();
            if !fresh || seen.insert(key) {
                inits.push(rows);
                break;
            }
        }
    }
    inits
}

/// `n choose k`, saturating at `cap`.
fn binomial_capped(n: usize, k: usize, cap: usize) -> usize {
    let k = k.min(n - k);
    let mut c: u128 = 1;
    for i in 0..k {
        c = c * (n - i) as u128 / (i + 1) as u128;
        if c >= cap as u128 {
            return cap;
        }
    }
    c as usize
}

/// Lloyd iterations from the given centers. Returns the result and the
/// inertia after every assignment step.
pub fn lloyd<T: Scalar>(x: &DenseMatrix<T>, init: DenseMatrix<T>, max_iters: usize) -> (KmeansResult<T>, Vec<T>) {
    let k = init.rows();
    let mut centers = init;
    let (mut labels, mut dists) = assign(x, &centers);
    let mut trace = vec![dists.iter().copied().sum::<T>()];
    for _ in 0..max_iters {
        centers = update_centers(x, &labels, &dists, k);
        let (new_labels, new_dists) = assign(x, &centers);
        let changed = new_labels != labels;
        labels = new_labels;
        dists = new_dists;
        trace.push(dists.iter().copied().sum());
        if !changed {
            break;
        }
    }
    let inertia = dists.iter().copied().sum();
    let labels = LabelVector::new(labels, k).expect("assignments are below k");
    (KmeansResult { labels, centers, inertia }, trace)
}

fn assign<T: Scalar>(x: &DenseMatrix<T>, centers: &DenseMatrix<T>) -> (Vec<usize>, Vec<T>) {
    x.row_iter().map(|row| nearest(row, centers)).unzip()
}

/// Nearest center by squared euclidean distance, lowest index on ties.
fn nearest<T: Scalar>(row: &[T], centers: &DenseMatrix<T>) -> (usize, T) {
    let mut best = (0, T::infinity());
    for (j, c) in centers.row_iter().enumerate() {
        let d = squared_distance(row, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Means of the assigned points. An empty cluster is re-seeded at the point
/// farthest from its currently assigned center; each point seeds at most one
/// empty cluster per update.
fn update_centers<T: Scalar>(x: &DenseMatrix<T>, labels: &[usize], dists: &[T], k: usize) -> DenseMatrix<T> {
    let d = x.cols();
    let mut sums = DenseMatrix::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (row, &l) in x.row_iter().zip(labels) {
        counts[l] += 1;
        for (s, &v) in sums.row_mut(l).iter_mut().zip(row) {
            *s += v;
        }
    }
    let mut used = vec![false; x.rows()];
    for j in 0..k {
        if counts[j] == 0 {
            let mut far: Option<usize> = None;
            for i in 0..x.rows() {
                if !used[i] && far.is_none_or(|f| dists[i] > dists[f]) {
                    far = Some(i);
                }
            }
            let f = far.expect("k <= rows leaves a point to re-seed with");
            used[f] = true;
            sums.row_mut(j).copy_from_slice(x.row(f));
        } else {
            let n = T::from_count(counts[j]);
            sums.row_mut(j).iter_mut().for_each(|s| *s /= n);
        }
    }
    sums
}

/// One-hot rows: row `i` has a 1 at column `labels[i]`.
pub fn labels_to_indicators<T: Scalar>(labels: &LabelVector, k: usize) -> Result<DenseMatrix<T>> {
    let mut m = DenseMatrix::zeros(labels.len(), k);
    for (i, &l) in labels.as_slice().iter().enumerate() {
        if l >= k {
            return Err(Error::argument(format!("label {l} at row {i} is out of range for k={k}")));
        }
        m.row_mut(i)[l] = T::one();
    }
    Ok(m)
}

/// Index of the largest entry of each row, lowest index on ties.
pub fn argmax_rows<T: Scalar>(m: &DenseMatrix<T>) -> LabelVector {
    let labels = m
        .row_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    LabelVector::new(labels, m.cols().max(1)).expect("argmax is below the column count")
}

/// Each row of `x` to its nearest center (squared euclidean, lowest index on
/// ties).
pub fn assign_nearest_center<T: Scalar>(x: &DenseMatrix<T>, centers: &DenseMatrix<T>) -> Result<LabelVector> {
    if x.cols() != centers.cols() {
        return Err(Error::DimensionMismatch { expected: centers.cols(), found: x.cols() });
    }
    if centers.rows() == 0 {
        return Err(Error::argument("no centers to assign to"));
    }
    let mut labels = vec![0usize; x.rows()];
    labels.par_iter_mut().enumerate().for_each(|(i, l)| *l = nearest(x.row(i), centers).0);
    LabelVector::new(labels, centers.rows())
}

/// Normalized mutual information `I(a;b) / sqrt(H(a) H(b))`, natural logs.
/// Returns 0 whenever either labeling has zero entropy.
pub fn nmi(a: &LabelVector, b: &LabelVector) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::argument(format!("label lengths differ: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::argument("NMI needs at least one sample"));
    }
    let n = a.len() as f64;
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut ca: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cb: BTreeMap<usize, usize> = BTreeMap::new();
    for (&x, &y) in a.as_slice().iter().zip(b.as_slice()) {
        *joint.entry((x, y)).or_default() += 1;
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
    }
    let entropy = |counts: &BTreeMap<usize, usize>| -> f64 {
        counts.values().map(|&c| c as f64 / n).map(|p| -p * p.ln()).sum()
    };
    let (ha, hb) = (entropy(&ca), entropy(&cb));
    if ha <= 0.0 || hb <= 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (&(x, y), &nxy) in &joint {
        let nxy = nxy as f64;
        let (nx, ny) = (ca[&x] as f64, cb[&y] as f64);
        mi += nxy / n * (n * nxy / (nx * ny)).ln();
    }
    Ok((mi / (ha * hb).sqrt()).clamp(0.0, 1.0))
}
