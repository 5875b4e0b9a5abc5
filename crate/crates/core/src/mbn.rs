//! Multilayer bootstrap network: a stack of layers, each an ensemble of
//! k-centers clusterings whose centers are randomly sampled input rows.
//!
//! Layer 1 sees the dense real-valued input and assigns by euclidean
//! distance. Every later layer sees the previous layer's one-hot blocks as a
//! [`SparseBinaryMatrix`] and assigns by dot product, i.e. by the number of
//! agreeing upstream clusterings. Sparse data is never densified: binary
//! centers are kept as active-position lists together with an inverted
//! index, so encoding a row costs time proportional to its active units.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::DenseMatrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Hyperparameters of a bootstrap network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MbnConfig {
    /// Centers per clustering, one entry per layer.
    pub k_schedule: Vec<usize>,
    /// Clusterings per layer (V).
    pub clusterings_per_layer: usize,
    /// Fraction of input dimensions each clustering observes (a).
    pub feature_fraction: f64,
    /// Per-feature probability of re-sampling a center value (r).
    pub reconstruction_rate: f64,
    pub seed: u64,
}

impl MbnConfig {
    /// 4000-2000-...-15 with 400 clusterings per layer.
    pub fn full_scale(reconstruction_rate: f64, seed: u64) -> Self {
        MbnConfig {
            k_schedule: vec![4000, 2000, 1000, 500, 250, 125, 65, 30, 15],
            clusterings_per_layer: 400,
            feature_fraction: 0.5,
            reconstruction_rate,
            seed,
        }
    }

    /// Scaled-down schedule for a few hundred training rows.
    pub fn desk(seed: u64) -> Self {
        MbnConfig {
            k_schedule: vec![256, 128, 64, 32, 16],
            clusterings_per_layer: 100,
            feature_fraction: 0.5,
            reconstruction_rate: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_schedule.is_empty() {
            return Err(Error::argument("k_schedule must not be empty"));
        }
        if let Some(k) = self.k_schedule.iter().find(|&&k| k < 2) {
            return Err(Error::argument(format!("every k must be >= 2, got {k}")));
        }
        if self.k_schedule.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::argument(format!(
                "k_schedule must be non-increasing, got {:?}",
                self.k_schedule
            )));
        }
        if self.clusterings_per_layer < 1 {
            return Err(Error::argument("clusterings_per_layer must be >= 1"));
        }
        check_fractions(self.feature_fraction, self.reconstruction_rate)
    }

    /// Largest k, which bounds the training set size from below.
    pub fn max_k(&self) -> usize {
        self.k_schedule.iter().copied().max().unwrap_or(0)
    }
}

fn check_fractions(a: f64, r: f64) -> Result<()> {
    if !(a > 0.0 && a <= 1.0) {
        return Err(Error::argument(format!("feature_fraction must be in (0, 1], got {a}")));
    }
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::argument(format!("reconstruction_rate must be in [0, 1], got {r}")));
    }
    Ok(())
}

/// Binary matrix stored as strictly increasing active-column lists per row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseBinaryMatrix {
    cols: usize,
    offsets: Vec<usize>,
    indices: Vec<u32>,
}

impl SparseBinaryMatrix {
    pub fn from_rows(cols: usize, rows: &[Vec<u32>]) -> Result<Self> {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        offsets.push(0);
        let mut indices = Vec::new();
        for (i, r) in rows.iter().enumerate() {
            check_active_row(i, r, cols)?;
            indices.extend_from_slice(r);
            offsets.push(indices.len());
        }
        Ok(SparseBinaryMatrix { cols, offsets, indices })
    }

    /// Rows of exactly `per_row` actives, concatenated.
    pub(crate) fn from_uniform_unchecked(cols: usize, per_row: usize, indices: Vec<u32>) -> Self {
        let rows = if per_row == 0 { 0 } else { indices.len() / per_row };
        let offsets = (0..=rows).map(|i| i * per_row).collect();
        SparseBinaryMatrix { cols, offsets, indices }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[u32] {
        &self.indices[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub(crate) fn indices(&self) -> &[u32] {
        &self.indices
    }

    #[inline]
    pub fn contains(&self, i: usize, col: u32) -> bool {
        self.row(i).binary_search(&col).is_ok()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        offsets.push(0);
        let mut indices = Vec::new();
        for &i in rows {
            indices.extend_from_slice(self.row(i));
            offsets.push(indices.len());
        }
        SparseBinaryMatrix { cols: self.cols, offsets, indices }
    }

    pub fn to_dense<T: Scalar>(&self) -> DenseMatrix<T> {
        let mut m = DenseMatrix::zeros(self.rows(), self.cols);
        for i in 0..self.rows() {
            let row = m.row_mut(i);
            for &c in self.row(i) {
                row[c as usize] = T::one();
            }
        }
        m
    }
}

fn check_active_row(i: usize, r: &[u32], cols: usize) -> Result<()> {
    if r.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::argument(format!("active indices of row {i} are not strictly increasing")));
    }
    if let Some(&last) = r.last() {
        if last as usize >= cols {
            return Err(Error::argument(format!("row {i} has active index {last} >= {cols} columns")));
        }
    }
    Ok(())
}

/// Borrowed layer input: dense real rows or sparse binary rows.
#[derive(Debug, Clone, Copy)]
pub enum LayerInput<'a, T> {
    Dense(&'a DenseMatrix<T>),
    Sparse(&'a SparseBinaryMatrix),
}

impl<'a, T: Scalar> LayerInput<'a, T> {
    pub fn rows(&self) -> usize {
        match self {
            LayerInput::Dense(m) => m.rows(),
            LayerInput::Sparse(m) => m.rows(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            LayerInput::Dense(m) => m.cols(),
            LayerInput::Sparse(m) => m.cols(),
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> RowRef<'a, T> {
        match *self {
            LayerInput::Dense(m) => RowRef::Dense(m.row(i)),
            LayerInput::Sparse(m) => RowRef::Sparse(m.row(i)),
        }
    }
}

/// One sample, either as dense values or as sorted active indices.
#[derive(Debug, Clone, Copy)]
pub enum RowRef<'a, T> {
    Dense(&'a [T]),
    Sparse(&'a [u32]),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    Euclidean,
    DotProduct,
}

/// Center values restricted to a clustering's feature subset.
#[derive(Debug, Clone, PartialEq)]
pub enum Centers<T> {
    /// k x |subset| real values.
    Dense(DenseMatrix<T>),
    /// k x |subset| binary values, as active subset positions per center.
    Binary(SparseBinaryMatrix),
}

impl<T: Scalar> Centers<T> {
    pub fn k(&self) -> usize {
        match self {
            Centers::Dense(m) => m.rows(),
            Centers::Binary(m) => m.rows(),
        }
    }

    fn width(&self) -> usize {
        match self {
            Centers::Dense(m) => m.cols(),
            Centers::Binary(m) => m.cols(),
        }
    }

    /// Value of center `j` at subset position `p`.
    pub fn value(&self, j: usize, p: usize) -> T {
        match self {
            Centers::Dense(m) => m.get(j, p),
            Centers::Binary(m) => {
                if m.contains(j, p as u32) {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

/// Position-major view of binary centers: for each subset position, the
/// centers active there.
#[derive(Debug, Clone, PartialEq)]
struct InvertedIndex {
    offsets: Vec<u32>,
    centers: Vec<u32>,
    sizes: Vec<u32>,
}

impl InvertedIndex {
    fn build(centers: &SparseBinaryMatrix) -> Self {
        let width = centers.cols();
        let mut counts = vec![0u32; width + 1];
        for &p in centers.indices() {
            counts[p as usize + 1] += 1;
        }
        for p in 0..width {
            counts[p + 1] += counts[p];
        }
        let mut fill = counts.clone();
        let mut postings = vec![0u32; centers.nnz()];
        for j in 0..centers.rows() {
            for &p in centers.row(j) {
                postings[fill[p as usize] as usize] = j as u32;
                fill[p as usize] += 1;
            }
        }
        let sizes = (0..centers.rows()).map(|j| centers.row(j).len() as u32).collect();
        InvertedIndex { offsets: counts, centers: postings, sizes }
    }

    #[inline]
    fn postings(&self, p: usize) -> &[u32] {
        &self.centers[self.offsets[p] as usize..self.offsets[p + 1] as usize]
    }
}

/// A k-centers clustering over a random subset of input dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct CentersClustering<T> {
    feature_subset: Vec<u32>,
    centers: Centers<T>,
    index: Option<InvertedIndex>,
}

impl<T: Scalar> CentersClustering<T> {
    pub fn new(feature_subset: Vec<u32>, centers: Centers<T>) -> Result<Self> {
        if feature_subset.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::argument("feature subset must be strictly increasing"));
        }
        if centers.width() != feature_subset.len() {
            return Err(Error::DimensionMismatch { expected: feature_subset.len(), found: centers.width() });
        }
        if centers.k() < 2 {
            return Err(Error::argument(format!("a clustering needs k >= 2 centers, got {}", centers.k())));
        }
        let index = match &centers {
            Centers::Binary(m) => Some(InvertedIndex::build(m)),
            Centers::Dense(_) => None,
        };
        Ok(CentersClustering { feature_subset, centers, index })
    }

    pub fn feature_subset(&self) -> &[u32] {
        &self.feature_subset
    }

    pub fn centers(&self) -> &Centers<T> {
        &self.centers
    }

    pub fn k(&self) -> usize {
        self.centers.k()
    }

    /// Nearest center under `metric`, restricted to the feature subset.
    /// Ties go to the lowest index.
    pub fn encode(&self, x: RowRef<'_, T>, metric: Metric) -> usize {
        let mut scratch = Vec::new();
        self.encode_with(x, metric, &mut scratch)
    }

    fn encode_with(&self, x: RowRef<'_, T>, metric: Metric, scratch: &mut Vec<u32>) -> usize {
        match (&self.centers, x) {
            (Centers::Dense(c), RowRef::Dense(row)) => {
                let sub: Vec<T> = self.feature_subset.iter().map(|&f| row[f as usize]).collect();
                nearest_dense(c, &sub, metric)
            }
            (Centers::Dense(c), RowRef::Sparse(active)) => {
                let mut sub = vec![T::zero(); self.feature_subset.len()];
                for p in self.positions(active) {
                    sub[p] = T::one();
                }
                nearest_dense(c, &sub, metric)
            }
            (Centers::Binary(c), RowRef::Sparse(active)) => {
                let index = self.index.as_ref().expect("binary centers carry an inverted index");
                let k = c.rows();
                scratch.clear();
                scratch.resize(k, 0);
                let mut present = 0u32;
                for p in self.positions(active) {
                    present += 1;
                    for &j in index.postings(p) {
                        scratch[j as usize] += 1;
                    }
                }
                match metric {
                    Metric::DotProduct => argmax_first(scratch.iter().map(|&o| o as i64)),
                    // |x|^2 - 2 x.c + |c|^2 on binary vectors
                    Metric::Euclidean => argmax_first(
                        scratch
                            .iter()
                            .zip(&index.sizes)
                            .map(|(&o, &s)| -(present as i64 - 2 * o as i64 + s as i64)),
                    ),
                }
            }
            (Centers::Binary(c), RowRef::Dense(row)) => {
                let sub: Vec<T> = self.feature_subset.iter().map(|&f| row[f as usize]).collect();
                let base = match metric {
                    Metric::Euclidean => sub.iter().fold(T::zero(), |acc, &v| acc + v * v),
                    Metric::DotProduct => T::zero(),
                };
                let two = T::of(2.0);
                let mut best = 0;
                let mut best_score = T::zero();
                for j in 0..c.rows() {
                    let active = c.row(j);
                    let hit = active.iter().fold(T::zero(), |acc, &p| acc + sub[p as usize]);
                    let score = match metric {
                        Metric::DotProduct => hit,
                        Metric::Euclidean => -(base - two * hit + T::from_count(active.len())),
                    };
                    if j == 0 || score > best_score {
                        best = j;
                        best_score = score;
                    }
                }
                best
            }
        }
    }

    /// Subset positions of the active input columns.
    fn positions<'s>(&'s self, active: &'s [u32]) -> impl Iterator<Item = usize> + 's {
        active.iter().filter_map(move |a| self.feature_subset.binary_search(a).ok())
    }
}

fn nearest_dense<T: Scalar>(centers: &DenseMatrix<T>, sub: &[T], metric: Metric) -> usize {
    let mut best = 0;
    let mut best_score = T::zero();
    for (j, c) in centers.row_iter().enumerate() {
        let better = match metric {
            Metric::Euclidean => {
                let d = crate::scalar::squared_distance(sub, c);
                let b = j == 0 || d < best_score;
                if b {
                    best_score = d;
                }
                b
            }
            Metric::DotProduct => {
                let s = crate::scalar::dot(sub, c);
                let b = j == 0 || s > best_score;
                if b {
                    best_score = s;
                }
                b
            }
        };
        if better {
            best = j;
        }
    }
    best
}

fn argmax_first(scores: impl Iterator<Item = i64>) -> usize {
    let mut best = 0;
    let mut best_score = i64::MIN;
    for (j, s) in scores.enumerate() {
        if s > best_score {
            best = j;
            best_score = s;
        }
    }
    best
}

/// Draws one clustering: `ceil(a * dim)` distinct features, `k` distinct
/// rows as centers, then optional random reconstruction where each center
/// feature is, with probability `r`, replaced by the same feature of a
/// uniformly re-drawn row.
pub fn sample_clustering<T: Scalar, R: Rng + ?Sized>(
    input: LayerInput<'_, T>,
    k: usize,
    feature_fraction: f64,
    reconstruction_rate: f64,
    rng: &mut R,
) -> Result<CentersClustering<T>> {
    check_fractions(feature_fraction, reconstruction_rate)?;
    let n = input.rows();
    let dim = input.cols();
    if k > n {
        return Err(Error::InsufficientSamples { layer: None, needed: k, found: n });
    }
    if dim == 0 {
        return Err(Error::argument("cannot cluster zero-dimensional input"));
    }
    let m = subset_size(feature_fraction, dim);
    let mut subset: Vec<u32> = index::sample(rng, dim, m).into_iter().map(|f| f as u32).collect();
    subset.sort_unstable();
    let rows = index::sample(rng, n, k).into_vec();
    let r = reconstruction_rate;

    let centers = match input {
        LayerInput::Dense(x) => {
            let mut values = Vec::with_capacity(k * m);
            for &i in &rows {
                let src = x.row(i);
                for &f in &subset {
                    let v = if r > 0.0 && rng.random::<f64>() < r {
                        x.get(rng.random_range(0..n), f as usize)
                    } else {
                        src[f as usize]
                    };
                    values.push(v);
                }
            }
            Centers::Dense(DenseMatrix::from_parts_unchecked(k, m, values))
        }
        LayerInput::Sparse(x) => {
            let mut center_rows = Vec::with_capacity(k);
            for &i in &rows {
                let active: Vec<u32> = if r > 0.0 {
                    let mut out = Vec::new();
                    for (p, &f) in subset.iter().enumerate() {
                        let on = if rng.random::<f64>() < r {
                            x.contains(rng.random_range(0..n), f)
                        } else {
                            x.contains(i, f)
                        };
                        if on {
                            out.push(p as u32);
                        }
                    }
                    out
                } else {
                    x.row(i).iter().filter_map(|a| subset.binary_search(a).ok().map(|p| p as u32)).collect()
                };
                center_rows.push(active);
            }
            Centers::Binary(SparseBinaryMatrix::from_rows(m, &center_rows)?)
        }
    };
    CentersClustering::new(subset, centers)
}

/// Number of features a clustering observes.
pub fn subset_size(feature_fraction: f64, dim: usize) -> usize {
    // guard against products such as 0.1 * 30 = 3.0000000000000004
    let m = (feature_fraction * dim as f64 - 1e-9).ceil() as usize;
    m.clamp(1, dim)
}

/// One ensemble of `V` clusterings sharing an input space.
#[derive(Debug, Clone, PartialEq)]
pub struct MbnLayer<T> {
    input_dim: usize,
    k: usize,
    metric: Metric,
    clusterings: Vec<CentersClustering<T>>,
}

impl<T: Scalar> MbnLayer<T> {
    pub fn new(input_dim: usize, metric: Metric, clusterings: Vec<CentersClustering<T>>) -> Result<Self> {
        let k = clusterings
            .first()
            .map(|c| c.k())
            .ok_or_else(|| Error::argument("a layer needs at least one clustering"))?;
        for c in &clusterings {
            if c.k() != k {
                return Err(Error::argument(format!("mixed k within a layer: {} vs {k}", c.k())));
            }
            if c.feature_subset.last().is_some_and(|&f| f as usize >= input_dim) {
                return Err(Error::argument(format!("feature index beyond input dimension {input_dim}")));
            }
        }
        Ok(MbnLayer { input_dim, k, metric, clusterings })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn clusterings(&self) -> &[CentersClustering<T>] {
        &self.clusterings
    }

    pub fn output_dim(&self) -> usize {
        self.clusterings.len() * self.k
    }

    /// One-hot block encoding of every input row.
    pub fn transform(&self, input: LayerInput<'_, T>) -> Result<SparseBinaryMatrix> {
        if input.cols() != self.input_dim {
            return Err(Error::DimensionMismatch { expected: self.input_dim, found: input.cols() });
        }
        let v = self.clusterings.len();
        let mut indices = vec![0u32; input.rows() * v];
        indices.par_chunks_mut(v).enumerate().for_each_init(Vec::new, |scratch, (i, out)| {
            let row = input.row(i);
            for (b, (slot, c)) in out.iter_mut().zip(&self.clusterings).enumerate() {
                *slot = (b * self.k + c.encode_with(row, self.metric, scratch)) as u32;
            }
        });
        Ok(SparseBinaryMatrix::from_uniform_unchecked(self.output_dim(), v, indices))
    }
}

/// Trained bootstrap network.
#[derive(Debug, Clone, PartialEq)]
pub struct MbnModel<T> {
    layers: Vec<MbnLayer<T>>,
    config: MbnConfig,
}

impl<T: Scalar> MbnModel<T> {
    pub fn from_layers(layers: Vec<MbnLayer<T>>, config: MbnConfig) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::argument("a model needs at least one layer"));
        }
        for (l, w) in layers.windows(2).enumerate() {
            if w[1].input_dim != w[0].output_dim() {
                return Err(Error::argument(format!(
                    "layer {} expects {} inputs but layer {} emits {}",
                    l + 2,
                    w[1].input_dim,
                    l + 1,
                    w[0].output_dim()
                )));
            }
        }
        Ok(MbnModel { layers, config })
    }

    pub fn layers(&self) -> &[MbnLayer<T>] {
        &self.layers
    }

    pub fn config(&self) -> &MbnConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, MbnLayer::output_dim)
    }

    /// Top-layer sparse representation.
    pub fn transform(&self, x: &DenseMatrix<T>) -> Result<SparseBinaryMatrix> {
        let mut out = self.layers[0].transform(LayerInput::Dense(x))?;
        for layer in &self.layers[1..] {
            out = layer.transform(LayerInput::Sparse(&out))?;
        }
        Ok(out)
    }

    /// Output of every layer, bottom first.
    pub fn transform_layers(&self, x: &DenseMatrix<T>) -> Result<Vec<SparseBinaryMatrix>> {
        let mut outs: Vec<SparseBinaryMatrix> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let next = match outs.last() {
                None => layer.transform(LayerInput::Dense(x))?,
                Some(prev) => layer.transform(LayerInput::Sparse(prev))?,
            };
            debug_assert_eq!(l, outs.len());
            outs.push(next);
        }
        Ok(outs)
    }
}

/// Random stream for clustering `v` of layer `layer`; independent of
/// evaluation order and thread count.
fn clustering_rng(seed: u64, layer: usize, v: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((layer as u64) << 32) | v as u64);
    rng
}

/// Trains the network layer by layer on `x`.
pub fn train_mbn<T: Scalar>(x: &DenseMatrix<T>, config: &MbnConfig) -> Result<MbnModel<T>> {
    config.validate()?;
    for (l, &k) in config.k_schedule.iter().enumerate() {
        if k > x.rows() {
            return Err(Error::InsufficientSamples { layer: Some(l + 1), needed: k, found: x.rows() });
        }
    }
    let depth = config.k_schedule.len();
    let mut layers = Vec::with_capacity(depth);
    let mut hidden: Option<SparseBinaryMatrix> = None;
    for (l, &k) in config.k_schedule.iter().enumerate() {
        let (input, metric) = match &hidden {
            None => (LayerInput::Dense(x), Metric::Euclidean),
            Some(h) => (LayerInput::Sparse(h), Metric::DotProduct),
        };
        let clusterings = (0..config.clusterings_per_layer)
            .into_par_iter()
            .map(|v| {
                let mut rng = clustering_rng(config.seed, l, v);
                sample_clustering(input, k, config.feature_fraction, config.reconstruction_rate, &mut rng)
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| match e {
                Error::InsufficientSamples { needed, found, .. } => {
                    Error::InsufficientSamples { layer: Some(l + 1), needed, found }
                }
                other => other,
            })?;
        let layer = MbnLayer::new(input.cols(), metric, clusterings)?;
        if l + 1 < depth {
            hidden = Some(layer.transform(input)?);
        }
        layers.push(layer);
    }
    MbnModel::from_layers(layers, config.clone())
}

/// Forward pass to the top hidden layer.
pub fn mbn_transform<T: Scalar>(model: &MbnModel<T>, x: &DenseMatrix<T>) -> Result<SparseBinaryMatrix> {
    model.transform(x)
}
