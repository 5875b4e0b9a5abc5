//! Sample containers and data ingestion: MNIST IDX files, CSV matrices and
//! synthetic Gaussian mixtures.

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;

/// Number of digit classes in an MNIST label file.
pub const MNIST_CLASSES: usize = 10;

/// Row-major real matrix. One row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    values: Vec<T>,
}

impl<T: Scalar> DenseMatrix<T> {
    /// Builds a matrix, rejecting a wrong length or any non-finite entry.
    pub fn from_vec(rows: usize, cols: usize, values: Vec<T>) -> Result<Self> {
        let expected = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::argument(format!("{rows}x{cols} matrix overflows")))?;
        if values.len() != expected {
            return Err(Error::argument(format!(
                "{rows}x{cols} matrix needs {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "entry ({}, {}) is {}",
                pos / cols.max(1),
                pos % cols.max(1),
                values[pos]
            )));
        }
        Ok(DenseMatrix { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::argument(format!(
                    "row {i} has {} values, expected {cols}",
                    r.len()
                )));
            }
            values.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, values)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix { rows, cols, values: vec![T::zero(); rows * cols] }
    }

    /// Internal constructor for values already known to be finite.
    pub(crate) fn from_parts_unchecked(rows: usize, cols: usize, values: Vec<T>) -> Self {
        debug_assert_eq!(values.len(), rows * cols);
        DenseMatrix { rows, cols, values }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.values[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[i * self.cols + j]
    }

    pub fn row_iter(&self) -> impl ExactSizeIterator<Item = &[T]> + '_ {
        // chunks_exact rejects a zero chunk size
        (0..self.rows).map(move |i| self.row(i))
    }

    /// Gathers the given rows (in the given order) into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut values = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        DenseMatrix { rows: indices.len(), cols: self.cols, values }
    }

    /// Converts between scalar types.
    pub fn cast<U: Scalar>(&self) -> DenseMatrix<U> {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

/// Ground-truth or predicted class labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVector {
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabelVector {
    pub fn new(labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::argument(format!(
                "label {l} at position {i} is not below num_classes={num_classes}"
            )));
        }
        Ok(LabelVector { labels, num_classes })
    }

    /// Uses `max + 1` as the class count.
    pub fn from_labels(labels: Vec<usize>) -> Self {
        let num_classes = labels.iter().max().map_or(0, |m| m + 1);
        LabelVector { labels, num_classes }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    #[inline]
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    #[inline]
    pub fn as_slice(&self) -> &[usize] {
        &self.labels
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        LabelVector {
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

/// Contents of an IDX file.
#[derive(Debug, Clone, PartialEq)]
pub enum IdxData<T> {
    /// 3-D image file flattened to `height * width` columns.
    Images {
        matrix: DenseMatrix<T>,
        height: usize,
        width: usize,
    },
    Labels(LabelVector),
}

pub fn load_idx<T: Scalar>(path: impl AsRef<Path>) -> Result<IdxData<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes)
}

/// Parses the big-endian IDX layout used by MNIST. Only unsigned-byte
/// label (rank 1) and image (rank 3) files are accepted.
pub fn parse_idx<T: Scalar>(bytes: &[u8]) -> Result<IdxData<T>> {
    let be_u32 = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| Error::Format(format!("header truncated at byte {at}")))
    };
    let magic = be_u32(0)?;
    match magic {
        IDX_LABELS_MAGIC => {
            let n = be_u32(4)? as usize;
            let payload = &bytes[8..];
            if payload.len() != n {
                return Err(Error::LengthMismatch { expected: n, found: payload.len() });
            }
            let labels = payload.iter().map(|&b| b as usize).collect();
            LabelVector::new(labels, MNIST_CLASSES)
                .map_err(|e| Error::Format(format!("label file: {e}")))
                .map(IdxData::Labels)
        }
        IDX_IMAGES_MAGIC => {
            let n = be_u32(4)? as usize;
            let height = be_u32(8)? as usize;
            let width = be_u32(12)? as usize;
            let cols = height
                .checked_mul(width)
                .ok_or_else(|| Error::Format("image dimensions overflow".into()))?;
            let expected = n
                .checked_mul(cols)
                .ok_or_else(|| Error::Format("image payload size overflows".into()))?;
            let payload = &bytes[16..];
            if payload.len() != expected {
                return Err(Error::LengthMismatch { expected, found: payload.len() });
            }
            let values = payload.iter().map(|&b| T::of(b as f64)).collect();
            Ok(IdxData::Images {
                matrix: DenseMatrix::from_parts_unchecked(n, cols, values),
                height,
                width,
            })
        }
        other => Err(Error::Format(format!(
            "bad IDX magic 0x{other:08x} (expected 0x{IDX_LABELS_MAGIC:08x} or 0x{IDX_IMAGES_MAGIC:08x})"
        ))),
    }
}

/// Serializes labels in the IDX rank-1 layout.
pub fn encode_idx_labels(labels: &LabelVector) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels.as_slice() {
        let b = u8::try_from(l).map_err(|_| Error::argument(format!("label {l} exceeds a byte")))?;
        out.push(b);
    }
    Ok(out)
}

/// Serializes pixel rows in the IDX rank-3 layout. Entries must be whole
/// numbers in `[0, 255]`.
pub fn encode_idx_images<T: Scalar>(images: &DenseMatrix<T>, height: usize, width: usize) -> Result<Vec<u8>> {
    if height * width != images.cols() {
        return Err(Error::DimensionMismatch { expected: height * width, found: images.cols() });
    }
    let mut out = Vec::with_capacity(16 + images.values().len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [images.rows(), height, width] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for &v in images.values() {
        let f = v.as_f64();
        if !(0.0..=255.0).contains(&f) || f.fract() != 0.0 {
            return Err(Error::argument(format!("pixel value {f} is not a byte")));
        }
        out.push(f as u8);
    }
    Ok(out)
}

pub fn load_csv<T: Scalar>(path: impl AsRef<Path>, has_header: bool) -> Result<DenseMatrix<T>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_csv(file, has_header)
}

/// Reads a rectangular numeric CSV. Line numbers in errors are 1-based and
/// count the header line when present.
pub fn parse_csv<T: Scalar, R: Read>(reader: R, has_header: bool) -> Result<DenseMatrix<T>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut cols = None;
    let mut rows = 0usize;
    let mut values = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Format(format!("CSV: {e}")))?;
        let line = record.position().map_or(0, |p| p.line());
        match cols {
            None => cols = Some(record.len()),
            Some(c) if c != record.len() => {
                return Err(Error::RaggedRow { line, expected: c, found: record.len() });
            }
            _ => {}
        }
        for (field, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                line,
                field: field + 1,
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse { line, field: field + 1, value: cell.to_string() });
            }
            values.push(T::of(v));
        }
        rows += 1;
    }
    DenseMatrix::from_vec(rows, cols.unwrap_or(0), values)
}

/// Writes a matrix as header-less CSV.
pub fn write_csv<T: Scalar>(path: impl AsRef<Path>, m: &DenseMatrix<T>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    for row in m.row_iter() {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes labels as a single-column CSV.
pub fn write_labels_csv(path: impl AsRef<Path>, labels: &LabelVector) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    for l in labels.as_slice() {
        w.write_record([l.to_string()]).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a single-column label CSV (non-negative integers).
pub fn load_labels_csv(path: impl AsRef<Path>, has_header: bool) -> Result<LabelVector> {
    let m: DenseMatrix<f64> = load_csv(path, has_header)?;
    if m.cols() != 1 && m.rows() > 0 {
        return Err(Error::DimensionMismatch { expected: 1, found: m.cols() });
    }
    let mut labels = Vec::with_capacity(m.rows());
    for (i, &v) in m.values().iter().enumerate() {
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::Parse { line: i as u64 + 1, field: 1, value: v.to_string() });
        }
        labels.push(v as usize);
    }
    Ok(LabelVector::from_labels(labels))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("CSV write to {}: {other:?}", path.display())),
    }
}

/// Divides every entry by `divisor` (255 for raw MNIST pixels).
pub fn normalize_scale<T: Scalar>(x: &DenseMatrix<T>, divisor: T) -> Result<DenseMatrix<T>> {
    if !(divisor > T::zero()) || !divisor.is_finite() {
        return Err(Error::argument(format!("divisor must be positive and finite, got {divisor}")));
    }
    let values = x.values().iter().map(|&v| v / divisor).collect();
    Ok(DenseMatrix::from_parts_unchecked(x.rows(), x.cols(), values))
}

/// Isotropic unit-variance Gaussian classes centred at `separation * e_c`
/// (basis direction `c mod dim`). Rows are interleaved so row `i` has label
/// `i % classes`.
///
/// The generator is ChaCha8 seeded through `SeedableRng::seed_from_u64`,
/// with standard normals from `rand_distr`'s ziggurat sampler; both are
/// platform-independent.
pub fn make_synthetic_gaussians<T: Scalar>(
    seed: u64,
    n_per_class: usize,
    classes: usize,
    dim: usize,
    separation: f64,
) -> Result<(DenseMatrix<T>, LabelVector)> {
    if classes < 1 || dim < 1 || n_per_class < 1 {
        return Err(Error::argument(format!(
            "synthetic data needs classes, dim and n_per_class >= 1 (got {classes}, {dim}, {n_per_class})"
        )));
    }
    if !separation.is_finite() {
        return Err(Error::argument("separation must be finite"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_per_class * classes;
    let mut values = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let axis = class % dim;
        for j in 0..dim {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let centre = if j == axis { separation } else { 0.0 };
            values.push(T::of(centre + noise));
        }
        labels.push(class);
    }
    Ok((DenseMatrix::from_parts_unchecked(n, dim, values), LabelVector::new(labels, classes)?))
}

/// `count` distinct row indices drawn uniformly from `0..n`, ascending.
pub fn sample_indices(n: usize, count: usize, seed: u64) -> Result<Vec<usize>> {
    if count > n {
        return Err(Error::argument(format!("cannot sample {count} rows from {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, n, count).into_vec();
    picked.sort_unstable();
    Ok(picked)
}
