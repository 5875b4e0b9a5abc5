//! CMBN model container.
//!
//! ```text
//! magic      4 bytes  "CMBN"
//! version    u32 LE   (currently 1)
//! kind       u32 LE   1 = mbn, 2 = pca, 3 = mlp, 4 = kmeans
//! sections   u32 LE   number of sections that follow
//! section*:
//!   tag      u32 LE
//!   length   u64 LE   payload bytes
//!   payload  length bytes
//!   crc32    u32 LE   CRC-32 (IEEE) of the payload
//! ```
//!
//! Payloads write dimensions before data. Reals are little-endian IEEE-754
//! binary64, integers little-endian u64 (feature and active indices u32).
//! Configuration echoes are stored as UTF-8 JSON.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::cluster_eval::KmeansResult;
use crate::dataset::{DenseMatrix, LabelVector};
use crate::empca::PcaModel;
use crate::error::{Error, Result};
use crate::mbn::{Centers, CentersClustering, MbnConfig, MbnLayer, MbnModel, Metric, SparseBinaryMatrix};
use crate::mlp::{DenseLayer, MlpConfig, MlpModel};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"CMBN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Mbn = 1,
    Pca = 2,
    Mlp = 3,
    Kmeans = 4,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Mbn => "mbn",
            ModelKind::Pca => "pca",
            ModelKind::Mlp => "mlp",
            ModelKind::Kmeans => "kmeans",
        }
    }

    fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            1 => Some(ModelKind::Mbn),
            2 => Some(ModelKind::Pca),
            3 => Some(ModelKind::Mlp),
            4 => Some(ModelKind::Kmeans),
            _ => None,
        }
    }
}

/// One tagged payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub tag: u32,
    pub payload: Vec<u8>,
}

/// A model that can live in a CMBN container.
pub trait ContainerModel: Sized {
    const KIND: ModelKind;
    fn to_sections(&self) -> Vec<Section>;
    fn from_sections(sections: &[Section]) -> Result<Self>;
}

pub fn encode<M: ContainerModel>(model: &M) -> Vec<u8> {
    let sections = model.to_sections();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(M::KIND as u32).to_le_bytes());
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for s in &sections {
        out.extend_from_slice(&s.tag.to_le_bytes());
        out.extend_from_slice(&(s.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&s.payload);
        out.extend_from_slice(&crc32fast::hash(&s.payload).to_le_bytes());
    }
    out
}

/// Reads the header and returns the stored model kind.
pub fn peek_kind(bytes: &[u8]) -> Result<ModelKind> {
    let (kind, _) = read_header(bytes)?;
    Ok(kind)
}

fn read_header(bytes: &[u8]) -> Result<(ModelKind, u32)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a CMBN container (bad magic)".into()));
    }
    if bytes.len() < 16 {
        return Err(Error::Checksum { section: "header".into(), reason: "truncated header".into() });
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != FORMAT_VERSION {
        return Err(Error::Version { found: version, supported: FORMAT_VERSION });
    }
    let tag = word(8);
    let kind = ModelKind::from_tag(tag)
        .ok_or_else(|| Error::Format(format!("unknown model kind tag {tag}")))?;
    Ok((kind, word(12)))
}

pub fn decode<M: ContainerModel>(bytes: &[u8]) -> Result<M> {
    let (kind, count) = read_header(bytes)?;
    if kind != M::KIND {
        return Err(Error::KindMismatch { expected: M::KIND.name().into(), found: kind.name().into() });
    }
    let mut at = 16usize;
    let mut sections = Vec::with_capacity(count.min(1024) as usize);
    for s in 0..count {
        let name = format!("#{s}");
        let truncated = || Error::Checksum { section: name.clone(), reason: "file truncated".into() };
        let head = bytes.get(at..at + 12).ok_or_else(truncated)?;
        let tag = u32::from_le_bytes(head[..4].try_into().expect("4 bytes"));
        let len = u64::from_le_bytes(head[4..].try_into().expect("8 bytes"));
        let len = usize::try_from(len).map_err(|_| truncated())?;
        at += 12;
        let end = at.checked_add(len).ok_or_else(truncated)?;
        let payload = bytes.get(at..end).ok_or_else(truncated)?;
        let crc = bytes.get(end..end + 4).ok_or_else(truncated)?;
        let stored = u32::from_le_bytes(crc.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(payload);
        if stored != actual {
            return Err(Error::Checksum {
                section: name,
                reason: format!("crc32 {actual:08x} does not match stored {stored:08x}"),
            });
        }
        sections.push(Section { tag, payload: payload.to_vec() });
        at = end + 4;
    }
    if at != bytes.len() {
        return Err(Error::Checksum {
            section: "trailer".into(),
            reason: format!("{} unexpected bytes after the last section", bytes.len() - at),
        });
    }
    M::from_sections(&sections)
}

pub fn save_model<M: ContainerModel>(path: impl AsRef<Path>, model: &M) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model<M: ContainerModel>(path: impl AsRef<Path>) -> Result<M> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u64).to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn reals<T: Scalar>(&mut self, vs: &[T]) {
        self.u64(vs.len());
        vs.iter().for_each(|v| self.f64(v.as_f64()));
    }

    fn matrix<T: Scalar>(&mut self, m: &DenseMatrix<T>) {
        self.u64(m.rows());
        self.u64(m.cols());
        m.values().iter().for_each(|v| self.f64(v.as_f64()));
    }

    fn indices(&mut self, vs: &[u32]) {
        self.u64(vs.len());
        vs.iter().for_each(|&v| self.u32(v));
    }

    fn section(self, tag: u32) -> Section {
        Section { tag, payload: self.0 }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    section: &'static str,
}

impl<'a> Reader<'a> {
    fn new(section: &'static str, bytes: &'a [u8]) -> Self {
        Reader { bytes, at: 0, section }
    }

    fn bad(&self, reason: impl Into<String>) -> Error {
        Error::Checksum { section: self.section.into(), reason: reason.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).ok_or_else(|| self.bad("length overflow"))?;
        let out = self.bytes.get(self.at..end).ok_or_else(|| self.bad("payload shorter than declared"))?;
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| self.bad("size exceeds address space"))
    }

    /// A count of items of `width` bytes that must fit in the rest.
    fn count(&mut self, width: usize) -> Result<usize> {
        let n = self.u64()?;
        if n.saturating_mul(width) > self.bytes.len() - self.at {
            return Err(self.bad(format!("declares {n} items but the payload is too short")));
        }
        Ok(n)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn reals<T: Scalar>(&mut self) -> Result<Vec<T>> {
        let n = self.count(8)?;
        (0..n).map(|_| self.f64().map(T::of)).collect()
    }

    fn matrix<T: Scalar>(&mut self) -> Result<DenseMatrix<T>> {
        let rows = self.u64()?;
        let cols = self.u64()?;
        let n = rows.checked_mul(cols).ok_or_else(|| self.bad("matrix size overflows"))?;
        if n.saturating_mul(8) > self.bytes.len() - self.at {
            return Err(self.bad(format!("{rows}x{cols} matrix does not fit in the payload")));
        }
        let values = (0..n).map(|_| self.f64().map(T::of)).collect::<Result<Vec<_>>>()?;
        DenseMatrix::from_vec(rows, cols, values)
    }

    fn indices(&mut self) -> Result<Vec<u32>> {
        let n = self.count(4)?;
        (0..n).map(|_| self.u32()).collect()
    }

    fn finish(&self) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(self.bad("trailing bytes in section"));
        }
        Ok(())
    }
}

fn json_section<C: Serialize>(tag: u32, config: &C) -> Section {
    Section { tag, payload: serde_json::to_vec(config).expect("configs serialize") }
}

fn json_payload<C: DeserializeOwned>(section: &'static str, payload: &[u8]) -> Result<C> {
    serde_json::from_slice(payload)
        .map_err(|e| Error::Checksum { section: section.into(), reason: format!("invalid config JSON: {e}") })
}

fn expect_tag<'a>(sections: &'a [Section], i: usize, tag: u32, name: &'static str) -> Result<&'a Section> {
    match sections.get(i) {
        Some(s) if s.tag == tag => Ok(s),
        Some(s) => Err(Error::Checksum { section: name.into(), reason: format!("expected tag {tag}, found {}", s.tag) }),
        None => Err(Error::Checksum { section: name.into(), reason: "missing section".into() }),
    }
}

const TAG_CONFIG: u32 = 1;
const TAG_LAYER: u32 = 2;
const TAG_MEAN: u32 = 3;
const TAG_BASIS: u32 = 4;
const TAG_LABELS: u32 = 5;
const TAG_CENTERS: u32 = 6;
const TAG_INERTIA: u32 = 7;

impl<T: Scalar> ContainerModel for MbnModel<T> {
    const KIND: ModelKind = ModelKind::Mbn;

    fn to_sections(&self) -> Vec<Section> {
        let mut out = vec![json_section(TAG_CONFIG, self.config())];
        for layer in self.layers() {
            let mut w = Writer::default();
            w.u64(layer.input_dim());
            w.u32(match layer.metric() {
                Metric::Euclidean => 0,
                Metric::DotProduct => 1,
            });
            w.u64(layer.clusterings().len());
            for c in layer.clusterings() {
                w.indices(c.feature_subset());
                match c.centers() {
                    Centers::Dense(m) => {
                        w.u32(0);
                        w.matrix(m);
                    }
                    Centers::Binary(m) => {
                        w.u32(1);
                        w.u64(m.rows());
                        w.u64(m.cols());
                        for j in 0..m.rows() {
                            w.indices(m.row(j));
                        }
                    }
                }
            }
            out.push(w.section(TAG_LAYER));
        }
        out
    }

    fn from_sections(sections: &[Section]) -> Result<Self> {
        let config: MbnConfig = json_payload("mbn config", &expect_tag(sections, 0, TAG_CONFIG, "mbn config")?.payload)?;
        let mut layers = Vec::new();
        for i in 1..sections.len() {
            let s = expect_tag(sections, i, TAG_LAYER, "mbn layer")?;
            let mut r = Reader::new("mbn layer", &s.payload);
            let input_dim = r.u64()?;
            let metric = match r.u32()? {
                0 => Metric::Euclidean,
                1 => Metric::DotProduct,
                m => return Err(r.bad(format!("unknown metric {m}"))),
            };
            let v = r.count(1)?;
            let mut clusterings = Vec::with_capacity(v);
            for _ in 0..v {
                let subset = r.indices()?;
                let centers = match r.u32()? {
                    0 => Centers::Dense(r.matrix()?),
                    1 => {
                        let k = r.u64()?;
                        let width = r.u64()?;
                        let rows = (0..k).map(|_| r.indices()).collect::<Result<Vec<_>>>()?;
                        Centers::Binary(SparseBinaryMatrix::from_rows(width, &rows)?)
                    }
                    c => return Err(r.bad(format!("unknown center encoding {c}"))),
                };
                clusterings.push(CentersClustering::new(subset, centers)?);
            }
            r.finish()?;
            layers.push(MbnLayer::new(input_dim, metric, clusterings)?);
        }
        MbnModel::from_layers(layers, config)
    }
}

impl<T: Scalar> ContainerModel for PcaModel<T> {
    const KIND: ModelKind = ModelKind::Pca;

    fn to_sections(&self) -> Vec<Section> {
        let mut mean = Writer::default();
        mean.reals(self.mean());
        let mut basis = Writer::default();
        basis.matrix(self.basis());
        vec![mean.section(TAG_MEAN), basis.section(TAG_BASIS)]
    }

    fn from_sections(sections: &[Section]) -> Result<Self> {
        let mut r = Reader::new("pca mean", &expect_tag(sections, 0, TAG_MEAN, "pca mean")?.payload);
        let mean = r.reals()?;
        r.finish()?;
        let mut r = Reader::new("pca basis", &expect_tag(sections, 1, TAG_BASIS, "pca basis")?.payload);
        let basis = r.matrix()?;
        r.finish()?;
        PcaModel::new(mean, basis)
    }
}

impl<T: Scalar> ContainerModel for MlpModel<T> {
    const KIND: ModelKind = ModelKind::Mlp;

    fn to_sections(&self) -> Vec<Section> {
        let mut out = vec![json_section(TAG_CONFIG, self.config())];
        for layer in self.layers() {
            let mut w = Writer::default();
            w.matrix(&layer.weights);
            w.reals(&layer.bias);
            out.push(w.section(TAG_LAYER));
        }
        out
    }

    fn from_sections(sections: &[Section]) -> Result<Self> {
        let config: MlpConfig = json_payload("mlp config", &expect_tag(sections, 0, TAG_CONFIG, "mlp config")?.payload)?;
        let mut layers = Vec::new();
        for i in 1..sections.len() {
            let mut r = Reader::new("mlp layer", &expect_tag(sections, i, TAG_LAYER, "mlp layer")?.payload);
            let weights = r.matrix()?;
            let bias = r.reals()?;
            r.finish()?;
            layers.push(DenseLayer { weights, bias });
        }
        MlpModel::from_layers(layers, config)
    }
}

impl<T: Scalar> ContainerModel for KmeansResult<T> {
    const KIND: ModelKind = ModelKind::Kmeans;

    fn to_sections(&self) -> Vec<Section> {
        let mut labels = Vec::with_capacity(8 * (self.labels.len() + 2));
        labels.extend_from_slice(&(self.labels.num_classes() as u64).to_le_bytes());
        labels.extend_from_slice(&(self.labels.len() as u64).to_le_bytes());
        for &l in self.labels.as_slice() {
            labels.extend_from_slice(&(l as u64).to_le_bytes());
        }
        let mut centers = Writer::default();
        centers.matrix(&self.centers);
        let mut inertia = Writer::default();
        inertia.f64(self.inertia.as_f64());
        vec![
            Section { tag: TAG_LABELS, payload: labels },
            centers.section(TAG_CENTERS),
            inertia.section(TAG_INERTIA),
        ]
    }

    fn from_sections(sections: &[Section]) -> Result<Self> {
        let mut r = Reader::new("kmeans labels", &expect_tag(sections, 0, TAG_LABELS, "kmeans labels")?.payload);
        let num_classes = r.u64()?;
        let n = r.count(8)?;
        let labels = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        let labels = LabelVector::new(labels, num_classes)?;
        let mut r = Reader::new("kmeans centers", &expect_tag(sections, 1, TAG_CENTERS, "kmeans centers")?.payload);
        let centers = r.matrix()?;
        r.finish()?;
        let mut r = Reader::new("kmeans inertia", &expect_tag(sections, 2, TAG_INERTIA, "kmeans inertia")?.payload);
        let inertia = T::of(r.f64()?);
        r.finish()?;
        if sections.len() != 3 {
            return Err(Error::Checksum { section: "kmeans".into(), reason: "unexpected extra sections".into() });
        }
        Ok(KmeansResult { labels, centers, inertia })
    }
}
