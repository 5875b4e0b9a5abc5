//! The three-step compression pipeline: train the bootstrap teacher, derive
//! the application output (an embedding, or k-means indicator vectors), then
//! distill it into the feedforward student and compare both at prediction
//! time.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::cluster_eval::{argmax_rows, assign_nearest_center, kmeans, labels_to_indicators, nmi, KmeansConfig, KmeansResult};
use crate::container::save_model;
use crate::dataset::{write_csv, write_labels_csv, DenseMatrix, LabelVector};
use crate::empca::{fit_empca, EmpcaConfig, PcaModel};
use crate::error::{Error, Result, StageExt};
use crate::linalg;
use crate::mbn::{train_mbn, MbnConfig, MbnModel};
use crate::mlp::{predict, train_mlp, MlpConfig, MlpModel, OutputActivation, TrainTrace};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// No application step: the student regresses the teacher's embedding.
    Visualization,
    /// k-means on the teacher's embedding; the student regresses indicators.
    Clustering,
}

/// Optional input/output locations for file-driven runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub mode: Mode,
    /// Master seed the stage seeds were derived from.
    pub seed: u64,
    pub mbn: MbnConfig,
    pub empca: EmpcaConfig,
    /// Required in clustering mode. In visualization mode, used only to
    /// score the embeddings when labels are supplied.
    #[serde(default)]
    pub kmeans: Option<KmeansConfig>,
    pub mlp: MlpConfig,
    pub bench_repeats: usize,
    #[serde(default)]
    pub paths: PathsConfig,
}

impl PipelineConfig {
    /// Scaled-down clustering run: V=100, k 256-128-64-32-16, 5-D EM-PCA,
    /// k-means to `classes`, student input-256-256-classes.
    pub fn desk_clustering(input_dim: usize, classes: usize, seed: u64) -> Self {
        PipelineConfig {
            mode: Mode::Clustering,
            seed,
            mbn: MbnConfig::desk(seed),
            empca: EmpcaConfig::new(5, seed),
            kmeans: Some(KmeansConfig::new(classes, seed)),
            mlp: MlpConfig {
                layer_sizes: vec![input_dim, 256, 256, classes],
                output_activation: OutputActivation::Sigmoid,
                dropout_rate: 0.2,
                learning_rate: 0.1,
                batch_size: 32,
                epochs: 60,
                seed,
            },
            bench_repeats: 5,
            paths: PathsConfig::default(),
        }
        .with_seed(seed)
    }

    /// Scaled-down visualization run with random reconstruction 0.5 and a
    /// 2-D embedding.
    pub fn desk_visualization(input_dim: usize, seed: u64) -> Self {
        let mut c = Self::desk_clustering(input_dim, 2, seed);
        c.mode = Mode::Visualization;
        c.mbn.reconstruction_rate = 0.5;
        c.empca.target_dim = 2;
        c.kmeans = None;
        c.mlp.output_activation = OutputActivation::Linear;
        c.mlp.learning_rate = 0.01;
        c.mlp.epochs = 120;
        c.with_seed(seed)
    }

    /// 5,000-image MNIST visualization settings.
    pub fn mnist_visualization(seed: u64) -> Self {
        PipelineConfig {
            mode: Mode::Visualization,
            seed,
            mbn: MbnConfig::full_scale(0.5, seed),
            empca: EmpcaConfig::new(2, seed),
            kmeans: None,
            mlp: MlpConfig::mnist_visualization(seed),
            bench_repeats: 5,
            paths: PathsConfig::default(),
        }
        .with_seed(seed)
    }

    /// Full-MNIST clustering settings. `reconstruction_rate` 0 embeds to
    /// 5-D; 0.5 embeds to 2-D.
    pub fn mnist_clustering(reconstruction_rate: f64, seed: u64) -> Self {
        let target_dim = if reconstruction_rate > 0.0 { 2 } else { 5 };
        PipelineConfig {
            mode: Mode::Clustering,
            seed,
            mbn: MbnConfig::full_scale(reconstruction_rate, seed),
            empca: EmpcaConfig::new(target_dim, seed),
            kmeans: Some(KmeansConfig::new(10, seed)),
            mlp: MlpConfig::mnist_clustering(seed),
            bench_repeats: 5,
            paths: PathsConfig::default(),
        }
        .with_seed(seed)
    }

    /// Re-derives every stage seed from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.mbn.seed = seed;
        self.empca.seed = seed.wrapping_add(1);
        if let Some(k) = &mut self.kmeans {
            k.seed = seed.wrapping_add(2);
        }
        self.mlp.seed = seed.wrapping_add(3);
        self
    }

    /// Checks sub-configs and their consistency with the mode and, when
    /// given, the input width.
    pub fn validate(&self, input_dim: Option<usize>) -> Result<()> {
        self.mbn.validate()?;
        self.empca.validate()?;
        self.mlp.validate()?;
        if self.bench_repeats < 1 {
            return Err(Error::argument("bench_repeats must be >= 1"));
        }
        let out = self.mlp.output_size();
        match self.mode {
            Mode::Visualization => {
                if self.mlp.output_activation != OutputActivation::Linear {
                    return Err(Error::argument("visualization mode needs a linear student output"));
                }
                if out != self.empca.target_dim {
                    return Err(Error::argument(format!(
                        "student output width {out} differs from embedding width {}",
                        self.empca.target_dim
                    )));
                }
            }
            Mode::Clustering => {
                let km = self.kmeans.as_ref().ok_or_else(|| Error::argument("clustering mode needs a kmeans section"))?;
                km.validate()?;
                if self.mlp.output_activation != OutputActivation::Sigmoid {
                    return Err(Error::argument("clustering mode needs a sigmoid student output"));
                }
                if out != km.k {
                    return Err(Error::argument(format!("student output width {out} differs from k-means k={}", km.k)));
                }
            }
        }
        if let Some(d) = input_dim {
            if self.mlp.input_size() != d {
                return Err(Error::argument(format!(
                    "student input width {} differs from data width {d}",
                    self.mlp.input_size()
                )));
            }
        }
        Ok(())
    }
}

/// Wall-clock order statistics over repeated full-batch predictions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchStats {
    pub repeats: usize,
    pub median_seconds: f64,
    pub min_seconds: f64,
    pub max_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: Mode,
    pub teacher_train_nmi: Option<f64>,
    pub teacher_test_nmi: Option<f64>,
    pub student_train_nmi: Option<f64>,
    pub student_test_nmi: Option<f64>,
    /// Median teacher prediction time on the benchmark rows.
    pub teacher_predict_seconds: f64,
    pub student_predict_seconds: f64,
    /// `teacher_predict_seconds / student_predict_seconds`.
    pub speedup_factor: f64,
    pub teacher_timing: BenchStats,
    pub student_timing: BenchStats,
    pub benchmark_rows: usize,
    /// Rayon pool size both predictors were timed under.
    pub threads: usize,
    /// Student-vs-teacher embedding residual after the best affine
    /// alignment, relative to the teacher embedding's spread.
    pub embedding_alignment_error: Option<f64>,
    pub student_final_loss: Option<f64>,
    pub seed: u64,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
    pub config: PipelineConfig,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(format!("run report: {e}")))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// What is being timed.
pub enum Predictor<'a, T> {
    /// Bootstrap transform, PCA projection and, with `centers`, the
    /// nearest-center assignment.
    Teacher {
        mbn: &'a MbnModel<T>,
        pca: &'a PcaModel<T>,
        centers: Option<&'a DenseMatrix<T>>,
    },
    /// Forward pass, followed by a row-wise argmax when `argmax` is set.
    Student { mlp: &'a MlpModel<T>, argmax: bool },
}

pub enum Prediction<T> {
    Embedding(DenseMatrix<T>),
    Labels(LabelVector),
}

impl<T: Scalar> Predictor<'_, T> {
    pub fn predict(&self, x: &DenseMatrix<T>) -> Result<Prediction<T>> {
        match self {
            Predictor::Teacher { mbn, pca, centers } => {
                let hidden = mbn.transform(x)?;
                let embedding = pca.project(&hidden)?;
                match centers {
                    Some(c) => assign_nearest_center(&embedding, c).map(Prediction::Labels),
                    None => Ok(Prediction::Embedding(embedding)),
                }
            }
            Predictor::Student { mlp, argmax } => {
                let out = predict(mlp, x)?;
                Ok(if *argmax { Prediction::Labels(argmax_rows(&out)) } else { Prediction::Embedding(out) })
            }
        }
    }
}

/// One untimed warm-up, then `repeats` timed full-batch predictions on a
/// monotonic clock.
pub fn benchmark_prediction<T: Scalar>(predictor: &Predictor<'_, T>, x: &DenseMatrix<T>, repeats: usize) -> Result<BenchStats> {
    if repeats < 1 {
        return Err(Error::argument("repeats must be >= 1"));
    }
    std::hint::black_box(predictor.predict(x)?);
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        std::hint::black_box(predictor.predict(x)?);
        times.push(start.elapsed().as_secs_f64());
    }
    Ok(order_stats(times))
}

fn order_stats(mut times: Vec<f64>) -> BenchStats {
    times.sort_by(f64::total_cmp);
    let n = times.len();
    let median = if n % 2 == 1 { times[n / 2] } else { 0.5 * (times[n / 2 - 1] + times[n / 2]) };
    BenchStats { repeats: n, median_seconds: median, min_seconds: times[0], max_seconds: times[n - 1] }
}

/// Relative residual `||T - [S 1] B||_F / ||T - mean(T)||_F` of the best
/// affine map `B` from student to teacher embedding.
pub fn affine_alignment_error<T: Scalar>(student: &DenseMatrix<T>, teacher: &DenseMatrix<T>) -> Result<f64> {
    if student.rows() != teacher.rows() {
        return Err(Error::argument("embeddings have different row counts"));
    }
    let (n, ds, dt) = (student.rows(), student.cols(), teacher.cols());
    let mut aug = Vec::with_capacity(n * (ds + 1));
    for row in student.row_iter() {
        aug.extend(row.iter().map(|v| v.as_f64()));
        aug.push(1.0);
    }
    let a = DenseMatrix::from_parts_unchecked(n, ds + 1, aug);
    let t: DenseMatrix<f64> = teacher.cast();
    let gram = linalg::matmul_at(&a, &a);
    let l = linalg::cholesky_regularized(gram.values(), ds + 1);
    let rhs = linalg::matmul_at(&a, &t);
    let mut coef = DenseMatrix::zeros(ds + 1, dt);
    let mut col = vec![0.0; ds + 1];
    for j in 0..dt {
        for (r, c) in col.iter_mut().enumerate() {
            *c = rhs.get(r, j);
        }
        linalg::cholesky_solve(&l, ds + 1, &mut col);
        for (r, &c) in col.iter().enumerate() {
            coef.values_mut()[r * dt + j] = c;
        }
    }
    let fitted = linalg::matmul(&a, &coef);
    let residual: f64 = fitted.values().iter().zip(t.values()).map(|(f, v)| (f - v) * (f - v)).sum();
    let mut spread = 0.0;
    for j in 0..dt {
        let mean = (0..n).map(|i| t.get(i, j)).sum::<f64>() / n.max(1) as f64;
        spread += (0..n).map(|i| (t.get(i, j) - mean).powi(2)).sum::<f64>();
    }
    if spread == 0.0 {
        return Ok(if residual == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok((residual / spread).sqrt())
}

fn unix_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

fn check_mode(config: &PipelineConfig, mode: Mode) -> Result<()> {
    if config.mode != mode {
        return Err(Error::argument(format!("config is for {:?} mode, not {mode:?}", config.mode)));
    }
    Ok(())
}

/// Everything a visualization run produces.
#[derive(Debug, Clone)]
pub struct VisualizationRun<T> {
    pub mbn: MbnModel<T>,
    pub pca: PcaModel<T>,
    pub mlp: MlpModel<T>,
    pub trace: TrainTrace,
    pub teacher_embedding: DenseMatrix<T>,
    pub student_embedding: DenseMatrix<T>,
    pub report: RunReport,
}

/// Teacher embedding from bootstrap features and EM-PCA, then a student
/// trained to reproduce it from the raw input. With labels, both
/// embeddings are scored by k-means NMI.
pub fn run_visualization<T: Scalar>(
    x: &DenseMatrix<T>,
    labels: Option<&LabelVector>,
    config: &PipelineConfig,
) -> Result<VisualizationRun<T>> {
    let started = unix_ms();
    check_mode(config, Mode::Visualization).stage("config")?;
    config.validate(Some(x.cols())).stage("config")?;

    let mbn = train_mbn(x, &config.mbn).stage("mbn")?;
    let hidden = mbn.transform(x).stage("mbn")?;
    let pca = fit_empca(&hidden, &config.empca).stage("empca")?;
    let teacher_embedding = pca.project(&hidden).stage("empca")?;
    drop(hidden);

    let (mlp, trace) = train_mlp(x, &teacher_embedding, &config.mlp).stage("distill")?;
    let student_embedding = predict(&mlp, x).stage("predict")?;
    let alignment = affine_alignment_error(&student_embedding, &teacher_embedding).stage("report")?;

    let (teacher_nmi, student_nmi) = match labels {
        Some(l) => {
            let mut km = config.kmeans.clone().unwrap_or_else(|| KmeansConfig::new(l.num_classes(), config.seed));
            km.k = l.num_classes();
            let t = kmeans(&teacher_embedding, &km).stage("kmeans")?;
            let s = kmeans(&student_embedding, &km).stage("kmeans")?;
            (Some(nmi(l, &t.labels).stage("nmi")?), Some(nmi(l, &s.labels).stage("nmi")?))
        }
        None => (None, None),
    };

    let teacher = Predictor::Teacher { mbn: &mbn, pca: &pca, centers: None };
    let student = Predictor::Student { mlp: &mlp, argmax: false };
    let teacher_timing = benchmark_prediction(&teacher, x, config.bench_repeats).stage("bench")?;
    let student_timing = benchmark_prediction(&student, x, config.bench_repeats).stage("bench")?;

    let report = RunReport {
        mode: Mode::Visualization,
        teacher_train_nmi: teacher_nmi,
        teacher_test_nmi: None,
        student_train_nmi: student_nmi,
        student_test_nmi: None,
        teacher_predict_seconds: teacher_timing.median_seconds,
        student_predict_seconds: student_timing.median_seconds,
        speedup_factor: teacher_timing.median_seconds / student_timing.median_seconds,
        teacher_timing,
        student_timing,
        benchmark_rows: x.rows(),
        threads: rayon::current_num_threads(),
        embedding_alignment_error: Some(alignment),
        student_final_loss: trace.epoch_losses.last().copied(),
        seed: config.seed,
        started_unix_ms: started,
        finished_unix_ms: unix_ms(),
        config: config.clone(),
    };
    Ok(VisualizationRun { mbn, pca, mlp, trace, teacher_embedding, student_embedding, report })
}

impl<T: Scalar> VisualizationRun<T> {
    /// Embeddings as CSV, the report as JSON and the three models.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_csv(dir.join("teacher_embedding.csv"), &self.teacher_embedding)?;
        write_csv(dir.join("student_embedding.csv"), &self.student_embedding)?;
        save_model(dir.join("mbn.cmbn"), &self.mbn)?;
        save_model(dir.join("pca.cmbn"), &self.pca)?;
        save_model(dir.join("mlp.cmbn"), &self.mlp)?;
        self.report.write(dir.join("report.json"))
    }
}

/// Everything a clustering run produces.
#[derive(Debug, Clone)]
pub struct ClusteringRun<T> {
    pub mbn: MbnModel<T>,
    pub pca: PcaModel<T>,
    pub kmeans: KmeansResult<T>,
    pub mlp: MlpModel<T>,
    pub trace: TrainTrace,
    pub teacher_test_labels: LabelVector,
    pub student_train_labels: LabelVector,
    pub student_test_labels: LabelVector,
    pub report: RunReport,
}

/// Teacher: bootstrap features, EM-PCA, k-means on the training split and
/// nearest-center assignment of the projected test split. Student: trained
/// on raw training rows against the k-means indicator vectors, decoded by
/// argmax. Ground-truth labels, when given, are used only for NMI.
pub fn run_clustering<T: Scalar>(
    x_train: &DenseMatrix<T>,
    x_test: &DenseMatrix<T>,
    labels_train: Option<&LabelVector>,
    labels_test: Option<&LabelVector>,
    config: &PipelineConfig,
) -> Result<ClusteringRun<T>> {
    let started = unix_ms();
    check_mode(config, Mode::Clustering).stage("config")?;
    config.validate(Some(x_train.cols())).stage("config")?;
    if x_test.cols() != x_train.cols() {
        return Err(Error::DimensionMismatch { expected: x_train.cols(), found: x_test.cols() }).stage("config");
    }
    let km_config = config.kmeans.as_ref().expect("validated clustering config");

    let mbn = train_mbn(x_train, &config.mbn).stage("mbn")?;
    let hidden = mbn.transform(x_train).stage("mbn")?;
    let pca = fit_empca(&hidden, &config.empca).stage("empca")?;
    let embedding = pca.project(&hidden).stage("empca")?;
    drop(hidden);
    let clusters = kmeans(&embedding, km_config).stage("kmeans")?;
    let targets: DenseMatrix<T> = labels_to_indicators(&clusters.labels, km_config.k).stage("kmeans")?;

    let (mlp, trace) = train_mlp(x_train, &targets, &config.mlp).stage("distill")?;

    let teacher = Predictor::Teacher { mbn: &mbn, pca: &pca, centers: Some(&clusters.centers) };
    let student = Predictor::Student { mlp: &mlp, argmax: true };
    let labels_of = |p: &Predictor<'_, T>, x: &DenseMatrix<T>| -> Result<LabelVector> {
        match p.predict(x)? {
            Prediction::Labels(l) => Ok(l),
            Prediction::Embedding(_) => unreachable!("cluster predictors emit labels"),
        }
    };
    let teacher_test_labels = labels_of(&teacher, x_test).stage("predict")?;
    let student_train_labels = labels_of(&student, x_train).stage("predict")?;
    let student_test_labels = labels_of(&student, x_test).stage("predict")?;

    let score = |truth: Option<&LabelVector>, pred: &LabelVector| -> Result<Option<f64>> {
        truth.map(|t| nmi(t, pred)).transpose()
    };
    let teacher_train_nmi = score(labels_train, &clusters.labels).stage("nmi")?;
    let teacher_test_nmi = score(labels_test, &teacher_test_labels).stage("nmi")?;
    let student_train_nmi = score(labels_train, &student_train_labels).stage("nmi")?;
    let student_test_nmi = score(labels_test, &student_test_labels).stage("nmi")?;

    let teacher_timing = benchmark_prediction(&teacher, x_test, config.bench_repeats).stage("bench")?;
    let student_timing = benchmark_prediction(&student, x_test, config.bench_repeats).stage("bench")?;

    let report = RunReport {
        mode: Mode::Clustering,
        teacher_train_nmi,
        teacher_test_nmi,
        student_train_nmi,
        student_test_nmi,
        teacher_predict_seconds: teacher_timing.median_seconds,
        student_predict_seconds: student_timing.median_seconds,
        speedup_factor: teacher_timing.median_seconds / student_timing.median_seconds,
        teacher_timing,
        student_timing,
        benchmark_rows: x_test.rows(),
        threads: rayon::current_num_threads(),
        embedding_alignment_error: None,
        student_final_loss: trace.epoch_losses.last().copied(),
        seed: config.seed,
        started_unix_ms: started,
        finished_unix_ms: unix_ms(),
        config: config.clone(),
    };
    Ok(ClusteringRun {
        mbn,
        pca,
        kmeans: clusters,
        mlp,
        trace,
        teacher_test_labels,
        student_train_labels,
        student_test_labels,
        report,
    })
}

impl<T: Scalar> ClusteringRun<T> {
    /// Label CSVs, the report as JSON and the four models.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_labels_csv(dir.join("teacher_train_labels.csv"), &self.kmeans.labels)?;
        write_labels_csv(dir.join("teacher_test_labels.csv"), &self.teacher_test_labels)?;
        write_labels_csv(dir.join("student_train_labels.csv"), &self.student_train_labels)?;
        write_labels_csv(dir.join("student_test_labels.csv"), &self.student_test_labels)?;
        save_model(dir.join("mbn.cmbn"), &self.mbn)?;
        save_model(dir.join("pca.cmbn"), &self.pca)?;
        save_model(dir.join("kmeans.cmbn"), &self.kmeans)?;
        save_model(dir.join("mlp.cmbn"), &self.mlp)?;
        self.report.write(dir.join("report.json"))
    }
}
