//! Compressive multilayer bootstrap networks.
//!
//! A multilayer bootstrap network (MBN) teacher maps data through stacked
//! layers of one-hot k-centers encoders. Its output is reduced by EM-PCA
//! and optionally clustered by k-means; a small feedforward network is then
//! distilled from that output so predictions no longer pay the teacher's
//! cost.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common `f64` instantiation.

pub mod cluster_eval;
pub mod container;
pub mod dataset;
pub mod empca;
pub mod error;
pub mod linalg;
pub mod mbn;
pub mod mlp;
pub mod pipeline;
pub mod scalar;

pub use cluster_eval::{argmax_rows, assign_nearest_center, kmeans, labels_to_indicators, lloyd, nmi, KmeansConfig, KmeansResult};
pub use container::{load_model, save_model, ModelKind};
pub use dataset::{
    load_csv, load_idx, load_labels_csv, make_synthetic_gaussians, normalize_scale, sample_indices, write_csv, write_labels_csv,
    DenseMatrix, IdxData, LabelVector,
};
pub use empca::{fit_empca, fit_empca_traced, pca_project, EmpcaConfig, EmpcaTrace, PcaModel};
pub use error::{Error, Result};
pub use mbn::{mbn_transform, train_mbn, MbnConfig, MbnLayer, MbnModel, SparseBinaryMatrix};
pub use mlp::{grad_check, init_mlp, predict, train_mlp, MlpConfig, MlpModel, OutputActivation, TrainTrace};
pub use pipeline::{
    benchmark_prediction, run_clustering, run_visualization, BenchStats, ClusteringRun, Mode, PipelineConfig,
    Predictor, RunReport, VisualizationRun,
};
pub use scalar::Scalar;

pub type Matrix = DenseMatrix<f64>;
pub type Matrix32 = DenseMatrix<f32>;
pub type Mbn = MbnModel<f64>;
pub type Pca = PcaModel<f64>;
pub type Mlp = MlpModel<f64>;
pub type Kmeans = KmeansResult<f64>;
