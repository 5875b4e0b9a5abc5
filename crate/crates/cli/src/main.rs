use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use compressive_mbn::pipeline::{benchmark_prediction, Prediction, Predictor};
use compressive_mbn::*;

/// Desk-scale ceilings; anything larger needs --long-run.
const DESK_MAX_K: usize = 1024;
const DESK_MAX_CLUSTERINGS: usize = 200;

#[derive(Parser)]
#[command(name = "cmbn", version, about = "Train a multilayer bootstrap network teacher, distill it into a small MLP and compare prediction cost")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration file (TOML)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the configuration's stage seeds
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for models, CSV outputs and reports
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Allow full-scale settings (hours of compute, several GB of memory)
    #[arg(long, global = true)]
    long_run: bool,
}

#[derive(Args)]
struct Input {
    /// Data matrix: CSV (one row per sample) or IDX image file (scaled by 1/255)
    #[arg(long)]
    input: PathBuf,
    /// The CSV input starts with a header line
    #[arg(long)]
    header: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Visualization,
    Clustering,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Visualization => Mode::Visualization,
            ModeArg::Clustering => Mode::Clustering,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train an MBN teacher and save it as mbn.cmbn
    TrainMbn {
        #[command(flatten)]
        data: Input,
    },
    /// Write the top-layer MBN features of the input as a 0/1 CSV
    Transform {
        #[command(flatten)]
        data: Input,
        #[arg(long)]
        mbn: PathBuf,
    },
    /// Fit EM-PCA (on MBN features when --mbn is given) and write the embedding
    Empca {
        #[command(flatten)]
        data: Input,
        #[arg(long)]
        mbn: Option<PathBuf>,
        /// Target dimension (default: from the configuration)
        #[arg(long)]
        dim: Option<usize>,
    },
    /// Run k-means and write cluster labels
    Kmeans {
        #[command(flatten)]
        data: Input,
        /// Number of clusters (default: from the configuration)
        #[arg(long)]
        k: Option<usize>,
    },
    /// Train the student MLP on raw input against teacher targets
    Distill {
        #[command(flatten)]
        data: Input,
        /// Regression targets (CSV), e.g. a teacher embedding
        #[arg(long, conflicts_with = "cluster_labels", required_unless_present = "cluster_labels")]
        targets: Option<PathBuf>,
        /// Teacher cluster labels (single-column CSV), trained as indicator vectors
        #[arg(long)]
        cluster_labels: Option<PathBuf>,
    },
    /// Predict with the student (--mlp) or the teacher path (--mbn and --pca)
    Predict {
        #[command(flatten)]
        data: Input,
        #[command(flatten)]
        models: Models,
        /// Decode student outputs to cluster labels
        #[arg(long)]
        argmax: bool,
    },
    /// Time teacher and student prediction on the same rows
    Bench {
        #[command(flatten)]
        data: Input,
        #[command(flatten)]
        models: Models,
        /// Timed repeats after one warm-up (default: from the configuration)
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Run the full teacher-student pipeline
    Pipeline {
        #[command(flatten)]
        data: Input,
        #[arg(long, value_enum, default_value = "clustering")]
        mode: ModeArg,
        /// Ground-truth labels for the input (used only for NMI)
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Held-out data (clustering mode; defaults to the input)
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        test_labels: Option<PathBuf>,
        /// Train on this many rows drawn at random (seeded) from the input
        #[arg(long)]
        sample: Option<usize>,
    },
    /// Write synthetic Gaussian classes as CSV
    Synth {
        #[arg(long, default_value_t = 200)]
        n_per_class: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 20)]
        dim: usize,
        #[arg(long, default_value_t = 10.0)]
        separation: f64,
    },
}

#[derive(Args)]
struct Models {
    #[arg(long)]
    mlp: Option<PathBuf>,
    #[arg(long)]
    mbn: Option<PathBuf>,
    #[arg(long)]
    pca: Option<PathBuf>,
    /// k-means model; the teacher path then ends in cluster labels
    #[arg(long)]
    kmeans: Option<PathBuf>,
}

enum CliError {
    Usage(String),
    Data(String),
    Core(Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Core(e) => match e.root() {
                Error::Argument(_) => 1,
                Error::Divergence { .. } => 3,
                _ => 2,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn load_matrix(data: &Input) -> CliResult<Matrix> {
    if is_csv(&data.input) {
        return Ok(load_csv(&data.input, data.header)?);
    }
    match load_idx::<f64>(&data.input)? {
        IdxData::Images { matrix, .. } => Ok(normalize_scale(&matrix, 255.0)?),
        IdxData::Labels(_) => Err(CliError::Data(format!("{} holds labels, not images", data.input.display()))),
    }
}

fn load_labels(path: &Path) -> CliResult<LabelVector> {
    if is_csv(path) {
        return Ok(load_labels_csv(path, false)?);
    }
    match load_idx::<f64>(path)? {
        IdxData::Labels(l) => Ok(l),
        IdxData::Images { .. } => Err(CliError::Data(format!("{} holds images, not labels", path.display()))),
    }
}

fn read_config(path: &Path) -> CliResult<PipelineConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("reading {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Data(format!("config {}: {e}", path.display())))
}

/// The configuration file if given, otherwise the full-scale preset (with
/// --long-run) or the desk preset sized to the data.
fn resolve_config(common: &Common, mode: Mode, input_dim: usize, outputs: usize) -> CliResult<PipelineConfig> {
    let mut config = match (&common.config, common.long_run) {
        (Some(path), _) => read_config(path)?,
        (None, true) => match mode {
            Mode::Visualization => PipelineConfig::mnist_visualization(0),
            Mode::Clustering => PipelineConfig::mnist_clustering(0.0, 0),
        },
        (None, false) => match mode {
            Mode::Visualization => PipelineConfig::desk_visualization(input_dim, 0),
            Mode::Clustering => PipelineConfig::desk_clustering(input_dim, outputs, 0),
        },
    };
    if let Some(seed) = common.seed {
        config = config.with_seed(seed);
    }
    if !common.long_run
        && (config.mbn.max_k() > DESK_MAX_K || config.mbn.clusterings_per_layer > DESK_MAX_CLUSTERINGS)
    {
        return Err(CliError::Usage(format!(
            "MBN with k up to {} and {} clusterings per layer is full-scale; pass --long-run to allow it",
            config.mbn.max_k(),
            config.mbn.clusterings_per_layer
        )));
    }
    Ok(config)
}

fn out_path(common: &Common, name: &str) -> CliResult<PathBuf> {
    fs::create_dir_all(&common.out_dir)
        .map_err(|e| CliError::Data(format!("creating {}: {e}", common.out_dir.display())))?;
    Ok(common.out_dir.join(name))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::Data(format!("writing {}: {e}", path.display())))
}

struct LoadedModels {
    mlp: Option<Mlp>,
    mbn: Option<Mbn>,
    pca: Option<Pca>,
    kmeans: Option<Kmeans>,
}

impl LoadedModels {
    fn load(m: &Models) -> CliResult<Self> {
        if m.mbn.is_some() != m.pca.is_some() {
            return Err(CliError::Usage("the teacher path needs both --mbn and --pca".into()));
        }
        if m.kmeans.is_some() && m.mbn.is_none() {
            return Err(CliError::Usage("--kmeans is only used with --mbn and --pca".into()));
        }
        Ok(LoadedModels {
            mlp: m.mlp.as_ref().map(load_model).transpose()?,
            mbn: m.mbn.as_ref().map(load_model).transpose()?,
            pca: m.pca.as_ref().map(load_model).transpose()?,
            kmeans: m.kmeans.as_ref().map(load_model).transpose()?,
        })
    }

    fn teacher(&self) -> Option<Predictor<'_, f64>> {
        Some(Predictor::Teacher {
            mbn: self.mbn.as_ref()?,
            pca: self.pca.as_ref()?,
            centers: self.kmeans.as_ref().map(|k| &k.centers),
        })
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let common = &cli.common;
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::TrainMbn { data } => {
            let x = load_matrix(data)?;
            let config = resolve_config(common, Mode::Clustering, x.cols(), 10)?;
            let model: Mbn = train_mbn(&x, &config.mbn)?;
            let path = out_path(common, "mbn.cmbn")?;
            save_model(&path, &model)?;
            println!("trained {} layers on {} rows, {} output units -> {}", model.layers().len(), x.rows(), model.output_dim(), path.display());
        }
        Command::Transform { data, mbn } => {
            let x = load_matrix(data)?;
            let model: Mbn = load_model(mbn)?;
            let features: Matrix = model.transform(&x)?.to_dense();
            let path = out_path(common, "mbn_features.csv")?;
            write_csv(&path, &features)?;
            println!("{} x {} features -> {}", features.rows(), features.cols(), path.display());
        }
        Command::Empca { data, mbn, dim } => {
            let x = load_matrix(data)?;
            let mut config = resolve_config(common, Mode::Clustering, x.cols(), 10)?.empca;
            if let Some(d) = dim {
                config.target_dim = *d;
            }
            let (pca, embedding): (Pca, Matrix) = match mbn {
                Some(path) => {
                    let model: Mbn = load_model(path)?;
                    let h = model.transform(&x)?;
                    let pca = fit_empca(&h, &config)?;
                    let e = pca.project(&h)?;
                    (pca, e)
                }
                None => {
                    let pca = fit_empca(&x, &config)?;
                    let e = pca.project(&x)?;
                    (pca, e)
                }
            };
            save_model(out_path(common, "pca.cmbn")?, &pca)?;
            let path = out_path(common, "embedding.csv")?;
            write_csv(&path, &embedding)?;
            println!("{}-D embedding of {} rows -> {}", embedding.cols(), embedding.rows(), path.display());
        }
        Command::Kmeans { data, k } => {
            let x = load_matrix(data)?;
            let config = resolve_config(common, Mode::Clustering, x.cols(), k.unwrap_or(10))?;
            let mut km = config.kmeans.unwrap_or_else(|| KmeansConfig::new(10, config.seed));
            if let Some(k) = k {
                km.k = *k;
            }
            let result: Kmeans = kmeans(&x, &km)?;
            save_model(out_path(common, "kmeans.cmbn")?, &result)?;
            let path = out_path(common, "labels.csv")?;
            write_labels_csv(&path, &result.labels)?;
            println!("k={} inertia {:.6} -> {}", km.k, result.inertia, path.display());
        }
        Command::Distill { data, targets, cluster_labels } => {
            let x = load_matrix(data)?;
            let (mode, y): (Mode, Matrix) = match (targets, cluster_labels) {
                (Some(t), _) => (Mode::Visualization, load_csv(t, false)?),
                (None, Some(l)) => {
                    let labels = load_labels_csv(l, false)?;
                    (Mode::Clustering, labels_to_indicators(&labels, labels.num_classes())?)
                }
                (None, None) => unreachable!("clap requires one target source"),
            };
            let mut config = resolve_config(common, mode, x.cols(), y.cols())?;
            if common.config.is_none() && mode == Mode::Visualization {
                *config.mlp.layer_sizes.last_mut().expect("non-empty") = y.cols();
            }
            let (mlp, trace): (Mlp, _) = train_mlp(&x, &y, &config.mlp)?;
            save_model(out_path(common, "mlp.cmbn")?, &mlp)?;
            let losses: Vec<String> = trace.epoch_losses.iter().map(|l| l.to_string()).collect();
            write_text(&out_path(common, "train_loss.csv")?, &(losses.join("\n") + "\n"))?;
            match trace.epoch_losses.last() {
                Some(l) => println!("{} epochs, final loss {l:.6}", trace.epoch_losses.len()),
                None => println!("0 epochs, untrained student saved"),
            }
        }
        Command::Predict { data, models, argmax } => {
            let x = load_matrix(data)?;
            let loaded = LoadedModels::load(models)?;
            let prediction = match (&loaded.mlp, loaded.teacher()) {
                (Some(mlp), None) => Predictor::Student { mlp, argmax: *argmax }.predict(&x)?,
                (None, Some(teacher)) => teacher.predict(&x)?,
                _ => return Err(CliError::Usage("give either --mlp or --mbn with --pca".into())),
            };
            match prediction {
                Prediction::Embedding(e) => {
                    let path = out_path(common, "predictions.csv")?;
                    write_csv(&path, &e)?;
                    println!("{} x {} predictions -> {}", e.rows(), e.cols(), path.display());
                }
                Prediction::Labels(l) => {
                    let path = out_path(common, "labels.csv")?;
                    write_labels_csv(&path, &l)?;
                    println!("{} labels -> {}", l.len(), path.display());
                }
            }
        }
        Command::Bench { data, models, repeats } => {
            let x = load_matrix(data)?;
            let loaded = LoadedModels::load(models)?;
            let mlp = loaded.mlp.as_ref().ok_or_else(|| CliError::Usage("--mlp is required here".into()))?;
            let teacher = loaded.teacher().ok_or_else(|| CliError::Usage("--mbn and --pca are required here".into()))?;
            let repeats = match (repeats, &common.config) {
                (Some(r), _) => *r,
                (None, Some(path)) => read_config(path)?.bench_repeats,
                (None, None) => 5,
            };
            let student = Predictor::Student { mlp, argmax: loaded.kmeans.is_some() };
            let t = benchmark_prediction(&teacher, &x, repeats)?;
            let s = benchmark_prediction(&student, &x, repeats)?;
            let speedup = t.median_seconds / s.median_seconds;
            let report = serde_json::json!({
                "rows": x.rows(),
                "threads": rayon::current_num_threads(),
                "teacher": t,
                "student": s,
                "speedup_factor": speedup,
            });
            write_text(&out_path(common, "bench.json")?, &serde_json::to_string_pretty(&report).expect("json"))?;
            println!(
                "teacher {:.6}s, student {:.6}s (median of {repeats}), speedup {speedup:.1}x",
                t.median_seconds, s.median_seconds
            );
        }
        Command::Pipeline { data, mode, labels, test, test_labels, sample } => {
            let mut x = load_matrix(data)?;
            let mut labels = labels.as_deref().map(load_labels).transpose()?;
            if let Some(l) = labels.as_ref().filter(|l| l.len() != x.rows()) {
                return Err(CliError::Data(format!("{} labels for {} input rows", l.len(), x.rows())));
            }
            if let Some(count) = sample {
                let rows = sample_indices(x.rows(), *count, common.seed.unwrap_or(0))?;
                x = x.select_rows(&rows);
                labels = labels.map(|l| l.select(&rows));
            }
            let mode = Mode::from(*mode);
            let classes = labels.as_ref().map_or(10, |l| l.num_classes());
            let config = resolve_config(common, mode, x.cols(), classes)?;
            match mode {
                Mode::Visualization => {
                    let run = run_visualization(&x, labels.as_ref(), &config)?;
                    run.write_to(&common.out_dir)?;
                    print_report(&run.report);
                }
                Mode::Clustering => {
                    let x_test = match test {
                        Some(p) => load_matrix(&Input { input: p.clone(), header: data.header })?,
                        None => x.clone(),
                    };
                    let test_labels = match (test_labels, test) {
                        (Some(p), _) => Some(load_labels(p)?),
                        (None, None) => labels.clone(),
                        (None, Some(_)) => None,
                    };
                    let run = run_clustering(&x, &x_test, labels.as_ref(), test_labels.as_ref(), &config)?;
                    run.write_to(&common.out_dir)?;
                    print_report(&run.report);
                }
            }
        }
        Command::Synth { n_per_class, classes, dim, separation } => {
            let (x, l) = make_synthetic_gaussians::<f64>(common.seed.unwrap_or(0), *n_per_class, *classes, *dim, *separation)?;
            let path = out_path(common, "synthetic.csv")?;
            write_csv(&path, &x)?;
            write_labels_csv(out_path(common, "synthetic_labels.csv")?, &l)?;
            println!("{} rows x {} columns -> {}", x.rows(), x.cols(), path.display());
        }
    }
    Ok(())
}

fn print_report(r: &RunReport) {
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    println!("NMI teacher train {} test {}", fmt(r.teacher_train_nmi), fmt(r.teacher_test_nmi));
    println!("NMI student train {} test {}", fmt(r.student_train_nmi), fmt(r.student_test_nmi));
    if let Some(e) = r.embedding_alignment_error {
        println!("embedding alignment error {e:.4}");
    }
    println!(
        "prediction on {} rows: teacher {:.6}s, student {:.6}s, speedup {:.1}x ({} threads)",
        r.benchmark_rows, r.teacher_predict_seconds, r.student_predict_seconds, r.speedup_factor, r.threads
    );
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
