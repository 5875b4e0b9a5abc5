//! The student network: ReLU hidden layers, linear or sigmoid outputs,
//! inverted dropout on hidden activations, mean-squared-error loss and plain
//! mini-batch SGD.
//!
//! All products reduce in a fixed order per output entry, so training is
//! bitwise reproducible for a given seed regardless of the rayon pool size.

use rand::seq::{index, SliceRandom};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::DenseMatrix;
use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_at, matmul_bt};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Linear,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    /// Input width, hidden widths, output width.
    pub layer_sizes: Vec<usize>,
    pub output_activation: OutputActivation,
    /// Probability of zeroing a hidden activation during training.
    pub dropout_rate: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl MlpConfig {
    /// 784-2048-2048-2 with linear outputs, 120 epochs of batch 32.
    pub fn mnist_visualization(seed: u64) -> Self {
        MlpConfig {
            layer_sizes: vec![784, 2048, 2048, 2],
            output_activation: OutputActivation::Linear,
            dropout_rate: 0.2,
            learning_rate: 0.001,
            batch_size: 32,
            epochs: 120,
            seed,
        }
    }

    /// 784-2048-2048-10 with sigmoid outputs, 50 epochs of batch 128.
    pub fn mnist_clustering(seed: u64) -> Self {
        MlpConfig {
            layer_sizes: vec![784, 2048, 2048, 10],
            output_activation: OutputActivation::Sigmoid,
            dropout_rate: 0.2,
            learning_rate: 0.001,
            batch_size: 128,
            epochs: 50,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::argument("an MLP needs at least input and output sizes"));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::argument(format!("layer sizes must be positive: {:?}", self.layer_sizes)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::argument(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::argument(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size < 1 {
            return Err(Error::argument("batch_size must be >= 1"));
        }
        Ok(())
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().expect("validated sizes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    /// out x in
    pub weights: DenseMatrix<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel<T> {
    layers: Vec<DenseLayer<T>>,
    config: MlpConfig,
}

impl<T: Scalar> MlpModel<T> {
    pub fn from_layers(layers: Vec<DenseLayer<T>>, config: MlpConfig) -> Result<Self> {
        config.validate()?;
        if layers.len() + 1 != config.layer_sizes.len() {
            return Err(Error::argument("layer count does not match layer_sizes"));
        }
        for (l, layer) in layers.iter().enumerate() {
            let (fan_in, fan_out) = (config.layer_sizes[l], config.layer_sizes[l + 1]);
            if layer.weights.rows() != fan_out || layer.weights.cols() != fan_in || layer.bias.len() != fan_out {
                return Err(Error::argument(format!("layer {} does not have shape {fan_out}x{fan_in}", l + 1)));
            }
            if layer.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::NonFinite(format!("bias of layer {}", l + 1)));
            }
        }
        Ok(MlpModel { layers, config })
    }

    pub fn layers(&self) -> &[DenseLayer<T>] {
        &self.layers
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.values().len() + l.bias.len()).sum()
    }

    /// Parameters flattened layer by layer, weights before biases.
    fn param(&self, mut idx: usize) -> T {
        for l in &self.layers {
            let w = l.weights.values().len();
            if idx < w {
                return l.weights.values()[idx];
            }
            idx -= w;
            if idx < l.bias.len() {
                return l.bias[idx];
            }
            idx -= l.bias.len();
        }
        panic!("parameter index out of range")
    }

    fn param_mut(&mut self, mut idx: usize) -> &mut T {
        for l in &mut self.layers {
            let w = l.weights.values().len();
            if idx < w {
                return &mut l.weights.values_mut()[idx];
            }
            idx -= w;
            if idx < l.bias.len() {
                return &mut l.bias[idx];
            }
            idx -= l.bias.len();
        }
        panic!("parameter index out of range")
    }

    fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.values().iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

/// Per-epoch mean training loss.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epoch_losses: Vec<f64>,
}

/// Whether hidden activations are masked.
pub enum ForwardMode<'a> {
    Train(&'a mut dyn RngCore),
    Infer,
}

/// Glorot-uniform weights, zero biases.
pub fn init_mlp<T: Scalar, R: Rng + ?Sized>(config: &MlpConfig, rng: &mut R) -> Result<MlpModel<T>> {
    config.validate()?;
    let layers = config
        .layer_sizes
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let values = (0..fan_in * fan_out).map(|_| T::of(rng.random_range(-bound..bound))).collect();
            DenseLayer {
                weights: DenseMatrix::from_parts_unchecked(fan_out, fan_in, values),
                bias: vec![T::zero(); fan_out],
            }
        })
        .collect();
    Ok(MlpModel { layers, config: config.clone() })
}

/// The initialization [`train_mlp`] starts from.
pub fn seeded_init<T: Scalar>(config: &MlpConfig) -> Result<MlpModel<T>> {
    init_mlp(config, &mut stream(config.seed, 0))
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

struct Cache<T> {
    /// Layer inputs: `inputs[l]` feeds layer `l`; the last entry is the output.
    inputs: Vec<DenseMatrix<T>>,
    /// Pre-activations of every layer.
    pre: Vec<DenseMatrix<T>>,
    /// Inverted-dropout multipliers of hidden layers (absent in infer mode).
    masks: Vec<Option<Vec<T>>>,
}

fn forward_cached<T: Scalar>(model: &MlpModel<T>, x: &DenseMatrix<T>, mode: ForwardMode<'_>) -> Cache<T> {
    let mut rng = match mode {
        ForwardMode::Train(r) => Some(r),
        ForwardMode::Infer => None,
    };
    let p = model.config.dropout_rate;
    let keep_scale = T::of(1.0 / (1.0 - p));
    let depth = model.layers.len();
    let mut inputs = vec![x.clone()];
    let mut pre = Vec::with_capacity(depth);
    let mut masks = Vec::with_capacity(depth);
    for (l, layer) in model.layers.iter().enumerate() {
        let mut z = matmul_bt(inputs.last().expect("input present"), &layer.weights);
        let width = z.cols();
        for i in 0..z.rows() {
            for (v, &b) in z.row_mut(i).iter_mut().zip(&layer.bias) {
                *v += b;
            }
        }
        let mut a = z.clone();
        if l + 1 < depth {
            a.values_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
            let mask = match rng.as_deref_mut() {
                Some(r) if p > 0.0 => {
                    let m: Vec<T> = (0..a.values().len())
                        .map(|_| if r.random::<f64>() < p { T::zero() } else { keep_scale })
                        .collect();
                    a.values_mut().iter_mut().zip(&m).for_each(|(v, &s)| *v *= s);
                    Some(m)
                }
                _ => None,
            };
            masks.push(mask);
        } else {
            if model.config.output_activation == OutputActivation::Sigmoid {
                a.values_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
            }
            masks.push(None);
        }
        debug_assert_eq!(a.cols(), width);
        pre.push(z);
        inputs.push(a);
    }
    Cache { inputs, pre, masks }
}

/// Logistic function, kept strictly inside (0, 1) where it would otherwise
/// round to an endpoint.
#[inline]
fn sigmoid<T: Scalar>(v: T) -> T {
    let s = if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    };
    s.max(T::min_positive_value()).min(T::one() - T::epsilon() / T::of(2.0))
}

fn check_input<T: Scalar>(model: &MlpModel<T>, x: &DenseMatrix<T>) -> Result<()> {
    let want = model.config.input_size();
    if x.cols() != want {
        return Err(Error::DimensionMismatch { expected: want, found: x.cols() });
    }
    Ok(())
}

pub fn forward<T: Scalar>(model: &MlpModel<T>, x: &DenseMatrix<T>, mode: ForwardMode<'_>) -> Result<DenseMatrix<T>> {
    check_input(model, x)?;
    Ok(forward_cached(model, x, mode).inputs.pop().expect("output present"))
}

/// Inference-mode forward pass.
pub fn predict<T: Scalar>(model: &MlpModel<T>, x: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    forward(model, x, ForwardMode::Infer)
}

/// Gradients with the same shapes as the model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub weights: Vec<DenseMatrix<T>>,
    pub biases: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    fn get(&self, mut idx: usize) -> T {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            if idx < w.values().len() {
                return w.values()[idx];
            }
            idx -= w.values().len();
            if idx < b.len() {
                return b[idx];
            }
            idx -= b.len();
        }
        panic!("parameter index out of range")
    }
}

/// Mean over rows of the squared error summed over outputs.
fn mse<T: Scalar>(out: &DenseMatrix<T>, y: &DenseMatrix<T>) -> T {
    let total = out
        .values()
        .iter()
        .zip(y.values())
        .fold(T::zero(), |acc, (&o, &t)| acc + (o - t) * (o - t));
    total / T::from_count(out.rows().max(1))
}

fn backward<T: Scalar>(model: &MlpModel<T>, cache: &Cache<T>, y: &DenseMatrix<T>) -> Gradients<T> {
    let depth = model.layers.len();
    let out = &cache.inputs[depth];
    let scale = T::of(2.0) / T::from_count(out.rows().max(1));
    let mut delta = DenseMatrix::from_parts_unchecked(
        out.rows(),
        out.cols(),
        out.values()
            .iter()
            .zip(y.values())
            .map(|(&o, &t)| {
                let g = scale * (o - t);
                match model.config.output_activation {
                    OutputActivation::Linear => g,
                    OutputActivation::Sigmoid => g * o * (T::one() - o),
                }
            })
            .collect(),
    );
    let mut weights = Vec::with_capacity(depth);
    let mut biases = Vec::with_capacity(depth);
    for l in (0..depth).rev() {
        weights.push(matmul_at(&delta, &cache.inputs[l]));
        let mut db = vec![T::zero(); delta.cols()];
        for row in delta.row_iter() {
            for (b, &d) in db.iter_mut().zip(row) {
                *b += d;
            }
        }
        biases.push(db);
        if l > 0 {
            let mut upstream = matmul(&delta, &model.layers[l].weights);
            let z = &cache.pre[l - 1];
            let mask = cache.masks[l - 1].as_deref();
            for (k, (u, &zv)) in upstream.values_mut().iter_mut().zip(z.values()).enumerate() {
                let m = mask.map_or(T::one(), |m| m[k]);
                *u = if zv > T::zero() { *u * m } else { T::zero() };
            }
            delta = upstream;
        }
    }
    weights.reverse();
    biases.reverse();
    Gradients { weights, biases }
}

/// Loss and backpropagated gradients in inference mode (no dropout).
pub fn loss_and_gradients<T: Scalar>(
    model: &MlpModel<T>,
    x: &DenseMatrix<T>,
    y: &DenseMatrix<T>,
) -> Result<(T, Gradients<T>)> {
    check_shapes(model, x, y)?;
    let cache = forward_cached(model, x, ForwardMode::Infer);
    let loss = mse(&cache.inputs[model.layers.len()], y);
    Ok((loss, backward(model, &cache, y)))
}

fn check_shapes<T: Scalar>(model: &MlpModel<T>, x: &DenseMatrix<T>, y: &DenseMatrix<T>) -> Result<()> {
    check_input(model, x)?;
    if x.rows() != y.rows() {
        return Err(Error::argument(format!("{} input rows but {} target rows", x.rows(), y.rows())));
    }
    let out = model.config.output_size();
    if y.cols() != out {
        return Err(Error::DimensionMismatch { expected: out, found: y.cols() });
    }
    Ok(())
}

/// Fits the network to `(x, y)` from [`seeded_init`]. Each epoch visits the
/// rows in a fresh seeded permutation; the final short batch is kept.
pub fn train_mlp<T: Scalar>(
    x: &DenseMatrix<T>,
    y: &DenseMatrix<T>,
    config: &MlpConfig,
) -> Result<(MlpModel<T>, TrainTrace)> {
    let mut model = seeded_init(config)?;
    check_shapes(&model, x, y)?;
    let mut shuffle_rng = stream(config.seed, 1);
    let mut dropout_rng = stream(config.seed, 2);
    let lr = T::of(config.learning_rate);
    let n = x.rows();
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = TrainTrace::default();
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let xb = x.select_rows(batch);
            let yb = y.select_rows(batch);
            let cache = forward_cached(&model, &xb, ForwardMode::Train(&mut dropout_rng));
            let loss = mse(&cache.inputs[model.layers.len()], &yb).as_f64();
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch: epoch + 1 });
            }
            epoch_loss += loss * batch.len() as f64;
            let grads = backward(&model, &cache, &yb);
            for (layer, (gw, gb)) in model.layers.iter_mut().zip(grads.weights.iter().zip(&grads.biases)) {
                for (w, &g) in layer.weights.values_mut().iter_mut().zip(gw.values()) {
                    *w -= lr * g;
                }
                for (b, &g) in layer.bias.iter_mut().zip(gb) {
                    *b -= lr * g;
                }
            }
        }
        let mean = if n == 0 { 0.0 } else { epoch_loss / n as f64 };
        if !mean.is_finite() || !model.all_finite() {
            return Err(Error::Divergence { epoch: epoch + 1 });
        }
        trace.epoch_losses.push(mean);
    }
    Ok((model, trace))
}

/// Largest disagreement between backpropagated and central-difference
/// gradients over up to 200 sampled parameters (all of them for smaller
/// nets). Relative error `|a - n| / max(|a|, |n|)`, falling back to the
/// absolute difference when both magnitudes are below 1e-8.
pub fn grad_check<T: Scalar>(model: &MlpModel<T>, x: &DenseMatrix<T>, y: &DenseMatrix<T>, epsilon: T) -> Result<f64> {
    const SAMPLES: usize = 200;
    const ABS_FLOOR: f64 = 1e-8;
    let (_, grads) = loss_and_gradients(model, x, y)?;
    let total = model.param_count();
    let picks: Vec<usize> = if total <= SAMPLES {
        (0..total).collect()
    } else {
        index::sample(&mut stream(model.config.seed, 3), total, SAMPLES).into_vec()
    };
    let mut probe = model.clone();
    let two_eps = (epsilon + epsilon).as_f64();
    let mut worst: f64 = 0.0;
    for idx in picks {
        let orig = model.param(idx);
        *probe.param_mut(idx) = orig + epsilon;
        let up = mse(&predict(&probe, x)?, y).as_f64();
        *probe.param_mut(idx) = orig - epsilon;
        let down = mse(&predict(&probe, x)?, y).as_f64();
        *probe.param_mut(idx) = orig;
        let numeric = (up - down) / two_eps;
        let analytic = grads.get(idx).as_f64();
        let scale = analytic.abs().max(numeric.abs());
        let err = if scale < ABS_FLOOR {
            (analytic - numeric).abs()
        } else {
            (analytic - numeric).abs() / scale
        };
        worst = worst.max(err);
    }
    Ok(worst)
}
