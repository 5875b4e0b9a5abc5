mod common;

use common::*;
use compressive_mbn::mlp::{forward, seeded_init, DenseLayer, ForwardMode};
use compressive_mbn::*;
use proptest::prelude::*;
use rand::Rng;

fn config(sizes: Vec<usize>, act: OutputActivation, dropout: f64, seed: u64) -> MlpConfig {
    MlpConfig {
        layer_sizes: sizes,
        output_activation: act,
        dropout_rate: dropout,
        learning_rate: 0.05,
        batch_size: 8,
        epochs: 5,
        seed,
    }
}

fn identity(n: usize) -> DenseMatrix<f64> {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    DenseMatrix::from_vec(n, n, v).unwrap()
}

/// One hidden layer followed by an identity read-out, so the network output
/// is the (possibly dropped-out) hidden activation itself.
fn hidden_probe(w: DenseMatrix<f64>, bias: Vec<f64>, dropout: f64) -> MlpModel<f64> {
    let (h, d) = (w.rows(), w.cols());
    let layers = vec![DenseLayer { weights: w, bias }, DenseLayer { weights: identity(h), bias: vec![0.0; h] }];
    MlpModel::from_layers(layers, config(vec![d, h, h], OutputActivation::Linear, dropout, 0)).unwrap()
}

proptest! {
    #![proptest_config(cases(40))]

    #[test]
    fn backprop_matches_finite_differences(
        sizes in prop::collection::vec(1usize..6, 3..5), sigmoid in any::<bool>(), seed in 0u64..10_000,
    ) {
        let act = if sigmoid { OutputActivation::Sigmoid } else { OutputActivation::Linear };
        let mut r = rng(seed);
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(l, w)| DenseLayer {
                weights: uniform_matrix(w[1], w[0], -1.0, 1.0, seed * 7 + l as u64),
                bias: (0..w[1]).map(|_| r.random_range(-0.5..0.5)).collect(),
            })
            .collect();
        let model = MlpModel::from_layers(layers, config(sizes.clone(), act, 0.0, seed)).unwrap();
        let x = uniform_matrix(5, sizes[0], -1.0, 1.0, seed + 1);
        let y = uniform_matrix(5, *sizes.last().unwrap(), 0.1, 0.9, seed + 2);
        let err = grad_check(&model, &x, &y, 1e-5).unwrap();
        prop_assert!(err < 1e-6, "gradient error {}", err);
    }

    #[test]
    fn hidden_units_are_rectified(d in 1usize..5, h in 1usize..6, seed in 0u64..1000) {
        let w = uniform_matrix(h, d, -1.0, 1.0, seed);
        let b: Vec<f64> = (0..h).map(|j| j as f64 * 0.1 - 0.2).collect();
        let x = uniform_matrix(7, d, -1.0, 1.0, seed + 1);
        let out = predict(&hidden_probe(w.clone(), b.clone(), 0.0), &x).unwrap();
        for i in 0..7 {
            for j in 0..h {
                let pre: f64 = (0..d).map(|p| w.get(j, p) * x.get(i, p)).sum::<f64>() + b[j];
                prop_assert!((out.get(i, j) - pre.max(0.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sigmoid_outputs_stay_inside_the_unit_interval(seed in 0u64..1000, scale in 0.1f64..50.0) {
        let c = config(vec![3, 4, 2], OutputActivation::Sigmoid, 0.0, seed);
        let model: MlpModel<f64> = seeded_init(&c).unwrap();
        let x = uniform_matrix(10, 3, -scale, scale, seed);
        let out = predict(&model, &x).unwrap();
        prop_assert!(out.values().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn prediction_is_row_independent(seed in 0u64..1000, rows in 1usize..12) {
        let c = config(vec![4, 6, 3], OutputActivation::Linear, 0.3, seed);
        let model: MlpModel<f64> = seeded_init(&c).unwrap();
        let x = uniform_matrix(rows, 4, -1.0, 1.0, seed);
        let batch = predict(&model, &x).unwrap();
        for i in 0..rows {
            let single = predict(&model, &x.select_rows(&[i])).unwrap();
            prop_assert_eq!(single.row(0), batch.row(i));
        }
    }
}

#[test]
fn inverted_dropout_preserves_the_expected_activation() {
    let w = uniform_matrix(4, 3, 0.2, 1.0, 5);
    let model = hidden_probe(w, vec![0.1; 4], 0.2);
    let x = DenseMatrix::from_rows(&[vec![0.5, 0.8, 0.3]]).unwrap();
    let clean = predict(&model, &x).unwrap();
    let passes = 10_000;
    let mut r = rng(17);
    let mut sum = vec![0.0; 4];
    let mut sq = vec![0.0; 4];
    for _ in 0..passes {
        let out = forward(&model, &x, ForwardMode::Train(&mut r)).unwrap();
        for j in 0..4 {
            sum[j] += out.get(0, j);
            sq[j] += out.get(0, j).powi(2);
        }
    }
    for j in 0..4 {
        let mean = sum[j] / passes as f64;
        let var = sq[j] / passes as f64 - mean * mean;
        let se = (var / passes as f64).sqrt();
        assert!((mean - clean.get(0, j)).abs() <= 3.0 * se, "unit {j}: mean {mean} vs {} (se {se})", clean.get(0, j));
    }
}

#[test]
fn prediction_is_thread_count_independent() {
    let c = config(vec![8, 32, 32, 3], OutputActivation::Sigmoid, 0.2, 4);
    let x = uniform_matrix(64, 8, -1.0, 1.0, 4);
    let y: DenseMatrix<f64> = labels_to_indicators(&LabelVector::from_labels((0..64).map(|i| i % 3).collect()), 3).unwrap();
    let run = |t: usize| {
        rayon::ThreadPoolBuilder::new().num_threads(t).build().unwrap().install(|| {
            let (model, trace) = train_mlp(&x, &y, &c).unwrap();
            (predict(&model, &x).unwrap(), trace)
        })
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn training_reduces_the_loss_on_a_learnable_map() {
    let x = uniform_matrix(200, 3, -1.0, 1.0, 9);
    let y = DenseMatrix::from_rows(&x.row_iter().map(|r| vec![r[0] - 2.0 * r[1], 0.5 * r[2]]).collect::<Vec<_>>()).unwrap();
    let mut c = config(vec![3, 16, 2], OutputActivation::Linear, 0.0, 9);
    c.epochs = 100;
    let (_, trace) = train_mlp(&x, &y, &c).unwrap();
    let (first, last) = (trace.epoch_losses[0], *trace.epoch_losses.last().unwrap());
    assert!(last < 0.05 * first, "loss {first} -> {last}");
}

#[test]
fn wrong_input_width_is_rejected() {
    let model: MlpModel<f64> = seeded_init(&config(vec![3, 2], OutputActivation::Linear, 0.0, 0)).unwrap();
    let x = uniform_matrix(2, 4, 0.0, 1.0, 0);
    assert!(matches!(predict(&model, &x), Err(Error::DimensionMismatch { expected: 3, found: 4 })));
}
