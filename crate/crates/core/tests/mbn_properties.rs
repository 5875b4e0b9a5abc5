mod common;

use common::*;
use compressive_mbn::mbn::{Centers, Metric};
use compressive_mbn::*;
use proptest::prelude::*;

/// Straight-line forward pass: every layer input is a dense vector, every
/// center value is read through `Centers::value`, and nearest centers are
/// found by scanning all of them.
fn oracle_transform(model: &MbnModel<f64>, x: &DenseMatrix<f64>) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for row in x.row_iter() {
        let mut input: Vec<f64> = row.to_vec();
        let mut actives = Vec::new();
        for layer in model.layers() {
            actives.clear();
            for (v, c) in layer.clusterings().iter().enumerate() {
                let subset = c.feature_subset();
                let mut best = 0;
                let mut best_score = f64::NAN;
                for j in 0..c.k() {
                    let score = match layer.metric() {
                        Metric::Euclidean => -subset
                            .iter()
                            .enumerate()
                            .map(|(p, &f)| (input[f as usize] - c.centers().value(j, p)).powi(2))
                            .sum::<f64>(),
                        Metric::DotProduct => {
                            subset.iter().enumerate().map(|(p, &f)| input[f as usize] * c.centers().value(j, p)).sum()
                        }
                    };
                    if j == 0 || score > best_score {
                        best = j;
                        best_score = score;
                    }
                }
                actives.push((v * layer.k() + best) as u32);
            }
            input = vec![0.0; layer.output_dim()];
            for &a in &actives {
                input[a as usize] = 1.0;
            }
        }
        out.push(actives.clone());
    }
    out
}

fn small_config(k_schedule: Vec<usize>, v: usize, a: f64, r: f64, seed: u64) -> MbnConfig {
    MbnConfig { k_schedule, clusterings_per_layer: v, feature_fraction: a, reconstruction_rate: r, seed }
}

proptest! {
    #![proptest_config(cases(24))]

    #[test]
    fn one_active_unit_per_clustering(
        n in 8usize..30, dim in 1usize..8, v in 1usize..6, k1 in 2usize..8, k2 in 2usize..5,
        a in 0.05f64..1.0, r in 0.0f64..0.9, seed in 0u64..1000,
    ) {
        let x = uniform_matrix(n, dim, -1.0, 1.0, seed);
        let config = small_config(vec![k1, k2.min(k1)], v, a, r, seed);
        let model: MbnModel<f64> = train_mbn(&x, &config).unwrap();
        for (layer, h) in model.layers().iter().zip(model.transform_layers(&x).unwrap()) {
            prop_assert_eq!(h.cols(), v * layer.k());
            for i in 0..h.rows() {
                let row = h.row(i);
                prop_assert_eq!(row.len(), v);
                for (b, &active) in row.iter().enumerate() {
                    prop_assert_eq!(active as usize / layer.k(), b);
                }
            }
        }
        prop_assert_eq!(model.output_dim(), v * k2.min(k1));
    }

    #[test]
    fn matches_straight_line_oracle(
        n in 6usize..20, dim in 1usize..6, v in 1usize..5, seed in 0u64..1000, r in 0.0f64..0.7,
    ) {
        let x = uniform_matrix(n, dim, -2.0, 2.0, seed + 1);
        let config = small_config(vec![5, 3, 2], v, 0.6, r, seed);
        let model: MbnModel<f64> = train_mbn(&x, &config).unwrap();
        let got = model.transform(&x).unwrap();
        let want = oracle_transform(&model, &x);
        for (i, w) in want.iter().enumerate() {
            prop_assert_eq!(got.row(i), w.as_slice());
        }
    }

    #[test]
    fn row_permutation_commutes(n in 6usize..25, seed in 0u64..1000) {
        let x = uniform_matrix(n, 4, -1.0, 1.0, seed);
        let model: MbnModel<f64> = train_mbn(&x, &small_config(vec![6, 3], 4, 0.5, 0.2, seed)).unwrap();
        let perm: Vec<usize> = (0..n).rev().collect();
        let direct = model.transform(&x.select_rows(&perm)).unwrap();
        let permuted = model.transform(&x).unwrap().select_rows(&perm);
        prop_assert_eq!(direct, permuted);
    }
}

#[test]
fn transform_is_identical_across_thread_counts() {
    let x = uniform_matrix(60, 10, -1.0, 1.0, 3);
    let config = small_config(vec![16, 8, 4], 12, 0.5, 0.3, 3);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let model: MbnModel<f64> = train_mbn(&x, &config).unwrap();
            let h = model.transform(&x).unwrap();
            (model, h)
        })
    };
    let (m1, h1) = run(1);
    let (m3, h3) = run(3);
    assert_eq!(m1, m3);
    assert_eq!(h1, h3);
    assert_eq!(h1, m1.transform(&x).unwrap());
}

#[test]
fn same_class_rows_share_more_units() {
    let (x, labels) = make_synthetic_gaussians::<f64>(5, 100, 3, 20, 10.0).unwrap();
    let model: MbnModel<f64> = train_mbn(&x, &MbnConfig::desk(5)).unwrap();
    let h = model.transform(&x).unwrap();
    let (mut within, mut between) = ((0.0, 0usize), (0.0, 0usize));
    for i in 0..h.rows() {
        for j in i + 1..h.rows() {
            let overlap = h.row(i).iter().zip(h.row(j)).filter(|(a, b)| a == b).count() as f64;
            let bucket = if labels.as_slice()[i] == labels.as_slice()[j] { &mut within } else { &mut between };
            bucket.0 += overlap;
            bucket.1 += 1;
        }
    }
    let (w, b) = (within.0 / within.1 as f64, between.0 / between.1 as f64);
    assert!(w > b, "within-class overlap {w} vs between-class {b}");
}

#[test]
fn exhaustive_single_layer_maps_rows_to_their_own_center() {
    let x = uniform_matrix(12, 5, 0.0, 1.0, 8);
    let model: MbnModel<f64> = train_mbn(&x, &small_config(vec![12], 3, 1.0, 0.0, 8)).unwrap();
    let h = model.transform(&x).unwrap();
    let layer = &model.layers()[0];
    for (v, c) in layer.clusterings().iter().enumerate() {
        for i in 0..x.rows() {
            let j = h.row(i)[v] as usize - v * 12;
            for (p, &f) in c.feature_subset().iter().enumerate() {
                assert_eq!(c.centers().value(j, p), x.get(i, f as usize));
            }
        }
    }
}

#[test]
fn duplicated_rows_transform_identically() {
    let x = DenseMatrix::from_rows(&vec![vec![0.3, -0.2, 0.9]; 6]).unwrap();
    let model: MbnModel<f64> = train_mbn(&x, &small_config(vec![3, 2], 4, 0.5, 0.0, 1)).unwrap();
    let h = model.transform(&x).unwrap();
    assert!((1..6).all(|i| h.row(i) == h.row(0)));
}

#[test]
fn upper_layers_store_binary_centers() {
    let x = uniform_matrix(20, 4, -1.0, 1.0, 2);
    let model: MbnModel<f64> = train_mbn(&x, &small_config(vec![6, 4, 2], 5, 0.5, 0.5, 2)).unwrap();
    assert_eq!(model.layers()[0].metric(), Metric::Euclidean);
    assert!(matches!(model.layers()[0].clusterings()[0].centers(), Centers::Dense(_)));
    for layer in &model.layers()[1..] {
        assert_eq!(layer.metric(), Metric::DotProduct);
        assert!(layer.clusterings().iter().all(|c| matches!(c.centers(), Centers::Binary(_))));
    }
}

#[test]
fn shape_arithmetic() {
    let x = uniform_matrix(4, 3, 0.0, 1.0, 0);
    let model: MbnModel<f64> = train_mbn(&x, &small_config(vec![2], 3, 0.5, 0.0, 0)).unwrap();
    assert_eq!(model.layers().len(), 1);
    assert_eq!(model.layers()[0].clusterings().len(), 3);
    assert_eq!(model.output_dim(), 6);

    let full = MbnConfig::full_scale(0.0, 0);
    assert_eq!(full.k_schedule.len(), 9);
    assert_eq!(full.clusterings_per_layer * full.k_schedule.last().unwrap(), 6000);
}

#[test]
fn too_few_rows_names_the_layer() {
    let x = uniform_matrix(5, 3, 0.0, 1.0, 0);
    let err = train_mbn::<f64>(&x, &small_config(vec![8, 4], 2, 0.5, 0.0, 0)).unwrap_err();
    match err {
        Error::InsufficientSamples { layer, needed, found } => {
            assert_eq!((layer, needed, found), (Some(1), 8, 5));
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn f32_and_f64_agree_on_well_separated_data() {
    let (x, _) = make_synthetic_gaussians::<f64>(4, 30, 3, 6, 10.0).unwrap();
    let config = small_config(vec![10, 5], 8, 0.5, 0.0, 4);
    let m64: MbnModel<f64> = train_mbn(&x, &config).unwrap();
    let m32: MbnModel<f32> = train_mbn(&x.cast(), &config).unwrap();
    assert_eq!(m64.transform(&x).unwrap(), m32.transform(&x.cast()).unwrap());
}
