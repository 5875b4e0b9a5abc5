mod common;

use common::*;
use compressive_mbn::linalg::matmul_bt;
use compressive_mbn::*;
use proptest::prelude::*;

/// Data whose covariance spectrum is well separated: uniform noise with
/// geometrically shrinking column scales.
fn spread_data(rows: usize, cols: usize, seed: u64) -> DenseMatrix<f64> {
    let x = uniform_matrix(rows, cols, -1.0, 1.0, seed);
    let v = x.values().iter().enumerate().map(|(i, v)| v * 4.0 * 0.6f64.powi((i % cols) as i32)).collect();
    DenseMatrix::from_vec(rows, cols, v).unwrap()
}

fn tight(d: usize, seed: u64) -> EmpcaConfig {
    EmpcaConfig { target_dim: d, max_iters: 20_000, tol: 1e-13, seed }
}

proptest! {
    #![proptest_config(cases(32))]

    #[test]
    fn recovers_the_leading_eigenspace(rows in 15usize..60, cols in 3usize..9, d in 1usize..3, seed in 0u64..500) {
        let x = spread_data(rows, cols, seed);
        let model = fit_empca(&x, &tight(d, seed)).unwrap();
        let (oracle, _) = covariance_top_eigenvectors(&x, d);
        let angle = max_principal_angle(&to_nalgebra(model.basis()), &oracle);
        prop_assert!(angle < 1e-6, "principal angle {}", angle);
    }

    #[test]
    fn basis_is_orthonormal(rows in 5usize..40, cols in 2usize..10, seed in 0u64..500) {
        let d = (cols - 1).clamp(1, 4);
        let x = uniform_matrix(rows, cols, -3.0, 3.0, seed);
        let model = fit_empca(&x, &EmpcaConfig::new(d, seed)).unwrap();
        let gram = matmul_bt(model.basis(), model.basis());
        for i in 0..d {
            for j in 0..d {
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((gram.get(i, j) - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn reconstruction_error_never_increases(rows in 5usize..40, cols in 2usize..10, seed in 0u64..500) {
        let x = uniform_matrix(rows, cols, -1.0, 1.0, seed);
        let d = (cols / 2).max(1);
        let (_, trace) = fit_empca_traced(&x, &EmpcaConfig::new(d, seed)).unwrap();
        let errs = &trace.reconstruction_errors;
        let slack = 1e-12 * errs[0];
        for w in errs.windows(2) {
            prop_assert!(w[1] <= w[0] + slack, "{} then {}", w[0], w[1]);
        }
    }

    #[test]
    fn seeds_agree_up_to_rotation(seed_a in 0u64..1000, seed_b in 0u64..1000) {
        let x = spread_data(40, 6, 9);
        let pa = fit_empca(&x, &tight(3, seed_a)).unwrap().project(&x).unwrap();
        let pb = fit_empca(&x, &tight(3, seed_b)).unwrap().project(&x).unwrap();
        let (ga, gb) = (matmul_bt(&pa, &pa), matmul_bt(&pb, &pb));
        for (a, b) in ga.values().iter().zip(gb.values()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_projection_equals_row_by_row(rows in 2usize..30, seed in 0u64..500) {
        let x = uniform_matrix(rows, 5, -1.0, 1.0, seed);
        let model = fit_empca(&x, &EmpcaConfig::new(2, seed)).unwrap();
        let batch = model.project(&x).unwrap();
        for i in 0..rows {
            let single = model.project(&x.select_rows(&[i])).unwrap();
            prop_assert_eq!(single.row(0), batch.row(i));
        }
    }
}

#[test]
fn sparse_features_fit_like_their_dense_copy() {
    let x = uniform_matrix(40, 6, -1.0, 1.0, 1);
    let mbn: MbnModel<f64> =
        train_mbn(&x, &MbnConfig { k_schedule: vec![6, 4], clusterings_per_layer: 5, feature_fraction: 0.5, reconstruction_rate: 0.0, seed: 1 })
            .unwrap();
    let h = mbn.transform(&x).unwrap();
    let dense: DenseMatrix<f64> = h.to_dense();
    let config = tight(2, 4);
    let from_sparse = fit_empca(&h, &config).unwrap();
    let from_dense = fit_empca(&dense, &config).unwrap();
    let angle = max_principal_angle(&to_nalgebra(from_sparse.basis()), &to_nalgebra(from_dense.basis()));
    assert!(angle < 1e-8, "{angle}");
    let (ps, pd) = (from_sparse.project(&h).unwrap(), from_dense.project(&dense).unwrap());
    for (a, b) in ps.values().iter().zip(pd.values()) {
        assert!((a - b).abs() < 1e-8);
    }
}

#[test]
fn mean_is_the_column_mean() {
    let x = DenseMatrix::from_rows(&[vec![1.0, 10.0], vec![3.0, 20.0], vec![5.0, 60.0]]).unwrap();
    let model = fit_empca(&x, &EmpcaConfig::new(1, 0)).unwrap();
    assert_eq!(model.mean(), &[3.0, 30.0]);
}
