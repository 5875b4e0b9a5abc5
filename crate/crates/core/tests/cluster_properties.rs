mod common;

use common::*;
use compressive_mbn::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn implied_inertia(x: &DenseMatrix<f64>, r: &KmeansResult<f64>) -> f64 {
    x.row_iter()
        .zip(r.labels.as_slice())
        .map(|(row, &l)| row.iter().zip(r.centers.row(l)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum()
}

fn label_strategy(max_len: usize, classes: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0..classes, 1..max_len)
}

proptest! {
    #![proptest_config(cases(48))]

    #[test]
    fn lloyd_inertia_never_increases(n in 4usize..40, k in 1usize..5, seed in 0u64..1000) {
        let x = uniform_matrix(n, 3, -5.0, 5.0, seed);
        let k = k.min(n);
        let init = x.select_rows(&(0..k).collect::<Vec<_>>());
        let (result, trace) = lloyd(&x, init, 100);
        for w in trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12 * w[0].abs());
        }
        prop_assert!((implied_inertia(&x, &result) - result.inertia).abs() <= 1e-9 * (1.0 + result.inertia));
    }

    #[test]
    fn more_restarts_never_hurt(n in 6usize..30, k in 2usize..5, seed in 0u64..1000, extra in 1usize..10) {
        let x = uniform_matrix(n, 2, 0.0, 10.0, seed);
        let few = kmeans(&x, &KmeansConfig { k, n_restarts: 1, max_iters: 300, seed }).unwrap();
        let many = kmeans(&x, &KmeansConfig { k, n_restarts: 1 + extra, max_iters: 300, seed }).unwrap();
        prop_assert!(many.inertia <= few.inertia);
        prop_assert!(many.labels.as_slice().iter().all(|&l| l < k));
    }

    #[test]
    fn small_instances_reach_the_global_optimum(n in 3usize..7, k in 1usize..4, seed in 0u64..10_000) {
        let x = uniform_matrix(n, 2, 0.0, 10.0, seed);
        let k = k.min(n);
        let got = kmeans(&x, &KmeansConfig { k, n_restarts: 20, max_iters: 300, seed }).unwrap();
        let best = exhaustive_kmeans_optimum(&x, k);
        prop_assert!((got.inertia - best).abs() <= 1e-9 * (1.0 + best), "{} vs {}", got.inertia, best);
    }

    #[test]
    fn nmi_matches_the_contingency_oracle(a in label_strategy(60, 5), seed in 0u64..1000) {
        let mut r = rng(seed);
        let b: Vec<usize> = a.iter().map(|&l| if r.random_bool(0.3) { r.random_range(0..4) } else { l }).collect();
        let got = nmi(&labels(&a), &labels(&b)).unwrap();
        prop_assert!((got - nmi_bits(&a, &b)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&got));
        prop_assert!((got - nmi(&labels(&b), &labels(&a)).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn nmi_ignores_label_names(a in label_strategy(60, 6), seed in 0u64..1000) {
        let mut perm: Vec<usize> = (0..6).collect();
        perm.shuffle(&mut rng(seed));
        let renamed: Vec<usize> = a.iter().map(|&l| perm[l]).collect();
        let distinct = a.iter().collect::<std::collections::BTreeSet<_>>().len();
        let self_nmi = nmi(&labels(&a), &labels(&renamed)).unwrap();
        if distinct >= 2 {
            prop_assert!((self_nmi - 1.0).abs() < 1e-12);
        } else {
            prop_assert_eq!(self_nmi, 0.0);
        }
    }

    #[test]
    fn indicators_round_trip_through_argmax(v in prop::collection::vec(0usize..7, 1..50)) {
        let l = LabelVector::new(v.clone(), 7).unwrap();
        let ind: DenseMatrix<f64> = labels_to_indicators(&l, 7).unwrap();
        prop_assert!(ind.row_iter().all(|r| r.iter().sum::<f64>() == 1.0));
        let back = argmax_rows(&ind);
        prop_assert_eq!(back.as_slice(), v.as_slice());
    }

    #[test]
    fn nearest_center_matches_brute_force(n in 1usize..30, k in 1usize..6, seed in 0u64..1000) {
        let x = uniform_matrix(n, 3, -1.0, 1.0, seed);
        let c = uniform_matrix(k, 3, -1.0, 1.0, seed + 1);
        let got = assign_nearest_center(&x, &c).unwrap();
        for i in 0..n {
            let d: Vec<f64> = (0..k).map(|j| (0..3).map(|p| (x.get(i, p) - c.get(j, p)).powi(2)).sum()).collect();
            let best = (0..k).fold(0, |b, j| if d[j] < d[b] { j } else { b });
            prop_assert_eq!(got.as_slice()[i], best);
        }
    }
}

#[test]
fn centers_assign_to_themselves() {
    let c = uniform_matrix(5, 4, -1.0, 1.0, 2);
    assert_eq!(assign_nearest_center(&c, &c).unwrap().as_slice(), &[0, 1, 2, 3, 4]);
    let one = c.select_rows(&[2]);
    assert!(assign_nearest_center(&c, &one).unwrap().as_slice().iter().all(|&l| l == 0));
}

#[test]
fn overlapping_classes_are_not_recovered() {
    let (x, truth) = make_synthetic_gaussians::<f64>(6, 100, 3, 5, 0.0).unwrap();
    let found = kmeans(&x, &KmeansConfig::new(3, 6)).unwrap();
    let score = nmi(&truth, &found.labels).unwrap();
    assert!(score < 0.1, "NMI {score}");
}

#[test]
fn separated_classes_are_recovered() {
    let (x, truth) = make_synthetic_gaussians::<f64>(6, 100, 3, 5, 10.0).unwrap();
    let found = kmeans(&x, &KmeansConfig::new(3, 6)).unwrap();
    assert!(nmi(&truth, &found.labels).unwrap() > 0.99);
}

#[test]
fn kmeans_is_thread_count_independent() {
    let x = uniform_matrix(200, 4, 0.0, 1.0, 3);
    let config = KmeansConfig::new(6, 3);
    let run = |t: usize| rayon::ThreadPoolBuilder::new().num_threads(t).build().unwrap().install(|| kmeans(&x, &config).unwrap());
    assert_eq!(run(1), run(4));
}
