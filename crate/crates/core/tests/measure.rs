use mkv_core::measure::{wasserstein_1d, wasserstein_p, EmpiricalMeasure};
use proptest::prelude::*;

fn cloud(n: usize, dim: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-5.0f64..5.0, n * dim)
}

fn wp(x: &[f64], y: &[f64], dim: usize, p: f64) -> f64 {
    wasserstein_p(&EmpiricalMeasure::from_points(x.to_vec(), dim).unwrap(), &EmpiricalMeasure::from_points(y.to_vec(), dim).unwrap(), p).unwrap()
}

proptest! {
    #[test]
    fn triangle_inequality(
        (x, y, z, dim) in (1usize..8, 1usize..3).prop_flat_map(|(n, d)| (cloud(n, d), cloud(n, d), cloud(n, d), Just(d))),
        p in 1.0f64..4.0,
    ) {
        prop_assert!(wp(&x, &z, dim, p) <= wp(&x, &y, dim, p) + wp(&y, &z, dim, p) + 1e-9);
    }

    #[test]
    fn translation_invariant(
        (x, y, dim) in (1usize..8, 1usize..3).prop_flat_map(|(n, d)| (cloud(n, d), cloud(n, d), Just(d))),
        shift in -10.0f64..10.0,
        p in 1.0f64..4.0,
    ) {
        let xs: Vec<f64> = x.iter().map(|v| v + shift).collect();
        let ys: Vec<f64> = y.iter().map(|v| v + shift).collect();
        prop_assert!((wp(&x, &y, dim, p) - wp(&xs, &ys, dim, p)).abs() <= 1e-9);
    }

    #[test]
    fn one_d_is_the_sorted_coupling((x, y) in (1usize..12).prop_flat_map(|n| (cloud(n, 1), cloud(n, 1))), p in 1.0f64..4.0) {
        let (mut xs, mut ys) = (x.clone(), y.clone());
        xs.sort_by(f64::total_cmp);
        ys.sort_by(f64::total_cmp);
        let sorted = (xs.iter().zip(&ys).map(|(a, b)| (a - b).abs().powf(p)).sum::<f64>() / x.len() as f64).powf(1.0 / p);
        prop_assert!((wp(&x, &y, 1, p) - sorted).abs() <= 1e-9);
        prop_assert!((wasserstein_1d(&x, &y, p).unwrap() - sorted).abs() <= 1e-9);
    }

    #[test]
    fn symmetric_and_zero_on_the_diagonal((x, y) in (1usize..8).prop_flat_map(|n| (cloud(n, 2), cloud(n, 2)))) {
        prop_assert!((wp(&x, &y, 2, 2.0) - wp(&y, &x, 2, 2.0)).abs() <= 1e-12);
        prop_assert!(wp(&x, &x, 2, 2.0).abs() <= 1e-12);
    }
}
