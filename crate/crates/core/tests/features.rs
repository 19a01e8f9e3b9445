use proptest::prelude::*;

use ivprice::features::{critical_radius, make_feature_map, rademacher_bound, N_RESIDUALS};
use ivprice::{Error, ScalarFunction, VectorAdversary};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn features_approximate_the_gaussian_kernel() {
    let d = 2000;
    let bw = 0.8;
    let pairs = [([0.0, 0.0], [0.3, -0.2]), ([1.0, 0.5], [0.2, 0.9]), ([-1.0, 2.0], [-1.0, 2.0])];
    for (x, y) in pairs {
        let avg = (0..20)
            .map(|seed| {
                let m = make_feature_map(2, d, bw, seed).unwrap();
                dot(&m.features(&x), &m.features(&y))
            })
            .sum::<f64>()
            / 20.0;
        let dist2 = (x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2);
        let k = (-dist2 / (2.0 * bw * bw)).exp();
        assert!((avg - k).abs() < 5.0 / (d as f64).sqrt(), "{avg} vs {k}");
    }
}

#[test]
fn same_seed_same_map_and_json_regenerates() {
    let a = make_feature_map(3, 40, 1.3, 77).unwrap();
    let b = make_feature_map(3, 40, 1.3, 77).unwrap();
    assert_eq!(a.frequencies(), b.frequencies());
    let json = serde_json::to_string(&a).unwrap();
    assert!(!json.contains("frequencies"));
    let back: ivprice::FeatureMap = serde_json::from_str(&json).unwrap();
    assert_eq!(back.frequencies(), a.frequencies());
    assert_eq!(back.features(&[0.1, 0.2, 0.3]), a.features(&[0.1, 0.2, 0.3]));
}

#[test]
fn invalid_maps_are_rejected() {
    assert!(make_feature_map(0, 10, 1.0, 0).is_err());
    assert!(make_feature_map(2, 0, 1.0, 0).is_err());
    assert!(make_feature_map(2, 10, 0.0, 0).is_err());
}

#[test]
fn adversary_norm_is_the_sum_of_component_norms() {
    let m = make_feature_map(2, 5, 1.0, 1).unwrap();
    let comps: Vec<ScalarFunction> = (0..N_RESIDUALS)
        .map(|k| ScalarFunction::from_params(&m, &[k as f64, 1.0, -1.0, 0.5, 0.0, 2.0]))
        .collect();
    let total: f64 = comps.iter().map(ScalarFunction::norm2).sum();
    let f = VectorAdversary::new(comps).unwrap();
    assert_eq!(f.norm2(), total);
    assert!(VectorAdversary::new(vec![]).is_err());
}

#[test]
fn rademacher_bound_examples() {
    let (b, n, delta) = (2.0, 500, 0.3);
    let mut eigs = vec![delta * delta; 7];
    eigs.extend([0.0; 5]);
    let expect = (2.0 * b / n as f64).sqrt() * delta * 7f64.sqrt();
    assert!((rademacher_bound(&eigs, b, n, delta).unwrap() - expect).abs() < 1e-15);
    assert_eq!(rademacher_bound(&[0.0; 10], b, n, delta).unwrap(), 0.0);
    assert!(matches!(rademacher_bound(&[1.0, 2.0], b, n, delta), Err(Error::NonMonotone(_))));
}

#[test]
fn rademacher_bound_matches_brute_force_sum() {
    let eigs: Vec<f64> = (1..=1_000_000).map(|j| (j as f64).powi(-2)).collect();
    let delta = 0.1;
    // sum in reverse order to keep round-off independent of the library's
    let direct: f64 = eigs.iter().rev().map(|l| l.min(delta * delta)).sum();
    let expect = (2.0 / 1000.0f64).sqrt() * direct.sqrt();
    let got = rademacher_bound(&eigs, 1.0, 1000, delta).unwrap();
    assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
}

#[test]
fn critical_radius_is_a_fixed_point() {
    let eigs: Vec<f64> = (1..=100_000).map(|j| (j as f64).powi(-2)).collect();
    for b in [1.0, 2.0] {
        let d = critical_radius(&eigs, b, 10_000).unwrap();
        let gap = rademacher_bound(&eigs, b, 10_000, d).unwrap() - d * d;
        assert!(gap.abs() < 1e-6, "B = {b}: gap {gap}");
    }
    let d1 = critical_radius(&eigs, 1.0, 10_000).unwrap();
    let d2 = critical_radius(&eigs, 2.0, 10_000).unwrap();
    assert!(d2 > d1);
}

#[test]
fn critical_radius_needs_a_positive_spectrum() {
    assert!(matches!(critical_radius(&[0.0; 5], 1.0, 100), Err(Error::NoCrossing)));
}

proptest! {
    #[test]
    fn features_are_bounded(x0 in -10.0..10.0f64, x1 in -10.0..10.0f64, seed in 0u64..50, d in 1usize..64) {
        let m = make_feature_map(2, d, 0.7, seed).unwrap();
        let phi = m.features(&[x0, x1]);
        let amp = (2.0 / d as f64).sqrt();
        prop_assert!(phi.iter().all(|v| v.abs() <= amp + 1e-15));
        prop_assert!(dot(&phi, &phi) <= 2.0 + 1e-12);
    }

    #[test]
    fn evaluation_is_linear_and_bounded(
        w in prop::collection::vec(-2.0..2.0f64, 9),
        v in prop::collection::vec(-2.0..2.0f64, 9),
        c in -3.0..3.0f64,
        x0 in -5.0..5.0f64,
        x1 in -5.0..5.0f64,
    ) {
        let m = make_feature_map(2, 8, 1.1, 3).unwrap();
        let x = [x0, x1];
        let f = ScalarFunction::from_params(&m, &w);
        let g = ScalarFunction::from_params(&m, &v);
        let sum: Vec<f64> = w.iter().zip(&v).map(|(a, b)| a + b).collect();
        let fg = ScalarFunction::from_params(&m, &sum);
        prop_assert!((fg.eval(&x) - f.eval(&x) - g.eval(&x)).abs() < 1e-12);
        let s = f.scaled(c);
        prop_assert!((s.eval(&x) - c * f.eval(&x)).abs() < 1e-12);
        prop_assert!((s.norm2() - c * c * f.norm2()).abs() < 1e-9);
        // |c0 + w'φ| ≤ |c0| + √2·‖w‖ since ‖φ‖ ≤ √2
        let wn = dot(&w[1..], &w[1..]).sqrt();
        prop_assert!(f.eval(&x).abs() <= w[0].abs() + 2f64.sqrt() * wn + 1e-12);
    }

    #[test]
    fn rademacher_bound_is_monotone(d1 in 0.01..1.0f64, d2 in 0.01..1.0f64, b1 in 0.1..5.0f64, b2 in 0.1..5.0f64, gamma in 0.6..3.0f64) {
        let eigs: Vec<f64> = (1..=2000).map(|j| (j as f64).powf(-2.0 * gamma)).collect();
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        prop_assert!(rademacher_bound(&eigs, b1, 100, lo).unwrap() <= rademacher_bound(&eigs, b1, 100, hi).unwrap());
        let (blo, bhi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
        prop_assert!(rademacher_bound(&eigs, blo, 100, d1).unwrap() <= rademacher_bound(&eigs, bhi, 100, d1).unwrap());
    }
}
