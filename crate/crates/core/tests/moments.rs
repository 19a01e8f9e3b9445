mod common;

use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use ivprice::moments::{
    conditional_moment, eval_rho, idx, identify_beta, moment_system, phi_objective, residuals_at, true_nuisances,
    AlphaPoint, ConditionalLaw, Nuisance, DEFAULT_DEGENERACY_TOL,
};
use ivprice::scm::{build_discrete_scm, CoefficientFns, DiscreteScm, DiscreteScmSpec};
use ivprice::{Error, Sample};

fn models() -> Vec<DiscreteScm> {
    vec![common::scm_a(), common::scm_b(), common::scm_c()]
}

/// Price ignores the instrument, so the moment system carries no information.
fn irrelevant_instrument() -> DiscreteScm {
    let atoms = common::product_atoms(
        &[(vec![0.0], 0.5), (vec![1.0], 0.5)],
        &|_| vec![(0.0, 0.5), (1.0, 0.5)],
        &[(-1.0, 0.5), (1.0, 0.5)],
        &[(-1.0, 0.5), (1.0, 0.5)],
        &[(-0.5, 0.5), (0.5, 0.5)],
        &[(0.0, 1.0)],
    );
    let fns = CoefficientFns {
        beta_p1: &|u1, _| 2.0 + u1,
        beta_p2: &|u1, _| -1.5 - 0.5 * u1,
        beta_g: &|u1, _, g| u1 * g,
        beta_ux: &|u1, _, _| u1,
        alpha_g: &|_, _, _| 0.0,
        alpha_ux: &|u2, x| 2.0 + u2 + x[0],
    };
    build_discrete_scm(DiscreteScmSpec::from_fns(atoms, &fns)).unwrap()
}

#[test]
fn both_moment_identities_hold_on_every_model() {
    for scm in models() {
        let truth = true_nuisances(&scm);
        for x in scm.x_points() {
            let ms = moment_system(&scm, x).unwrap();
            let (b1, b2) = truth.beta(x).unwrap();
            assert_abs_diff_eq!(ms.omega[0] - ms.omega[1] * b1 - ms.omega[2] * b2, 0.0, epsilon = 1e-9);
            assert_abs_diff_eq!(ms.upsilon[0] - ms.upsilon[1] * b1 - ms.upsilon[2] * b2, 0.0, epsilon = 1e-9);
        }
    }
}

#[test]
fn conditional_laws_are_normalized() {
    for scm in models() {
        for x in scm.x_points() {
            assert_abs_diff_eq!(ConditionalLaw::new(&scm, x, None).unwrap().total_mass(), 1.0, epsilon = 1e-12);
        }
    }
}

#[test]
fn irrelevant_instrument_is_degenerate() {
    let scm = irrelevant_instrument();
    for x in scm.x_points() {
        let ms = moment_system(&scm, x).unwrap();
        assert_abs_diff_eq!(ms.omega[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ms.omega[2], 0.0, epsilon = 1e-12);
        assert!(matches!(identify_beta(&ms, DEFAULT_DEGENERACY_TOL), Err(Error::DegenerateSystem { .. })));
    }
}

#[test]
fn constant_instrument_gives_constant_first_moments() {
    let atoms = common::product_atoms(
        &[(vec![0.0], 0.4), (vec![2.0], 0.6)],
        &|_| vec![(1.5, 1.0)],
        &[(-1.0, 0.5), (1.0, 0.5)],
        &[(0.0, 1.0)],
        &[(-1.0, 0.5), (1.0, 0.5)],
        &[(0.0, 1.0)],
    );
    let fns = CoefficientFns {
        beta_p1: &|u1, _| u1,
        beta_p2: &|_, _| -1.0,
        beta_g: &|_, _, _| 0.0,
        beta_ux: &|u1, _, _| u1,
        alpha_g: &|_, _, g| g,
        alpha_ux: &|_, _| 0.0,
    };
    let scm = build_discrete_scm(DiscreteScmSpec::from_fns(atoms, &fns)).unwrap();
    let truth = true_nuisances(&scm);
    for x in scm.x_points() {
        let a = truth.point(x, 1.5);
        assert_eq!(a.h1, 1.5);
        assert_eq!(a.h3, 2.25);
    }
}

#[test]
fn tabulated_h2_is_the_conditional_price_mean() {
    for scm in models() {
        let truth = true_nuisances(&scm);
        for atom in scm.atoms() {
            let (mut mass, mut sum) = (0.0, 0.0);
            for (j, b) in scm.atoms().iter().enumerate() {
                if b.x == atom.x && b.g == atom.g {
                    mass += b.prob;
                    sum += b.prob * scm.price(j);
                }
            }
            assert_abs_diff_eq!(truth.point(&atom.x, atom.g).h2, sum / mass, epsilon = 1e-12);
        }
    }
}

#[test]
fn beta_table_is_the_weighted_average_over_u1() {
    for scm in models() {
        let truth = true_nuisances(&scm);
        for x in scm.x_points() {
            let (b1, b2) = truth.beta(x).unwrap();
            let (e1, e2) = common::enumerated_beta(&scm, x);
            assert_abs_diff_eq!(b1, e1, epsilon = 1e-12);
            assert_abs_diff_eq!(b2, e2, epsilon = 1e-12);
        }
    }
}

#[test]
fn beta1_shift_moves_the_last_two_moments_by_the_system_coefficients() {
    for scm in models() {
        let mut shifted = true_nuisances(&scm);
        shifted.shift(idx::BETA1, 1.0);
        for x in scm.x_points() {
            let ms = moment_system(&scm, x).unwrap();
            let m = conditional_moment(&scm, &shifted, x).unwrap();
            assert_abs_diff_eq!(m[6], -ms.omega[1], epsilon = 1e-9);
            assert_abs_diff_eq!(m[7], -ms.upsilon[1], epsilon = 1e-9);
            for v in &m[..6] {
                assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-9);
            }
        }
    }
}

#[test]
fn moment_is_affine_in_the_revenue_coefficients() {
    let scm = common::scm_b();
    let x = &scm.x_points()[1];
    let at = |t: f64| {
        let mut a = true_nuisances(&scm);
        a.set_beta(x, 0.3 + 2.0 * t, -1.0 - t);
        conditional_moment(&scm, &a, x).unwrap()
    };
    let (m0, m1, m2) = (at(0.0), at(1.0), at(2.5));
    for k in 0..8 {
        // collinear points: m(2.5) = m(0) + 2.5 (m(1) - m(0))
        assert_abs_diff_eq!(m2[k], m0[k] + 2.5 * (m1[k] - m0[k]), epsilon = 1e-9 * m2[k].abs().max(1.0));
    }
}

#[test]
fn phi_vanishes_only_at_the_truth() {
    for scm in models() {
        let truth = true_nuisances(&scm);
        assert_abs_diff_eq!(phi_objective(&scm, &truth).unwrap(), 0.0, epsilon = 1e-12);
        for k in 0..8 {
            let mut a = true_nuisances(&scm);
            a.shift(k, 0.1);
            let phi = phi_objective(&scm, &a).unwrap();
            assert!(phi > 1e-8, "component {k}: phi = {phi}");
        }
    }
}

#[test]
fn cramer_examples() {
    use ivprice::MomentSystem;
    let ms = MomentSystem { omega: [2.0, 1.0, 0.0], upsilon: [3.0, 0.0, 1.0] };
    assert_eq!(identify_beta(&ms, DEFAULT_DEGENERACY_TOL).unwrap(), (2.0, 3.0));
    let ms = MomentSystem { omega: [0.0, 1.0, 0.0], upsilon: [0.0, 0.0, 1.0] };
    assert_eq!(identify_beta(&ms, DEFAULT_DEGENERACY_TOL).unwrap(), (0.0, 0.0));
}

// residuals that reference each component, in component order
const DEPENDS: [&[usize]; 8] = [
    &[6, 7],
    &[6, 7],
    &[0, 6, 7],
    &[1, 3, 4, 5, 6, 7],
    &[2, 7],
    &[3, 7],
    &[4, 7],
    &[5, 7],
];

fn point_strategy() -> impl Strategy<Value = [f64; 8]> {
    prop::array::uniform8(-3.0..3.0f64)
}

proptest! {
    #[test]
    fn perturbing_one_component_changes_only_its_residuals(
        a in point_strategy(),
        (y, g, p) in (-5.0..5.0f64, -3.0..3.0f64, 0.0..5.0f64),
        k in 0usize..8,
    ) {
        let base = residuals_at(y, g, p, &AlphaPoint::from_array(a));
        let mut b = a;
        b[k] += 0.37;
        let moved = residuals_at(y, g, p, &AlphaPoint::from_array(b));
        for r in 0..8 {
            if !DEPENDS[k].contains(&r) {
                prop_assert_eq!(base[r], moved[r]);
            }
        }
    }

    #[test]
    fn rho_vanishes_at_the_price_mean(y in -5.0..5.0f64, g in -3.0..3.0f64, p in 0.0..5.0f64, h1 in -2.0..2.0f64) {
        let z = Sample::new(y, vec![0.0, 0.0], g, p);
        prop_assert_eq!(eval_rho(&z, h1, p), [0.0; 6]);
    }

    #[test]
    fn rho_is_linear_in_revenue(y1 in -5.0..5.0f64, y2 in -5.0..5.0f64, g in -3.0..3.0f64, p in 0.0..5.0f64) {
        let r = |y: f64| eval_rho(&Sample::new(y, vec![0.0, 0.0], g, p), 0.5, 1.0);
        let (a, b, s) = (r(y1), r(y2), r(y1 + y2));
        for k in [0, 3] {
            prop_assert!((s[k] - a[k] - b[k]).abs() <= 1e-9 * (1.0 + s[k].abs()));
        }
        // the price entries do not involve Y
        for k in [1, 2, 4, 5] {
            prop_assert_eq!(a[k], b[k]);
        }
    }
}
