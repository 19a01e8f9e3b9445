//! Finite-support models shared by the integration tests.

#![allow(dead_code)]

use ivprice::scm::{build_discrete_scm, Atom, CoefficientFns, DiscreteScm, DiscreteScmSpec};

pub type Law = Vec<(f64, f64)>;

/// Product measure over `x`, `g | x`, `u1`, `u2`, `eps_p`, `eps_y`. Every
/// independence the identification needs holds by construction.
pub fn product_atoms(
    xs: &[(Vec<f64>, f64)],
    g_given_x: &dyn Fn(&[f64]) -> Law,
    u1: &[(f64, f64)],
    u2: &[(f64, f64)],
    eps_p: &[(f64, f64)],
    eps_y: &[(f64, f64)],
) -> Vec<Atom> {
    let mut atoms = Vec::new();
    for (x, px) in xs {
        for (g, pg) in g_given_x(x) {
            for &(a, pa) in u1 {
                for &(b, pb) in u2 {
                    for &(ep, pep) in eps_p {
                        for &(ey, pey) in eps_y {
                            atoms.push(Atom {
                                x: x.clone(),
                                u1: a,
                                u2: b,
                                g,
                                eps_p: ep,
                                eps_y: ey,
                                prob: px * pg * pa * pb * pep * pey,
                            });
                        }
                    }
                }
            }
        }
    }
    atoms
}

fn sym(v: f64) -> Law {
    vec![(-v, 0.5), (v, 0.5)]
}

/// One covariate, three instrument levels, confounding through `u1` only.
pub fn scm_a() -> DiscreteScm {
    let atoms = product_atoms(
        &[(vec![0.0], 0.5), (vec![1.0], 0.5)],
        &|x| vec![(0.0, 0.3), (1.0, 0.4), (2.0 + x[0], 0.3)],
        &[(-1.0, 0.3), (0.5, 0.4), (1.0, 0.3)],
        &[(-1.0, 0.25), (0.0, 0.5), (1.0, 0.25)],
        &sym(0.5),
        &sym(1.0),
    );
    let fns = CoefficientFns {
        beta_p1: &|u1, x| 2.0 + u1 + 0.5 * x[0],
        beta_p2: &|u1, x| -1.0 - u1 * u1 - 0.2 * x[0],
        beta_g: &|u1, x, g| (u1 + x[0]) * g + g,
        beta_ux: &|u1, _, x| (u1 + x[0]).cos(),
        alpha_g: &|u2, x, g| (1.0 + u2 + 0.3 * x[0]) * g,
        alpha_ux: &|u2, _| u2,
    };
    build_discrete_scm(DiscreteScmSpec::from_fns(atoms, &fns)).expect("valid model")
}

/// Two covariates; the revenue confounder also depends on a symmetric `u2`.
pub fn scm_b() -> DiscreteScm {
    let xs: Vec<(Vec<f64>, f64)> = vec![
        (vec![0.0, 0.0], 0.25),
        (vec![1.0, 0.0], 0.25),
        (vec![0.0, 1.0], 0.25),
        (vec![-1.0, 0.5], 0.25),
    ];
    let atoms = product_atoms(
        &xs,
        &|x| vec![(1.0, 0.5), (2.0 + 0.5 * x[1], 0.25), (3.0 + x[0], 0.25)],
        &[(0.0, 0.5), (1.0, 0.5)],
        &[(-2.0, 0.25), (-1.0, 0.25), (1.0, 0.25), (2.0, 0.25)],
        &sym(1.0),
        &[(-2.0, 0.25), (0.0, 0.5), (2.0, 0.25)],
    );
    let fns = CoefficientFns {
        beta_p1: &|u1, x| 1.0 + 2.0 * u1 - 0.3 * x[0] + 0.2 * x[1],
        beta_p2: &|u1, x| -(u1 + 0.1 * x[0]).exp(),
        beta_g: &|u1, x, g| (u1 * u1 + 0.2 * x[0] - 0.1 * x[1]) * g + 5.0 * g,
        beta_ux: &|u1, u2, x| u1 * u2 + x[0],
        alpha_g: &|u2, x, g| (u2 * u2 + 1.2 * x[0] + 0.4 * x[1]) * g + g,
        alpha_ux: &|u2, _| u2.cos(),
    };
    build_discrete_scm(DiscreteScmSpec::from_fns(atoms, &fns)).expect("valid model")
}

/// Skewed latent laws and three covariate points with unequal mass.
pub fn scm_c() -> DiscreteScm {
    let atoms = product_atoms(
        &[(vec![-0.5], 0.2), (vec![0.25], 0.5), (vec![1.5], 0.3)],
        &|x| vec![(0.5, 0.6), (2.0, 0.3), (4.0 + x[0], 0.1)],
        &[(-0.5, 0.6), (0.2, 0.1), (1.1, 0.3)],
        &[(0.0, 0.7), (2.0, 0.2), (3.0, 0.1)],
        &[(-0.2, 0.5), (0.2, 0.5)],
        &[(-0.3, 0.5), (0.3, 0.5)],
    );
    let fns = CoefficientFns {
        beta_p1: &|u1, x| u1 * u1 - 0.3 * x[0],
        beta_p2: &|u1, x| -0.5 - (u1 + 0.1 * x[0]).abs(),
        beta_g: &|u1, x, g| (u1 + 0.2 * x[0]) * g,
        beta_ux: &|u1, _, x| (u1 * x[0]).sin() + u1,
        alpha_g: &|u2, x, g| (u2 + 0.5 + x[0] * x[0]) * g,
        alpha_ux: &|u2, x| (u2 + x[0]).cos(),
    };
    build_discrete_scm(DiscreteScmSpec::from_fns(atoms, &fns)).expect("valid model")
}

/// `E[β_{p,k}(U, X) | X = x]` by direct enumeration of the atoms.
pub fn enumerated_beta(scm: &DiscreteScm, x: &[f64]) -> (f64, f64) {
    let (mut m, mut b1, mut b2) = (0.0, 0.0, 0.0);
    for (a, c) in scm.atoms().iter().zip(scm.coefficients()) {
        if a.x == x {
            m += a.prob;
            b1 += a.prob * c.beta_p1;
            b2 += a.prob * c.beta_p2;
        }
    }
    (b1 / m, b2 / m)
}
