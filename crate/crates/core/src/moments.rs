//! Generalized residuals, the Ω/Υ moment systems and exact-enumeration
//! oracles on finite-support models.
//!
//! The parameter `α = (β1, β2, h1, .., h6)` collects the conditional mean
//! revenue coefficients and six regression nuisances:
//!
//! | component | target                     | input   |
//! |-----------|----------------------------|---------|
//! | `h1`      | `E[G | X]`                 | `x`     |
//! | `h2`      | `E[P | X, G]`              | `(x,g)` |
//! | `h3`      | `E[G² | X]`                | `x`     |
//! | `h4`      | `E[(P − h2) Y | X]`        | `x`     |
//! | `h5`      | `E[(P − h2) P | X]`        | `x`     |
//! | `h6`      | `E[(P − h2) P² | X]`       | `x`     |

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMap, ScalarFunction, N_RESIDUALS};
use crate::scm::{key_of, DiscreteScm, Key, Sample};

/// Index of each component in the parameter ordering `(β1, β2, h1, .., h6)`.
pub mod idx {
    pub const BETA1: usize = 0;
    pub const BETA2: usize = 1;
    pub const H1: usize = 2;
    pub const H2: usize = 3;
    pub const H3: usize = 4;
    pub const H4: usize = 5;
    pub const H5: usize = 6;
    pub const H6: usize = 7;
}

pub const COMPONENT_NAMES: [&str; 8] = ["beta1", "beta2", "h1", "h2", "h3", "h4", "h5", "h6"];

/// Values of all eight components of `α` at one `(x, g)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AlphaPoint {
    pub beta1: f64,
    pub beta2: f64,
    pub h1: f64,
    pub h2: f64,
    pub h3: f64,
    pub h4: f64,
    pub h5: f64,
    pub h6: f64,
}

impl AlphaPoint {
    pub fn from_array(a: [f64; 8]) -> Self {
        Self { beta1: a[0], beta2: a[1], h1: a[2], h2: a[3], h3: a[4], h4: a[5], h5: a[6], h6: a[7] }
    }

    pub fn to_array(self) -> [f64; 8] {
        [self.beta1, self.beta2, self.h1, self.h2, self.h3, self.h4, self.h5, self.h6]
    }
}

/// Anything that can produce the value of `α` at a covariate/instrument pair.
pub trait Nuisance {
    fn point(&self, x: &[f64], g: f64) -> AlphaPoint;
}

/// The eight generalized residuals in the fixed order
/// `w1 = G − h1`, `w2 = P − h2`, `w3 = G² − h3`, `w4 = (P − h2)Y − h4`,
/// `w5 = P(P − h2) − h5`, `w6 = P²(P − h2) − h6`, then the two
/// revenue-coefficient residuals `w7`, `w8`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualVector {
    pub w: [f64; N_RESIDUALS],
}

/// `ρ1..ρ6`: `(G − h1)(P − h2)·(Y, P, P²)` followed by the same three
/// multiplied by `G`.
pub fn eval_rho(z: &Sample, h1: f64, h2: f64) -> [f64; 6] {
    rho(z.y, z.g, z.p, h1, h2)
}

#[inline]
pub(crate) fn rho(y: f64, g: f64, p: f64, h1: f64, h2: f64) -> [f64; 6] {
    let c = (g - h1) * (p - h2);
    let (r1, r2, r3) = (c * y, c * p, c * p * p);
    [r1, r2, r3, g * r1, g * r2, g * r3]
}

/// Residuals at a raw observation `(y, g, p)` and parameter value `a`.
#[inline]
pub fn residuals_at(y: f64, g: f64, p: f64, a: &AlphaPoint) -> [f64; N_RESIDUALS] {
    let e2 = p - a.h2;
    let r = rho(y, g, p, a.h1, a.h2);
    let s = a.h3 - a.h1 * a.h1;
    [
        g - a.h1,
        e2,
        g * g - a.h3,
        e2 * y - a.h4,
        p * e2 - a.h5,
        p * p * e2 - a.h6,
        r[0] - r[1] * a.beta1 - r[2] * a.beta2,
        r[3] - s * a.h4 - (r[4] - s * a.h5) * a.beta1 - (r[5] - s * a.h6) * a.beta2,
    ]
}

/// `∂w_k/∂α_j` at a raw observation, rows indexed by residual and columns by
/// the component ordering of [`idx`].
#[inline]
pub fn jacobian_at(y: f64, g: f64, p: f64, a: &AlphaPoint) -> [[f64; 8]; N_RESIDUALS] {
    use idx::*;
    let e1 = g - a.h1;
    let e2 = p - a.h2;
    let r = rho(y, g, p, a.h1, a.h2);
    let s = a.h3 - a.h1 * a.h1;
    let cy = y - p * a.beta1 - p * p * a.beta2;
    let d = a.h4 - a.h5 * a.beta1 - a.h6 * a.beta2;
    let mut j = [[0.0; 8]; N_RESIDUALS];
    j[0][H1] = -1.0;
    j[1][H2] = -1.0;
    j[2][H3] = -1.0;
    j[3][H2] = -y;
    j[3][H4] = -1.0;
    j[4][H2] = -p;
    j[4][H5] = -1.0;
    j[5][H2] = -p * p;
    j[5][H6] = -1.0;
    j[6][BETA1] = -r[1];
    j[6][BETA2] = -r[2];
    j[6][H1] = -e2 * cy;
    j[6][H2] = -e1 * cy;
    j[7][BETA1] = -r[4] + s * a.h5;
    j[7][BETA2] = -r[5] + s * a.h6;
    j[7][H1] = -g * e2 * cy + 2.0 * a.h1 * d;
    j[7][H2] = -g * e1 * cy;
    j[7][H3] = -d;
    j[7][H4] = -s;
    j[7][H5] = s * a.beta1;
    j[7][H6] = s * a.beta2;
    j
}

/// `W(z; α)`.
pub fn eval_w(z: &Sample, alpha: &dyn Nuisance) -> ResidualVector {
    let a = alpha.point(&z.x, z.g);
    ResidualVector { w: residuals_at(z.y, z.g, z.p, &a) }
}

/// Feature-linear `α`: eight [`ScalarFunction`]s, all over `x` except `h2`
/// which is over `(x, g)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NuisanceAlpha {
    pub components: Vec<ScalarFunction>,
}

impl NuisanceAlpha {
    pub fn new(components: Vec<ScalarFunction>) -> Result<Self> {
        if components.len() != 8 {
            return Err(Error::InvalidParameter(format!("alpha needs 8 components, got {}", components.len())));
        }
        let q = components[0].map.input_dim();
        for (k, c) in components.iter().enumerate() {
            let want = if k == idx::H2 { q + 1 } else { q };
            if c.map.input_dim() != want {
                return Err(Error::InvalidParameter(format!(
                    "component {} has input dimension {}, expected {want}",
                    COMPONENT_NAMES[k],
                    c.map.input_dim()
                )));
            }
        }
        Ok(Self { components })
    }

    /// All-zero `α` on the given maps.
    pub fn zeros(map_x: &FeatureMap, map_xg: &FeatureMap) -> Result<Self> {
        Self::new((0..8).map(|k| ScalarFunction::zeros(if k == idx::H2 { map_xg } else { map_x })).collect())
    }

    pub fn beta1(&self) -> &ScalarFunction {
        &self.components[idx::BETA1]
    }

    pub fn beta2(&self) -> &ScalarFunction {
        &self.components[idx::BETA2]
    }

    /// `‖α‖²_H`, the sum of component squared norms.
    pub fn norm2(&self) -> f64 {
        self.components.iter().map(ScalarFunction::norm2).sum()
    }

    /// Stacked parameters in component order.
    pub fn params(&self) -> Vec<f64> {
        self.components.iter().flat_map(|c| c.params()).collect()
    }

    pub fn with_params(&self, params: &[f64]) -> Self {
        let mut off = 0;
        let components = self
            .components
            .iter()
            .map(|c| {
                let len = c.map.basis_len();
                let f = ScalarFunction::from_params(&c.map, &params[off..off + len]);
                off += len;
                f
            })
            .collect();
        assert_eq!(off, params.len(), "parameter length mismatch");
        Self { components }
    }
}

impl Nuisance for NuisanceAlpha {
    fn point(&self, x: &[f64], g: f64) -> AlphaPoint {
        AlphaPoint::from_array(std::array::from_fn(|k| self.components[k].eval_at(x, g)))
    }
}

/// `α` tabulated on the support of a [`DiscreteScm`]. Lookups off the
/// support give NaN.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TabulatedAlpha {
    by_x: HashMap<Key, AlphaPoint>,
    h2: HashMap<Key, f64>,
}

impl TabulatedAlpha {
    /// Adds `delta` to component `k` everywhere.
    pub fn shift(&mut self, k: usize, delta: f64) {
        if k == idx::H2 {
            self.h2.values_mut().for_each(|v| *v += delta);
        } else {
            for p in self.by_x.values_mut() {
                let mut a = p.to_array();
                a[k] += delta;
                *p = AlphaPoint::from_array(a);
            }
        }
    }

    /// Overrides `(β1, β2)` at covariate value `x`.
    pub fn set_beta(&mut self, x: &[f64], beta1: f64, beta2: f64) {
        if let Some(p) = self.by_x.get_mut(&key_of(x)) {
            p.beta1 = beta1;
            p.beta2 = beta2;
        }
    }

    pub fn beta(&self, x: &[f64]) -> Option<(f64, f64)> {
        self.by_x.get(&key_of(x)).map(|p| (p.beta1, p.beta2))
    }
}

impl Nuisance for TabulatedAlpha {
    fn point(&self, x: &[f64], g: f64) -> AlphaPoint {
        let mut p = self.by_x.get(&key_of(x)).copied().unwrap_or(AlphaPoint::from_array([f64::NAN; 8]));
        let mut xg = x.to_vec();
        xg.push(g);
        p.h2 = self.h2.get(&key_of(&xg)).copied().unwrap_or(f64::NAN);
        p
    }
}

/// Exact conditional distribution of the atoms of a [`DiscreteScm`] given
/// `X = x` (and optionally `G = g`).
pub struct ConditionalLaw<'a> {
    scm: &'a DiscreteScm,
    weights: Vec<(usize, f64)>,
}

impl<'a> ConditionalLaw<'a> {
    pub fn new(scm: &'a DiscreteScm, x: &[f64], g: Option<f64>) -> Result<Self> {
        let kx = key_of(x);
        let sel: Vec<(usize, f64)> = scm
            .atoms()
            .iter()
            .enumerate()
            .filter(|(_, a)| a.prob > 0.0 && key_of(&a.x) == kx && g.is_none_or(|g| key_of(&[a.g]) == key_of(&[g])))
            .map(|(i, a)| (i, a.prob))
            .collect();
        let mass: f64 = sel.iter().map(|(_, p)| p).sum();
        if !(mass > 0.0) {
            return Err(Error::InvalidParameter(format!("no support mass at x = {x:?}, g = {g:?}")));
        }
        Ok(Self { scm, weights: sel.into_iter().map(|(i, p)| (i, p / mass)).collect() })
    }

    /// `E[f(atom) | conditioning event]` where `f` receives the atom index.
    pub fn expect(&self, f: impl Fn(usize) -> f64) -> f64 {
        self.weights.iter().map(|&(i, w)| w * f(i)).sum()
    }

    pub fn atoms(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.weights.iter().copied()
    }

    pub fn scm(&self) -> &DiscreteScm {
        self.scm
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().map(|(_, w)| w).sum()
    }
}

/// Tabulates the true `α₀` on a discrete model by enumeration.
pub fn true_nuisances(scm: &DiscreteScm) -> TabulatedAlpha {
    let mut out = TabulatedAlpha::default();
    for x in scm.x_points() {
        let law = ConditionalLaw::new(scm, x, None).expect("x_points carry mass");
        let mut h2_at: HashMap<Key, f64> = HashMap::new();
        for (i, _) in law.atoms() {
            let g = scm.atoms()[i].g;
            let kg = key_of(&[g]);
            if !h2_at.contains_key(&kg) {
                let lg = ConditionalLaw::new(scm, x, Some(g)).expect("atom has mass");
                let v = lg.expect(|j| scm.price(j));
                h2_at.insert(kg, v);
                let mut xg = x.clone();
                xg.push(g);
                out.h2.insert(key_of(&xg), v);
            }
        }
        let h2 = |i: usize| h2_at[&key_of(&[scm.atoms()[i].g])];
        let g = |i: usize| scm.atoms()[i].g;
        let point = AlphaPoint {
            beta1: law.expect(|i| scm.coefficients()[i].beta_p1),
            beta2: law.expect(|i| scm.coefficients()[i].beta_p2),
            h1: law.expect(g),
            h2: f64::NAN,
            h3: law.expect(|i| g(i) * g(i)),
            h4: law.expect(|i| (scm.price(i) - h2(i)) * scm.revenue(i)),
            h5: law.expect(|i| (scm.price(i) - h2(i)) * scm.price(i)),
            h6: law.expect(|i| (scm.price(i) - h2(i)) * scm.price(i).powi(2)),
        };
        out.by_x.insert(key_of(x), point);
    }
    out
}

/// `Ω_k = E[(G − h1)(P − h2) m_k | x]` and
/// `Υ_k = E[G (G − h1)(P − h2) m_k | x] − (h3 − h1²) h_{3+k}` for
/// `m = (Y, P, P²)`. Both satisfy `lhs_1 = lhs_2 β1 + lhs_3 β2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentSystem {
    pub omega: [f64; 3],
    pub upsilon: [f64; 3],
}

impl MomentSystem {
    pub fn determinant(&self) -> f64 {
        self.omega[1] * self.upsilon[2] - self.upsilon[1] * self.omega[2]
    }
}

pub const DEFAULT_DEGENERACY_TOL: f64 = 1e-10;

/// Enumerates the moment system at a support point using the true nuisances.
pub fn moment_system(scm: &DiscreteScm, x: &[f64]) -> Result<MomentSystem> {
    let alpha = true_nuisances(scm);
    moment_system_with(scm, &alpha, x)
}

fn moment_system_with(scm: &DiscreteScm, alpha: &TabulatedAlpha, x: &[f64]) -> Result<MomentSystem> {
    let law = ConditionalLaw::new(scm, x, None)?;
    let at = |i: usize| alpha.point(x, scm.atoms()[i].g);
    let rho_i = |i: usize| {
        let a = at(i);
        rho(scm.revenue(i), scm.atoms()[i].g, scm.price(i), a.h1, a.h2)
    };
    let a0 = at(law.atoms().next().expect("nonempty law").0);
    let s = a0.h3 - a0.h1 * a0.h1;
    let omega = std::array::from_fn(|k| law.expect(|i| rho_i(i)[k]));
    let hs = [a0.h4, a0.h5, a0.h6];
    let upsilon = std::array::from_fn(|k| law.expect(|i| rho_i(i)[k + 3]) - s * hs[k]);
    Ok(MomentSystem { omega, upsilon })
}

/// Solves `Ω1 = Ω2 β1 + Ω3 β2`, `Υ1 = Υ2 β1 + Υ3 β2` by Cramer's rule.
pub fn identify_beta(ms: &MomentSystem, tol: f64) -> Result<(f64, f64)> {
    let det = ms.determinant();
    if !(det.abs() >= tol) {
        return Err(Error::DegenerateSystem { det, tol });
    }
    let [o1, o2, o3] = ms.omega;
    let [u1, u2, u3] = ms.upsilon;
    Ok(((o1 * u3 - o3 * u1) / det, (o2 * u1 - u2 * o1) / det))
}

/// `m(x; α) = E[W(Z; α) | X = x]` by enumeration.
pub fn conditional_moment(scm: &DiscreteScm, alpha: &dyn Nuisance, x: &[f64]) -> Result<[f64; N_RESIDUALS]> {
    let law = ConditionalLaw::new(scm, x, None)?;
    let w: Vec<(f64, [f64; N_RESIDUALS])> = law
        .atoms()
        .map(|(i, p)| {
            let a = scm.atoms()[i].clone();
            let ap = alpha.point(x, a.g);
            (p, residuals_at(scm.revenue(i), a.g, scm.price(i), &ap))
        })
        .collect();
    Ok(std::array::from_fn(|k| w.iter().map(|(p, r)| p * r[k]).sum()))
}

/// `Φ(α) = E[m(X; α)' Σ_{α₀}(X)⁻¹ m(X; α)]` with `Σ_{α₀}(x) = E[W W' | x]` at
/// the true nuisances.
pub fn phi_objective(scm: &DiscreteScm, alpha: &dyn Nuisance) -> Result<f64> {
    let truth = true_nuisances(scm);
    let mut total = 0.0;
    for x in scm.x_points() {
        let law = ConditionalLaw::new(scm, x, None)?;
        let px: f64 = scm
            .atoms()
            .iter()
            .filter(|a| a.prob > 0.0 && key_of(&a.x) == key_of(x))
            .map(|a| a.prob)
            .sum();
        let mut sigma = DMatrix::<f64>::zeros(N_RESIDUALS, N_RESIDUALS);
        for (i, p) in law.atoms() {
            let a = &scm.atoms()[i];
            let w = DVector::from_row_slice(&residuals_at(scm.revenue(i), a.g, scm.price(i), &truth.point(x, a.g)));
            sigma += p * &w * w.transpose();
        }
        let eig = SymmetricEigen::new(sigma.clone());
        let max = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let min = eig.eigenvalues.iter().fold(f64::INFINITY, |m, v| m.min(*v));
        if !(min > 1e-10 * max.max(1e-300)) {
            return Err(Error::SingularCovariance(x.clone()));
        }
        for d in 0..N_RESIDUALS {
            sigma[(d, d)] += 1e-12;
        }
        let chol = sigma.cholesky().ok_or_else(|| Error::SingularCovariance(x.clone()))?;
        let m = DVector::from_row_slice(&conditional_moment(scm, alpha, x)?);
        let sol = chol.solve(&m);
        total += px * m.dot(&sol);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(y: f64, g: f64, p: f64) -> Sample {
        Sample::new(y, vec![0.0, 0.0], g, p)
    }

    struct Fixed(AlphaPoint);

    impl Nuisance for Fixed {
        fn point(&self, _: &[f64], _: f64) -> AlphaPoint {
            self.0
        }
    }

    #[test]
    fn rho_examples() {
        assert_eq!(eval_rho(&sample(1.0, 2.0, 3.0), 1.0, 1.0), [2.0, 6.0, 18.0, 4.0, 12.0, 36.0]);
        assert_eq!(eval_rho(&sample(0.0, 2.0, 3.0), 1.0, 1.0), [0.0, 6.0, 18.0, 0.0, 12.0, 36.0]);
        assert_eq!(eval_rho(&sample(5.0, 2.0, 3.0), 1.0, 3.0), [0.0; 6]);
    }

    #[test]
    fn residual_examples() {
        let a = AlphaPoint { beta1: 0.0, beta2: 0.0, h1: 1.0, h2: 2.0, h3: 1.0, h4: 0.0, h5: 0.0, h6: 0.0 };
        assert_eq!(eval_w(&sample(0.0, 1.0, 2.0), &Fixed(a)).w, [0.0; 8]);
        let a = AlphaPoint { beta1: 1.0, beta2: 0.0, h1: 1.0, h2: 1.0, h3: 2.0, h4: 0.5, h5: 1.0, h6: 2.0 };
        assert_eq!(eval_w(&sample(1.0, 2.0, 3.0), &Fixed(a)).w, [1.0, 2.0, 2.0, 1.5, 5.0, 16.0, -4.0, -7.5]);
    }

    #[test]
    fn identify_examples() {
        let ms = MomentSystem { omega: [2.0, 1.0, 0.0], upsilon: [3.0, 0.0, 1.0] };
        assert_eq!(identify_beta(&ms, DEFAULT_DEGENERACY_TOL).unwrap(), (2.0, 3.0));
        let ms = MomentSystem { omega: [0.0, 1.0, 0.0], upsilon: [0.0, 0.0, 1.0] };
        assert_eq!(identify_beta(&ms, DEFAULT_DEGENERACY_TOL).unwrap(), (0.0, 0.0));
        let ms = MomentSystem { omega: [1.0, 1.0, 2.0], upsilon: [1.0, 2.0, 4.0] };
        assert!(matches!(identify_beta(&ms, DEFAULT_DEGENERACY_TOL), Err(Error::DegenerateSystem { .. })));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let a = AlphaPoint { beta1: 0.7, beta2: -0.4, h1: 1.2, h2: 0.9, h3: 2.1, h4: 0.3, h5: -0.8, h6: 1.7 };
        let (y, g, p) = (1.3, 2.2, 1.9);
        let j = jacobian_at(y, g, p, &a);
        for c in 0..8 {
            let mut up = a.to_array();
            let mut dn = a.to_array();
            up[c] += 1e-6;
            dn[c] -= 1e-6;
            let wu = residuals_at(y, g, p, &AlphaPoint::from_array(up));
            let wd = residuals_at(y, g, p, &AlphaPoint::from_array(dn));
            for k in 0..8 {
                let fd = (wu[k] - wd[k]) / 2e-6;
                assert!((fd - j[k][c]).abs() < 1e-6, "d w{} / d {}: {fd} vs {}", k + 1, COMPONENT_NAMES[c], j[k][c]);
            }
        }
    }
}
