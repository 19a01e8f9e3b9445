//! Penalized adversarial estimation of `α` from the conditional moment
//! restriction `E[W(Z; α₀) | X] = 0`.
//!
//! Learner and adversary are both feature-linear, so for fixed `α` the
//! adversary's problem
//! `sup_f Ψ_n(α, f) − ‖f‖²_{α̃,n} − λ‖f‖²`
//! is a concave quadratic in the stacked adversary weights `θ_f` with closed
//! form `θ_f* = ½(M + λI)⁻¹a`. Here `a = (1/n)Σ W(Z_i; α) ⊗ ψ(X_i)` and
//! `M = (1/n)Σ (W(Z_i; α̃) ⊗ ψ(X_i))(·)'`.
//!
//! The adversary test function for `w2 = P − h2(X, G)` takes `(x, g)` by
//! default: with test functions of `x` alone only the `g`-average of `h2` is
//! pinned down.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{make_feature_map, median_heuristic, FeatureMap, ScalarFunction, VectorAdversary, N_RESIDUALS};
use crate::linalg::{self, RidgeSolver};
use crate::moments::{eval_w, idx, jacobian_at, residuals_at, AlphaPoint, Nuisance, NuisanceAlpha};
use crate::rng::{derive_seed, rng_from_seed};
use crate::scm::Dataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Alternating,
    Stochastic,
}

/// Which `α̃` weights the adversary's norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    /// Re-anchor at the current iterate every outer iteration.
    Refresh,
    /// Keep the initial estimate.
    Fixed,
}

/// How the learner moves in an alternating iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaStep {
    /// Damped Gauss–Newton on the profiled criterion
    /// `¼ a(α)'(M(α̃) + λI)⁻¹ a(α) + μ‖α‖²`, whose gradient equals that of
    /// `Ψ_n(α, f*) + μ‖α‖²` at the current best response `f*`.
    Criterion,
    /// Backtracking gradient descent on `Ψ_n(α, f̂) + μ‖α‖²` with `f̂` frozen.
    BestResponse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandwidthRule {
    Median,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Bandwidth {
    Fixed(f64),
    Rule(BandwidthRule),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    #[serde(rename = "D")]
    pub d: usize,
    pub bandwidth: Bandwidth,
    pub seed: u64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { d: 50, bandwidth: Bandwidth::Rule(BandwidthRule::Median), seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MinimaxConfig {
    /// Adversary penalty; `None` means `n^{-1/2}`.
    pub lambda: Option<f64>,
    /// Learner penalty; `None` means `n^{-1/2}`.
    pub mu: Option<f64>,
    /// Outer iterations; `None` means 20 (alternating) or 2000 (stochastic).
    #[serde(rename = "K")]
    pub k: Option<usize>,
    pub tol: f64,
    pub mode: Mode,
    pub batch_size: usize,
    pub step_alpha: f64,
    pub step_f: f64,
    pub seed: u64,
    pub anchor: Anchor,
    pub alpha_step: AlphaStep,
    /// Iteration cap of the learner step inside one outer iteration.
    pub inner_steps: usize,
    pub features: FeatureConfig,
    /// Adversary features; `None` reuses the learner's maps.
    pub adversary_features: Option<FeatureConfig>,
    /// Ridge penalty of the two-stage initializer.
    pub init_ridge: f64,
    /// Rescale `Y`, `P`, `G` by their root mean squares before fitting so
    /// that the penalties act on comparable units.
    pub standardize: bool,
    /// Let the `w2` test function depend on `(x, g)`.
    pub w2_adversary_on_xg: bool,
}

impl Default for MinimaxConfig {
    fn default() -> Self {
        Self {
            lambda: None,
            mu: None,
            k: None,
            tol: 1e-6,
            mode: Mode::Alternating,
            batch_size: 256,
            step_alpha: 1e-2,
            step_f: 1e-1,
            seed: 0,
            anchor: Anchor::Refresh,
            alpha_step: AlphaStep::Criterion,
            inner_steps: 20,
            features: FeatureConfig::default(),
            adversary_features: None,
            init_ridge: 1e-2,
            standardize: true,
            w2_adversary_on_xg: true,
        }
    }
}

impl MinimaxConfig {
    pub fn lambda_for(&self, n: usize) -> f64 {
        self.lambda.unwrap_or(1.0 / (n as f64).sqrt())
    }

    pub fn mu_for(&self, n: usize) -> f64 {
        self.mu.unwrap_or(1.0 / (n as f64).sqrt())
    }

    pub fn iterations(&self) -> usize {
        self.k.unwrap_or(match self.mode {
            Mode::Alternating => 20,
            Mode::Stochastic => 2000,
        })
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("mu", self.mu)] {
            if let Some(v) = v {
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(Error::InvalidParameter(format!("{name} must be >= 0, got {v}")));
                }
            }
        }
        if !(self.tol >= 0.0) || !(self.step_alpha >= 0.0) || !(self.step_f >= 0.0) || !(self.init_ridge >= 0.0) {
            return Err(Error::InvalidParameter("tol, step sizes and init_ridge must be >= 0".into()));
        }
        if self.mode == Mode::Stochastic && self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch_size must be >= 1".into()));
        }
        if self.features.d == 0 {
            return Err(Error::InvalidParameter("features.D must be >= 1".into()));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }
}

/// Feature maps of the adversary: one over `x` shared by most components and
/// the map used for the `w2` component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversarySpace {
    pub map_x: FeatureMap,
    pub map_w2: FeatureMap,
}

impl AdversarySpace {
    pub fn map(&self, k: usize) -> &FeatureMap {
        if k == 1 { &self.map_w2 } else { &self.map_x }
    }

    pub fn zeros(&self) -> VectorAdversary {
        VectorAdversary { components: (0..N_RESIDUALS).map(|k| ScalarFunction::zeros(self.map(k))).collect() }
    }

    /// The adversary space spanned by the learner's own maps.
    pub fn matching(alpha: &NuisanceAlpha, w2_on_xg: bool) -> Self {
        let map_x = alpha.components[idx::H1].map.clone();
        let map_w2 = if w2_on_xg { alpha.components[idx::H2].map.clone() } else { map_x.clone() };
        Self { map_x, map_w2 }
    }
}

/// Multiplicative units of `Y`, `P`, `G` used inside the fitting routines.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Units {
    pub y: f64,
    pub p: f64,
    pub g: f64,
}

impl Units {
    pub const ONE: Units = Units { y: 1.0, p: 1.0, g: 1.0 };

    pub fn from_dataset(d: &Dataset) -> Self {
        let rms = |f: &dyn Fn(&crate::scm::Sample) -> f64| {
            let v = (d.samples().iter().map(|s| f(s).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
            if v > 0.0 && v.is_finite() { v } else { 1.0 }
        };
        Self { y: rms(&|s| s.y), p: rms(&|s| s.p), g: rms(&|s| s.g) }
    }

    /// Size of one unit of each `α` component, in original units.
    pub fn component_scales(&self) -> [f64; 8] {
        let Units { y, p, g } = *self;
        [y / p, y / (p * p), g, p, g * g, p * y, p * p, p * p * p]
    }

    /// Size of one unit of each residual, in original units.
    pub fn residual_scales(&self) -> [f64; N_RESIDUALS] {
        let Units { y, p, g } = *self;
        [g, p, g * g, p * y, p * p, p * p * p, g * p * y, g * g * p * y]
    }
}

const JAC_PATTERN: [(usize, usize); 21] = {
    use idx::*;
    [
        (0, H1),
        (1, H2),
        (2, H3),
        (3, H2),
        (3, H4),
        (4, H2),
        (4, H5),
        (5, H2),
        (5, H6),
        (6, BETA1),
        (6, BETA2),
        (6, H1),
        (6, H2),
        (7, BETA1),
        (7, BETA2),
        (7, H1),
        (7, H2),
        (7, H3),
        (7, H4),
        (7, H5),
        (7, H6),
    ]
};

/// Data, bases and parameter layouts of one estimation problem, all in
/// rescaled units.
#[derive(Clone)]
struct Design {
    n: usize,
    y: Vec<f64>,
    p: Vec<f64>,
    g: Vec<f64>,
    lx: DMatrix<f64>,
    lxg: DMatrix<f64>,
    fx: DMatrix<f64>,
    fw2: DMatrix<f64>,
    l_off: [usize; 9],
    f_off: [usize; 9],
}

struct Evaluated {
    w: DMatrix<f64>,
    jac: Vec<[[f64; 8]; N_RESIDUALS]>,
}

impl Design {
    fn new(data: &Dataset, map_x: &FeatureMap, map_xg: &FeatureMap, adv: &AdversarySpace, units: Units) -> Self {
        let s = data.samples();
        let xs: Vec<&[f64]> = s.iter().map(|z| z.x.as_slice()).collect();
        let xgs: Vec<Vec<f64>> = s.iter().map(|z| z.xg()).collect();
        let lx = map_x.basis_matrix(xs.iter().copied());
        let lxg = map_xg.basis_matrix(xgs.iter().map(Vec::as_slice));
        let basis_for = |m: &FeatureMap| {
            if m == map_x {
                lx.clone()
            } else if m == map_xg {
                lxg.clone()
            } else if m.input_dim() == data.x_dim() {
                m.basis_matrix(xs.iter().copied())
            } else {
                m.basis_matrix(xgs.iter().map(Vec::as_slice))
            }
        };
        let fx = basis_for(&adv.map_x);
        let fw2 = basis_for(&adv.map_w2);
        let mut l_off = [0; 9];
        let mut f_off = [0; 9];
        for k in 0..8 {
            l_off[k + 1] = l_off[k] + if k == idx::H2 { lxg.ncols() } else { lx.ncols() };
            f_off[k + 1] = f_off[k] + if k == 1 { fw2.ncols() } else { fx.ncols() };
        }
        Self {
            n: s.len(),
            y: s.iter().map(|z| z.y / units.y).collect(),
            p: s.iter().map(|z| z.p / units.p).collect(),
            g: s.iter().map(|z| z.g / units.g).collect(),
            lx,
            lxg,
            fx,
            fw2,
            l_off,
            f_off,
        }
    }

    fn subset(&self, rows: &[usize]) -> Self {
        let pick = |v: &[f64]| rows.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Self {
            n: rows.len(),
            y: pick(&self.y),
            p: pick(&self.p),
            g: pick(&self.g),
            lx: self.lx.select_rows(rows),
            lxg: self.lxg.select_rows(rows),
            fx: self.fx.select_rows(rows),
            fw2: self.fw2.select_rows(rows),
            l_off: self.l_off,
            f_off: self.f_off,
        }
    }

    fn n_alpha(&self) -> usize {
        self.l_off[8]
    }

    fn n_f(&self) -> usize {
        self.f_off[8]
    }

    fn learner_basis(&self, j: usize) -> &DMatrix<f64> {
        if j == idx::H2 { &self.lxg } else { &self.lx }
    }

    fn adv_basis(&self, k: usize) -> &DMatrix<f64> {
        if k == 1 { &self.fw2 } else { &self.fx }
    }

    fn block<'a>(v: &'a DVector<f64>, off: &[usize; 9], k: usize) -> nalgebra::DVectorView<'a, f64> {
        v.rows(off[k], off[k + 1] - off[k])
    }

    /// Component values at every sample, `n × 8`.
    fn values(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let mut v = DMatrix::zeros(self.n, 8);
        for j in 0..8 {
            let col = self.learner_basis(j) * Self::block(theta, &self.l_off, j);
            v.set_column(j, &col);
        }
        v
    }

    fn point(vals: &DMatrix<f64>, i: usize) -> AlphaPoint {
        AlphaPoint::from_array(std::array::from_fn(|j| vals[(i, j)]))
    }

    fn evaluate(&self, theta: &DVector<f64>, with_jac: bool) -> Evaluated {
        let vals = self.values(theta);
        let mut w = DMatrix::zeros(self.n, N_RESIDUALS);
        let mut jac = Vec::with_capacity(if with_jac { self.n } else { 0 });
        for i in 0..self.n {
            let a = Self::point(&vals, i);
            let r = residuals_at(self.y[i], self.g[i], self.p[i], &a);
            for k in 0..N_RESIDUALS {
                w[(i, k)] = r[k];
            }
            if with_jac {
                jac.push(jacobian_at(self.y[i], self.g[i], self.p[i], &a));
            }
        }
        Evaluated { w, jac }
    }

    /// `a = (1/n) Σ_i W_i ⊗ ψ_i`, stacked by residual.
    fn a_vec(&self, w: &DMatrix<f64>) -> DVector<f64> {
        let mut a = DVector::zeros(self.n_f());
        let inv_n = 1.0 / self.n as f64;
        for k in 0..N_RESIDUALS {
            let blk = self.adv_basis(k).tr_mul(&w.column(k)) * inv_n;
            a.rows_mut(self.f_off[k], blk.len()).copy_from(&blk);
        }
        a
    }

    /// Rows `W_i ⊗ ψ_i`.
    fn z_matrix(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = DMatrix::zeros(self.n, self.n_f());
        for k in 0..N_RESIDUALS {
            let b = self.adv_basis(k);
            let mut view = z.columns_mut(self.f_off[k], b.ncols());
            view.copy_from(b);
            for i in 0..self.n {
                let wik = w[(i, k)];
                view.row_mut(i).scale_mut(wik);
            }
        }
        z
    }

    fn m_matrix(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        let z = self.z_matrix(w);
        z.tr_mul(&z) / self.n as f64
    }

    /// Adversary values `f_k(x_i)`, `n × 8`.
    fn adversary_values(&self, theta_f: &DVector<f64>) -> DMatrix<f64> {
        let mut v = DMatrix::zeros(self.n, N_RESIDUALS);
        for k in 0..N_RESIDUALS {
            let col = self.adv_basis(k) * Self::block(theta_f, &self.f_off, k);
            v.set_column(k, &col);
        }
        v
    }

    /// `∂/∂θ_α Ψ_n(α, f) = J_a' θ_f`, computed without forming `J_a`.
    fn psi_grad(&self, ev: &Evaluated, theta_f: &DVector<f64>) -> DVector<f64> {
        let fv = self.adversary_values(theta_f);
        let mut grad = DVector::zeros(self.n_alpha());
        let inv_n = 1.0 / self.n as f64;
        for j in 0..8 {
            let c = DVector::from_fn(self.n, |i, _| (0..N_RESIDUALS).map(|k| ev.jac[i][k][j] * fv[(i, k)]).sum::<f64>());
            let blk = self.learner_basis(j).tr_mul(&c) * inv_n;
            grad.rows_mut(self.l_off[j], blk.len()).copy_from(&blk);
        }
        grad
    }

    /// `J_a = ∂a/∂θ_α`.
    fn jac_a(&self, ev: &Evaluated) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n_f(), self.n_alpha());
        let inv_n = 1.0 / self.n as f64;
        for &(k, j) in &JAC_PATTERN {
            let mut scaled = self.learner_basis(j).clone();
            for i in 0..self.n {
                let d = ev.jac[i][k][j] * inv_n;
                scaled.row_mut(i).scale_mut(d);
            }
            let blk = self.adv_basis(k).tr_mul(&scaled);
            out.view_mut((self.f_off[k], self.l_off[j]), blk.shape()).copy_from(&blk);
        }
        out
    }
}

fn anchored_factor(design: &Design, anchor_theta: &DVector<f64>, lambda: f64) -> Result<Cholesky<f64, Dyn>> {
    let ev = design.evaluate(anchor_theta, false);
    let mut m = design.m_matrix(&ev.w);
    let lam = lambda.max(1e-12);
    for d in 0..m.nrows() {
        m[(d, d)] += lam;
    }
    linalg::cholesky(m)
}

/// `¼ a'A⁻¹a` with `A` already factored.
fn inner_value(chol: &Cholesky<f64, Dyn>, a: &DVector<f64>) -> f64 {
    0.25 * a.dot(&chol.solve(a))
}

fn alpha_params(alpha: &NuisanceAlpha, units: Units) -> DVector<f64> {
    let scales = units.component_scales();
    let mut v = Vec::new();
    for (j, c) in alpha.components.iter().enumerate() {
        v.extend(c.params().iter().map(|p| p / scales[j]));
    }
    DVector::from_vec(v)
}

fn alpha_from_params(template: &NuisanceAlpha, theta: &DVector<f64>, units: Units) -> NuisanceAlpha {
    let scales = units.component_scales();
    let mut off = 0;
    let components = template
        .components
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let len = c.map.basis_len();
            let p: Vec<f64> = theta.rows(off, len).iter().map(|v| v * scales[j]).collect();
            off += len;
            ScalarFunction::from_params(&c.map, &p)
        })
        .collect();
    NuisanceAlpha { components }
}

fn adversary_params(f: &VectorAdversary, units: Units) -> DVector<f64> {
    let scales = units.residual_scales();
    DVector::from_vec(
        f.components.iter().enumerate().flat_map(|(k, c)| c.params().into_iter().map(move |p| p * scales[k])).collect(),
    )
}

fn adversary_from_params(space: &AdversarySpace, theta_f: &DVector<f64>, units: Units) -> VectorAdversary {
    let scales = units.residual_scales();
    let mut off = 0;
    let components = (0..N_RESIDUALS)
        .map(|k| {
            let m = space.map(k);
            let p: Vec<f64> = theta_f.rows(off, m.basis_len()).iter().map(|v| v / scales[k]).collect();
            off += m.basis_len();
            ScalarFunction::from_params(m, &p)
        })
        .collect();
    VectorAdversary { components }
}

fn check_nonempty(d: &Dataset) -> Result<()> {
    if d.is_empty() {
        return Err(Error::Empty("dataset has no samples".into()));
    }
    Ok(())
}

/// `Ψ_n(α, f) = (1/n) Σ W(Z_i; α)' f(X_i)`.
pub fn psi_n(data: &Dataset, alpha: &dyn Nuisance, f: &VectorAdversary) -> Result<f64> {
    check_nonempty(data)?;
    let s: f64 = data
        .samples()
        .iter()
        .map(|z| linalg::dot(&eval_w(z, alpha).w, &f.eval_at(&z.x, z.g)))
        .sum();
    Ok(s / data.len() as f64)
}

/// `‖f‖²_{α̃,n} = (1/n) Σ (f(X_i)' W(Z_i; α̃))²`.
pub fn weighted_norm_n(data: &Dataset, f: &VectorAdversary, alpha_tilde: &dyn Nuisance) -> Result<f64> {
    check_nonempty(data)?;
    let s: f64 = data
        .samples()
        .iter()
        .map(|z| linalg::dot(&eval_w(z, alpha_tilde).w, &f.eval_at(&z.x, z.g)).powi(2))
        .sum();
    Ok(s / data.len() as f64)
}

/// Value of the adversary's objective `Ψ_n(α, f) − ‖f‖²_{α̃,n} − λ‖f‖²`.
pub fn adversary_objective(
    data: &Dataset,
    alpha: &dyn Nuisance,
    alpha_tilde: &dyn Nuisance,
    f: &VectorAdversary,
    lambda: f64,
) -> Result<f64> {
    Ok(psi_n(data, alpha, f)? - weighted_norm_n(data, f, alpha_tilde)? - lambda * f.norm2())
}

fn unit_design(data: &Dataset, alpha: &NuisanceAlpha, space: &AdversarySpace) -> Design {
    Design::new(data, &alpha.components[idx::H1].map, &alpha.components[idx::H2].map, space, Units::ONE)
}

/// Solves `m s = a` for symmetric positive-definite `m` after scaling to unit
/// diagonal, with one step of iterative refinement. Raw residual units put
/// the condition number of `m` near 1e14.
fn equilibrated_solve(m: &DMatrix<f64>, a: &DVector<f64>) -> Result<DVector<f64>> {
    let d = DVector::from_iterator(m.nrows(), m.diagonal().iter().map(|v| 1.0 / v.sqrt()));
    let scaled = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] * d[i] * d[j]);
    let chol = linalg::cholesky(scaled)?;
    let solve = |rhs: &DVector<f64>| chol.solve(&rhs.component_mul(&d)).component_mul(&d);
    let mut sol = solve(a);
    let resid = a - m * &sol;
    sol += solve(&resid);
    Ok(sol)
}

/// Closed-form maximizer of the adversary's objective over `space`.
pub fn inner_max(
    data: &Dataset,
    alpha: &NuisanceAlpha,
    alpha_tilde: &NuisanceAlpha,
    space: &AdversarySpace,
    lambda: f64,
) -> Result<(VectorAdversary, f64)> {
    check_nonempty(data)?;
    if !(lambda > 0.0) {
        return Err(Error::InvalidParameter(format!("lambda must be positive, got {lambda}")));
    }
    let design = unit_design(data, alpha, space);
    let ev = design.evaluate(&alpha_params(alpha_tilde, Units::ONE), false);
    let mut m = design.m_matrix(&ev.w);
    for d in 0..m.nrows() {
        m[(d, d)] += lambda;
    }
    let a = design.a_vec(&design.evaluate(&alpha_params(alpha, Units::ONE), false).w);
    let sol = equilibrated_solve(&m, &a)?;
    let value = 0.25 * a.dot(&sol);
    Ok((adversary_from_params(space, &(sol * 0.5), Units::ONE), value))
}

/// Sample criterion `Φ̂_n(α) = sup_f [..] + μ‖α‖²`.
pub fn objective(
    data: &Dataset,
    alpha: &NuisanceAlpha,
    alpha_tilde: &NuisanceAlpha,
    space: &AdversarySpace,
    lambda: f64,
    mu: f64,
) -> Result<f64> {
    Ok(inner_max(data, alpha, alpha_tilde, space, lambda)?.1 + mu * alpha.norm2())
}

/// Gradient of `Ψ_n(α, f) + μ‖α‖²` with respect to the stacked parameters of
/// `α` (component order, each block `[intercept, weights]`).
pub fn grad_alpha(data: &Dataset, alpha: &NuisanceAlpha, f: &VectorAdversary, mu: f64) -> Result<Vec<f64>> {
    check_nonempty(data)?;
    let space = AdversarySpace { map_x: f.components[0].map.clone(), map_w2: f.components[1].map.clone() };
    let design = unit_design(data, alpha, &space);
    let theta = alpha_params(alpha, Units::ONE);
    let ev = design.evaluate(&theta, true);
    let g = design.psi_grad(&ev, &adversary_params(f, Units::ONE)) + theta * (2.0 * mu);
    Ok(g.as_slice().to_vec())
}

/// Learner feature maps for `x` and `(x, g)` built from `cfg`.
pub fn learner_maps(data: &Dataset, cfg: &FeatureConfig) -> Result<(FeatureMap, FeatureMap)> {
    check_nonempty(data)?;
    let xs: Vec<Vec<f64>> = data.samples().iter().map(|s| s.x.clone()).collect();
    let xgs: Vec<Vec<f64>> = data.samples().iter().map(|s| s.xg()).collect();
    let bw = |pts: &[Vec<f64>]| match cfg.bandwidth {
        Bandwidth::Fixed(b) => b,
        Bandwidth::Rule(BandwidthRule::Median) => median_heuristic(pts, 500, cfg.seed),
    };
    let q = data.x_dim();
    let map_x = make_feature_map(q, cfg.d, bw(&xs), derive_seed(cfg.seed, &[0]))?;
    let map_xg = make_feature_map(q + 1, cfg.d, bw(&xgs), derive_seed(cfg.seed, &[1]))?;
    Ok((map_x, map_xg))
}

/// Staged initializer: ridge regressions for `h1`, `h2`, `h3`, plug-in
/// targets for `h4`–`h6`, then `(β1, β2)` from the smoothed Ω/Υ systems by
/// least squares over the sample (the pointwise Cramer solution, without
/// dividing by near-zero determinants).
pub fn init_two_stage(data: &Dataset, map_x: &FeatureMap, map_xg: &FeatureMap, ridge: f64) -> Result<NuisanceAlpha> {
    init_two_stage_in(data, map_x, map_xg, ridge, Units::from_dataset(data))
}

fn init_two_stage_in(data: &Dataset, map_x: &FeatureMap, map_xg: &FeatureMap, ridge: f64, units: Units) -> Result<NuisanceAlpha> {
    check_nonempty(data)?;
    let space = AdversarySpace { map_x: map_x.clone(), map_w2: map_xg.clone() };
    let d = Design::new(data, map_x, map_xg, &space, units);
    let template = NuisanceAlpha::zeros(map_x, map_xg)?;
    let theta = init_params(&d, ridge)?;
    Ok(alpha_from_params(&template, &theta, units))
}

fn init_params(d: &Design, ridge: f64) -> Result<DVector<f64>> {
    let n = d.n;
    let sx = RidgeSolver::new(&d.lx, ridge)?;
    let sxg = RidgeSolver::new(&d.lxg, ridge)?;
    let h1 = sx.solve(&d.g);
    let h3 = sx.solve(&d.g.iter().map(|g| g * g).collect::<Vec<_>>());
    let h2 = sxg.solve(&d.p);
    let h1v = &d.lx * &h1;
    let h3v = &d.lx * &h3;
    let h2v = &d.lxg * &h2;
    let e2: Vec<f64> = (0..n).map(|i| d.p[i] - h2v[i]).collect();
    let h4 = sx.solve(&(0..n).map(|i| e2[i] * d.y[i]).collect::<Vec<_>>());
    let h5 = sx.solve(&(0..n).map(|i| e2[i] * d.p[i]).collect::<Vec<_>>());
    let h6 = sx.solve(&(0..n).map(|i| e2[i] * d.p[i] * d.p[i]).collect::<Vec<_>>());
    let hv = [&d.lx * &h4, &d.lx * &h5, &d.lx * &h6];

    // smoothed E[ρ_k | x]
    let rhos: Vec<[f64; 6]> = (0..n).map(|i| crate::moments::rho(d.y[i], d.g[i], d.p[i], h1v[i], h2v[i])).collect();
    let smooth: Vec<DVector<f64>> = (0..6)
        .map(|k| &d.lx * sx.solve(&rhos.iter().map(|r| r[k]).collect::<Vec<_>>()))
        .collect();
    let omega: Vec<[f64; 3]> = (0..n).map(|i| [smooth[0][i], smooth[1][i], smooth[2][i]]).collect();
    let upsilon: Vec<[f64; 3]> = (0..n)
        .map(|i| {
            let s = h3v[i] - h1v[i] * h1v[i];
            std::array::from_fn(|k| smooth[k + 3][i] - s * hv[k][i])
        })
        .collect();
    let rms = |v: &[[f64; 3]]| {
        let s = v.iter().map(|r| r[1] * r[1] + r[2] * r[2]).sum::<f64>() / (2 * n) as f64;
        if s > 0.0 { 1.0 / s.sqrt() } else { 1.0 }
    };
    let (wo, wu) = (rms(&omega), rms(&upsilon));
    let dl = d.lx.ncols();
    let mut design = DMatrix::zeros(2 * n, 2 * dl);
    let mut target = vec![0.0; 2 * n];
    for i in 0..n {
        for (r, (sys, w)) in [(i, (&omega[i], wo)), (n + i, (&upsilon[i], wu))] {
            for c in 0..dl {
                let b = d.lx[(i, c)];
                design[(r, c)] = w * sys[1] * b;
                design[(r, dl + c)] = w * sys[2] * b;
            }
            target[r] = w * sys[0];
        }
    }
    let beta = linalg::ridge(&design, &target, ridge)?;

    let mut theta = DVector::zeros(d.n_alpha());
    let blocks: [(usize, DVector<f64>); 8] = [
        (idx::BETA1, beta.rows(0, dl).into_owned()),
        (idx::BETA2, beta.rows(dl, dl).into_owned()),
        (idx::H1, h1),
        (idx::H2, h2),
        (idx::H3, h3),
        (idx::H4, h4),
        (idx::H5, h5),
        (idx::H6, h6),
    ];
    for (j, v) in blocks {
        theta.rows_mut(d.l_off[j], v.len()).copy_from(&v);
    }
    Ok(theta)
}

/// Outcome of a fit. Traces are in the rescaled units used internally.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitResult {
    pub alpha_hat: NuisanceAlpha,
    /// Best-response adversary at the last iterate.
    pub adversary: VectorAdversary,
    /// `Φ̂_n` per outer iteration (for stochastic mode: the mini-batch game
    /// value plus the learner penalty).
    pub objective_trace: Vec<f64>,
    /// Inner-maximization values per outer iteration.
    pub inner_values: Vec<f64>,
    /// `‖α‖²_H` per outer iteration.
    pub alpha_norm_trace: Vec<f64>,
    pub converged: bool,
    pub iterations_used: usize,
    pub lambda: f64,
    pub mu: f64,
    pub units: Units,
}

impl FitResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

struct Setup {
    design: Design,
    units: Units,
    space: AdversarySpace,
    theta0: DVector<f64>,
    lambda: f64,
    mu: f64,
}

fn setup(data: &Dataset, config: &MinimaxConfig, alpha_init: &NuisanceAlpha) -> Result<Setup> {
    config.validate()?;
    check_nonempty(data)?;
    let units = if config.standardize { Units::from_dataset(data) } else { Units::ONE };
    let space = match &config.adversary_features {
        None => AdversarySpace::matching(alpha_init, config.w2_adversary_on_xg),
        Some(fc) => {
            let fc = FeatureConfig { seed: derive_seed(fc.seed, &[2]), ..fc.clone() };
            let (mx, mxg) = learner_maps(data, &fc)?;
            AdversarySpace { map_w2: if config.w2_adversary_on_xg { mxg } else { mx.clone() }, map_x: mx }
        }
    };
    let design = Design::new(data, &alpha_init.components[idx::H1].map, &alpha_init.components[idx::H2].map, &space, units);
    let n = data.len();
    Ok(Setup {
        design,
        units,
        space,
        theta0: alpha_params(alpha_init, units),
        lambda: config.lambda_for(n),
        mu: config.mu_for(n),
    })
}

/// Damped Gauss–Newton on `C(θ) = ¼ a(θ)'A⁻¹a(θ) + μ‖θ‖²`.
fn criterion_step(d: &Design, chol: &Cholesky<f64, Dyn>, theta: &mut DVector<f64>, mu: f64, steps: usize, tol: f64) {
    let crit = |t: &DVector<f64>| {
        let ev = d.evaluate(t, false);
        inner_value(chol, &d.a_vec(&ev.w)) + mu * t.norm_squared()
    };
    let mut damping = 1e-3;
    let mut current = crit(theta);
    for _ in 0..steps {
        let ev = d.evaluate(theta, true);
        let a = d.a_vec(&ev.w);
        let ja = d.jac_a(&ev);
        let ainv_a = chol.solve(&a);
        let grad = ja.tr_mul(&ainv_a) * 0.5 + &*theta * (2.0 * mu);
        if grad.norm() < tol {
            break;
        }
        let ainv_j = chol.solve(&ja);
        let mut h = ja.tr_mul(&ainv_j) * 0.5;
        for i in 0..h.nrows() {
            h[(i, i)] += 2.0 * mu;
        }
        let scale = (0..h.nrows()).map(|i| h[(i, i)]).fold(0.0, f64::max).max(1e-300);
        let mut accepted = false;
        while damping < 1e10 {
            let mut hd = h.clone();
            for i in 0..hd.nrows() {
                hd[(i, i)] += damping * scale;
            }
            if let Some(c) = hd.cholesky() {
                let step = c.solve(&(-&grad));
                let cand = &*theta + &step;
                let v = crit(&cand);
                if v.is_finite() && v < current {
                    let rel = (current - v) / current.abs().max(1e-300);
                    *theta = cand;
                    current = v;
                    damping = (damping / 10.0).max(1e-12);
                    accepted = true;
                    if rel < tol {
                        return;
                    }
                    break;
                }
            }
            damping *= 10.0;
        }
        if !accepted {
            return;
        }
    }
}

/// Backtracking gradient descent on `Ψ_n(α, f̂) + μ‖α‖²` with `f̂` fixed.
fn best_response_step(d: &Design, theta_f: &DVector<f64>, theta: &mut DVector<f64>, mu: f64, steps: usize, tol: f64, step0: f64) {
    let obj = |t: &DVector<f64>| {
        let ev = d.evaluate(t, false);
        d.a_vec(&ev.w).dot(theta_f) + mu * t.norm_squared()
    };
    let mut current = obj(theta);
    let mut step = step0.max(1e-12);
    for _ in 0..steps {
        let ev = d.evaluate(theta, true);
        let grad = d.psi_grad(&ev, theta_f) + &*theta * (2.0 * mu);
        let gn2 = grad.norm_squared();
        if gn2.sqrt() < tol {
            break;
        }
        let mut accepted = false;
        for _ in 0..50 {
            let cand = &*theta - &grad * step;
            let v = obj(&cand);
            if v.is_finite() && v <= current - 1e-4 * step * gn2 {
                *theta = cand;
                current = v;
                accepted = true;
                step *= 2.0;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
}

/// Alternating best-response/learner-step iterations.
pub fn fit_alternating(data: &Dataset, config: &MinimaxConfig, alpha_init: &NuisanceAlpha) -> Result<FitResult> {
    let s = setup(data, config, alpha_init)?;
    let d = &s.design;
    let k_max = config.iterations();
    let mut theta = s.theta0.clone();
    let mut theta_f = DVector::zeros(d.n_f());
    let mut objective_trace = Vec::new();
    let mut inner_values = Vec::new();
    let mut alpha_norm_trace = Vec::new();
    let mut converged = false;
    let mut iterations_used = 0;
    for k in 0..=k_max {
        let anchor = match config.anchor {
            Anchor::Refresh => &theta,
            Anchor::Fixed => &s.theta0,
        };
        let chol = anchored_factor(d, anchor, s.lambda)?;
        let a = d.a_vec(&d.evaluate(&theta, false).w);
        let sol = chol.solve(&a);
        let inner = 0.25 * a.dot(&sol);
        let phi = inner + s.mu * theta.norm_squared();
        if !phi.is_finite() {
            return Err(Error::NonFinite(k));
        }
        theta_f = sol * 0.5;
        if let Some(prev) = objective_trace.last().copied() {
            let prev: f64 = prev;
            if (phi - prev).abs() <= config.tol * prev.abs().max(1e-12) {
                converged = true;
            }
        }
        objective_trace.push(phi);
        inner_values.push(inner);
        alpha_norm_trace.push(theta.norm_squared());
        if converged || k == k_max {
            break;
        }
        match config.alpha_step {
            AlphaStep::Criterion => criterion_step(d, &chol, &mut theta, s.mu, config.inner_steps, config.tol),
            AlphaStep::BestResponse => {
                best_response_step(d, &theta_f, &mut theta, s.mu, config.inner_steps, config.tol, config.step_alpha)
            }
        }
        iterations_used += 1;
    }
    if k_max == 0 {
        theta_f = DVector::zeros(d.n_f());
    }
    let alpha_hat = if theta == s.theta0 { alpha_init.clone() } else { alpha_from_params(alpha_init, &theta, s.units) };
    Ok(FitResult {
        alpha_hat,
        adversary: adversary_from_params(&s.space, &theta_f, s.units),
        objective_trace,
        inner_values,
        alpha_norm_trace,
        converged,
        iterations_used,
        lambda: s.lambda,
        mu: s.mu,
        units: s.units,
    })
}

/// One simultaneous ascent step on `θ_f` and descent step on `θ_α` per
/// mini-batch, batches drawn without replacement within each epoch.
pub fn fit_sgd(data: &Dataset, config: &MinimaxConfig, alpha_init: &NuisanceAlpha) -> Result<FitResult> {
    let s = setup(data, config, alpha_init)?;
    let d = &s.design;
    let n = d.n;
    let nb = config.batch_size.clamp(1, n);
    let mut rng = rng_from_seed(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut theta = s.theta0.clone();
    let mut theta_f = DVector::zeros(d.n_f());
    let (mut objective_trace, mut inner_values, mut alpha_norm_trace) = (Vec::new(), Vec::new(), Vec::new());
    let k_max = config.iterations();
    for k in 0..k_max {
        if cursor + nb > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let rows = &order[cursor..cursor + nb];
        cursor += nb;
        let b = d.subset(rows);
        let ev = b.evaluate(&theta, true);
        let anchor_w = match config.anchor {
            Anchor::Refresh => ev.w.clone(),
            Anchor::Fixed => b.evaluate(&s.theta0, false).w,
        };
        let a = b.a_vec(&ev.w);
        let z = b.z_matrix(&anchor_w);
        let m_theta = z.tr_mul(&(&z * &theta_f)) / nb as f64;
        let grad_f = &a - &m_theta * 2.0 - &theta_f * (2.0 * s.lambda);
        theta_f += grad_f * config.step_f;
        let zf = &z * &theta_f;
        let game = a.dot(&theta_f) - zf.norm_squared() / nb as f64 - s.lambda * theta_f.norm_squared();
        let grad_a = b.psi_grad(&ev, &theta_f) + &theta * (2.0 * s.mu);
        theta -= grad_a * config.step_alpha;
        let phi = game + s.mu * theta.norm_squared();
        if !phi.is_finite() || theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(k));
        }
        objective_trace.push(phi);
        inner_values.push(game);
        alpha_norm_trace.push(theta.norm_squared());
    }
    let alpha_hat = if theta == s.theta0 { alpha_init.clone() } else { alpha_from_params(alpha_init, &theta, s.units) };
    Ok(FitResult {
        alpha_hat,
        adversary: adversary_from_params(&s.space, &theta_f, s.units),
        objective_trace,
        inner_values,
        alpha_norm_trace,
        converged: false,
        iterations_used: k_max,
        lambda: s.lambda,
        mu: s.mu,
        units: s.units,
    })
}

/// Builds feature maps, runs the two-stage initializer and the configured
/// solver.
pub fn fit(data: &Dataset, config: &MinimaxConfig) -> Result<FitResult> {
    config.validate()?;
    let (map_x, map_xg) = learner_maps(data, &config.features)?;
    let units = if config.standardize { Units::from_dataset(data) } else { Units::ONE };
    let init = init_two_stage_in(data, &map_x, &map_xg, config.init_ridge, units)?;
    match config.mode {
        Mode::Alternating => fit_alternating(data, config, &init),
        Mode::Stochastic => fit_sgd(data, config, &init),
    }
}
