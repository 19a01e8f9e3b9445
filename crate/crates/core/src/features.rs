//! Random Fourier features and the feature-linear function classes built on
//! them, plus the localized-complexity diagnostics for kernel classes.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::rng_from_seed;

/// Random Fourier feature map approximating the Gaussian kernel
/// `exp(−‖x − x'‖² / (2·bandwidth²))`:
/// `φ(x)_j = √(2/D)·cos(ω_j'x + b_j)` with `ω_j ~ N(0, bandwidth⁻² I)` and
/// `b_j ~ U[0, 2π)`.
///
/// Only `(input_dim, n_features, bandwidth, seed)` are serialized; the
/// frequencies are regenerated on load.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(into = "FeatureMapSpec", try_from = "FeatureMapSpec")]
pub struct FeatureMap {
    input_dim: usize,
    n_features: usize,
    bandwidth: f64,
    seed: u64,
    frequencies: DMatrix<f64>,
    phases: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureMapSpec {
    pub input_dim: usize,
    pub n_features: usize,
    pub bandwidth: f64,
    pub seed: u64,
}

impl From<FeatureMap> for FeatureMapSpec {
    fn from(m: FeatureMap) -> Self {
        Self { input_dim: m.input_dim, n_features: m.n_features, bandwidth: m.bandwidth, seed: m.seed }
    }
}

impl TryFrom<FeatureMapSpec> for FeatureMap {
    type Error = Error;

    fn try_from(s: FeatureMapSpec) -> Result<Self> {
        make_feature_map(s.input_dim, s.n_features, s.bandwidth, s.seed)
    }
}

impl PartialEq for FeatureMap {
    fn eq(&self, other: &Self) -> bool {
        self.input_dim == other.input_dim
            && self.n_features == other.n_features
            && self.bandwidth == other.bandwidth
            && self.seed == other.seed
    }
}

pub fn make_feature_map(input_dim: usize, n_features: usize, bandwidth: f64, seed: u64) -> Result<FeatureMap> {
    if input_dim == 0 || n_features == 0 {
        return Err(Error::InvalidParameter("feature map needs input_dim >= 1 and D >= 1".into()));
    }
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::InvalidParameter(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let mut rng = rng_from_seed(seed);
    let normal = Normal::new(0.0, 1.0 / bandwidth).expect("positive scale");
    let frequencies = DMatrix::from_fn(n_features, input_dim, |_, _| normal.sample(&mut rng));
    let phase = Uniform::new(0.0, std::f64::consts::TAU).expect("valid range");
    let phases = (0..n_features).map(|_| phase.sample(&mut rng)).collect();
    Ok(FeatureMap { input_dim, n_features, bandwidth, seed, frequencies, phases })
}

impl FeatureMap {
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn frequencies(&self) -> &DMatrix<f64> {
        &self.frequencies
    }

    /// Writes `φ(x)` into `out`.
    pub fn features_into(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.input_dim, "feature map input dimension mismatch");
        let amp = (2.0 / self.n_features as f64).sqrt();
        for (j, o) in out.iter_mut().enumerate().take(self.n_features) {
            let mut arg = self.phases[j];
            for (k, xk) in x.iter().enumerate() {
                arg += self.frequencies[(j, k)] * xk;
            }
            *o = amp * arg.cos();
        }
    }

    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_features];
        self.features_into(x, &mut out);
        out
    }

    /// Number of parameters of a [`ScalarFunction`] on this map
    /// (intercept plus one weight per feature).
    pub fn basis_len(&self) -> usize {
        self.n_features + 1
    }

    /// Row-stacked `[1, φ(x_i)]` for each input.
    pub fn basis_matrix<'a>(&self, inputs: impl ExactSizeIterator<Item = &'a [f64]>) -> DMatrix<f64> {
        let n = inputs.len();
        let mut m = DMatrix::zeros(n, self.basis_len());
        let mut buf = vec![0.0; self.n_features];
        for (i, x) in inputs.enumerate() {
            self.features_into(x, &mut buf);
            m[(i, 0)] = 1.0;
            for (j, v) in buf.iter().enumerate() {
                m[(i, j + 1)] = *v;
            }
        }
        m
    }
}

/// Median pairwise Euclidean distance over a subsample of at most
/// `max_points` inputs. Falls back to 1 when all points coincide.
pub fn median_heuristic(points: &[Vec<f64>], max_points: usize, seed: u64) -> f64 {
    let idx: Vec<usize> = if points.len() > max_points {
        let mut rng = rng_from_seed(seed);
        let mut v = sample(&mut rng, points.len(), max_points).into_vec();
        v.sort_unstable();
        v
    } else {
        (0..points.len()).collect()
    };
    let mut d = Vec::with_capacity(idx.len() * idx.len().saturating_sub(1) / 2);
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a + 1..] {
            let dist: f64 = points[i].iter().zip(&points[j]).map(|(u, v)| (u - v).powi(2)).sum();
            d.push(dist.sqrt());
        }
    }
    let m = if d.is_empty() { 0.0 } else { linalg::median(&d) };
    if m > 0.0 && m.is_finite() { m } else { 1.0 }
}

/// A feature-linear function `f(x) = c + w'φ(x)`.
///
/// The squared norm `c² + ‖w‖²` stands in for the RKHS norm of the kernel
/// `1 + k(x, x')`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarFunction {
    pub map: FeatureMap,
    pub intercept: f64,
    pub weights: Vec<f64>,
}

impl ScalarFunction {
    pub fn zeros(map: &FeatureMap) -> Self {
        Self { map: map.clone(), intercept: 0.0, weights: vec![0.0; map.n_features] }
    }

    pub fn constant(map: &FeatureMap, c: f64) -> Self {
        Self { intercept: c, ..Self::zeros(map) }
    }

    /// Builds from a parameter vector laid out as `[c, w_1, .., w_D]`.
    pub fn from_params(map: &FeatureMap, params: &[f64]) -> Self {
        assert_eq!(params.len(), map.basis_len(), "parameter length mismatch");
        Self { map: map.clone(), intercept: params[0], weights: params[1..].to_vec() }
    }

    pub fn params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.weights.len() + 1);
        v.push(self.intercept);
        v.extend_from_slice(&self.weights);
        v
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let phi = self.map.features(x);
        self.intercept + linalg::dot(&self.weights, &phi)
    }

    /// Evaluates on `x` or on `(x, g)`, whichever matches the map's input
    /// dimension.
    pub fn eval_at(&self, x: &[f64], g: f64) -> f64 {
        if self.map.input_dim == x.len() {
            self.eval(x)
        } else {
            let mut xg = x.to_vec();
            xg.push(g);
            self.eval(&xg)
        }
    }

    pub fn norm2(&self) -> f64 {
        self.intercept * self.intercept + self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            map: self.map.clone(),
            intercept: self.intercept * c,
            weights: self.weights.iter().map(|w| w * c).collect(),
        }
    }
}

/// Number of generalized residuals, and so of adversary components.
pub const N_RESIDUALS: usize = 8;

/// The adversary `f = (f_1, .., f_8)`, one test function per residual.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VectorAdversary {
    pub components: Vec<ScalarFunction>,
}

impl VectorAdversary {
    pub fn new(components: Vec<ScalarFunction>) -> Result<Self> {
        if components.len() != N_RESIDUALS {
            return Err(Error::InvalidParameter(format!(
                "adversary needs {N_RESIDUALS} components, got {}",
                components.len()
            )));
        }
        Ok(Self { components })
    }

    pub fn eval_at(&self, x: &[f64], g: f64) -> [f64; N_RESIDUALS] {
        std::array::from_fn(|k| self.components[k].eval_at(x, g))
    }

    pub fn norm2(&self) -> f64 {
        self.components.iter().map(ScalarFunction::norm2).sum()
    }
}

fn check_eigenvalues(eigs: &[f64]) -> Result<()> {
    for (j, w) in eigs.windows(2).enumerate() {
        if w[1] > w[0] {
            return Err(Error::NonMonotone(j + 1));
        }
    }
    if let Some(j) = eigs.iter().position(|l| !(*l >= 0.0) || !l.is_finite()) {
        return Err(Error::NonMonotone(j));
    }
    Ok(())
}

fn bound_unchecked(eigs: &[f64], b: f64, n: f64, delta: f64) -> f64 {
    let d2 = delta * delta;
    let mut sum = 0.0;
    for (j, &l) in eigs.iter().enumerate() {
        // the remaining terms are bounded by (len - j)·λ_j for a
        // nonincreasing sequence
        if l * (eigs.len() - j) as f64 <= 1e-12 * sum {
            break;
        }
        sum += l.min(d2);
    }
    (2.0 * b / n).sqrt() * sum.sqrt()
}

/// Upper bound `√(2B/n)·√(Σ_j min(λ_j, δ²))` on the localized Rademacher
/// complexity of a radius-`√B` kernel ball with kernel eigenvalues `λ_j`.
pub fn rademacher_bound(eigenvalues: &[f64], b: f64, n: usize, delta: f64) -> Result<f64> {
    check_eigenvalues(eigenvalues)?;
    if !(delta > 0.0) || !(b >= 0.0) || n == 0 {
        return Err(Error::InvalidParameter("need delta > 0, B >= 0 and n >= 1".into()));
    }
    Ok(bound_unchecked(eigenvalues, b, n as f64, delta))
}

/// The largest `δ ∈ (0, 1]` with `rademacher_bound(δ) ≤ δ²`, by bisection to
/// `1e-8`. The bound divided by `δ²` is decreasing, so the crossing is
/// unique when it exists.
pub fn critical_radius(eigenvalues: &[f64], b: f64, n: usize) -> Result<f64> {
    check_eigenvalues(eigenvalues)?;
    if !(b > 0.0) || n == 0 {
        return Err(Error::InvalidParameter("need B > 0 and n >= 1".into()));
    }
    if eigenvalues.first().is_none_or(|l| *l == 0.0) {
        return Err(Error::NoCrossing);
    }
    let nf = n as f64;
    let gap = |d: f64| bound_unchecked(eigenvalues, b, nf, d) - d * d;
    if gap(1.0) > 0.0 {
        return Err(Error::NoCrossing);
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    while hi - lo > 1e-8 {
        let mid = 0.5 * (lo + hi);
        if gap(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}
