//! Comparison methods: a regression policy that ignores confounding and a
//! kernel inverse-propensity policy learner for continuous prices.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMap, ScalarFunction};
use crate::linalg::{self, RidgeSolver};
use crate::minimax::Units;
use crate::policy::{Coefficient, PricingPolicy};
use crate::scm::Dataset;

/// `Y ≈ β1(X) P + β2(X) P² + β_g(X, G)` fitted by ridge least squares.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub beta1: ScalarFunction,
    pub beta2: ScalarFunction,
    pub beta_g: ScalarFunction,
    pub ridge: f64,
}

impl RegressionFit {
    pub fn policy(&self, p1: f64, p2: f64, floor_c: f64) -> Result<PricingPolicy> {
        PricingPolicy::quadratic(
            Coefficient::Function(self.beta1.clone()),
            Coefficient::Function(self.beta2.clone()),
            p1,
            p2,
            floor_c,
        )
    }
}

/// Ridge regression of `Y` on `[ψ(x)P, ψ(x)P², ψ(x, g)]` with
/// `ψ = (1, φ)`. Runs in root-mean-square units of `Y` and `P` so the ridge
/// penalty is scale free.
pub fn fit_regression_baseline(data: &Dataset, map_x: &FeatureMap, map_xg: &FeatureMap, ridge: f64) -> Result<RegressionFit> {
    if data.is_empty() {
        return Err(Error::Empty("dataset has no samples".into()));
    }
    let units = Units::from_dataset(data);
    let s = data.samples();
    let lx = map_x.basis_matrix(s.iter().map(|z| z.x.as_slice()));
    let xgs: Vec<Vec<f64>> = s.iter().map(|z| z.xg()).collect();
    let lxg = map_xg.basis_matrix(xgs.iter().map(Vec::as_slice));
    let (n, dx, dg) = (s.len(), lx.ncols(), lxg.ncols());
    let mut design = DMatrix::zeros(n, 2 * dx + dg);
    for (i, z) in s.iter().enumerate() {
        let p = z.p / units.p;
        for c in 0..dx {
            design[(i, c)] = lx[(i, c)] * p;
            design[(i, dx + c)] = lx[(i, c)] * p * p;
        }
        for c in 0..dg {
            design[(i, 2 * dx + c)] = lxg[(i, c)];
        }
    }
    let target: Vec<f64> = s.iter().map(|z| z.y / units.y).collect();
    let coef = RidgeSolver::new(&design, ridge)?.solve(&target);
    let block = |off: usize, len: usize, scale: f64| -> Vec<f64> { coef.rows(off, len).iter().map(|v| v * scale).collect() };
    Ok(RegressionFit {
        beta1: ScalarFunction::from_params(map_x, &block(0, dx, units.y / units.p)),
        beta2: ScalarFunction::from_params(map_x, &block(dx, dx, units.y / (units.p * units.p))),
        beta_g: ScalarFunction::from_params(map_xg, &block(2 * dx, dg, units.y)),
        ridge,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyClass {
    Constant,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelIpsConfig {
    /// Bandwidth of the Gaussian policy kernel; `None` means Silverman's rule
    /// on the logged prices.
    pub h: Option<f64>,
    /// Product-kernel bandwidths for `(p, x_1, .., x_q, g)`; `None` means
    /// Silverman's rule per dimension.
    pub kde_bandwidths: Option<Vec<f64>>,
    /// Lower clip on the estimated propensity; `None` means `1e-3` times the
    /// median of the `(x, g)` density estimate at the data.
    pub q_floor: Option<f64>,
    pub policy_class: PolicyClass,
    pub p1: f64,
    pub p2: f64,
    /// Points per coordinate line search.
    pub grid_points: usize,
    /// Coordinate sweeps; the search radius halves after each sweep.
    pub rounds: usize,
}

impl Default for KernelIpsConfig {
    fn default() -> Self {
        Self {
            h: None,
            kde_bandwidths: None,
            q_floor: None,
            policy_class: PolicyClass::Linear,
            p1: 0.0,
            p2: 10.0,
            grid_points: 21,
            rounds: 12,
        }
    }
}

/// Silverman's rule of thumb `σ_j (4 / ((d + 2) n))^{1/(d+4)}` for each
/// column of a `d`-dimensional sample.
pub fn silverman_bandwidths(columns: &[Vec<f64>]) -> Vec<f64> {
    let d = columns.len() as f64;
    columns
        .iter()
        .map(|c| {
            let n = c.len() as f64;
            let sd = linalg::std_dev(c);
            let sd = if sd > 0.0 { sd } else { 1.0 };
            sd * (4.0 / ((d + 2.0) * n)).powf(1.0 / (d + 4.0))
        })
        .collect()
}

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Kernel estimate of the generalized propensity score
/// `Q(p | x, g) = f(p, x, g) / f(x, g)`, both densities built from the same
/// product-Gaussian kernel so the ratio is a proper conditional density.
#[derive(Clone, Debug)]
pub struct Gps {
    p: Vec<f64>,
    xg: Vec<Vec<f64>>,
    /// Bandwidths for `(p, x.., g)`.
    bandwidths: Vec<f64>,
    q_floor: f64,
}

impl Gps {
    fn log_cond_weights(&self, xg: &[f64]) -> Vec<f64> {
        let hs = &self.bandwidths[1..];
        let logs: Vec<f64> = self
            .xg
            .iter()
            .map(|row| -0.5 * row.iter().zip(xg).zip(hs).map(|((a, b), h)| ((a - b) / h).powi(2)).sum::<f64>())
            .collect();
        let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logs.iter().map(|l| (l - m).exp()).sum();
        logs.iter().map(|l| l - m - z.ln()).collect()
    }

    /// Unfloored conditional density estimate.
    pub fn ratio(&self, p: f64, xg: &[f64]) -> f64 {
        let hp = self.bandwidths[0];
        self.log_cond_weights(xg)
            .iter()
            .zip(&self.p)
            .map(|(lw, pj)| (lw - 0.5 * ((p - pj) / hp).powi(2) - 0.5 * LN_2PI - hp.ln()).exp())
            .sum()
    }

    /// `max(ratio, q_floor)`.
    pub fn q(&self, p: f64, xg: &[f64]) -> f64 {
        self.ratio(p, xg).max(self.q_floor)
    }

    /// Density estimate of `(x, g)`.
    pub fn marginal_density(&self, xg: &[f64]) -> f64 {
        let hs = &self.bandwidths[1..];
        let norm: f64 = hs.iter().map(|h| -0.5 * LN_2PI - h.ln()).sum();
        let s: f64 = self
            .xg
            .iter()
            .map(|row| (norm - 0.5 * row.iter().zip(xg).zip(hs).map(|((a, b), h)| ((a - b) / h).powi(2)).sum::<f64>()).exp())
            .sum();
        s / self.xg.len() as f64
    }

    pub fn q_floor(&self) -> f64 {
        self.q_floor
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }
}

pub fn estimate_gps(data: &Dataset, config: &KernelIpsConfig) -> Result<Gps> {
    if data.is_empty() {
        return Err(Error::Empty("dataset has no samples".into()));
    }
    let s = data.samples();
    let p: Vec<f64> = s.iter().map(|z| z.p).collect();
    let xg: Vec<Vec<f64>> = s.iter().map(|z| z.xg()).collect();
    let bandwidths = match &config.kde_bandwidths {
        Some(b) => {
            if b.len() != data.x_dim() + 2 || b.iter().any(|h| !(*h > 0.0)) {
                return Err(Error::InvalidParameter(format!(
                    "kde_bandwidths needs {} positive entries",
                    data.x_dim() + 2
                )));
            }
            b.clone()
        }
        None => {
            let mut cols = vec![p.clone()];
            for j in 0..=data.x_dim() {
                cols.push(xg.iter().map(|r| r[j]).collect());
            }
            silverman_bandwidths(&cols)
        }
    };
    let mut gps = Gps { p, xg, bandwidths, q_floor: 0.0 };
    gps.q_floor = match config.q_floor {
        Some(f) if f > 0.0 => f,
        Some(f) => return Err(Error::InvalidParameter(format!("q_floor must be positive, got {f}"))),
        None => {
            let dens: Vec<f64> = gps.xg.iter().map(|r| gps.marginal_density(r)).collect();
            (1e-3 * linalg::median(&dens)).max(f64::MIN_POSITIVE)
        }
    };
    Ok(gps)
}

/// Self-normalized kernel estimate of a policy's value:
/// `Σ Y_i K((P_i − π_i)/h)/Q_i / Σ K((P_i − π_i)/h)/Q_i`.
pub fn ips_value(y: &[f64], p: &[f64], q: &[f64], policy_prices: &[f64], h: f64) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..y.len() {
        let k = (-0.5 * ((p[i] - policy_prices[i]) / h).powi(2)).exp() / q[i];
        num += y[i] * k;
        den += k;
    }
    if !(den > 0.0) || !den.is_finite() {
        return Err(Error::DegenerateWeights(format!("all kernel weights vanish at bandwidth {h}")));
    }
    Ok(num / den)
}

/// Fitted kernel-IPS policy with the diagnostics of the search.
#[derive(Clone, Debug)]
pub struct KernelIpsFit {
    pub policy: PricingPolicy,
    pub value: f64,
    pub h: f64,
    /// Fraction of training propensities that hit the floor.
    pub floor_rate: f64,
}

/// Maximizes [`ips_value`] over `clip(w'x + b, p1, p2)` (or constants) by
/// coordinate grid search started from `start = (w, b)`, or from the least
/// squares fit of `P` on `X` when no start is given.
pub fn fit_kernel_ips(data: &Dataset, config: &KernelIpsConfig, start: Option<(Vec<f64>, f64)>) -> Result<KernelIpsFit> {
    if !(config.p1 < config.p2) {
        return Err(Error::InvalidParameter("kernel IPS needs p1 < p2".into()));
    }
    let gps = estimate_gps(data, config)?;
    let s = data.samples();
    let q_dim = data.x_dim();
    let y: Vec<f64> = s.iter().map(|z| z.y).collect();
    let p: Vec<f64> = s.iter().map(|z| z.p).collect();
    let raw_q: Vec<f64> = s.iter().map(|z| gps.ratio(z.p, &z.xg())).collect();
    let floor_rate = raw_q.iter().filter(|r| **r < gps.q_floor).count() as f64 / s.len() as f64;
    let q: Vec<f64> = raw_q.iter().map(|r| r.max(gps.q_floor)).collect();
    let h = match config.h {
        Some(h) if h > 0.0 => h,
        Some(h) => return Err(Error::InvalidParameter(format!("h must be positive, got {h}"))),
        None => silverman_bandwidths(&[p.clone()])[0],
    };

    let linear = config.policy_class == PolicyClass::Linear;
    let (w0, b0) = match start {
        Some((w, b)) if w.len() == q_dim => (w, b),
        Some(_) => return Err(Error::InvalidParameter("start weights have the wrong dimension".into())),
        None => least_squares_start(data)?,
    };
    // parameters (b, w_1.., w_q); the constant class only moves b and starts
    // at the start rule's mean price
    let theta: Vec<f64> = if linear {
        std::iter::once(b0).chain(w0).collect()
    } else {
        let mean_x: Vec<f64> = (0..q_dim).map(|j| linalg::mean(&s.iter().map(|z| z.x[j]).collect::<Vec<_>>())).collect();
        std::iter::once(b0 + linalg::dot(&w0, &mean_x)).chain(vec![0.0; q_dim]).collect()
    };
    let mut theta = theta;
    let value = |t: &[f64]| -> f64 {
        let prices: Vec<f64> = s
            .iter()
            .map(|z| (t[0] + linalg::dot(&t[1..], &z.x)).clamp(config.p1, config.p2))
            .collect();
        ips_value(&y, &p, &q, &prices, h).unwrap_or(f64::NEG_INFINITY)
    };
    let width = config.p2 - config.p1;
    let sds: Vec<f64> = (0..q_dim)
        .map(|j| linalg::std_dev(&s.iter().map(|z| z.x[j]).collect::<Vec<_>>()).max(1e-12))
        .collect();
    let mut radius: Vec<f64> = std::iter::once(width / 2.0).chain(sds.iter().map(|sd| width / (4.0 * sd))).collect();
    let coords = if linear { q_dim + 1 } else { 1 };
    let m = config.grid_points.max(3);
    let mut best = value(&theta);
    for _ in 0..config.rounds {
        for c in 0..coords {
            let center = theta[c];
            for t in 0..m {
                let cand_v = center + radius[c] * (2.0 * t as f64 / (m - 1) as f64 - 1.0);
                let mut cand = theta.clone();
                cand[c] = cand_v;
                let v = value(&cand);
                // strict improvement keeps ties at the earlier point
                if v > best {
                    best = v;
                    theta = cand;
                }
            }
        }
        radius.iter_mut().for_each(|r| *r *= 0.5);
    }
    if !best.is_finite() {
        return Err(Error::DegenerateWeights(format!("no candidate policy has usable kernel weights at h = {h}")));
    }
    let policy = if linear {
        PricingPolicy::linear(theta[1..].to_vec(), theta[0], config.p1, config.p2)?
    } else {
        PricingPolicy::constant(theta[0].clamp(config.p1, config.p2), config.p1, config.p2)?
    };
    Ok(KernelIpsFit { policy, value: best, h, floor_rate })
}

/// Least squares `P ≈ w'X + b`.
pub fn least_squares_start(data: &Dataset) -> Result<(Vec<f64>, f64)> {
    let targets: Vec<f64> = data.samples().iter().map(|z| z.p).collect();
    linear_fit(data, &targets)
}

/// Least squares fit of `targets ≈ w'X + b` over the dataset's covariates.
pub fn linear_fit(data: &Dataset, targets: &[f64]) -> Result<(Vec<f64>, f64)> {
    let q = data.x_dim();
    let design = DMatrix::from_fn(data.len(), q + 1, |i, j| if j == 0 { 1.0 } else { data.samples()[i].x[j - 1] });
    let coef = linalg::ridge(&design, targets, 0.0)?;
    Ok((coef.rows(1, q).iter().copied().collect(), coef[0]))
}
