//! Pricing policies: clipped quadratic argmax of fitted revenue coefficients,
//! plus constant, linear and tabulated rules used by baselines and tests.

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::ScalarFunction;
use crate::moments::NuisanceAlpha;
use crate::scm::key_of;

/// A map from covariates to a price in `bounds()`.
pub trait Pricing: Send + Sync {
    fn price(&self, x: &[f64]) -> f64;
    fn bounds(&self) -> (f64, f64);
}

/// A revenue coefficient: either a constant or a feature-linear function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coefficient {
    Constant(f64),
    Function(ScalarFunction),
}

impl Coefficient {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Coefficient::Constant(c) => *c,
            Coefficient::Function(f) => f.eval(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriceRule {
    /// `−β1(x) / (2·min(β2(x), −floor_c))`.
    QuadraticArgmax { beta1: Coefficient, beta2: Coefficient, floor_c: f64 },
    Constant { price: f64 },
    /// `w'x + b`.
    Linear { weights: Vec<f64>, intercept: f64 },
    /// Nearest tabulated point.
    Tabulated { points: Vec<Vec<f64>>, prices: Vec<f64> },
}

/// Affine input transform `(x − mean) / scale` applied before the rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let q = rows.first().map(Vec::len).ok_or_else(|| Error::Empty("no rows to standardize".into()))?;
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..q).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let scale = (0..q)
            .map(|j| {
                let v = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if v > 0.0 { v.sqrt() } else { 1.0 }
            })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }
}

/// A pricing rule with price bounds. Evaluations where the fitted `β2` had
/// to be floored are counted.
#[derive(Debug, Serialize, Deserialize)]
pub struct PricingPolicy {
    pub rule: PriceRule,
    pub p1: f64,
    pub p2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardizer: Option<Standardizer>,
    #[serde(skip)]
    floored: AtomicUsize,
}

impl Clone for PricingPolicy {
    fn clone(&self) -> Self {
        Self {
            rule: self.rule.clone(),
            p1: self.p1,
            p2: self.p2,
            standardizer: self.standardizer.clone(),
            floored: AtomicUsize::new(self.floored_evaluations()),
        }
    }
}

impl PartialEq for PricingPolicy {
    fn eq(&self, other: &Self) -> bool {
        self.rule == other.rule && self.p1 == other.p1 && self.p2 == other.p2 && self.standardizer == other.standardizer
    }
}

pub const DEFAULT_FLOOR_C: f64 = 1e-3;

fn check_bounds(p1: f64, p2: f64) -> Result<()> {
    if !(p1 < p2) || !p1.is_finite() || !p2.is_finite() {
        return Err(Error::InvalidParameter(format!("price bounds need p1 < p2, got [{p1}, {p2}]")));
    }
    Ok(())
}

impl PricingPolicy {
    pub fn new(rule: PriceRule, p1: f64, p2: f64) -> Result<Self> {
        check_bounds(p1, p2)?;
        if let PriceRule::QuadraticArgmax { floor_c, .. } = &rule {
            if !(*floor_c > 0.0) {
                return Err(Error::InvalidParameter(format!("floor_c must be positive, got {floor_c}")));
            }
        }
        if let PriceRule::Tabulated { points, prices } = &rule {
            if points.is_empty() || points.len() != prices.len() {
                return Err(Error::InvalidParameter("tabulated policy needs matching, nonempty points and prices".into()));
            }
        }
        Ok(Self { rule, p1, p2, standardizer: None, floored: AtomicUsize::new(0) })
    }

    pub fn constant(price: f64, p1: f64, p2: f64) -> Result<Self> {
        Self::new(PriceRule::Constant { price }, p1, p2)
    }

    pub fn linear(weights: Vec<f64>, intercept: f64, p1: f64, p2: f64) -> Result<Self> {
        Self::new(PriceRule::Linear { weights, intercept }, p1, p2)
    }

    pub fn quadratic(beta1: Coefficient, beta2: Coefficient, p1: f64, p2: f64, floor_c: f64) -> Result<Self> {
        Self::new(PriceRule::QuadraticArgmax { beta1, beta2, floor_c }, p1, p2)
    }

    pub fn with_standardizer(mut self, s: Standardizer) -> Self {
        self.standardizer = Some(s);
        self
    }

    /// How many evaluations so far used the `β2` floor.
    pub fn floored_evaluations(&self) -> usize {
        self.floored.load(Ordering::Relaxed)
    }

    /// Price before clipping.
    fn raw_price(&self, x: &[f64]) -> f64 {
        match &self.rule {
            PriceRule::QuadraticArgmax { beta1, beta2, floor_c } => {
                let b1 = beta1.eval(x);
                let b2 = beta2.eval(x);
                if b2 > -floor_c {
                    self.floored.fetch_add(1, Ordering::Relaxed);
                }
                -b1 / (2.0 * b2.min(-floor_c))
            }
            PriceRule::Constant { price } => *price,
            PriceRule::Linear { weights, intercept } => {
                intercept + weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            }
            PriceRule::Tabulated { points, prices } => {
                let k = key_of(x);
                if let Some(i) = points.iter().position(|p| key_of(p) == k) {
                    return prices[i];
                }
                let dist = |p: &Vec<f64>| p.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                let (i, _) = points
                    .iter()
                    .map(dist)
                    .enumerate()
                    .fold((0, f64::INFINITY), |best, (i, d)| if d < best.1 { (i, d) } else { best });
                prices[i]
            }
        }
    }

    /// Price at `x`, always inside `[p1, p2]`.
    pub fn price_for(&self, x: &[f64]) -> f64 {
        let raw = match &self.standardizer {
            Some(s) => self.raw_price(&s.apply(x)),
            None => self.raw_price(x),
        };
        // NaN coefficients fall back to the lower bound
        if raw.is_nan() { self.p1 } else { raw.clamp(self.p1, self.p2) }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        check_bounds(p.p1, p.p2)?;
        Ok(p)
    }

    /// Writes `x1,..,xq,price` for each input.
    pub fn write_price_table<W: Write>(&self, xs: &[Vec<f64>], writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let q = xs.first().map_or(0, Vec::len);
        let mut header: Vec<String> = (1..=q).map(|j| format!("x{j}")).collect();
        header.push("price".into());
        w.write_record(&header)?;
        for x in xs {
            let mut row: Vec<String> = x.iter().map(|v| v.to_string()).collect();
            row.push(self.price_for(x).to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

impl Pricing for PricingPolicy {
    fn price(&self, x: &[f64]) -> f64 {
        self.price_for(x)
    }

    fn bounds(&self) -> (f64, f64) {
        (self.p1, self.p2)
    }
}

/// The model-based policy `clip(−β̂1 / (2·min(β̂2, −floor_c)), p1, p2)`.
pub fn extract_policy(alpha_hat: &NuisanceAlpha, p1: f64, p2: f64, floor_c: f64) -> Result<PricingPolicy> {
    PricingPolicy::quadratic(
        Coefficient::Function(alpha_hat.beta1().clone()),
        Coefficient::Function(alpha_hat.beta2().clone()),
        p1,
        p2,
        floor_c,
    )
}

/// Evaluates a policy; the result lies in the policy's bounds.
pub fn price_for(policy: &PricingPolicy, x: &[f64]) -> f64 {
    policy.price_for(x)
}
