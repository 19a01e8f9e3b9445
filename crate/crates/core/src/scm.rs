//! Structural causal model for confounded pricing data.
//!
//! Two models live here. [`SimParams`] drives the continuous simulator with
//! jointly normal covariates, instrument and latents; its analytic oracle
//! ([`oracle_beta`], [`oracle_policy`]) is what regrets are measured against.
//! [`DiscreteScm`] is a finite-support model whose conditional expectations
//! can be enumerated exactly, which makes it the reference oracle for the
//! moment identities in [`crate::moments`].

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::distr::weighted::WeightedIndex;
use rand::distr::{Distribution, Uniform};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::policy::Pricing;
use crate::rng::{rng_from_seed, Rng};

/// Parameters of the continuous simulator. Defaults reproduce the published
/// simulation table with a mild exclusion violation (`c4 = 1`) and a weak
/// instrument (`c7 = 1`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimParams {
    pub mu_x: [f64; 2],
    pub sigma_x: [[f64; 2]; 2],
    pub mu_g: f64,
    pub mu_u1: f64,
    pub mu_u2: f64,
    pub c_g: [f64; 2],
    pub c_u1: [f64; 2],
    pub c_u2: [f64; 2],
    pub sigma2_g: f64,
    pub sigma2_u1: f64,
    pub sigma2_u2: f64,
    pub c1: [f64; 2],
    pub c2: [f64; 2],
    pub c3: [f64; 2],
    /// Strength of the direct instrument effect on revenue.
    pub c4: f64,
    pub c5: [f64; 2],
    pub c6: [f64; 2],
    /// Strength of the instrument effect on price.
    pub c7: f64,
    pub price_range: [f64; 2],
    /// Half width `w` of the Uniform[-w, w] outcome and price noises.
    pub noise_half_width: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            mu_x: [0.25, 0.25],
            sigma_x: [[1.0, 0.0], [0.0, 1.0]],
            mu_g: 2.0,
            mu_u1: 0.5,
            mu_u2: 0.3,
            c_g: [0.25, 0.25],
            c_u1: [0.3, 0.4],
            c_u2: [0.2, 0.2],
            sigma2_g: 1.0,
            sigma2_u1: 3.0,
            sigma2_u2: 1.0,
            c1: [0.3, 0.2],
            c2: [0.1, -0.3],
            c3: [0.2, -0.1],
            c4: 1.0,
            c5: [0.4, 0.1],
            c6: [1.2, 0.4],
            c7: 1.0,
            price_range: [0.0, 10.0],
            noise_half_width: 1.0,
        }
    }
}

fn dot2(a: &[f64; 2], x: &[f64]) -> f64 {
    a[0] * x[0] + a[1] * x[1]
}

impl SimParams {
    /// Returns a copy with the exclusion-violation (`c4`) and instrument
    /// strength (`c7`) dials set.
    pub fn with_scenario(&self, c4: f64, c7: f64) -> Self {
        Self { c4, c7, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.sigma_x;
        let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
        if !(s[0][0] > 0.0) || !(det > 0.0) || (s[0][1] - s[1][0]).abs() > 1e-12 {
            return Err(Error::InvalidParameter("sigma_x must be symmetric positive definite".into()));
        }
        for (name, v) in [
            ("sigma2_g", self.sigma2_g),
            ("sigma2_u1", self.sigma2_u1),
            ("sigma2_u2", self.sigma2_u2),
            ("noise_half_width", self.noise_half_width),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        let [p1, p2] = self.price_range;
        if !(p1 >= 0.0 && p1 < p2) || !p2.is_finite() {
            return Err(Error::InvalidParameter(format!("price_range needs 0 <= p1 < p2, got [{p1}, {p2}]")));
        }
        Ok(())
    }

    fn cov_cholesky(&self) -> [[f64; 2]; 2] {
        let s = &self.sigma_x;
        let l00 = s[0][0].sqrt();
        let l10 = s[1][0] / l00;
        let l11 = (s[1][1] - l10 * l10).sqrt();
        [[l00, 0.0], [l10, l11]]
    }

    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("SimParams serializes");
        hex_digest(json.as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().take(16).map(|b| format!("{b:02x}")).collect()
}

/// Latent draws retained only when diagnostics are requested.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Latents {
    pub u1: f64,
    pub u2: f64,
    pub eps_y: f64,
    pub eps_p: f64,
}

/// One observed tuple `Z = (Y, X, G, P)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub y: f64,
    pub x: Vec<f64>,
    pub g: f64,
    pub p: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hidden: Option<Latents>,
}

impl Sample {
    pub fn new(y: f64, x: Vec<f64>, g: f64, p: f64) -> Self {
        Self { y, x, g, p, hidden: None }
    }

    /// `(x, g)` concatenated, the input of `h2`.
    pub fn xg(&self) -> Vec<f64> {
        let mut v = self.x.clone();
        v.push(self.g);
        v
    }
}

/// An immutable collection of i.i.d. samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    seed: u64,
    params_fingerprint: String,
}

impl Dataset {
    /// Wraps externally sourced samples. The fingerprint is derived from the
    /// data itself.
    pub fn from_samples(samples: Vec<Sample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("dataset needs at least one sample".into()));
        }
        let q = samples[0].x.len();
        for (i, s) in samples.iter().enumerate() {
            if s.x.len() != q {
                return Err(Error::Data(format!("sample {i} has {} covariates, expected {q}", s.x.len())));
            }
            if !(s.y.is_finite() && s.g.is_finite() && s.p.is_finite() && s.x.iter().all(|v| v.is_finite())) {
                return Err(Error::Data(format!("sample {i} has non-finite values")));
            }
        }
        let mut hasher = Sha256::new();
        for s in &samples {
            for v in std::iter::once(s.y).chain(s.x.iter().copied()).chain([s.g, s.p]) {
                hasher.update(v.to_le_bytes());
            }
        }
        let fp = hasher.finalize().iter().take(16).map(|b| format!("{b:02x}")).collect();
        Ok(Self { samples, seed: 0, params_fingerprint: fp })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn x_dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.x.len())
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params_fingerprint(&self) -> &str {
        &self.params_fingerprint
    }

    pub fn has_latents(&self) -> bool {
        self.samples.iter().all(|s| s.hidden.is_some())
    }

    /// Writes `y,x1,..,xq,g,p` (plus `u1,u2,eps_y,eps_p` when every sample
    /// carries latents and `diagnostics` is set).
    pub fn write_csv<W: Write>(&self, writer: W, diagnostics: bool) -> Result<()> {
        let diagnostics = diagnostics && self.has_latents();
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["y".to_string()];
        header.extend((1..=self.x_dim()).map(|j| format!("x{j}")));
        header.push("g".into());
        header.push("p".into());
        if diagnostics {
            header.extend(["u1", "u2", "eps_y", "eps_p"].map(String::from));
        }
        w.write_record(&header)?;
        for s in &self.samples {
            let mut row = vec![s.y.to_string()];
            row.extend(s.x.iter().map(|v| v.to_string()));
            row.push(s.g.to_string());
            row.push(s.p.to_string());
            if diagnostics {
                let h = s.hidden.expect("checked above");
                row.extend([h.u1, h.u2, h.eps_y, h.eps_p].map(|v| v.to_string()));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the format produced by [`Dataset::write_csv`]. Latent columns,
    /// if present, are ignored: estimation data never carries them.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        let col = |name: &str| header.iter().position(|h| h.trim() == name);
        let iy = col("y").ok_or_else(|| Error::Data("missing column y".into()))?;
        let ig = col("g").ok_or_else(|| Error::Data("missing column g".into()))?;
        let ip = col("p").ok_or_else(|| Error::Data("missing column p".into()))?;
        let mut ix = Vec::new();
        while let Some(i) = col(&format!("x{}", ix.len() + 1)) {
            ix.push(i);
        }
        if ix.is_empty() {
            return Err(Error::Data("no covariate columns x1.. found".into()));
        }
        let mut samples = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let parse = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|v| v.trim().parse::<f64>().ok())
                    .ok_or_else(|| Error::Data(format!("row {}: column {} is not a number", line + 1, header.get(i).unwrap_or("?"))))
            };
            let x = ix.iter().map(|&i| parse(i)).collect::<Result<Vec<_>>>()?;
            samples.push(Sample::new(parse(iy)?, x, parse(ig)?, parse(ip)?));
        }
        Self::from_samples(samples)
    }
}

fn draw_covariates(params: &SimParams, rng: &mut Rng) -> [f64; 2] {
    let l = params.cov_cholesky();
    let z0: f64 = StandardNormal.sample(rng);
    let z1: f64 = StandardNormal.sample(rng);
    [
        params.mu_x[0] + l[0][0] * z0,
        params.mu_x[1] + l[1][0] * z0 + l[1][1] * z1,
    ]
}

/// Draws `n` samples from the simulator. Identical `(params, n, seed)` give
/// identical datasets.
pub fn generate_dataset(params: &SimParams, n: usize, seed: u64) -> Result<Dataset> {
    generate(params, n, seed, false)
}

/// Like [`generate_dataset`] but keeps the latent draws on every sample for
/// diagnostics. Estimators never read them.
pub fn generate_dataset_with_latents(params: &SimParams, n: usize, seed: u64) -> Result<Dataset> {
    generate(params, n, seed, true)
}

fn generate(params: &SimParams, n: usize, seed: u64, keep_latents: bool) -> Result<Dataset> {
    params.validate()?;
    if n == 0 {
        return Err(Error::Empty("requested a dataset with n = 0".into()));
    }
    let mut rng = rng_from_seed(seed);
    let w = params.noise_half_width;
    let noise = Uniform::new_inclusive(-w, w).expect("half width validated positive");
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let x = draw_covariates(params, &mut rng);
        let zg: f64 = StandardNormal.sample(&mut rng);
        let z1: f64 = StandardNormal.sample(&mut rng);
        let z2: f64 = StandardNormal.sample(&mut rng);
        let g = params.mu_g + dot2(&params.c_g, &x) + params.sigma2_g.sqrt() * zg;
        let u1 = params.mu_u1 + dot2(&params.c_u1, &x) + params.sigma2_u1.sqrt() * z1;
        let u2 = params.mu_u2 + dot2(&params.c_u2, &x) + params.sigma2_u2.sqrt() * z2;
        let eps_p = noise.sample(&mut rng);
        let eps_y = noise.sample(&mut rng);

        let alpha_g = (u2 * u2 + dot2(&params.c6, &x)) * g + params.c7 * g;
        let alpha_ux = u2.cos();
        let p = alpha_g + alpha_ux + eps_p;

        let beta_p1 = u1 * u1 - dot2(&params.c1, &x);
        let beta_p2 = -(u1 + dot2(&params.c2, &x)).exp();
        let beta_g = (u1 * u1 + dot2(&params.c3, &x)) * g + params.c4 * g;
        let beta_ux = (u1 * u2 + dot2(&params.c5, &x)).cos();
        let y = beta_p1 * p + beta_p2 * p * p + beta_g + beta_ux + eps_y;

        let hidden = keep_latents.then_some(Latents { u1, u2, eps_y, eps_p });
        samples.push(Sample { y, x: x.to_vec(), g, p, hidden });
    }
    let fp = hex_digest(format!("{}|n={n}|latents={keep_latents}", params.fingerprint()).as_bytes());
    Ok(Dataset { samples, seed, params_fingerprint: fp })
}

/// Conditional means `(E[β_{p,1}(U,X) | X=x], E[β_{p,2}(U,X) | X=x])`.
pub fn oracle_beta(params: &SimParams, x: &[f64]) -> (f64, f64) {
    let m1 = params.mu_u1 + dot2(&params.c_u1, x);
    let beta1 = -dot2(&params.c1, x) + m1 * m1 + params.sigma2_u1;
    let c2u: [f64; 2] = [params.c2[0] + params.c_u1[0], params.c2[1] + params.c_u1[1]];
    let beta2 = -(params.mu_u1 + params.sigma2_u1 / 2.0 + dot2(&c2u, x)).exp();
    (beta1, beta2)
}

/// The revenue-maximizing price `clip(−β̃1 / (2 β̃2), p1, p2)`.
pub fn oracle_policy(params: &SimParams, x: &[f64]) -> f64 {
    let (b1, b2) = oracle_beta(params, x);
    let [p1, p2] = params.price_range;
    (-b1 / (2.0 * b2)).clamp(p1, p2)
}

/// [`oracle_policy`] as a [`Pricing`] implementation.
#[derive(Clone, Debug)]
pub struct OraclePolicy {
    pub params: SimParams,
}

impl Pricing for OraclePolicy {
    fn price(&self, x: &[f64]) -> f64 {
        oracle_policy(&self.params, x)
    }

    fn bounds(&self) -> (f64, f64) {
        (self.params.price_range[0], self.params.price_range[1])
    }
}

/// Monte Carlo mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
}

impl McEstimate {
    fn from_values(v: &[f64]) -> Self {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = if v.len() > 1 {
            v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self { mean, std_err: (var / n).sqrt() }
    }
}

fn covariate_draws(params: &SimParams, n_mc: usize, seed: u64) -> Result<Vec<[f64; 2]>> {
    params.validate()?;
    if n_mc == 0 {
        return Err(Error::Empty("n_mc must be at least 1".into()));
    }
    let mut rng = rng_from_seed(seed);
    Ok((0..n_mc).map(|_| draw_covariates(params, &mut rng)).collect())
}

fn conditional_revenue(params: &SimParams, x: &[f64], price: f64) -> f64 {
    let (b1, b2) = oracle_beta(params, x);
    b1 * price + b2 * price * price
}

/// Noise-free value of `policy`: the average conditional expected revenue
/// over fresh covariate draws.
pub fn policy_value(params: &SimParams, policy: &dyn Pricing, n_mc: usize, seed: u64) -> Result<f64> {
    Ok(policy_value_estimate(params, policy, n_mc, seed)?.mean)
}

pub fn policy_value_estimate(params: &SimParams, policy: &dyn Pricing, n_mc: usize, seed: u64) -> Result<McEstimate> {
    let xs = covariate_draws(params, n_mc, seed)?;
    let v: Vec<f64> = xs.iter().map(|x| conditional_revenue(params, x, policy.price(x))).collect();
    Ok(McEstimate::from_values(&v))
}

/// `V(π*) − V(π̂)` on common covariate draws.
pub fn regret(params: &SimParams, policy: &dyn Pricing, n_mc: usize, seed: u64) -> Result<f64> {
    Ok(regret_estimate(params, policy, n_mc, seed)?.mean)
}

pub fn regret_estimate(params: &SimParams, policy: &dyn Pricing, n_mc: usize, seed: u64) -> Result<McEstimate> {
    let xs = covariate_draws(params, n_mc, seed)?;
    let v: Vec<f64> = xs
        .iter()
        .map(|x| {
            conditional_revenue(params, x, oracle_policy(params, x)) - conditional_revenue(params, x, policy.price(x))
        })
        .collect();
    Ok(McEstimate::from_values(&v))
}

// ---------------------------------------------------------------------------
// Finite-support model
// ---------------------------------------------------------------------------

/// One support point of a [`DiscreteScm`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Atom {
    pub x: Vec<f64>,
    pub u1: f64,
    pub u2: f64,
    pub g: f64,
    pub eps_p: f64,
    #[serde(default)]
    pub eps_y: f64,
    pub prob: f64,
}

/// Structural coefficients evaluated at one atom.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AtomCoefficients {
    pub beta_p1: f64,
    pub beta_p2: f64,
    pub beta_g: f64,
    pub beta_ux: f64,
    pub alpha_g: f64,
    pub alpha_ux: f64,
}

/// Unvalidated description of a finite-support model: one coefficient record
/// per atom.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DiscreteScmSpec {
    pub atoms: Vec<Atom>,
    pub coefficients: Vec<AtomCoefficients>,
}

/// Coefficient functions with the latent dependence structure required for
/// identification: revenue coefficients see `u1`, price coefficients see `u2`.
pub struct CoefficientFns<'a> {
    pub beta_p1: &'a dyn Fn(f64, &[f64]) -> f64,
    pub beta_p2: &'a dyn Fn(f64, &[f64]) -> f64,
    pub beta_g: &'a dyn Fn(f64, &[f64], f64) -> f64,
    pub beta_ux: &'a dyn Fn(f64, f64, &[f64]) -> f64,
    pub alpha_g: &'a dyn Fn(f64, &[f64], f64) -> f64,
    pub alpha_ux: &'a dyn Fn(f64, &[f64]) -> f64,
}

impl DiscreteScmSpec {
    /// Tabulates `fns` on the given atoms.
    pub fn from_fns(atoms: Vec<Atom>, fns: &CoefficientFns<'_>) -> Self {
        let coefficients = atoms
            .iter()
            .map(|a| AtomCoefficients {
                beta_p1: (fns.beta_p1)(a.u1, &a.x),
                beta_p2: (fns.beta_p2)(a.u1, &a.x),
                beta_g: (fns.beta_g)(a.u1, &a.x, a.g),
                beta_ux: (fns.beta_ux)(a.u1, a.u2, &a.x),
                alpha_g: (fns.alpha_g)(a.u2, &a.x, a.g),
                alpha_ux: (fns.alpha_ux)(a.u2, &a.x),
            })
            .collect();
        Self { atoms, coefficients }
    }
}

const PROB_TOL: f64 = 1e-12;

pub(crate) type Key = Vec<u64>;

pub(crate) fn key_of(vals: &[f64]) -> Key {
    // -0.0 and 0.0 must land in the same bucket
    vals.iter().map(|v| if *v == 0.0 { 0u64 } else { v.to_bits() }).collect()
}

/// A validated finite-support structural model.
#[derive(Clone, Debug)]
pub struct DiscreteScm {
    atoms: Vec<Atom>,
    coefficients: Vec<AtomCoefficients>,
    price: Vec<f64>,
    revenue: Vec<f64>,
    x_points: Vec<Vec<f64>>,
}

/// Validates a finite-support model. See [`DiscreteScm`] for the checks.
pub fn build_discrete_scm(spec: DiscreteScmSpec) -> Result<DiscreteScm> {
    DiscreteScm::new(spec)
}

struct Masses {
    map: HashMap<Key, f64>,
}

impl Masses {
    fn build<'a>(atoms: impl Iterator<Item = (&'a Atom, Key)>) -> Self {
        let mut map = HashMap::new();
        for (a, k) in atoms {
            *map.entry(k).or_insert(0.0) += a.prob;
        }
        Self { map }
    }

    fn get(&self, k: &Key) -> f64 {
        self.map.get(k).copied().unwrap_or(0.0)
    }
}

fn cat(parts: &[&[f64]]) -> Vec<f64> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

impl DiscreteScm {
    /// Validation enforces: probabilities are a distribution; each coefficient
    /// depends only on the latents it may reference; `G ⊥ (U1, U2) | X`;
    /// `U1 ⊥ U2 | (X, G)`; `ε_p ⊥ U1 | (X, U2, G)`; `E[ε_p | X, G, U] = 0`;
    /// `E[ε_y | X, G, U, ε_p] = 0`; and `Cov(α_g, β_{u,x} | X, G)` does not
    /// vary with `G`.
    pub fn new(spec: DiscreteScmSpec) -> Result<Self> {
        let DiscreteScmSpec { atoms, coefficients } = spec;
        if atoms.is_empty() {
            return Err(Error::InvalidScm("no atoms".into()));
        }
        if atoms.len() != coefficients.len() {
            return Err(Error::InvalidScm(format!(
                "{} atoms but {} coefficient records",
                atoms.len(),
                coefficients.len()
            )));
        }
        let q = atoms[0].x.len();
        let mut total = 0.0;
        for (i, (a, c)) in atoms.iter().zip(&coefficients).enumerate() {
            if a.x.len() != q {
                return Err(Error::InvalidScm(format!("atom {i} has covariate dimension {}, expected {q}", a.x.len())));
            }
            let vals = [a.u1, a.u2, a.g, a.eps_p, a.eps_y, c.beta_p1, c.beta_p2, c.beta_g, c.beta_ux, c.alpha_g, c.alpha_ux];
            if !a.x.iter().chain(vals.iter()).all(|v| v.is_finite()) {
                return Err(Error::InvalidScm(format!("atom {i} has non-finite values")));
            }
            if !(a.prob >= 0.0) || !a.prob.is_finite() {
                return Err(Error::InvalidScm(format!("atom {i} has invalid probability {}", a.prob)));
            }
            total += a.prob;
        }
        if (total - 1.0).abs() > PROB_TOL {
            return Err(Error::InvalidScm(format!("probabilities sum to {total}, not 1")));
        }

        Self::check_dependence(&atoms, &coefficients)?;
        Self::check_independence(&atoms)?;
        Self::check_noise_means(&atoms)?;
        Self::check_confounding_covariance(&atoms, &coefficients)?;

        let price: Vec<f64> = atoms
            .iter()
            .zip(&coefficients)
            .map(|(a, c)| c.alpha_g + c.alpha_ux + a.eps_p)
            .collect();
        let revenue = atoms
            .iter()
            .zip(&coefficients)
            .zip(&price)
            .map(|((a, c), &p)| c.beta_p1 * p + c.beta_p2 * p * p + c.beta_g + c.beta_ux + a.eps_y)
            .collect();
        let mut seen = HashMap::new();
        let mut x_points = Vec::new();
        for a in &atoms {
            if a.prob > 0.0 && seen.insert(key_of(&a.x), ()).is_none() {
                x_points.push(a.x.clone());
            }
        }
        Ok(Self { atoms, coefficients, price, revenue, x_points })
    }

    fn check_dependence(atoms: &[Atom], coefs: &[AtomCoefficients]) -> Result<()> {
        type KeyFn = fn(&Atom) -> Vec<f64>;
        type ValFn = fn(&AtomCoefficients) -> f64;
        let rules: [(&str, &str, KeyFn, ValFn); 6] = [
            ("beta_p1", "(x, u1)", |a| cat(&[&a.x, &[a.u1]]), |c| c.beta_p1),
            ("beta_p2", "(x, u1)", |a| cat(&[&a.x, &[a.u1]]), |c| c.beta_p2),
            ("beta_g", "(x, u1, g)", |a| cat(&[&a.x, &[a.u1, a.g]]), |c| c.beta_g),
            ("beta_ux", "(x, u1, u2)", |a| cat(&[&a.x, &[a.u1, a.u2]]), |c| c.beta_ux),
            ("alpha_g", "(x, u2, g)", |a| cat(&[&a.x, &[a.u2, a.g]]), |c| c.alpha_g),
            ("alpha_ux", "(x, u2)", |a| cat(&[&a.x, &[a.u2]]), |c| c.alpha_ux),
        ];
        for (name, args, key, val) in rules {
            let mut table: HashMap<Key, f64> = HashMap::new();
            for (a, c) in atoms.iter().zip(coefs) {
                let v = val(c);
                if let Some(prev) = table.insert(key_of(&key(a)), v) {
                    if prev != v {
                        return Err(Error::InvalidScm(format!(
                            "{name} must be a function of {args} only, but takes values {prev} and {v} at x = {:?}",
                            a.x
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn check_independence(atoms: &[Atom]) -> Result<()> {
        let pos: Vec<&Atom> = atoms.iter().filter(|a| a.prob > 0.0).collect();
        let m = |f: &dyn Fn(&Atom) -> Vec<f64>| Masses::build(pos.iter().map(|a| (*a, key_of(&f(a)))));

        // Conditional independence A ⊥ B | C holds iff p(a,b,c) p(c) = p(a,c) p(b,c)
        // for every combination of observed values.
        struct Rule<'r> {
            what: &'r str,
            c: &'r dyn Fn(&Atom) -> Vec<f64>,
            a: &'r dyn Fn(&Atom) -> Vec<f64>,
            b: &'r dyn Fn(&Atom) -> Vec<f64>,
        }
        let rules = [
            Rule { what: "G ⊥ (U1, U2) | X", c: &|a: &Atom| a.x.clone(), a: &|a: &Atom| vec![a.g], b: &|a: &Atom| vec![a.u1, a.u2] },
            Rule { what: "U1 ⊥ U2 | (X, G)", c: &|a: &Atom| cat(&[&a.x, &[a.g]]), a: &|a: &Atom| vec![a.u1], b: &|a: &Atom| vec![a.u2] },
            Rule {
                what: "ε_p ⊥ U1 | (X, U2, G)",
                c: &|a: &Atom| cat(&[&a.x, &[a.u2, a.g]]),
                a: &|a: &Atom| vec![a.u1],
                b: &|a: &Atom| vec![a.eps_p],
            },
        ];
        for rule in rules {
            let pc = m(&|x| (rule.c)(x));
            let pac = m(&|x| cat(&[&(rule.c)(x), &(rule.a)(x)]));
            let pbc = m(&|x| cat(&[&(rule.c)(x), &(rule.b)(x)]));
            let pabc = m(&|x| cat(&[&(rule.c)(x), &(rule.a)(x), &(rule.b)(x)]));
            // enumerate all (a, b) pairs that co-occur with each c
            let mut a_vals: HashMap<Key, Vec<Vec<f64>>> = HashMap::new();
            let mut b_vals: HashMap<Key, Vec<Vec<f64>>> = HashMap::new();
            for at in &pos {
                let ck = key_of(&(rule.c)(at));
                let av = (rule.a)(at);
                let bv = (rule.b)(at);
                let ea = a_vals.entry(ck.clone()).or_default();
                if !ea.iter().any(|v| key_of(v) == key_of(&av)) {
                    ea.push(av);
                }
                let eb = b_vals.entry(ck).or_default();
                if !eb.iter().any(|v| key_of(v) == key_of(&bv)) {
                    eb.push(bv);
                }
            }
            for (ck, avs) in &a_vals {
                let cvals: Vec<f64> = ck.iter().map(|b| f64::from_bits(*b)).collect();
                for av in avs {
                    for bv in &b_vals[ck] {
                        let joint = pabc.get(&key_of(&cat(&[&cvals, av, bv])));
                        let lhs = joint * pc.get(ck);
                        let rhs = pac.get(&key_of(&cat(&[&cvals, av]))) * pbc.get(&key_of(&cat(&[&cvals, bv])));
                        if (lhs - rhs).abs() > PROB_TOL {
                            return Err(Error::InvalidScm(format!("independence {} violated", rule.what)));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn check_noise_means(atoms: &[Atom]) -> Result<()> {
        let mut ep: HashMap<Key, (f64, f64, f64)> = HashMap::new();
        let mut ey: HashMap<Key, (f64, f64, f64)> = HashMap::new();
        for a in atoms.iter().filter(|a| a.prob > 0.0) {
            let e = ep.entry(key_of(&cat(&[&a.x, &[a.g, a.u1, a.u2]]))).or_default();
            e.0 += a.prob * a.eps_p;
            e.1 += a.prob;
            e.2 = e.2.max(a.eps_p.abs());
            let e = ey.entry(key_of(&cat(&[&a.x, &[a.g, a.u1, a.u2, a.eps_p]]))).or_default();
            e.0 += a.prob * a.eps_y;
            e.1 += a.prob;
            e.2 = e.2.max(a.eps_y.abs());
        }
        for (name, table) in [("price noise", &ep), ("revenue noise", &ey)] {
            for (s, w, scale) in table.values() {
                if (s / w).abs() > PROB_TOL * scale.max(1.0) * 10.0 {
                    return Err(Error::InvalidScm(format!("{name} does not have conditional mean zero")));
                }
            }
        }
        Ok(())
    }

    fn check_confounding_covariance(atoms: &[Atom], coefs: &[AtomCoefficients]) -> Result<()> {
        // Cov(α_g, β_ux | x, g) for each (x, g)
        let mut acc: HashMap<Key, [f64; 4]> = HashMap::new();
        for (a, c) in atoms.iter().zip(coefs).filter(|(a, _)| a.prob > 0.0) {
            let e = acc.entry(key_of(&cat(&[&a.x, &[a.g]]))).or_default();
            e[0] += a.prob;
            e[1] += a.prob * c.alpha_g;
            e[2] += a.prob * c.beta_ux;
            e[3] += a.prob * c.alpha_g * c.beta_ux;
        }
        let mut by_x: HashMap<Key, (f64, f64)> = HashMap::new();
        for (k, [w, sa, sb, sab]) in &acc {
            let cov = sab / w - (sa / w) * (sb / w);
            let scale = (sab / w).abs() + (sa / w).abs() * (sb / w).abs();
            let xk: Key = k[..k.len() - 1].to_vec();
            let e = by_x.entry(xk).or_insert((cov, cov));
            e.0 = e.0.min(cov);
            e.1 = e.1.max(cov);
            if e.1 - e.0 > 1e-10 * scale.max(1.0) {
                return Err(Error::InvalidScm(
                    "Cov(α_g, β_{u,x} | X, G) varies with G, so the identifying moments are biased".into(),
                ));
            }
        }
        Ok(())
    }

    /// Loads the JSON table format:
    /// `{"atoms": [...], "beta_p1": [{"x":[..], "u1":.., "value":..}], ...}`
    /// where each coefficient table may only be keyed by the latents it is
    /// allowed to depend on.
    pub fn from_json_str(json: &str) -> Result<Self> {
        let root: serde_json::Value = serde_json::from_str(json)?;
        let obj = root
            .as_object()
            .ok_or_else(|| Error::InvalidScm("top level must be an object".into()))?;
        let atoms: Vec<Atom> = serde_json::from_value(
            obj.get("atoms").cloned().ok_or_else(|| Error::InvalidScm("missing atoms".into()))?,
        )
        .map_err(|e| Error::InvalidScm(format!("atoms: {e}")))?;
        let tables: [(&str, &[&str]); 6] = [
            ("beta_p1", &["u1"]),
            ("beta_p2", &["u1"]),
            ("beta_g", &["u1", "g"]),
            ("beta_ux", &["u1", "u2"]),
            ("alpha_g", &["u2", "g"]),
            ("alpha_ux", &["u2"]),
        ];
        let mut lookups: Vec<HashMap<Key, f64>> = Vec::new();
        for (name, keys) in tables {
            let entries = obj
                .get(name)
                .and_then(|v| v.as_array())
                .ok_or_else(|| Error::InvalidScm(format!("missing coefficient table {name}")))?;
            let mut map = HashMap::new();
            for entry in entries {
                let e = entry
                    .as_object()
                    .ok_or_else(|| Error::InvalidScm(format!("{name}: entries must be objects")))?;
                for k in e.keys() {
                    if k != "x" && k != "value" && !keys.contains(&k.as_str()) {
                        return Err(Error::InvalidScm(format!(
                            "coefficient table {name} references {k}, but may only depend on x and {keys:?}"
                        )));
                    }
                }
                let num = |k: &str| -> Result<f64> {
                    e.get(k)
                        .and_then(|v| v.as_f64())
                        .ok_or_else(|| Error::InvalidScm(format!("{name}: entry missing numeric {k}")))
                };
                let x: Vec<f64> = serde_json::from_value(
                    e.get("x").cloned().ok_or_else(|| Error::InvalidScm(format!("{name}: entry missing x")))?,
                )
                .map_err(|err| Error::InvalidScm(format!("{name}: {err}")))?;
                let mut kv = x;
                for k in keys {
                    kv.push(num(k)?);
                }
                if map.insert(key_of(&kv), num("value")?).is_some() {
                    return Err(Error::InvalidScm(format!("{name}: duplicate entry for {kv:?}")));
                }
            }
            lookups.push(map);
        }
        let mut coefficients = Vec::with_capacity(atoms.len());
        for a in &atoms {
            let look = |i: usize, extra: &[f64]| -> Result<f64> {
                let k = key_of(&cat(&[&a.x, extra]));
                lookups[i].get(&k).copied().ok_or_else(|| {
                    Error::InvalidScm(format!("{} has no entry for atom at x = {:?}", tables[i].0, a.x))
                })
            };
            coefficients.push(AtomCoefficients {
                beta_p1: look(0, &[a.u1])?,
                beta_p2: look(1, &[a.u1])?,
                beta_g: look(2, &[a.u1, a.g])?,
                beta_ux: look(3, &[a.u1, a.u2])?,
                alpha_g: look(4, &[a.u2, a.g])?,
                alpha_ux: look(5, &[a.u2])?,
            });
        }
        Self::new(DiscreteScmSpec { atoms, coefficients })
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn coefficients(&self) -> &[AtomCoefficients] {
        &self.coefficients
    }

    /// Price at atom `i`.
    pub fn price(&self, i: usize) -> f64 {
        self.price[i]
    }

    /// Revenue at atom `i`.
    pub fn revenue(&self, i: usize) -> f64 {
        self.revenue[i]
    }

    /// Distinct covariate values with positive mass, in first-seen order.
    pub fn x_points(&self) -> &[Vec<f64>] {
        &self.x_points
    }

    /// Draws `n` observed tuples by sampling atoms i.i.d.
    pub fn sample_dataset(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::Empty("requested a dataset with n = 0".into()));
        }
        let dist = WeightedIndex::new(self.atoms.iter().map(|a| a.prob))
            .map_err(|e| Error::InvalidScm(format!("cannot sample atoms: {e}")))?;
        let mut rng = rng_from_seed(seed);
        let samples = (0..n)
            .map(|_| {
                let i = dist.sample(&mut rng);
                let a = &self.atoms[i];
                Sample {
                    y: self.revenue[i],
                    x: a.x.clone(),
                    g: a.g,
                    p: self.price[i],
                    hidden: Some(Latents { u1: a.u1, u2: a.u2, eps_y: a.eps_y, eps_p: a.eps_p }),
                }
            })
            .collect();
        Ok(Dataset { samples, seed, params_fingerprint: hex_digest(format!("discrete|{n}|{seed}").as_bytes()) })
    }
}
