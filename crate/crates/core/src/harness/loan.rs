//! Auto-loan style evaluation: net-present-value prices, a logistic demand
//! model fitted by penalized Newton iterations with cross-validated penalty,
//! revenue scoring of pricing policies and partial dependence curves.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::policy::Pricing;
use crate::rng::rng_from_seed;
use crate::scm::{Dataset, Sample};

/// One funded or declined loan offer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoanRecord {
    pub monthly_payment: f64,
    pub term: u32,
    pub monthly_libor: f64,
    pub loan_amount: f64,
    /// Annual percentage rate offered; used as the instrument.
    pub apr: f64,
    pub contracted: bool,
    pub features: Vec<f64>,
}

impl LoanRecord {
    pub fn validate(&self) -> Result<()> {
        if self.term < 1 {
            return Err(Error::InvalidParameter("loan term must be at least one month".into()));
        }
        if !(self.monthly_libor >= 0.0) || !(self.apr >= 0.0) {
            return Err(Error::InvalidParameter("rates must be nonnegative".into()));
        }
        if !(self.loan_amount > 0.0) {
            return Err(Error::InvalidParameter("loan amount must be positive".into()));
        }
        if !self.monthly_payment.is_finite() || self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite loan record".into()));
        }
        Ok(())
    }
}

/// Records plus the names of their feature columns.
#[derive(Clone, Debug, PartialEq)]
pub struct LoanData {
    pub feature_names: Vec<String>,
    pub records: Vec<LoanRecord>,
}

const FIXED_COLUMNS: [&str; 6] = ["monthly_payment", "term", "monthly_libor", "loan_amount", "apr", "contracted"];

impl LoanData {
    /// Parses `monthly_payment,term,monthly_libor,loan_amount,apr,contracted,<features..>`.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        for (i, want) in FIXED_COLUMNS.iter().enumerate() {
            if header.get(i).map(str::trim) != Some(*want) {
                return Err(Error::Data(format!("loan CSV column {} must be {want}", i + 1)));
            }
        }
        let feature_names: Vec<String> = header.iter().skip(FIXED_COLUMNS.len()).map(|s| s.trim().to_string()).collect();
        let mut records = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|v| v.trim().parse::<f64>().ok())
                    .ok_or_else(|| Error::Data(format!("row {}: column {} is not a number", line + 1, i + 1)))
            };
            let term = num(1)?;
            if term.fract() != 0.0 || term < 0.0 {
                return Err(Error::Data(format!("row {}: term must be a whole number of months", line + 1)));
            }
            let contracted = match num(5)? {
                v if v == 0.0 => false,
                v if v == 1.0 => true,
                v => return Err(Error::Data(format!("row {}: contracted must be 0 or 1, got {v}", line + 1))),
            };
            let record = LoanRecord {
                monthly_payment: num(0)?,
                term: term as u32,
                monthly_libor: num(2)?,
                loan_amount: num(3)?,
                apr: num(4)?,
                contracted,
                features: (FIXED_COLUMNS.len()..FIXED_COLUMNS.len() + feature_names.len()).map(num).collect::<Result<_>>()?,
            };
            record.validate().map_err(|e| Error::Data(format!("row {}: {e}", line + 1)))?;
            records.push(record);
        }
        if records.is_empty() {
            return Err(Error::Data("loan CSV has no records".into()));
        }
        Ok(Self { feature_names, records })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
        header.extend(self.feature_names.iter().cloned());
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.monthly_payment.to_string(),
                r.term.to_string(),
                r.monthly_libor.to_string(),
                r.loan_amount.to_string(),
                r.apr.to_string(),
                (r.contracted as u8).to_string(),
            ];
            row.extend(r.features.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|f| f == name)
    }

    pub fn feature_rows(&self) -> Vec<Vec<f64>> {
        self.records.iter().map(|r| r.features.clone()).collect()
    }

    /// Splits into the first `fraction` of records and the rest.
    pub fn split(&self, fraction: f64) -> (Self, Self) {
        let k = ((self.records.len() as f64) * fraction).round() as usize;
        let k = k.clamp(1, self.records.len().saturating_sub(1).max(1));
        (
            Self { feature_names: self.feature_names.clone(), records: self.records[..k].to_vec() },
            Self { feature_names: self.feature_names.clone(), records: self.records[k..].to_vec() },
        )
    }
}

/// Net present value of the payment stream minus the amount lent:
/// `MP · Σ_{τ=1}^{term} (1 + libor)^{−τ} − amount`.
pub fn compute_price(record: &LoanRecord) -> Result<f64> {
    record.validate()?;
    let r = record.monthly_libor;
    let annuity = if r == 0.0 {
        record.term as f64
    } else {
        (1.0 - (1.0 + r).powi(-(record.term as i32))) / r
    };
    Ok(record.monthly_payment * annuity - record.loan_amount)
}

/// Monthly payment that amortizes `amount` over `term` months at `apr`.
pub fn amortized_payment(amount: f64, apr: f64, term: u32) -> f64 {
    let r = apr / 12.0;
    if r == 0.0 {
        amount / term as f64
    } else {
        amount * r / (1.0 - (1.0 + r).powi(-(term as i32)))
    }
}

/// Acceptance model `P(accept | x, p) = σ(α'x̃ + (β'x̃)·p)` with
/// `x̃ = (1, x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemandModel {
    pub alpha_coef: Vec<f64>,
    pub beta_coef: Vec<f64>,
    pub l2_penalty: f64,
    /// Mean held-out log loss per candidate penalty, in input order.
    #[serde(default)]
    pub cv_losses: Vec<(f64, f64)>,
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

impl DemandModel {
    pub fn logit(&self, x: &[f64], p: f64) -> f64 {
        let a = self.alpha_coef[0] + linalg::dot(&self.alpha_coef[1..], x);
        let b = self.beta_coef[0] + linalg::dot(&self.beta_coef[1..], x);
        a + b * p
    }

    pub fn acceptance(&self, x: &[f64], p: f64) -> f64 {
        sigmoid(self.logit(x, p))
    }
}

/// One demand observation: covariates, price and acceptance.
#[derive(Clone, Debug, PartialEq)]
pub struct DemandObs {
    pub x: Vec<f64>,
    pub p: f64,
    pub accepted: bool,
}

/// Smallest penalty used; keeps separable data finite.
pub const PENALTY_FLOOR: f64 = 1e-6;

fn design_row(x: &[f64], p: f64) -> Vec<f64> {
    let mut z = Vec::with_capacity(2 * x.len() + 2);
    z.push(1.0);
    z.extend_from_slice(x);
    z.push(p);
    z.extend(x.iter().map(|v| v * p));
    z
}

/// Minimizes mean log loss plus `penalty·‖coef‖²` by Newton's method with
/// backtracking until the gradient's max norm is below `1e-8`.
fn newton_logistic(z: &DMatrix<f64>, y: &[f64], penalty: f64) -> Result<DVector<f64>> {
    let (n, d) = z.shape();
    let nf = n as f64;
    let loss = |c: &DVector<f64>| -> f64 {
        let eta = z * c;
        let ll: f64 = eta
            .iter()
            .zip(y)
            .map(|(e, yi)| {
                // log(1 + exp(e)) − y e, computed stably
                let sp = if *e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
                sp - yi * e
            })
            .sum();
        ll / nf + penalty * c.norm_squared()
    };
    let mut c = DVector::zeros(d);
    let mut current = loss(&c);
    for _ in 0..200 {
        let eta = z * &c;
        let mu: Vec<f64> = eta.iter().map(|e| sigmoid(*e)).collect();
        let resid = DVector::from_fn(n, |i, _| mu[i] - y[i]);
        let grad = z.tr_mul(&resid) / nf + &c * (2.0 * penalty);
        if grad.amax() < 1e-8 {
            return Ok(c);
        }
        let mut zw = z.clone();
        for i in 0..n {
            let w = mu[i] * (1.0 - mu[i]);
            zw.row_mut(i).scale_mut(w);
        }
        let mut h = z.tr_mul(&zw) / nf;
        for j in 0..d {
            h[(j, j)] += 2.0 * penalty;
        }
        let step = linalg::cholesky(h)?.solve(&(-&grad));
        let mut t = 1.0;
        loop {
            let cand = &c + &step * t;
            let v = loss(&cand);
            if v <= current + 1e-4 * t * grad.dot(&step) || t < 1e-12 {
                c = cand;
                current = v;
                break;
            }
            t *= 0.5;
        }
    }
    Ok(c)
}

fn log_loss(z: &DMatrix<f64>, y: &[f64], c: &DVector<f64>) -> f64 {
    let eta = z * c;
    let eps = 1e-15;
    eta.iter()
        .zip(y)
        .map(|(e, yi)| {
            let p = sigmoid(*e).clamp(eps, 1.0 - eps);
            -(yi * p.ln() + (1.0 - yi) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / y.len() as f64
}

/// Penalized logistic demand fit; the penalty is chosen from `penalties` by
/// `folds`-fold cross-validated log loss with a seeded fold assignment.
pub fn fit_demand(obs: &[DemandObs], penalties: &[f64], folds: usize, seed: u64) -> Result<DemandModel> {
    if folds < 2 || obs.len() < folds {
        return Err(Error::InvalidParameter(format!("need at least {folds} >= 2 observations for CV")));
    }
    if penalties.is_empty() {
        return Err(Error::InvalidParameter("penalty grid is empty".into()));
    }
    let q = obs[0].x.len();
    let z = DMatrix::from_fn(obs.len(), 2 * q + 2, |i, j| design_row(&obs[i].x, obs[i].p)[j]);
    let y: Vec<f64> = obs.iter().map(|o| o.accepted as u8 as f64).collect();
    let mut order: Vec<usize> = (0..obs.len()).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let mut fold_of = vec![0; obs.len()];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % folds;
    }
    let mut cv_losses = Vec::new();
    for &pen in penalties {
        let pen = pen.max(PENALTY_FLOOR);
        let mut total = 0.0;
        for k in 0..folds {
            let train: Vec<usize> = (0..obs.len()).filter(|i| fold_of[*i] != k).collect();
            let test: Vec<usize> = (0..obs.len()).filter(|i| fold_of[*i] == k).collect();
            let ztr = z.select_rows(&train);
            let ytr: Vec<f64> = train.iter().map(|&i| y[i]).collect();
            let c = newton_logistic(&ztr, &ytr, pen)?;
            let yte: Vec<f64> = test.iter().map(|&i| y[i]).collect();
            total += log_loss(&z.select_rows(&test), &yte, &c) * test.len() as f64;
        }
        cv_losses.push((pen, total / obs.len() as f64));
    }
    let best = cv_losses
        .iter()
        .copied()
        .fold((f64::NAN, f64::INFINITY), |b, c| if c.1 < b.1 { c } else { b })
        .0;
    let best = if best.is_nan() { penalties[0].max(PENALTY_FLOOR) } else { best };
    let c = newton_logistic(&z, &y, best)?;
    Ok(DemandModel {
        alpha_coef: (0..=q).map(|j| c[j]).collect(),
        beta_coef: (0..=q).map(|j| c[q + 1 + j]).collect(),
        l2_penalty: best,
        cv_losses,
    })
}

/// `p · P(accept | x, p)`.
pub fn expected_revenue(model: &DemandModel, x: &[f64], p: f64) -> f64 {
    p * model.acceptance(x, p)
}

/// Revenue-maximizing price on `[p1, p2]`: grid scan, then golden-section
/// refinement around the best grid point.
pub fn demand_optimal_price(model: &DemandModel, x: &[f64], p1: f64, p2: f64, grid: usize) -> f64 {
    let m = grid.max(3);
    let step = (p2 - p1) / (m - 1) as f64;
    let rev = |p: f64| expected_revenue(model, x, p);
    let (mut bi, mut bv) = (0, f64::NEG_INFINITY);
    for i in 0..m {
        let v = rev(p1 + step * i as f64);
        if v > bv {
            bi = i;
            bv = v;
        }
    }
    let best_grid = p1 + step * bi as f64;
    let (mut a, mut b) = ((best_grid - step).max(p1), (best_grid + step).min(p2));
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    for _ in 0..60 {
        if rev(c) > rev(d) {
            b = d;
        } else {
            a = c;
        }
        c = b - phi * (b - a);
        d = a + phi * (b - a);
    }
    let refined = 0.5 * (a + b);
    if rev(refined) >= bv { refined } else { best_grid }
}

/// Mean expected revenue of each policy, plus the demand-optimal benchmark
/// and the recorded prices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemandEvaluation {
    pub columns: Vec<(String, f64)>,
}

impl DemandEvaluation {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.columns.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["policy", "mean_revenue"])?;
        for (n, v) in &self.columns {
            w.write_record([n.clone(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Scores policies on `obs` under the demand model. The `optimal` column
/// prices each record at its own revenue maximum over `[p1, p2]`;
/// `historical` uses the recorded prices.
pub fn evaluate_on_demand(
    model: &DemandModel,
    policies: &[(&str, &dyn Pricing)],
    obs: &[DemandObs],
    p1: f64,
    p2: f64,
) -> Result<DemandEvaluation> {
    if obs.is_empty() {
        return Err(Error::Empty("no records to evaluate".into()));
    }
    let n = obs.len() as f64;
    let mean = |f: &dyn Fn(&DemandObs) -> f64| obs.iter().map(f).sum::<f64>() / n;
    let mut columns = vec![
        ("optimal".to_string(), mean(&|o| expected_revenue(model, &o.x, demand_optimal_price(model, &o.x, p1, p2, 201)))),
        ("historical".to_string(), mean(&|o| expected_revenue(model, &o.x, o.p))),
    ];
    for (name, pol) in policies {
        columns.push((name.to_string(), mean(&|o| expected_revenue(model, &o.x, pol.price(&o.x)))));
    }
    Ok(DemandEvaluation { columns })
}

/// One point of a partial dependence curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdpPoint {
    /// Grid value in standard deviations from the feature mean.
    pub z: f64,
    /// The same value in feature units.
    pub value: f64,
    pub mean_price: f64,
}

/// Average policy price with feature `j` set to `mean_j + z·sd_j` in every
/// row, for each `z` in `grid`.
pub fn partial_dependence(policy: &dyn Pricing, rows: &[Vec<f64>], j: usize, grid: &[f64]) -> Result<Vec<PdpPoint>> {
    if rows.is_empty() {
        return Err(Error::Empty("no rows for partial dependence".into()));
    }
    if j >= rows[0].len() {
        return Err(Error::InvalidParameter(format!("feature index {j} out of range")));
    }
    let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
    let m = linalg::mean(&col);
    let sd = {
        let s = linalg::std_dev(&col);
        if s > 0.0 { s } else { 1.0 }
    };
    Ok(grid
        .iter()
        .map(|&z| {
            let value = m + z * sd;
            let mean_price = rows
                .iter()
                .map(|r| {
                    let mut x = r.clone();
                    x[j] = value;
                    policy.price(&x)
                })
                .sum::<f64>()
                / rows.len() as f64;
            PdpPoint { z, value, mean_price }
        })
        .collect())
}

pub fn write_pdp<W: Write>(points: &[PdpPoint], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

/// Prices are expressed in thousands of dollars inside the pricing pipeline.
pub const PRICE_UNIT: f64 = 1000.0;

/// Demand observations `(features, price in $1000, contracted)`.
pub fn demand_observations(data: &LoanData) -> Result<Vec<DemandObs>> {
    data.records
        .iter()
        .map(|r| Ok(DemandObs { x: r.features.clone(), p: compute_price(r)? / PRICE_UNIT, accepted: r.contracted }))
        .collect()
}

/// Estimation dataset for pricing: `Y = contracted · price`, `P = price`
/// (both in $1000), `G = APR`, `X = features`.
pub fn pricing_dataset(data: &LoanData) -> Result<Dataset> {
    let samples = data
        .records
        .iter()
        .map(|r| {
            let p = compute_price(r)? / PRICE_UNIT;
            Ok(Sample::new(if r.contracted { p } else { 0.0 }, r.features.clone(), r.apr, p))
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::from_samples(samples)
}

/// Parameters of the synthetic loan generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoanSimParams {
    /// Demand intercepts and slopes on standardized `(fico, amount)`.
    pub alpha: [f64; 3],
    pub beta: [f64; 3],
    /// Logit shift per standard deviation of the latent dealer markup.
    pub markup_effect: f64,
    /// Financed fee as a fraction of the amount, and its spread per unit of
    /// the latent markup.
    pub fee_rate: f64,
    pub fee_spread: f64,
    pub monthly_libor: f64,
}

impl Default for LoanSimParams {
    fn default() -> Self {
        Self {
            alpha: [1.5, 0.3, 0.2],
            beta: [-0.9, 0.15, -0.1],
            markup_effect: 0.8,
            fee_rate: 0.04,
            fee_spread: 0.02,
            monthly_libor: 0.002,
        }
    }
}

/// Draws synthetic loan applications. Features are standardized FICO score
/// and loan amount. The APR (the instrument) follows the features plus an
/// independent rate shock. A latent dealer markup raises the financed fee,
/// hence the price, and also raises acceptance, so prices are confounded.
/// Acceptance follows a logistic demand in `(features, price in $1000)` plus
/// the markup shift.
pub fn generate_loans(params: &LoanSimParams, n: usize, seed: u64) -> Result<LoanData> {
    if n == 0 {
        return Err(Error::Empty("requested zero loans".into()));
    }
    let mut rng = rng_from_seed(seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let unit = Uniform::new(0.0, 1.0).expect("unit interval");
    let terms = [36u32, 48, 60, 72];
    let term_pick = Uniform::new(0, terms.len()).expect("nonempty");
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let fico_z: f64 = std_normal.sample(&mut rng);
        let amount_z: f64 = std_normal.sample(&mut rng);
        let amount = (10.0 + 0.35 * amount_z).exp();
        let term = terms[term_pick.sample(&mut rng)];
        let markup: f64 = std_normal.sample(&mut rng);
        let rate_shock: f64 = std_normal.sample(&mut rng);
        let apr = (0.07 - 0.01 * fico_z + 0.01 * rate_shock).max(0.005);
        let financed = amount * (1.0 + (params.fee_rate + params.fee_spread * markup).max(0.0));
        let rec = LoanRecord {
            monthly_payment: amortized_payment(financed, apr, term),
            term,
            monthly_libor: params.monthly_libor,
            loan_amount: amount,
            apr,
            contracted: false,
            features: vec![fico_z, amount_z],
        };
        let p = compute_price(&rec)? / PRICE_UNIT;
        let x = [1.0, fico_z, amount_z];
        let logit = linalg::dot(&params.alpha, &x) + linalg::dot(&params.beta, &x) * p + params.markup_effect * markup;
        let u: f64 = unit.sample(&mut rng);
        records.push(LoanRecord { contracted: u < sigmoid(logit), ..rec });
    }
    Ok(LoanData { feature_names: vec!["fico".into(), "amount".into()], records })
}

/// Settings for learning pricing policies from loan records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoanPolicyConfig {
    pub print: crate::minimax::MinimaxConfig,
    pub regression: super::experiment::RegressionConfig,
    /// Price bounds are these quantiles of the observed prices.
    pub price_quantiles: [f64; 2],
    pub floor_c: f64,
}

impl Default for LoanPolicyConfig {
    fn default() -> Self {
        Self {
            print: super::experiment::default_print_config(),
            regression: super::experiment::RegressionConfig::default(),
            price_quantiles: [0.01, 0.99],
            floor_c: crate::policy::DEFAULT_FLOOR_C,
        }
    }
}

/// Fits the minimax estimator and the regression baseline on loan records
/// and returns `[("print", ..), ("regression", ..)]`, prices in $1000.
pub fn fit_loan_policies(train: &LoanData, config: &LoanPolicyConfig) -> Result<Vec<(String, crate::policy::PricingPolicy)>> {
    let data = pricing_dataset(train)?;
    let prices: Vec<f64> = data.samples().iter().map(|z| z.p).collect();
    let p1 = linalg::quantile(&prices, config.price_quantiles[0]).max(0.0);
    let p2 = linalg::quantile(&prices, config.price_quantiles[1]);
    if !(p2 > p1) {
        return Err(Error::Data("observed prices have no spread".into()));
    }
    let fit = crate::minimax::fit(&data, &config.print)?;
    let print = crate::policy::extract_policy(&fit.alpha_hat, p1, p2, config.floor_c)?;
    let (mx, mxg) = crate::minimax::learner_maps(&data, &config.regression.features)?;
    let regression = crate::baselines::fit_regression_baseline(&data, &mx, &mxg, config.regression.ridge)?.policy(p1, p2, config.floor_c)?;
    Ok(vec![("print".into(), print), ("regression".into(), regression)])
}
