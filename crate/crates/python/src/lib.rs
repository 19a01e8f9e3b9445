//! Python bindings: simulate data, fit the minimax pricing estimator and the
//! baselines, evaluate regret, and price loans.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ivprice::harness::experiment::{fit_method, ExperimentConfig, Method};
use ivprice::harness::loan::{self, LoanRecord};
use ivprice::policy::{extract_policy, DEFAULT_FLOOR_C};
use ivprice::scm::{self, Dataset, Sample, SimParams};
use ivprice::{minimax, Error, MinimaxConfig, PricingPolicy};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InvalidParameter(_) | Error::Json(_) | Error::Data(_) | Error::Empty(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn params_from(json: Option<&str>) -> PyResult<SimParams> {
    let p: SimParams = match json {
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => SimParams::default(),
    };
    p.validate().map_err(to_py)?;
    Ok(p)
}

fn dataset_from(y: Vec<f64>, x: Vec<Vec<f64>>, g: Vec<f64>, p: Vec<f64>) -> PyResult<Dataset> {
    let n = y.len();
    if x.len() != n || g.len() != n || p.len() != n {
        return Err(PyValueError::new_err("y, x, g and p must have the same length"));
    }
    let samples = (0..n).map(|i| Sample::new(y[i], x[i].clone(), g[i], p[i])).collect();
    Dataset::from_samples(samples).map_err(to_py)
}

/// Draws `n` samples; returns a dict with keys `y`, `x`, `g`, `p`.
#[pyfunction]
#[pyo3(signature = (n, seed, params_json=None))]
fn simulate<'py>(py: Python<'py>, n: usize, seed: u64, params_json: Option<&str>) -> PyResult<Bound<'py, PyDict>> {
    let params = params_from(params_json)?;
    let data = scm::generate_dataset(&params, n, seed).map_err(to_py)?;
    let s = data.samples();
    let out = PyDict::new(py);
    out.set_item("y", s.iter().map(|z| z.y).collect::<Vec<_>>())?;
    out.set_item("x", s.iter().map(|z| z.x.clone()).collect::<Vec<_>>())?;
    out.set_item("g", s.iter().map(|z| z.g).collect::<Vec<_>>())?;
    out.set_item("p", s.iter().map(|z| z.p).collect::<Vec<_>>())?;
    Ok(out)
}

/// Revenue-maximizing price under the simulator's true coefficients.
#[pyfunction]
#[pyo3(signature = (x, params_json=None))]
fn oracle_price(x: Vec<f64>, params_json: Option<&str>) -> PyResult<f64> {
    let params = params_from(params_json)?;
    if x.len() != 2 {
        return Err(PyValueError::new_err("the simulator has two covariates"));
    }
    Ok(scm::oracle_policy(&params, &x))
}

/// Fits the minimax estimator and returns the pricing policy as JSON.
#[pyfunction]
#[pyo3(signature = (y, x, g, p, config_json=None, p1=0.0, p2=10.0))]
fn fit_print(
    py: Python<'_>,
    y: Vec<f64>,
    x: Vec<Vec<f64>>,
    g: Vec<f64>,
    p: Vec<f64>,
    config_json: Option<&str>,
    p1: f64,
    p2: f64,
) -> PyResult<String> {
    let data = dataset_from(y, x, g, p)?;
    let config = match config_json {
        Some(s) => MinimaxConfig::from_json(s).map_err(to_py)?,
        None => MinimaxConfig::default(),
    };
    let fit = py.detach(|| minimax::fit(&data, &config)).map_err(to_py)?;
    extract_policy(&fit.alpha_hat, p1, p2, DEFAULT_FLOOR_C).and_then(|pol| pol.to_json()).map_err(to_py)
}

/// Fits one of `print`, `regression`, `kernel_ips` with the experiment
/// defaults and returns the policy as JSON.
#[pyfunction]
fn fit_baseline(py: Python<'_>, method: &str, y: Vec<f64>, x: Vec<Vec<f64>>, g: Vec<f64>, p: Vec<f64>) -> PyResult<String> {
    let m = Method::parse(method).ok_or_else(|| PyValueError::new_err(format!("unknown method {method}")))?;
    let data = dataset_from(y, x, g, p)?;
    let config = ExperimentConfig::default();
    let policy = py.detach(|| fit_method(m, &data, &config)).map_err(to_py)?;
    policy.to_json().map_err(to_py)
}

/// Price a JSON policy assigns to `x`.
#[pyfunction]
fn price(policy_json: &str, x: Vec<f64>) -> PyResult<f64> {
    let policy = PricingPolicy::from_json(policy_json).map_err(to_py)?;
    Ok(policy.price_for(&x))
}

/// Monte Carlo regret of a JSON policy against the oracle.
#[pyfunction]
#[pyo3(signature = (policy_json, n_mc=10_000, seed=0, params_json=None))]
fn regret(policy_json: &str, n_mc: usize, seed: u64, params_json: Option<&str>) -> PyResult<f64> {
    let params = params_from(params_json)?;
    let policy = PricingPolicy::from_json(policy_json).map_err(to_py)?;
    scm::regret(&params, &policy, n_mc, seed).map_err(to_py)
}

/// Net present value of a loan's payments minus the amount lent.
#[pyfunction]
fn loan_price(monthly_payment: f64, term: u32, monthly_libor: f64, loan_amount: f64) -> PyResult<f64> {
    let rec = LoanRecord { monthly_payment, term, monthly_libor, loan_amount, apr: 0.0, contracted: false, features: vec![] };
    loan::compute_price(&rec).map_err(to_py)
}

#[pymodule]
fn pyivprice(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_price, m)?)?;
    m.add_function(wrap_pyfunction!(fit_print, m)?)?;
    m.add_function(wrap_pyfunction!(fit_baseline, m)?)?;
    m.add_function(wrap_pyfunction!(price, m)?)?;
    m.add_function(wrap_pyfunction!(regret, m)?)?;
    m.add_function(wrap_pyfunction!(loan_price, m)?)?;
    Ok(())
}
