//! Dense linear-algebra helpers shared by the estimators.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Smallest ridge used when an unregularized least-squares problem turns out
/// to be rank deficient.
pub const RIDGE_FLOOR: f64 = 1e-10;

/// Factorized ridge least-squares problem
/// `min_w (1/n)‖X w − y‖² + ridge ‖w‖²`, solved through a QR factorization of
/// the augmented design `[X/√n; √ridge·I]` so that small ridges stay accurate.
pub struct RidgeSolver {
    q_t: DMatrix<f64>,
    r: DMatrix<f64>,
    n: usize,
    p: usize,
}

impl RidgeSolver {
    pub fn new(design: &DMatrix<f64>, ridge: f64) -> Result<Self> {
        if !(ridge >= 0.0) || !ridge.is_finite() {
            return Err(Error::InvalidParameter(format!("ridge must be finite and >= 0, got {ridge}")));
        }
        match Self::factor(design, ridge) {
            Ok(s) => Ok(s),
            Err(_) if ridge < RIDGE_FLOOR => Self::factor(design, RIDGE_FLOOR),
            Err(e) => Err(e),
        }
    }

    fn factor(design: &DMatrix<f64>, ridge: f64) -> Result<Self> {
        let (n, p) = design.shape();
        if n == 0 || p == 0 {
            return Err(Error::Empty("ridge design has no rows or columns".into()));
        }
        let scale = 1.0 / (n as f64).sqrt();
        let mut aug = DMatrix::<f64>::zeros(n + p, p);
        aug.view_mut((0, 0), (n, p)).copy_from(&(design * scale));
        let sr = ridge.sqrt();
        for j in 0..p {
            aug[(n + j, j)] = sr;
        }
        let qr = aug.qr();
        let r = qr.r();
        let max_diag = (0..p).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
        if !(max_diag > 0.0) || (0..p).any(|j| r[(j, j)].abs() <= 1e-13 * max_diag) {
            return Err(Error::Singular("ridge normal equations are rank deficient".into()));
        }
        let q_t = qr.q().transpose();
        Ok(Self { q_t, r, n, p })
    }

    pub fn solve(&self, target: &[f64]) -> DVector<f64> {
        assert_eq!(target.len(), self.n, "target length must match design rows");
        let scale = 1.0 / (self.n as f64).sqrt();
        let q_top = self.q_t.view((0, 0), (self.p, self.n));
        let b = DVector::from_iterator(self.n, target.iter().map(|t| t * scale));
        let rhs = q_top * b;
        self.r
            .solve_upper_triangular(&rhs)
            .expect("triangular factor checked nonsingular at construction")
    }
}

/// One-shot ridge regression.
pub fn ridge(design: &DMatrix<f64>, target: &[f64], ridge: f64) -> Result<DVector<f64>> {
    Ok(RidgeSolver::new(design, ridge)?.solve(target))
}

/// Cholesky factorization of a symmetric positive-definite matrix.
pub fn cholesky(m: DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    m.cholesky()
        .ok_or_else(|| Error::Singular("matrix is not positive definite".into()))
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n − 1 denominator).
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Linear-interpolated quantile, `q` in [0, 1]. NaNs are ignored.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = xs.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn median(xs: &[f64]) -> f64 {
    quantile(xs, 0.5)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
