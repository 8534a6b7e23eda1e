use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{CoeffIndex, SparsityPattern, StackedDesign, VarModel};
use crate::error::{Error, Result};
use crate::linalg;
use crate::series::MultiSeries;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MleOptions {
    /// Stop when the largest absolute coefficient change falls below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Number of leading observations conditioned on; defaults to the order.
    pub presample: Option<usize>,
}

impl Default for MleOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200,
            presample: None,
        }
    }
}

/// Result of constrained Gaussian maximum likelihood.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstrainedFit {
    pub model: VarModel,
    pub pattern: SparsityPattern,
    /// Maximized conditional Gaussian log-likelihood (with the 2 pi constant).
    pub loglik: f64,
    /// Free coefficients in pattern order.
    pub gamma: Vec<f64>,
    /// Finite-sample covariance of the free-coefficient estimator,
    /// `[R'(L L' (x) Sigma^{-1}) R]^{-1}`.
    pub asymp_cov: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub presample: usize,
    pub n_obs: usize,
    /// `-2 loglik` after each outer iteration.
    pub neg2_loglik_trace: Vec<f64>,
}

impl ConstrainedFit {
    pub fn neg2_loglik(&self) -> f64 {
        -2.0 * self.loglik
    }
}

/// Sufficient statistics of a stacked design.
#[derive(Debug, Clone)]
pub(crate) struct Moments {
    pub yy: DMatrix<f64>,
    pub yl: DMatrix<f64>,
    pub ll: DMatrix<f64>,
    pub n: usize,
}

impl Moments {
    pub fn new(d: &StackedDesign) -> Self {
        Self {
            yy: &d.response * d.response.transpose(),
            yl: &d.response * d.lagged.transpose(),
            ll: &d.lagged * d.lagged.transpose(),
            n: d.n_obs(),
        }
    }

    /// `(Y - A L)(Y - A L)'` from the moments.
    pub fn residual_cross_product(&self, stacked: &DMatrix<f64>) -> DMatrix<f64> {
        if stacked.ncols() == 0 {
            return self.yy.clone();
        }
        let ayl = stacked * self.yl.transpose();
        let s = &self.yy - &ayl - ayl.transpose() + stacked * &self.ll * stacked.transpose();
        linalg::symmetrize(&s)
    }
}

fn stacked_from(pattern: &SparsityPattern, gamma: &DVector<f64>) -> DMatrix<f64> {
    let k = pattern.dim();
    let mut a = DMatrix::zeros(k, k * pattern.order());
    for (e, g) in pattern.entries().iter().zip(gamma.iter()) {
        a[(e.row, e.regressor(k))] = *g;
    }
    a
}

/// `R'(L L' (x) W) R` for a pattern.
fn weighted_gram(pattern: &SparsityPattern, ll: &DMatrix<f64>, w: &DMatrix<f64>) -> DMatrix<f64> {
    let k = pattern.dim();
    let e = pattern.entries();
    DMatrix::from_fn(e.len(), e.len(), |u, v| {
        ll[(e[u].regressor(k), e[v].regressor(k))] * w[(e[u].row, e[v].row)]
    })
}

pub(crate) fn gaussian_loglik(n: usize, k: usize, logdet: f64, quad: f64) -> f64 {
    -0.5 * (n as f64) * (k as f64 * (2.0 * PI).ln() + logdet) - 0.5 * quad
}

/// Constrained MLE on a prepared design; `means` become the model mean.
pub(crate) fn fit_on_moments(
    mom: &Moments,
    pattern: &SparsityPattern,
    means: &DVector<f64>,
    presample: usize,
    opts: &MleOptions,
) -> Result<ConstrainedFit> {
    let k = pattern.dim();
    let n = mom.n;
    let m = pattern.len();
    if n <= k {
        return Err(Error::Estimation(format!("{n} observations are too few to estimate a {k}x{k} covariance")));
    }
    let mut weight = DMatrix::<f64>::identity(k, k);
    let mut gamma = DVector::<f64>::zeros(m);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut sigma = DMatrix::zeros(k, k);
    let mut logdet = 0.0;
    let max_iter = opts.max_iter.max(1);

    while iterations < max_iter {
        iterations += 1;
        let new_gamma = if m == 0 {
            DVector::zeros(0)
        } else {
            let h = weighted_gram(pattern, &mom.ll, &weight);
            let wyl = &weight * &mom.yl;
            let rhs = DVector::from_iterator(m, pattern.entries().iter().map(|e| wyl[(e.row, e.regressor(k))]));
            let chol = Cholesky::new(h).ok_or_else(|| {
                Error::Estimation("constrained information matrix is rank deficient".into())
            })?;
            chol.solve(&rhs)
        };
        let change = if iterations == 1 {
            f64::INFINITY
        } else {
            (&new_gamma - &gamma).amax()
        };
        gamma = new_gamma;

        let s = mom.residual_cross_product(&stacked_from(pattern, &gamma));
        sigma = s / n as f64;
        let (inv, ld) = linalg::spd_inverse_logdet(&sigma, "residual covariance")
            .map_err(|_| Error::Estimation("residual covariance is singular".into()))?;
        weight = inv;
        logdet = ld;
        trace.push(-2.0 * gaussian_loglik(n, k, logdet, (n * k) as f64));

        // with no constraints (or no coefficients) GLS does not depend on the weight
        if m == 0 || pattern.is_full() || change < opts.tol {
            converged = true;
            break;
        }
    }

    let asymp_cov = if m == 0 {
        DMatrix::zeros(0, 0)
    } else {
        let h = weighted_gram(pattern, &mom.ll, &weight);
        Cholesky::new(h)
            .map(|c| linalg::symmetrize(&c.inverse()))
            .ok_or_else(|| Error::Estimation("constrained information matrix is rank deficient".into()))?
    };
    let model = VarModel::new(pattern.scatter(&gamma), sigma, means.clone())
        .map_err(|e| Error::Estimation(format!("fitted model invalid: {e}")))?;
    Ok(ConstrainedFit {
        model,
        pattern: pattern.clone(),
        loglik: gaussian_loglik(n, k, logdet, (n * k) as f64),
        gamma: gamma.iter().copied().collect(),
        asymp_cov,
        iterations,
        converged,
        presample,
        n_obs: n,
        neg2_loglik_trace: trace,
    })
}

/// Gaussian MLE of a VAR(p) whose non-zero coefficients are restricted to
/// `pattern`, alternating GLS coefficient updates with the residual
/// covariance update (divisor `T - presample`), starting from `Sigma = I`.
pub fn constrained_mle(
    series: &MultiSeries,
    order: usize,
    pattern: &SparsityPattern,
    opts: &MleOptions,
) -> Result<ConstrainedFit> {
    if pattern.order() != order || pattern.dim() != series.dim() {
        return Err(Error::invalid(format!(
            "pattern is for p = {}, K = {} but fit requested p = {order}, K = {}",
            pattern.order(),
            pattern.dim(),
            series.dim()
        )));
    }
    let presample = opts.presample.unwrap_or(order);
    let (data, means) = series.centered();
    let design = StackedDesign::new(&data, order, presample)?;
    fit_on_moments(&Moments::new(&design), pattern, &means, presample, opts)
}

/// Conditional Gaussian log-likelihood given the first `p` observations.
pub fn log_likelihood(model: &VarModel, series: &MultiSeries) -> Result<f64> {
    log_likelihood_conditional(model, series, model.order())
}

/// Conditional Gaussian log-likelihood of observations `presample..T`.
pub fn log_likelihood_conditional(model: &VarModel, series: &MultiSeries, presample: usize) -> Result<f64> {
    if model.dim() != series.dim() {
        return Err(Error::invalid("model and series dimensions differ"));
    }
    let mut data = series.values().clone();
    for (j, mut col) in data.column_iter_mut().enumerate() {
        col.add_scalar_mut(-model.mean()[j]);
    }
    let design = StackedDesign::new(&data, model.order(), presample)?;
    let resid = design.residuals(&model.stacked_coeffs());
    let chol = linalg::cholesky(model.noise_cov(), "noise covariance")?;
    let whitened = chol.l().solve_lower_triangular(&resid).ok_or_else(|| Error::Domain("noise covariance is singular".into()))?;
    let quad = whitened.norm_squared();
    Ok(gaussian_loglik(design.n_obs(), model.dim(), chol.ln_determinant(), quad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TStat {
    pub index: CoeffIndex,
    pub estimate: f64,
    pub std_error: f64,
    pub t: f64,
}

/// t-ratios of the free coefficients of a constrained fit, with standard
/// errors from the asymptotic covariance `R[R'(Gamma(0) (x) Sigma^{-1})R]^{-1}R'`
/// scaled by the number of observations.
pub fn t_statistics(fit: &ConstrainedFit, series: &MultiSeries) -> Result<Vec<TStat>> {
    if !fit.converged {
        return Err(Error::Inference("fit did not converge".into()));
    }
    let model = &fit.model;
    let pattern = &fit.pattern;
    if series.dim() != pattern.dim() {
        return Err(Error::invalid("series dimension does not match fit"));
    }
    if pattern.is_empty() {
        return Ok(Vec::new());
    }
    let mut data = series.values().clone();
    for (j, mut col) in data.column_iter_mut().enumerate() {
        col.add_scalar_mut(-model.mean()[j]);
    }
    let design = StackedDesign::new(&data, pattern.order(), fit.presample)?;
    let n = design.n_obs() as f64;
    let gamma0 = (&design.lagged * design.lagged.transpose()) / n;
    let (sigma_inv, _) = linalg::spd_inverse_logdet(model.noise_cov(), "noise covariance")
        .map_err(|e| Error::Inference(e.to_string()))?;
    let inner = weighted_gram(pattern, &gamma0, &sigma_inv);
    let cov = Cholesky::new(inner)
        .ok_or_else(|| Error::Inference("asymptotic information matrix is singular".into()))?
        .inverse()
        / n;
    Ok(pattern
        .entries()
        .iter()
        .enumerate()
        .map(|(u, &index)| {
            let estimate = model.get(index);
            let std_error = cov[(u, u)].max(0.0).sqrt();
            let t = if estimate == 0.0 { 0.0 } else { estimate / std_error };
            TStat {
                index,
                estimate,
                std_error,
                t,
            }
        })
        .collect())
}
