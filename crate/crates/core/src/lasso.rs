//! Lasso-penalized VAR fitting.
//!
//! Both losses reduce to the quadratic program
//! `alpha' G alpha - 2 b' alpha + c + lambda sum_j w_j |alpha_j|` with
//! `G = L L' (x) W` and `b = vec(W Y L')`. Lasso-SS uses `W = I`; Lasso-LL
//! alternates a solve with `W = S S`, `S = Sigma^{-1/2}` (symmetric
//! eigendecomposition form), and the residual covariance update.
//! `alpha = vec([A_1 ... A_p])` is column-stacked, so the coordinate of
//! `A_k(i, j)` is `((k - 1) K + j) K + i`.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::series::MultiSeries;
use crate::var::mle::Moments;
use crate::var::{StackedDesign, VarModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "SS")]
    SumOfSquares,
    #[serde(rename = "LL")]
    LogLikelihood,
}

impl LossKind {
    pub fn label(self) -> &'static str {
        match self {
            LossKind::SumOfSquares => "lasso_ss",
            LossKind::LogLikelihood => "lasso_ll",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LassoOptions {
    /// Coordinate descent stops once the largest coefficient change is below this
    /// and the KKT residual is below `kkt_tol`.
    pub tol: f64,
    pub kkt_tol: f64,
    pub max_sweeps: usize,
    /// Outer tolerance on coefficient change for Lasso-LL.
    pub outer_tol: f64,
    pub max_outer: usize,
    /// Penalize `s_j |alpha_j|` with `s_j` the regressor's root mean square,
    /// which is equivalent to standardizing the regressors.
    pub standardize: bool,
    /// Conditioning points; defaults to the order.
    pub presample: Option<usize>,
}

impl Default for LassoOptions {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            kkt_tol: 1e-6,
            max_sweeps: 10_000,
            outer_tol: 1e-6,
            max_outer: 100,
            standardize: false,
            presample: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LassoFit {
    /// Coefficients are exactly zero wherever the solver zeroed them.
    pub model: VarModel,
    pub lambda: f64,
    pub loss_kind: LossKind,
    /// Final value of the penalized target.
    pub objective: f64,
    pub cv_error: Option<f64>,
    pub converged: bool,
    pub sweeps: usize,
    pub outer_iterations: usize,
    pub presample: usize,
    pub n_obs: usize,
    /// Weight matrix `W` of the last coordinate descent solve.
    pub weight: DMatrix<f64>,
    pub penalty_weights: Vec<f64>,
    /// Target after each outer iteration (Lasso-LL) or sweep (Lasso-SS).
    pub objective_trace: Vec<f64>,
    pub warnings: Vec<String>,
}

impl LassoFit {
    pub fn nonzero_count(&self) -> usize {
        self.model.nonzero_count()
    }

    /// Largest violation of the subgradient conditions of the final solve,
    /// recomputed from data.
    pub fn kkt_residual(&self, series: &MultiSeries) -> Result<f64> {
        let order = self.model.order();
        let (data, _) = series.centered();
        let mom = Moments::new(&StackedDesign::new(&data, order, self.presample)?);
        let prob = Quadratic::new(&mom, self.weight.clone(), self.penalty_weights.clone());
        let alpha: Vec<f64> = self.model.stacked_coeffs().as_slice().to_vec();
        let q = prob.gram_times(&alpha);
        Ok(prob.kkt(&alpha, &q, self.lambda))
    }
}

/// Quadratic form with implicit Kronecker Gram matrix.
#[derive(Debug, Clone)]
pub(crate) struct Quadratic {
    ll: DMatrix<f64>,
    w: DMatrix<f64>,
    b: Vec<f64>,
    diag: Vec<f64>,
    constant: f64,
    k: usize,
    weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct Solution {
    pub alpha: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
    pub trace: Vec<f64>,
}

fn soft(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

impl Quadratic {
    pub fn new(mom: &Moments, w: DMatrix<f64>, weights: Vec<f64>) -> Self {
        let k = mom.yy.nrows();
        let wyl = &w * &mom.yl;
        let constant = (&w * &mom.yy).trace();
        let weights = if weights.is_empty() { vec![1.0; wyl.len()] } else { weights };
        let diag = (0..wyl.len()).map(|j| mom.ll[(j / k, j / k)] * w[(j % k, j % k)]).collect();
        Self {
            ll: mom.ll.clone(),
            b: wyl.as_slice().to_vec(),
            diag,
            w,
            constant,
            k,
            weights,
        }
    }

    fn len(&self) -> usize {
        self.b.len()
    }

    pub fn gram_times(&self, alpha: &[f64]) -> Vec<f64> {
        let n = self.len();
        if n == 0 {
            return Vec::new();
        }
        // G alpha = vec(W A L L')
        let a = DMatrix::from_column_slice(self.k, n / self.k, alpha);
        (&self.w * a * &self.ll).as_slice().to_vec()
    }

    fn add_column(&self, q: &mut [f64], j: usize, delta: f64) {
        let k = self.k;
        let kp = self.ll.nrows();
        let (cj, rj) = (j / k, j % k);
        let ll_col = &self.ll.as_slice()[cj * kp..(cj + 1) * kp];
        let w_col = &self.w.as_slice()[rj * k..(rj + 1) * k];
        for (seg, &l) in q.chunks_exact_mut(k).zip(ll_col) {
            let l = l * delta;
            for (qv, &wv) in seg.iter_mut().zip(w_col) {
                *qv += l * wv;
            }
        }
    }

    pub fn smooth_value(&self, alpha: &[f64], q: &[f64]) -> f64 {
        let mut v = self.constant;
        for j in 0..alpha.len() {
            v += alpha[j] * (q[j] - 2.0 * self.b[j]);
        }
        v
    }

    pub fn penalty(&self, alpha: &[f64], lambda: f64) -> f64 {
        lambda * alpha.iter().zip(&self.weights).map(|(a, w)| w * a.abs()).sum::<f64>()
    }

    pub fn kkt(&self, alpha: &[f64], q: &[f64], lambda: f64) -> f64 {
        let mut worst = 0.0_f64;
        for j in 0..alpha.len() {
            let g = 2.0 * (q[j] - self.b[j]);
            let t = lambda * self.weights[j];
            let r = if alpha[j] != 0.0 {
                (g + t * alpha[j].signum()).abs()
            } else {
                (g.abs() - t).max(0.0)
            };
            worst = worst.max(r);
        }
        worst
    }

    /// Smallest `lambda` with an all-zero solution.
    pub fn lambda_max(&self) -> f64 {
        self.b
            .iter()
            .zip(&self.weights)
            .map(|(b, w)| if *w > 0.0 { 2.0 * b.abs() / w } else { 0.0 })
            .fold(0.0, f64::max)
    }

    fn sweep(&self, idx: &[usize], alpha: &mut [f64], q: &mut [f64], lambda: f64) -> f64 {
        let mut max_delta = 0.0_f64;
        for &j in idx {
            let gjj = self.diag[j];
            let old = alpha[j];
            let new = if gjj > 0.0 {
                soft(self.b[j] - (q[j] - gjj * old), 0.5 * lambda * self.weights[j]) / gjj
            } else {
                0.0
            };
            if new != old {
                alpha[j] = new;
                self.add_column(q, j, new - old);
                max_delta = max_delta.max((new - old).abs());
            }
        }
        max_delta
    }

    /// Exact minimizer on the current sign pattern,
    /// `G_AA x = b_A - lambda w_A sign(alpha_A) / 2`, accepted only if no
    /// sign changes. Ill-conditioned lag blocks make plain coordinate descent
    /// crawl toward this point.
    fn polish(&self, alpha: &mut [f64], lambda: f64) -> bool {
        let active: Vec<usize> = (0..alpha.len()).filter(|&j| alpha[j] != 0.0).collect();
        if active.is_empty() {
            return false;
        }
        let k = self.k;
        let g = DMatrix::from_fn(active.len(), active.len(), |u, v| {
            let (i, j) = (active[u], active[v]);
            self.ll[(i / k, j / k)] * self.w[(i % k, j % k)]
        });
        let rhs = DVector::from_iterator(
            active.len(),
            active
                .iter()
                .map(|&j| self.b[j] - 0.5 * lambda * self.weights[j] * alpha[j].signum()),
        );
        let Some(chol) = g.cholesky() else {
            return false;
        };
        let x = chol.solve(&rhs);
        if active.iter().zip(x.iter()).any(|(&j, v)| v * alpha[j] <= 0.0 || !v.is_finite()) {
            return false;
        }
        for (&j, v) in active.iter().zip(x.iter()) {
            alpha[j] = *v;
        }
        true
    }

    /// Cyclic coordinate descent with active-set cycling.
    pub fn solve(&self, lambda: f64, init: &[f64], opts: &LassoOptions) -> Solution {
        let n = self.len();
        let mut alpha = init.to_vec();
        let mut q = self.gram_times(&alpha);
        let all: Vec<usize> = (0..n).collect();
        let mut trace = Vec::new();
        let mut sweeps = 0;
        let value = |a: &[f64], q: &[f64]| self.smooth_value(a, q) + self.penalty(a, lambda);
        loop {
            let delta = self.sweep(&all, &mut alpha, &mut q, lambda);
            sweeps += 1;
            trace.push(value(&alpha, &q));
            if delta < opts.tol {
                q = self.gram_times(&alpha);
                if self.kkt(&alpha, &q, lambda) < opts.kkt_tol {
                    return Solution {
                        alpha,
                        sweeps,
                        converged: true,
                        trace,
                    };
                }
            }
            if sweeps >= opts.max_sweeps {
                break;
            }
            let active: Vec<usize> = all.iter().copied().filter(|&j| alpha[j] != 0.0).collect();
            let mut inner = 0;
            while sweeps < opts.max_sweeps {
                let d = self.sweep(&active, &mut alpha, &mut q, lambda);
                sweeps += 1;
                inner += 1;
                trace.push(value(&alpha, &q));
                if d < opts.tol || inner % 10 == 0 {
                    if self.polish(&mut alpha, lambda) {
                        q = self.gram_times(&alpha);
                        trace.push(value(&alpha, &q));
                        break;
                    }
                    if d < opts.tol {
                        break;
                    }
                }
            }
            if sweeps >= opts.max_sweeps {
                break;
            }
        }
        Solution {
            alpha,
            sweeps,
            converged: false,
            trace,
        }
    }
}

fn check_inputs(series: &MultiSeries, order: usize, lambda: f64, presample: usize) -> Result<()> {
    if !(lambda >= 0.0) || lambda.is_nan() {
        return Err(Error::invalid(format!("penalty must be non-negative, got {lambda}")));
    }
    if presample < order {
        return Err(Error::invalid("presample must be at least the order"));
    }
    if series.len() <= presample {
        return Err(Error::invalid(format!(
            "series of length {} is too short for {presample} presample points",
            series.len()
        )));
    }
    Ok(())
}

fn penalty_weights(mom: &Moments, k: usize, standardize: bool) -> Vec<f64> {
    let kp = mom.ll.nrows();
    if !standardize {
        return vec![1.0; k * kp];
    }
    let n = mom.n.max(1) as f64;
    (0..k * kp).map(|j| (mom.ll[(j / k, j / k)] / n).sqrt()).collect()
}

/// Covariance `E / N`, ridge-repaired when it is not positive definite.
fn residual_covariance(e: &DMatrix<f64>, n: usize, warnings: &mut Vec<String>) -> DMatrix<f64> {
    let s = linalg::symmetrize(&(e / n.max(1) as f64));
    if linalg::sym_inv_sqrt(&s).is_ok() {
        return s;
    }
    let k = s.nrows();
    let eps = 1e-8 * (s.trace() / k as f64).max(f64::MIN_POSITIVE);
    let msg = format!("residual covariance lost positive definiteness; added ridge {eps:.3e}");
    log::warn!("{msg}");
    warnings.push(msg);
    s + DMatrix::identity(k, k) * eps
}

fn inverse_weight(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let s = linalg::sym_inv_sqrt(sigma)?;
    Ok(linalg::symmetrize(&(&s * &s)))
}

fn stacked(alpha: &[f64], k: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(k, alpha.len() / k.max(1), alpha)
}

fn assemble_model(alpha: &[f64], k: usize, order: usize, sigma: DMatrix<f64>, means: DVector<f64>) -> Result<VarModel> {
    let a = stacked(alpha, k);
    let coeffs = (0..order).map(|l| a.columns(l * k, k).into_owned()).collect();
    VarModel::new(coeffs, sigma, means)
}

pub(crate) struct Workspace {
    mom: Moments,
    means: DVector<f64>,
    presample: usize,
    order: usize,
    k: usize,
}

impl Workspace {
    pub fn new(series: &MultiSeries, order: usize, presample: usize) -> Result<Self> {
        let (data, means) = series.centered();
        let d = StackedDesign::new(&data, order, presample)?;
        Ok(Self {
            mom: Moments::new(&d),
            means,
            presample,
            order,
            k: series.dim(),
        })
    }

    fn from_moments(mom: Moments, means: DVector<f64>, order: usize, presample: usize) -> Self {
        let k = mom.yy.nrows();
        Self {
            mom,
            means,
            presample,
            order,
            k,
        }
    }

    fn ss(&self, lambda: f64, init: Option<&[f64]>, opts: &LassoOptions) -> Result<LassoFit> {
        let k = self.k;
        let weights = penalty_weights(&self.mom, k, opts.standardize);
        let prob = Quadratic::new(&self.mom, DMatrix::identity(k, k), weights);
        let zeros = vec![0.0; k * k * self.order];
        let sol = prob.solve(lambda, init.unwrap_or(&zeros), opts);
        let e = self.mom.residual_cross_product(&stacked(&sol.alpha, k));
        let mut warnings = Vec::new();
        if !sol.converged {
            warnings.push(format!("coordinate descent hit {} sweeps", opts.max_sweeps));
        }
        let sigma = residual_covariance(&e, self.mom.n, &mut warnings);
        let objective = e.trace() + prob.penalty(&sol.alpha, lambda);
        Ok(LassoFit {
            model: assemble_model(&sol.alpha, k, self.order, sigma, self.means.clone())?,
            lambda,
            loss_kind: LossKind::SumOfSquares,
            objective,
            cv_error: None,
            converged: sol.converged,
            sweeps: sol.sweeps,
            outer_iterations: 0,
            presample: self.presample,
            n_obs: self.mom.n,
            weight: prob.w.clone(),
            penalty_weights: prob.weights.clone(),
            objective_trace: sol.trace,
            warnings,
        })
    }

    fn ll_fixed(&self, lambda: f64, sigma: &DMatrix<f64>, opts: &LassoOptions) -> Result<LassoFit> {
        let k = self.k;
        let w = inverse_weight(sigma)?;
        let prob = Quadratic::new(&self.mom, w, penalty_weights(&self.mom, k, opts.standardize));
        let sol = prob.solve(lambda, &vec![0.0; k * k * self.order], opts);
        let q = prob.gram_times(&sol.alpha);
        let (_, logdet) = linalg::spd_inverse_logdet(sigma, "noise covariance")?;
        let objective = prob.smooth_value(&sol.alpha, &q) + self.mom.n as f64 * logdet + prob.penalty(&sol.alpha, lambda);
        let mut warnings = Vec::new();
        if !sol.converged {
            warnings.push(format!("coordinate descent hit {} sweeps", opts.max_sweeps));
        }
        Ok(LassoFit {
            model: assemble_model(&sol.alpha, k, self.order, sigma.clone(), self.means.clone())?,
            lambda,
            loss_kind: LossKind::LogLikelihood,
            objective,
            cv_error: None,
            converged: sol.converged,
            sweeps: sol.sweeps,
            outer_iterations: 1,
            presample: self.presample,
            n_obs: self.mom.n,
            weight: prob.w.clone(),
            penalty_weights: prob.weights.clone(),
            objective_trace: vec![objective],
            warnings,
        })
    }

    fn ll(&self, lambda: f64, init: Option<(&[f64], &DMatrix<f64>)>, opts: &LassoOptions) -> Result<LassoFit> {
        let k = self.k;
        let n = self.mom.n;
        let weights = penalty_weights(&self.mom, k, opts.standardize);
        let mut warnings = Vec::new();
        let (mut alpha, mut sigma) = match init {
            Some((a, s)) => (a.to_vec(), s.clone()),
            None => (
                vec![0.0; k * k * self.order],
                residual_covariance(&self.mom.yy, n, &mut warnings),
            ),
        };
        let mut trace = Vec::new();
        let mut sweeps = 0;
        let mut converged = false;
        let mut outer = 0;
        let mut w = DMatrix::identity(k, k);
        // inexact inner solves until the outer loop settles, then exact ones
        let mut exact = false;
        let mut last_change = f64::INFINITY;
        while outer < opts.max_outer {
            outer += 1;
            w = inverse_weight(&sigma)?;
            let prob = Quadratic::new(&self.mom, w.clone(), weights.clone());
            let inner = if exact {
                opts.clone()
            } else {
                LassoOptions {
                    tol: (0.01 * last_change).clamp(opts.tol, 1e-3),
                    kkt_tol: f64::INFINITY,
                    ..opts.clone()
                }
            };
            let sol = prob.solve(lambda, &alpha, &inner);
            sweeps += sol.sweeps;
            let change = alpha
                .iter()
                .zip(&sol.alpha)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            alpha = sol.alpha;
            let e = self.mom.residual_cross_product(&stacked(&alpha, k));
            sigma = residual_covariance(&e, n, &mut warnings);
            let (inv, logdet) = linalg::spd_inverse_logdet(&sigma, "noise covariance")?;
            trace.push((&inv * &e).trace() + n as f64 * logdet + prob.penalty(&alpha, lambda));
            if change < opts.outer_tol {
                if exact {
                    converged = sol.converged;
                    break;
                }
                exact = true;
            }
            last_change = change;
        }
        if !converged {
            warnings.push(format!("Lasso-LL stopped after {outer} outer iterations"));
        }
        Ok(LassoFit {
            model: assemble_model(&alpha, k, self.order, sigma, self.means.clone())?,
            lambda,
            loss_kind: LossKind::LogLikelihood,
            objective: *trace.last().unwrap_or(&f64::NAN),
            cv_error: None,
            converged,
            sweeps,
            outer_iterations: outer,
            presample: self.presample,
            n_obs: n,
            weight: w,
            penalty_weights: weights,
            objective_trace: trace,
            warnings,
        })
    }

    fn fit(&self, kind: LossKind, lambda: f64, warm: Option<&LassoFit>, opts: &LassoOptions) -> Result<LassoFit> {
        match kind {
            LossKind::SumOfSquares => {
                let a = warm.map(|f| f.model.stacked_coeffs().as_slice().to_vec());
                self.ss(lambda, a.as_deref(), opts)
            }
            LossKind::LogLikelihood => {
                let a = warm.map(|f| (f.model.stacked_coeffs().as_slice().to_vec(), f.model.noise_cov().clone()));
                self.ll(lambda, a.as_ref().map(|(a, s)| (a.as_slice(), s)), opts)
            }
        }
    }

    fn lambda_max(&self, kind: LossKind, opts: &LassoOptions) -> Result<f64> {
        let k = self.k;
        let w = match kind {
            LossKind::SumOfSquares => DMatrix::identity(k, k),
            LossKind::LogLikelihood => {
                let mut warnings = Vec::new();
                inverse_weight(&residual_covariance(&self.mom.yy, self.mom.n, &mut warnings))?
            }
        };
        Ok(Quadratic::new(&self.mom, w, penalty_weights(&self.mom, k, opts.standardize)).lambda_max())
    }
}

fn presample_of(order: usize, opts: &LassoOptions) -> usize {
    opts.presample.unwrap_or(order)
}

/// Penalized least squares `||y - (L' (x) I) alpha||^2 + lambda ||alpha||_1`.
pub fn lasso_ss(series: &MultiSeries, order: usize, lambda: f64, opts: &LassoOptions) -> Result<LassoFit> {
    let presample = presample_of(order, opts);
    check_inputs(series, order, lambda, presample)?;
    Workspace::new(series, order, presample)?.ss(lambda, None, opts)
}

/// Penalized Gaussian likelihood with alternating covariance updates.
pub fn lasso_ll(series: &MultiSeries, order: usize, lambda: f64, opts: &LassoOptions) -> Result<LassoFit> {
    let presample = presample_of(order, opts);
    check_inputs(series, order, lambda, presample)?;
    Workspace::new(series, order, presample)?.ll(lambda, None, opts)
}

/// Lasso-LL with a known, fixed noise covariance.
pub fn lasso_ll_fixed_sigma(
    series: &MultiSeries,
    order: usize,
    lambda: f64,
    sigma: &DMatrix<f64>,
    opts: &LassoOptions,
) -> Result<LassoFit> {
    let presample = presample_of(order, opts);
    check_inputs(series, order, lambda, presample)?;
    if sigma.shape() != (series.dim(), series.dim()) {
        return Err(Error::invalid("noise covariance dimension does not match the series"));
    }
    Workspace::new(series, order, presample)?.ll_fixed(lambda, sigma, opts)
}

/// `2 max_j |b_j|`: every `lambda` at or above it gives the zero model.
/// For Lasso-LL the weight is the inverse of the zero-coefficient covariance.
pub fn lambda_max(series: &MultiSeries, order: usize, kind: LossKind, opts: &LassoOptions) -> Result<f64> {
    let presample = presample_of(order, opts);
    check_inputs(series, order, 0.0, presample)?;
    Workspace::new(series, order, presample)?.lambda_max(kind, opts)
}

/// `n` log-spaced values from `lambda_max` down to `ratio * lambda_max`.
pub fn lambda_grid(lambda_max: f64, n: usize, ratio: f64) -> Vec<f64> {
    if n == 0 || !(lambda_max > 0.0) {
        return vec![0.0];
    }
    if n == 1 {
        return vec![lambda_max];
    }
    let (hi, lo) = (lambda_max.ln(), (lambda_max * ratio).ln());
    (0..n)
        .map(|i| (hi + (lo - hi) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvPlan {
    pub folds: usize,
    pub p_range: Vec<usize>,
    /// Explicit decreasing grid; `None` builds one per order from `lambda_max`.
    pub lambda_grid: Option<Vec<f64>>,
    pub n_lambda: usize,
    pub lambda_ratio: f64,
    pub options: LassoOptions,
}

impl Default for CvPlan {
    fn default() -> Self {
        Self {
            folds: 10,
            p_range: vec![0, 1, 2, 3],
            lambda_grid: None,
            n_lambda: 50,
            lambda_ratio: 1e-3,
            options: LassoOptions::default(),
        }
    }
}

impl CvPlan {
    pub fn max_order(&self) -> usize {
        self.p_range.iter().copied().max().unwrap_or(0)
    }

    /// Contiguous blocks partitioning `0..n`; the first `n % folds` are one longer.
    pub fn fold_blocks(&self, n: usize) -> Vec<Range<usize>> {
        let base = n / self.folds;
        let extra = n % self.folds;
        let mut start = 0;
        (0..self.folds)
            .map(|f| {
                let len = base + usize::from(f < extra);
                let r = start..start + len;
                start += len;
                r
            })
            .collect()
    }

    fn validate(&self, t_len: usize, dim: usize) -> Result<()> {
        if self.p_range.is_empty() {
            return Err(Error::invalid("p_range must not be empty"));
        }
        if self.folds < 2 {
            return Err(Error::invalid("cross-validation needs at least two folds"));
        }
        if let Some(g) = &self.lambda_grid {
            if g.is_empty() || g.iter().any(|l| !(*l >= 0.0)) {
                return Err(Error::invalid("lambda grid must be non-empty and non-negative"));
            }
            if g.windows(2).any(|w| w[1] >= w[0]) {
                return Err(Error::invalid("lambda grid must be strictly decreasing"));
            }
        }
        let n = t_len.saturating_sub(self.max_order());
        if n < self.folds || n / self.folds == 0 || n - n.div_ceil(self.folds) <= dim * self.max_order().max(1) {
            return Err(Error::invalid(format!(
                "{n} usable observations are too few for {} folds at order {}",
                self.folds,
                self.max_order()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvRecord {
    pub p: usize,
    pub lambda: f64,
    pub fold: usize,
    pub error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvPoint {
    pub p: usize,
    pub lambda: f64,
    pub mean_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvResult {
    pub order: usize,
    pub lambda: f64,
    pub cv_error: f64,
    pub table: Vec<CvRecord>,
    pub curve: Vec<CvPoint>,
    /// Refit on every target row at the selected `(p, lambda)`.
    pub fit: LassoFit,
}

impl CvResult {
    pub fn table_csv(&self) -> String {
        let mut out = String::from("p,lambda,fold,error\n");
        for r in &self.table {
            out.push_str(&format!("{},{:.16e},{},{:.16e}\n", r.p, r.lambda, r.fold, r.error));
        }
        out
    }
}

/// Mean squared one-step error summed over components.
fn holdout_error(data: &DMatrix<f64>, rows: &[usize], model: &VarModel) -> f64 {
    let k = data.ncols();
    let mut total = 0.0;
    for &t in rows {
        for i in 0..k {
            let mut pred = 0.0;
            for (l, a) in model.coeffs().iter().enumerate() {
                for j in 0..k {
                    pred += a[(i, j)] * data[(t - l - 1, j)];
                }
            }
            total += (data[(t, i)] - pred).powi(2);
        }
    }
    total / rows.len() as f64
}

/// Blocked `folds`-fold cross-validation over `p_range` and a `lambda` path.
///
/// Every order uses the same target rows `max(p_range) .. T`. Fold fits use
/// `lambda * N_train / N` so that the penalty keeps its weight relative to
/// the loss when the model is refit on all `N` rows.
pub fn cross_validate(series: &MultiSeries, plan: &CvPlan, kind: LossKind) -> Result<CvResult> {
    let (t_len, k) = (series.len(), series.dim());
    plan.validate(t_len, k)?;
    let pmax = plan.max_order();
    let (data, means) = series.centered();
    let targets: Vec<usize> = (pmax..t_len).collect();
    let n_all = targets.len();
    let blocks = plan.fold_blocks(n_all);
    let opts = LassoOptions {
        presample: Some(pmax),
        ..plan.options.clone()
    };

    let mut orders = plan.p_range.clone();
    orders.sort_unstable();
    orders.dedup();
    let full: Vec<Workspace> = orders
        .iter()
        .map(|&p| Workspace::new(series, p, pmax))
        .collect::<Result<_>>()?;
    let grids: Vec<Vec<f64>> = orders
        .iter()
        .zip(&full)
        .map(|(&p, ws)| -> Result<Vec<f64>> {
            if p == 0 {
                return Ok(vec![0.0]);
            }
            Ok(match &plan.lambda_grid {
                Some(g) => g.clone(),
                None => lambda_grid(ws.lambda_max(kind, &opts)?, plan.n_lambda, plan.lambda_ratio),
            })
        })
        .collect::<Result<_>>()?;

    let jobs: Vec<(usize, usize)> = (0..orders.len())
        .flat_map(|a| (0..blocks.len()).map(move |f| (a, f)))
        .collect();
    let results: Vec<Result<Vec<f64>>> = jobs
        .par_iter()
        .map(|&(a, f)| {
            let p = orders[a];
            let held: Vec<usize> = targets[blocks[f].clone()].to_vec();
            let train: Vec<usize> = targets
                .iter()
                .enumerate()
                .filter(|(n, _)| !blocks[f].contains(n))
                .map(|(_, &t)| t)
                .collect();
            let ws = Workspace::from_moments(
                Moments::new(&StackedDesign::for_rows(&data, p, &train, pmax)?),
                means.clone(),
                p,
                pmax,
            );
            let scale = train.len() as f64 / n_all as f64;
            let mut warm: Option<LassoFit> = None;
            let mut errors = Vec::with_capacity(grids[a].len());
            for &lambda in &grids[a] {
                let fit = ws.fit(kind, lambda * scale, warm.as_ref(), &opts)?;
                errors.push(holdout_error(&data, &held, &fit.model));
                warm = Some(fit);
            }
            Ok(errors)
        })
        .collect();

    let mut table = Vec::new();
    let mut sums: Vec<Vec<f64>> = grids.iter().map(|g| vec![0.0; g.len()]).collect();
    for (&(a, f), res) in jobs.iter().zip(results) {
        let errors = res?;
        for (l, e) in errors.into_iter().enumerate() {
            table.push(CvRecord {
                p: orders[a],
                lambda: grids[a][l],
                fold: f,
                error: e,
            });
            sums[a][l] += e;
        }
    }
    let mut curve = Vec::new();
    let mut best: Option<(f64, usize, usize)> = None;
    for (a, grid) in grids.iter().enumerate() {
        for (l, &lambda) in grid.iter().enumerate() {
            let mean_error = sums[a][l] / blocks.len() as f64;
            curve.push(CvPoint {
                p: orders[a],
                lambda,
                mean_error,
            });
            if best.is_none_or(|(e, _, _)| mean_error < e) {
                best = Some((mean_error, a, l));
            }
        }
    }
    let (cv_error, a, l) = best.ok_or_else(|| Error::Estimation("cross-validation produced no errors".into()))?;
    let lambda = grids[a][l];
    let mut fit = full[a].fit(kind, lambda, None, &opts)?;
    fit.cv_error = Some(cv_error);
    Ok(CvResult {
        order: orders[a],
        lambda,
        cv_error,
        table,
        curve,
        fit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_threshold_is_exact() {
        assert_eq!(soft(0.5, 1.0), 0.0);
        assert_eq!(soft(-1.0, 1.0), 0.0);
        assert_eq!(soft(3.0, 1.0), 2.0);
        assert_eq!(soft(-3.0, 1.0), -2.0);
    }

    #[test]
    fn fold_blocks_partition() {
        let plan = CvPlan::default();
        let blocks = plan.fold_blocks(97);
        assert_eq!(blocks.len(), 10);
        assert_eq!(blocks[0], 0..10);
        assert_eq!(blocks[9].end, 97);
        for w in blocks.windows(2) {
            assert_eq!(w[0].end, w[1].start);
        }
    }

    #[test]
    fn grid_is_log_spaced_and_decreasing() {
        let g = lambda_grid(10.0, 50, 1e-3);
        assert_eq!(g.len(), 50);
        assert!((g[0] - 10.0).abs() < 1e-12);
        assert!((g[49] - 0.01).abs() < 1e-12);
        assert!(g.windows(2).all(|w| w[1] < w[0]));
        let r0 = g[1] / g[0];
        assert!(g.windows(2).all(|w| (w[1] / w[0] - r0).abs() < 1e-12));
    }

    #[test]
    fn rejects_bad_grids() {
        let plan = CvPlan {
            lambda_grid: Some(vec![1.0, 1.0]),
            ..CvPlan::default()
        };
        assert!(plan.validate(200, 2).is_err());
        let plan = CvPlan::default();
        assert!(plan.validate(12, 2).is_err());
        assert!(plan.validate(200, 2).is_ok());
    }
}
