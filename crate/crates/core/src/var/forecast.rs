use nalgebra::{DMatrix, DVector};

use super::VarModel;
use crate::error::{Error, Result};
use crate::series::MultiSeries;

/// Point forecasts for horizons `1..=h` with their mean-squared-error matrices.
#[derive(Debug, Clone)]
pub struct Forecast {
    /// `h x K`; row `s` is the `(s+1)`-step-ahead forecast.
    pub points: DMatrix<f64>,
    /// `Sigma_s = sum_{j < s} Psi_j Sigma_Z Psi_j'` for `s = 1..=h`.
    pub covariances: Vec<DMatrix<f64>>,
}

/// Moving-average weights `Psi_0 = I, Psi_j = sum_k A_k Psi_{j-k}` for `j < n`.
pub(crate) fn ma_weights(model: &VarModel, n: usize) -> Vec<DMatrix<f64>> {
    let k = model.dim();
    let mut psi: Vec<DMatrix<f64>> = Vec::with_capacity(n);
    for j in 0..n {
        if j == 0 {
            psi.push(DMatrix::identity(k, k));
            continue;
        }
        let mut acc = DMatrix::zeros(k, k);
        for lag in 1..=model.order().min(j) {
            acc += model.coeff(lag) * &psi[j - lag];
        }
        psi.push(acc);
    }
    psi
}

/// Iterates the recursion forward from the end of `history` with future
/// noise set to zero.
pub fn forecast(model: &VarModel, history: &MultiSeries, h: usize) -> Result<Forecast> {
    if h == 0 {
        return Err(Error::invalid("forecast horizon must be at least 1"));
    }
    if history.dim() != model.dim() {
        return Err(Error::invalid("history dimension does not match model"));
    }
    let p = model.order();
    if history.len() < p {
        return Err(Error::invalid(format!(
            "history has {} observations, model order is {p}",
            history.len()
        )));
    }
    let points = point_path(model, history.values(), history.len(), h);
    let psi = ma_weights(model, h);
    let mut covariances = Vec::with_capacity(h);
    let mut acc = DMatrix::zeros(model.dim(), model.dim());
    for w in &psi {
        acc += w * model.noise_cov() * w.transpose();
        covariances.push(acc.clone());
    }
    Ok(Forecast { points, covariances })
}

/// Forecasts of rows `origin .. origin + h` using observed rows `< origin` of `data`.
pub(crate) fn point_path(model: &VarModel, data: &DMatrix<f64>, origin: usize, h: usize) -> DMatrix<f64> {
    let k = model.dim();
    let p = model.order();
    let mu = model.mean();
    // de-meaned lags, most recent first
    let mut lags: Vec<DVector<f64>> = (0..p)
        .map(|l| data.row(origin - 1 - l).transpose() - mu)
        .collect();
    let mut out = DMatrix::zeros(h, k);
    for s in 0..h {
        let mut next = DVector::zeros(k);
        for (l, lagged) in lags.iter().enumerate() {
            next += model.coeff(l + 1) * lagged;
        }
        out.row_mut(s).copy_from(&(&next + mu).transpose());
        if p > 0 {
            lags.pop();
            lags.insert(0, next);
        }
    }
    out
}
