//! Spectral density estimation and partial spectral coherence.
//!
//! Nonparametric spectra are cross-periodograms smoothed by iterated modified
//! Daniell kernels. Partial spectral coherence (PSC) is available through the
//! inverse spectral matrix and, independently, through the residual
//! cross-spectrum after partialling out the remaining series.

use std::f64::consts::PI;

use nalgebra::{Complex, DMatrix};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::MultiSeries;
use crate::var::VarModel;

pub type C64 = Complex<f64>;
pub type CMatrix = DMatrix<C64>;

/// Relative ridge added to near-singular spectral matrices before inversion.
pub const RIDGE_EPS: f64 = 1e-8;
/// Condition number above which a spectral matrix is treated as near-singular.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumSource {
    Nonparametric,
    ModelImplied,
}

#[derive(Debug, Clone)]
pub struct SpectralDensityEstimate {
    pub frequencies: Vec<f64>,
    pub matrices: Vec<CMatrix>,
    pub source: SpectrumSource,
}

impl SpectralDensityEstimate {
    pub fn dim(&self) -> usize {
        self.matrices.first().map_or(0, |m| m.nrows())
    }

    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }

    /// Keeps the frequencies in `(0, pi]`.
    pub fn half_grid(&self) -> Self {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| self.frequencies[i] > 0.0 && self.frequencies[i] <= PI + 1e-12)
            .collect();
        Self {
            frequencies: keep.iter().map(|&i| self.frequencies[i]).collect(),
            matrices: keep.iter().map(|&i| self.matrices[i].clone()).collect(),
            source: self.source,
        }
    }

    /// Largest deviation from Hermitian symmetry, relative to the matrix norm.
    pub fn max_hermitian_defect(&self) -> f64 {
        self.matrices
            .iter()
            .map(|m| (m - m.adjoint()).norm() / m.norm().max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max)
    }

    /// Smallest eigenvalue relative to the matrix norm, over all frequencies.
    pub fn min_relative_eigenvalue(&self) -> f64 {
        self.matrices
            .iter()
            .map(|m| {
                let h = (m + m.adjoint()) * C64::new(0.5, 0.0);
                let ev = h.symmetric_eigenvalues();
                ev.min() / m.norm().max(f64::MIN_POSITIVE)
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// Settings for the smoothed-periodogram estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectralConfig {
    /// Modified Daniell spans; `None` picks `[s, s]` with `s` the odd integer nearest `sqrt(T)`.
    pub spans: Option<Vec<usize>>,
    /// Regularize near-singular spectral matrices instead of failing.
    pub ridge: bool,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self { spans: None, ridge: true }
    }
}

impl SpectralConfig {
    pub fn spans_for(&self, t_len: usize) -> Vec<usize> {
        self.spans.clone().unwrap_or_else(|| default_spans(t_len))
    }
}

/// `[s, s]` with `s` the odd integer nearest to `sqrt(T)` (ties go up).
pub fn default_spans(t_len: usize) -> Vec<usize> {
    let root = (t_len as f64).sqrt();
    let lower = 2 * ((root - 1.0) / 2.0).floor().max(0.0) as usize + 1;
    let upper = lower + 2;
    let mut s = if root - (lower as f64) < (upper as f64) - root { lower } else { upper };
    while s > 1 && s >= t_len {
        s -= 2;
    }
    vec![s, s]
}

/// Fourier frequencies `2 pi k / T` for `k = 1..=floor(T/2)`.
pub fn fourier_half_grid(t_len: usize) -> Vec<f64> {
    (1..=t_len / 2).map(|k| 2.0 * PI * k as f64 / t_len as f64).collect()
}

/// Raw cross-periodogram `I(w_k) = d(w_k) d(w_k)^H / (2 pi T)` of the
/// de-meaned data at `w_k = 2 pi k / T`, `k = 0..T-1`.
pub fn periodogram(series: &MultiSeries) -> Result<SpectralDensityEstimate> {
    let t_len = series.len();
    if t_len < 2 {
        return Err(Error::invalid("periodogram needs at least two observations"));
    }
    let (data, _) = series.centered();
    let k = series.dim();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(t_len);
    let dft: Vec<Vec<C64>> = data
        .column_iter()
        .map(|col| {
            let mut buf: Vec<C64> = col.iter().map(|&v| C64::new(v, 0.0)).collect();
            fft.process(&mut buf);
            buf
        })
        .collect();
    let norm = 1.0 / (2.0 * PI * t_len as f64);
    let matrices = (0..t_len)
        .map(|f| CMatrix::from_fn(k, k, |i, j| dft[i][f] * dft[j][f].conj() * norm))
        .collect();
    Ok(SpectralDensityEstimate {
        frequencies: (0..t_len).map(|f| 2.0 * PI * f as f64 / t_len as f64).collect(),
        matrices,
        source: SpectrumSource::Nonparametric,
    })
}

/// Modified Daniell weights for an odd span: flat, with half weight at both
/// ends, normalized to sum to one.
pub fn modified_daniell_weights(span: usize) -> Result<Vec<f64>> {
    if span == 0 || span % 2 == 0 {
        return Err(Error::invalid(format!("Daniell span must be odd and positive, got {span}")));
    }
    if span == 1 {
        return Ok(vec![1.0]);
    }
    let m = (span - 1) / 2;
    let inner = 1.0 / (2 * m) as f64;
    Ok((0..span)
        .map(|i| if i == 0 || i == span - 1 { inner / 2.0 } else { inner })
        .collect())
}

/// Circular convolution of the ordinates with one modified Daniell kernel per span.
pub fn smooth_daniell(raw: &SpectralDensityEstimate, spans: &[usize]) -> Result<SpectralDensityEstimate> {
    if spans.is_empty() {
        return Err(Error::invalid("at least one span is required"));
    }
    let n = raw.len();
    let mut current = raw.matrices.clone();
    for &span in spans {
        let weights = modified_daniell_weights(span)?;
        if span >= n {
            return Err(Error::invalid(format!("span {span} is not smaller than the {n} available ordinates")));
        }
        if span == 1 {
            continue;
        }
        let m = (span - 1) / 2;
        current = (0..n)
            .map(|f| {
                let mut acc = CMatrix::zeros(raw.dim(), raw.dim());
                for (o, w) in weights.iter().enumerate() {
                    let idx = (f + n + o - m) % n;
                    acc += &current[idx] * C64::new(*w, 0.0);
                }
                acc
            })
            .collect();
    }
    Ok(SpectralDensityEstimate {
        frequencies: raw.frequencies.clone(),
        matrices: current,
        source: raw.source,
    })
}

/// Smoothed periodogram restricted to the half Fourier grid `(0, pi]`.
pub fn estimate_spectrum(series: &MultiSeries, config: &SpectralConfig) -> Result<SpectralDensityEstimate> {
    let raw = periodogram(series)?;
    Ok(smooth_daniell(&raw, &config.spans_for(series.len()))?.half_grid())
}

/// Exact spectral density `(2 pi)^{-1} A(e^{-iw})^{-1} Sigma A(e^{-iw})^{-H}` of a causal VAR.
pub fn model_spectrum(model: &VarModel, frequencies: &[f64]) -> Result<SpectralDensityEstimate> {
    model.require_causal()?;
    let sigma = model.noise_cov().map(|v| C64::new(v, 0.0));
    let matrices = frequencies
        .iter()
        .map(|&w| {
            let poly = model.lag_polynomial(C64::new(0.0, -w).exp());
            let inv = poly
                .try_inverse()
                .ok_or_else(|| Error::Domain(format!("lag polynomial singular at omega = {w}")))?;
            let f = &inv * &sigma * inv.adjoint() * C64::new(1.0 / (2.0 * PI), 0.0);
            Ok((&f + f.adjoint()) * C64::new(0.5, 0.0))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SpectralDensityEstimate {
        frequencies: frequencies.to_vec(),
        matrices,
        source: SpectrumSource::ModelImplied,
    })
}

/// Partial spectral coherence for all pairs on a frequency grid.
#[derive(Debug, Clone)]
pub struct PscEstimate {
    pub frequencies: Vec<f64>,
    /// Per-frequency `K x K` PSC; the diagonal is stored as zero.
    pub psc: Vec<CMatrix>,
    /// `S_ij = sup_w |PSC_ij(w)|^2`, symmetric with zero diagonal.
    pub summary: DMatrix<f64>,
    /// Set when `K = 2`, where PSC reduces to ordinary coherency.
    pub ordinary_coherence: bool,
    pub warnings: Vec<String>,
}

impl PscEstimate {
    pub fn dim(&self) -> usize {
        self.summary.nrows()
    }

    /// `|PSC_ij(w)|^2` over the grid.
    pub fn squared_modulus(&self, i: usize, j: usize) -> Vec<f64> {
        self.psc.iter().map(|m| m[(i, j)].norm_sqr()).collect()
    }
}

/// Inverts a Hermitian spectral matrix, adding a small ridge when it is
/// near-singular and `ridge` is enabled.
fn invert_spectral(f: &CMatrix, omega: f64, ridge: bool, warnings: &mut Vec<String>) -> Result<CMatrix> {
    if f.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::SingularSpectrum {
            omega,
            reason: "non-finite entries".into(),
        });
    }
    let k = f.nrows();
    let herm = (f + f.adjoint()) * C64::new(0.5, 0.0);
    let ev = herm.clone().symmetric_eigenvalues();
    let (lo, hi) = (ev.min(), ev.max());
    let mut work = herm;
    if !(hi > 0.0) {
        return Err(Error::SingularSpectrum {
            omega,
            reason: "zero or negative spectral matrix".into(),
        });
    }
    if !(lo > hi / MAX_CONDITION) {
        if !ridge {
            return Err(Error::SingularSpectrum {
                omega,
                reason: format!("condition number exceeds {MAX_CONDITION:e}"),
            });
        }
        let trace: f64 = (0..k).map(|i| work[(i, i)].re).sum();
        let eps = RIDGE_EPS * trace / k as f64;
        for i in 0..k {
            work[(i, i)] += C64::new(eps, 0.0);
        }
        let msg = format!("near-singular spectral matrix at omega = {omega:.6}; added ridge {eps:.3e}");
        log::warn!("{msg}");
        warnings.push(msg);
    }
    work.cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::SingularSpectrum {
            omega,
            reason: "not positive definite after regularization".into(),
        })
}

fn summary_of(frequencies: &[f64], psc: &[CMatrix], k: usize) -> DMatrix<f64> {
    let in_half: Vec<usize> = (0..frequencies.len())
        .filter(|&f| frequencies[f] > 0.0 && frequencies[f] <= PI + 1e-12)
        .collect();
    let grid: Vec<usize> = if in_half.is_empty() {
        (0..frequencies.len()).collect()
    } else {
        in_half
    };
    let mut s = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in (i + 1)..k {
            let sup = grid.iter().map(|&f| psc[f][(i, j)].norm_sqr()).fold(0.0, f64::max);
            s[(i, j)] = sup;
            s[(j, i)] = sup;
        }
    }
    s
}

/// PSC through the inverse spectral matrix `g = f^{-1}`:
/// `PSC_ij = -g_ij / sqrt(g_ii g_jj)`. Near-singular matrices get a ridge.
pub fn psc_from_inverse(f: &SpectralDensityEstimate) -> Result<PscEstimate> {
    psc_from_inverse_with(f, true)
}

pub fn psc_from_inverse_with(f: &SpectralDensityEstimate, ridge: bool) -> Result<PscEstimate> {
    let k = f.dim();
    if k < 2 {
        return Err(Error::invalid("partial spectral coherence needs at least two series"));
    }
    let mut warnings = Vec::new();
    let mut psc = Vec::with_capacity(f.len());
    for (&omega, m) in f.frequencies.iter().zip(&f.matrices) {
        let g = invert_spectral(m, omega, ridge, &mut warnings)?;
        let mut out = CMatrix::zeros(k, k);
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    let denom = (g[(i, i)].re * g[(j, j)].re).sqrt();
                    out[(i, j)] = -g[(i, j)] / denom;
                }
            }
        }
        if let Some(bad) = out.iter().find(|z| z.norm() > 1.0 + 1e-8) {
            return Err(Error::Numerical(format!(
                "|PSC| = {} exceeds one at omega = {omega:.6}",
                bad.norm()
            )));
        }
        psc.push(out);
    }
    let summary = summary_of(&f.frequencies, &psc, k);
    Ok(PscEstimate {
        frequencies: f.frequencies.clone(),
        psc,
        summary,
        ordinary_coherence: k == 2,
        warnings,
    })
}

/// PSC of one pair through the residual cross-spectrum
/// `f_ab - f_{a,R} f_{R,R}^{-1} f_{R,b}`, `R` = all other series.
pub fn psc_from_residual_filter(f: &SpectralDensityEstimate, i: usize, j: usize) -> Result<Vec<C64>> {
    let k = f.dim();
    if k == 2 {
        return Err(Error::Unsupported(
            "residual-filter PSC needs K >= 3; with K = 2 use ordinary coherence".into(),
        ));
    }
    if k < 2 || i == j || i >= k || j >= k {
        return Err(Error::invalid(format!("invalid pair ({i}, {j}) for K = {k}")));
    }
    let rest: Vec<usize> = (0..k).filter(|&r| r != i && r != j).collect();
    f.frequencies
        .iter()
        .zip(&f.matrices)
        .map(|(&omega, m)| {
            let frr = CMatrix::from_fn(rest.len(), rest.len(), |a, b| m[(rest[a], rest[b])]);
            let inv = frr.try_inverse().ok_or_else(|| Error::SingularSpectrum {
                omega,
                reason: "conditioning block is singular".into(),
            })?;
            let partial = |a: usize, b: usize| {
                let mut acc = m[(a, b)];
                for (x, &ra) in rest.iter().enumerate() {
                    for (y, &rb) in rest.iter().enumerate() {
                        acc -= m[(a, ra)] * inv[(x, y)] * m[(rb, b)];
                    }
                }
                acc
            };
            Ok(partial(i, j) / (partial(i, i).re * partial(j, j).re).sqrt())
        })
        .collect()
}
