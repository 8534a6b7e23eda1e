//! Two-stage sparse VAR fitting.
//!
//! Stage 1 ranks pairs of series by the supremum of their squared partial
//! spectral coherence and chooses the order `p` and the number of top pairs
//! `M` by BIC, where a pattern keeps every own-lag coefficient plus both
//! cross coefficients of each selected pair at every lag. Stage 2 ranks the
//! surviving coefficients by |t| and keeps the BIC-optimal number of them.
//!
//! All likelihoods condition on `max(p_range)` presample points so that BIC
//! values are comparable across orders; the penalty uses the full length `T`.

use std::cmp::Ordering;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::MultiSeries;
use crate::spectral::{estimate_spectrum, psc_from_inverse_with, SpectralConfig};
use crate::var::mle::{fit_on_moments, Moments};
use crate::var::{t_statistics, CoeffIndex, ConstrainedFit, MleOptions, SparsityPattern, StackedDesign, TStat, VarModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TwoStageConfig {
    /// Candidate autoregressive orders.
    pub p_range: Vec<usize>,
    /// Candidate numbers of top pairs; `None` uses [`default_m_range`].
    pub m_range: Option<Vec<usize>>,
    pub spectral: SpectralConfig,
    /// Convergence tolerance of the constrained MLE.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for TwoStageConfig {
    fn default() -> Self {
        Self {
            p_range: vec![0, 1, 2, 3],
            m_range: None,
            spectral: SpectralConfig::default(),
            tol: 1e-8,
            max_iter: 200,
        }
    }
}

impl TwoStageConfig {
    pub fn max_order(&self) -> usize {
        self.p_range.iter().copied().max().unwrap_or(0)
    }

    fn mle_options(&self, presample: usize) -> MleOptions {
        MleOptions {
            tol: self.tol,
            max_iter: self.max_iter,
            presample: Some(presample),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.p_range.is_empty() {
            return Err(Error::invalid("p_range must not be empty"));
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(Error::invalid("tolerance and iteration limit must be positive"));
        }
        Ok(())
    }
}

/// Full range `0..=K(K-1)/2` for `K <= 20`, otherwise capped at `10 K`.
pub fn default_m_range(dim: usize) -> Vec<usize> {
    let pairs = dim * dim.saturating_sub(1) / 2;
    let top = if dim <= 20 { pairs } else { pairs.min(10 * dim) };
    (0..=top).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedPair {
    pub i: usize,
    pub j: usize,
    pub statistic: f64,
}

/// Pairs `i < j` sorted by `sup_w |PSC_ij(w)|^2`, largest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRanking {
    pub pairs: Vec<RankedPair>,
    pub summary: DMatrix<f64>,
    pub ordinary_coherence: bool,
    pub warnings: Vec<String>,
}

impl PairRanking {
    /// Ranks the off-diagonal entries of a symmetric summary matrix.
    /// Ties are broken by `(i, j)` in lexicographic order.
    pub fn from_summary(summary: DMatrix<f64>) -> Self {
        let k = summary.nrows();
        let mut pairs: Vec<RankedPair> = (0..k)
            .flat_map(|i| ((i + 1)..k).map(move |j| (i, j)))
            .map(|(i, j)| RankedPair {
                i,
                j,
                statistic: summary[(i, j)],
            })
            .collect();
        pairs.sort_by(|a, b| {
            b.statistic
                .total_cmp(&a.statistic)
                .then_with(|| (a.i, a.j).cmp(&(b.i, b.j)))
        });
        Self {
            pairs,
            ordinary_coherence: k == 2,
            summary,
            warnings: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Position of the pair `{a, b}` in the ranking.
    pub fn rank_of(&self, a: usize, b: usize) -> Option<usize> {
        let (i, j) = (a.min(b), a.max(b));
        self.pairs.iter().position(|p| p.i == i && p.j == j)
    }
}

/// Smoothed-periodogram PSC summary statistics ranked from largest to smallest.
pub fn stage1_rank(series: &MultiSeries, config: &SpectralConfig) -> Result<PairRanking> {
    if series.dim() < 2 {
        return Err(Error::invalid("pair ranking needs at least two series"));
    }
    let spectrum = estimate_spectrum(series, config)?;
    let psc = psc_from_inverse_with(&spectrum, config.ridge)?;
    let mut ranking = PairRanking::from_summary(psc.summary);
    ranking.warnings = psc.warnings;
    Ok(ranking)
}

/// Own-lag coefficients at every lag plus both cross coefficients of the
/// top `n_pairs` pairs.
pub fn stage1_pattern(dim: usize, order: usize, ranking: &PairRanking, n_pairs: usize) -> Result<SparsityPattern> {
    if n_pairs > ranking.len() {
        return Err(Error::invalid(format!(
            "M = {n_pairs} exceeds the {} available pairs",
            ranking.len()
        )));
    }
    let mut entries = Vec::with_capacity((dim + 2 * n_pairs) * order);
    for lag in 1..=order {
        entries.extend((0..dim).map(|i| CoeffIndex::new(lag, i, i)));
        for pair in &ranking.pairs[..n_pairs] {
            entries.push(CoeffIndex::new(lag, pair.i, pair.j));
            entries.push(CoeffIndex::new(lag, pair.j, pair.i));
        }
    }
    SparsityPattern::new(order, dim, entries)
}

/// BIC over the `(p, M)` grid; `None` marks a grid point whose fit failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BicSurface {
    pub p_values: Vec<usize>,
    pub m_values: Vec<usize>,
    /// Indexed `[p][M]`.
    pub bic: Vec<Vec<Option<f64>>>,
    pub neg2_loglik: Vec<Vec<Option<f64>>>,
}

impl BicSurface {
    pub fn min(&self) -> Option<(usize, usize, f64)> {
        let mut best: Option<(usize, usize, f64)> = None;
        for (a, row) in self.bic.iter().enumerate() {
            for (b, v) in row.iter().enumerate() {
                if let Some(v) = v {
                    if best.is_none_or(|(_, _, bv)| *v < bv) {
                        best = Some((self.p_values[a], self.m_values[b], *v));
                    }
                }
            }
        }
        best
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage1Result {
    pub order: usize,
    pub n_pairs: usize,
    pub bic: f64,
    pub fit: ConstrainedFit,
    pub surface: BicSurface,
    pub warnings: Vec<String>,
}

fn bic_value(fit: &ConstrainedFit, t_len: usize) -> f64 {
    fit.neg2_loglik() + (t_len as f64).ln() * fit.pattern.len() as f64
}

/// Grid search of `BIC(p, M) = -2 log L + log T (K + 2M) p`.
pub fn stage1_select(
    series: &MultiSeries,
    ranking: &PairRanking,
    p_range: &[usize],
    m_range: &[usize],
    config: &TwoStageConfig,
) -> Result<Stage1Result> {
    let mut p_values = p_range.to_vec();
    p_values.sort_unstable();
    p_values.dedup();
    let mut m_values = m_range.to_vec();
    m_values.sort_unstable();
    m_values.dedup();
    if p_values.is_empty() || m_values.is_empty() {
        return Err(Error::invalid("order and pair ranges must be non-empty"));
    }
    if let Some(&bad) = m_values.iter().find(|&&m| m > ranking.len()) {
        return Err(Error::invalid(format!("M = {bad} exceeds the {} available pairs", ranking.len())));
    }
    let dim = series.dim();
    let t_len = series.len();
    let presample = *p_values.last().unwrap();
    let opts = config.mle_options(presample);
    let (data, means) = series.centered();

    let grid: Vec<(usize, usize)> = p_values
        .iter()
        .enumerate()
        .flat_map(|(a, &p)| {
            // every M gives the same empty pattern at p = 0
            let ms: Vec<usize> = if p == 0 { vec![0] } else { (0..m_values.len()).collect() };
            ms.into_iter().map(move |b| (a, b))
        })
        .collect();
    let moments: Vec<Result<Moments>> = p_values
        .iter()
        .map(|&p| StackedDesign::new(&data, p, presample).map(|d| Moments::new(&d)))
        .collect();
    if let Some(Err(e)) = moments.iter().find(|m| m.is_err()) {
        return Err(e.clone());
    }

    let fits: Vec<Result<ConstrainedFit>> = grid
        .par_iter()
        .map(|&(a, b)| {
            let p = p_values[a];
            let pattern = stage1_pattern(dim, p, ranking, m_values[b])?;
            let mom = moments[a].as_ref().expect("checked above");
            fit_on_moments(mom, &pattern, &means, presample, &opts)
        })
        .collect();

    let mut bic = vec![vec![None; m_values.len()]; p_values.len()];
    let mut neg2 = bic.clone();
    let mut warnings = Vec::new();
    let mut best: Option<(f64, usize)> = None;
    for (g, (&(a, b), fit)) in grid.iter().zip(&fits).enumerate() {
        let (p, m) = (p_values[a], m_values[b]);
        match fit {
            Ok(fit) => {
                if !fit.converged {
                    warnings.push(format!("stage 1 fit at (p = {p}, M = {m}) did not converge"));
                }
                let value = bic_value(fit, t_len);
                let cells: Vec<usize> = if p == 0 { (0..m_values.len()).collect() } else { vec![b] };
                for c in cells {
                    bic[a][c] = Some(value);
                    neg2[a][c] = Some(fit.neg2_loglik());
                }
                if best.is_none_or(|(v, _)| value < v) {
                    best = Some((value, g));
                }
            }
            Err(e) => {
                let msg = format!("stage 1 fit at (p = {p}, M = {m}) infeasible: {e}");
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
    }
    let (value, g) = best.ok_or_else(|| Error::Estimation("every stage 1 grid point failed".into()))?;
    let (a, b) = grid[g];
    let fit = fits.into_iter().nth(g).unwrap()?;
    Ok(Stage1Result {
        order: p_values[a],
        n_pairs: if p_values[a] == 0 { 0 } else { m_values[b] },
        bic: value,
        fit,
        surface: BicSurface {
            p_values,
            m_values,
            bic,
            neg2_loglik: neg2,
        },
        warnings,
    })
}

/// Stage 1 coefficients ordered by `|t|`, largest first; ties by `(lag, row, col)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoeffRanking {
    pub entries: Vec<TStat>,
}

impl CoeffRanking {
    pub fn from_t_stats(mut stats: Vec<TStat>) -> Self {
        stats.sort_by(|a, b| match b.t.abs().total_cmp(&a.t.abs()) {
            Ordering::Equal => a.index.cmp(&b.index),
            other => other,
        });
        Self { entries: stats }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn top(&self, m: usize) -> Vec<CoeffIndex> {
        self.entries[..m].iter().map(|s| s.index).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage2Result {
    pub m_star: usize,
    /// Largest lag with a retained coefficient.
    pub order: usize,
    pub bic: f64,
    pub fit: ConstrainedFit,
    /// `BIC(m)` for `m = 0..=|stage 1 pattern|`.
    pub bic_curve: Vec<Option<f64>>,
    pub ranking: CoeffRanking,
    pub warnings: Vec<String>,
}

/// Keeps the top-`m` coefficients by |t| for the `m` minimizing
/// `BIC(m) = -2 log L + log T * m`.
pub fn stage2_refine(series: &MultiSeries, stage1: &ConstrainedFit, config: &TwoStageConfig) -> Result<Stage2Result> {
    let stats = t_statistics(stage1, series)?;
    let ranking = CoeffRanking::from_t_stats(stats);
    let dim = series.dim();
    let order = stage1.pattern.order();
    let presample = stage1.presample;
    let opts = config.mle_options(presample);
    let (data, means) = series.centered();
    let mom = Moments::new(&StackedDesign::new(&data, order, presample)?);
    let t_len = series.len();

    let fits: Vec<Result<ConstrainedFit>> = (0..=ranking.len())
        .into_par_iter()
        .map(|m| {
            let pattern = SparsityPattern::new(order, dim, ranking.top(m))?;
            fit_on_moments(&mom, &pattern, &means, presample, &opts)
        })
        .collect();

    let mut curve = Vec::with_capacity(fits.len());
    let mut warnings = Vec::new();
    let mut best: Option<(f64, usize)> = None;
    for (m, fit) in fits.iter().enumerate() {
        match fit {
            Ok(fit) => {
                if !fit.converged {
                    warnings.push(format!("stage 2 fit at m = {m} did not converge"));
                }
                let value = bic_value(fit, t_len);
                curve.push(Some(value));
                if best.is_none_or(|(v, _)| value < v) {
                    best = Some((value, m));
                }
            }
            Err(e) => {
                let msg = format!("stage 2 fit at m = {m} infeasible: {e}");
                log::warn!("{msg}");
                warnings.push(msg);
                curve.push(None);
            }
        }
    }
    let (value, m_star) = best.ok_or_else(|| Error::Estimation("every stage 2 fit failed".into()))?;
    let fit = fits.into_iter().nth(m_star).unwrap()?;
    Ok(Stage2Result {
        m_star,
        order: fit.model.effective_order(),
        bic: value,
        fit,
        bic_curve: curve,
        ranking,
        warnings,
    })
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Timings {
    pub rank_ms: f64,
    pub stage1_ms: f64,
    pub stage2_ms: f64,
}

/// Everything produced by one pipeline run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub config: TwoStageConfig,
    pub n_obs: usize,
    pub dim: usize,
    /// Likelihood convention; always conditional on `presample` observations.
    pub likelihood: String,
    pub presample: usize,
    /// Absent when stage 1 was replaced by a known pattern.
    pub ranking: Option<PairRanking>,
    pub stage1: Stage1Result,
    pub stage2: Stage2Result,
    /// Final sVAR(p*, m*) with trailing empty lags removed.
    pub final_model: VarModel,
    pub warnings: Vec<String>,
    pub timings: Timings,
}

impl FitReport {
    pub fn m_star(&self) -> usize {
        self.stage2.m_star
    }

    pub fn p_star(&self) -> usize {
        self.stage2.order
    }

    pub fn bic(&self) -> f64 {
        self.stage2.bic
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Runs ranking, stage 1 selection and stage 2 refinement.
pub fn fit_svar(series: &MultiSeries, config: &TwoStageConfig) -> Result<FitReport> {
    config.validate()?;
    let dim = series.dim();
    let start = Instant::now();
    let ranking = if dim >= 2 {
        stage1_rank(series, &config.spectral)?
    } else {
        PairRanking::from_summary(DMatrix::zeros(1, 1))
    };
    let rank_ms = elapsed_ms(start);
    let m_range = match &config.m_range {
        Some(r) => r.clone(),
        None => default_m_range(dim),
    };
    let start = Instant::now();
    let stage1 = stage1_select(series, &ranking, &config.p_range, &m_range, config)?;
    let stage1_ms = elapsed_ms(start);
    let start = Instant::now();
    let stage2 = stage2_refine(series, &stage1.fit, config)?;
    let stage2_ms = elapsed_ms(start);
    Ok(assemble(series, config, Some(ranking), stage1, stage2, Timings {
        rank_ms,
        stage1_ms,
        stage2_ms,
    }))
}

pub(crate) fn assemble(
    series: &MultiSeries,
    config: &TwoStageConfig,
    ranking: Option<PairRanking>,
    stage1: Stage1Result,
    stage2: Stage2Result,
    timings: Timings,
) -> FitReport {
    let mut warnings = ranking.as_ref().map(|r| r.warnings.clone()).unwrap_or_default();
    warnings.extend(stage1.warnings.iter().cloned());
    warnings.extend(stage2.warnings.iter().cloned());
    FitReport {
        config: config.clone(),
        n_obs: series.len(),
        dim: series.dim(),
        likelihood: "conditional".into(),
        presample: stage1.fit.presample,
        final_model: stage2.fit.model.truncated(),
        ranking,
        stage1,
        stage2,
        warnings,
        timings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ranking_of(values: &[(usize, usize, f64)], k: usize) -> PairRanking {
        let mut s = DMatrix::zeros(k, k);
        for &(i, j, v) in values {
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
        PairRanking::from_summary(s)
    }

    #[test]
    fn ties_break_lexicographically() {
        let r = ranking_of(&[(0, 1, 0.5), (1, 2, 0.5), (0, 2, 0.9)], 3);
        let order: Vec<_> = r.pairs.iter().map(|p| (p.i, p.j)).collect();
        assert_eq!(order, vec![(0, 2), (0, 1), (1, 2)]);
        assert_eq!(r.rank_of(2, 1), Some(2));
    }

    #[test]
    fn pattern_counts_match_penalty() {
        let r = ranking_of(&[(0, 1, 0.3), (0, 2, 0.2), (1, 2, 0.1)], 3);
        for p in 0..3 {
            for m in 0..=3 {
                let pat = stage1_pattern(3, p, &r, m).unwrap();
                assert_eq!(pat.len(), (3 + 2 * m) * p);
            }
        }
        assert!(stage1_pattern(3, 2, &r, 3).unwrap().is_full());
        assert!(stage1_pattern(3, 1, &r, 4).is_err());
    }

    #[test]
    fn nested_patterns_grow_strictly() {
        let r = ranking_of(&[(0, 1, 0.3), (0, 2, 0.2), (1, 2, 0.1)], 3);
        for m in 0..3 {
            let small = stage1_pattern(3, 2, &r, m).unwrap();
            let big = stage1_pattern(3, 2, &r, m + 1).unwrap();
            assert!(small.is_subset_of(&big));
            assert!(big.len() > small.len());
        }
    }

    #[test]
    fn default_m_range_caps_large_dimensions() {
        assert_eq!(default_m_range(6).len(), 16);
        assert_eq!(*default_m_range(20).last().unwrap(), 190);
        assert_eq!(*default_m_range(46).last().unwrap(), 460);
        assert_eq!(default_m_range(1), vec![0]);
    }

    #[test]
    fn coefficient_ranking_ties() {
        let mk = |lag, row, col, t| TStat {
            index: CoeffIndex::new(lag, row, col),
            estimate: t,
            std_error: 1.0,
            t,
        };
        let r = CoeffRanking::from_t_stats(vec![mk(2, 0, 0, 1.0), mk(1, 1, 0, -3.0), mk(1, 0, 1, 1.0)]);
        let idx: Vec<_> = r.entries.iter().map(|s| s.index).collect();
        assert_eq!(idx, vec![CoeffIndex::new(1, 1, 0), CoeffIndex::new(1, 0, 1), CoeffIndex::new(2, 0, 0)]);
    }
}
