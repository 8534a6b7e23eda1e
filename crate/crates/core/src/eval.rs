//! Simulation studies, forecast scores and the built-in generators.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::lasso::{cross_validate, CvPlan, LossKind};
use crate::linalg;
use crate::series::MultiSeries;
use crate::two_stage::{assemble, stage2_refine, BicSurface, FitReport, Stage1Result, Timings, TwoStageConfig};
use crate::var::mle::{fit_on_moments, Moments};
use crate::var::{simulate, SparsityPattern, StackedDesign, VarModel, DEFAULT_BURN_IN};

/// Six-dimensional sVAR(1, 6) generator whose first series has noise
/// variance `delta_sq` and is correlated with every other innovation.
pub fn table1_model(delta_sq: f64) -> Result<VarModel> {
    if !(delta_sq > 0.0) {
        return Err(Error::invalid("delta^2 must be positive"));
    }
    let mut a = DMatrix::zeros(6, 6);
    a[(0, 0)] = 0.8;
    a[(1, 3)] = 0.3;
    a[(2, 4)] = -0.3;
    a[(3, 0)] = 0.6;
    a[(4, 2)] = 0.6;
    a[(5, 5)] = 0.8;
    let d = delta_sq.sqrt();
    let mut s = DMatrix::identity(6, 6);
    s[(0, 0)] = delta_sq;
    for (j, div) in [4.0, 6.0, 8.0, 10.0, 12.0].into_iter().enumerate() {
        s[(0, j + 1)] = d / div;
        s[(j + 1, 0)] = d / div;
    }
    VarModel::zero_mean(vec![a], s)
}

/// Three-dimensional VAR(1) in which series 1 and 2 have zero partial
/// spectral coherence although `A_1(1, 2) = 0.5`.
pub fn counterexample_model() -> VarModel {
    let a = DMatrix::from_row_slice(3, 3, &[0.0, 0.5, 0.5, 0.0, 0.0, 0.3, 0.0, 0.25, 0.5]);
    let s = DMatrix::from_row_slice(3, 3, &[18.0, 0.0, 6.0, 0.0, 1.0, 0.0, 6.0, 0.0, 3.0]);
    VarModel::zero_mean(vec![a], s).expect("fixed generator is valid")
}

pub const PRESETS: [&str; 4] = ["table1-delta1", "table1-delta4", "table1-delta25", "table1-delta100"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    TwoStage,
    LassoSs,
    LassoLl,
    OracleTwoStage,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::TwoStage => "two_stage",
            Method::LassoSs => "lasso_ss",
            Method::LassoLl => "lasso_ll",
            Method::OracleTwoStage => "oracle_two_stage",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub generator: VarModel,
    /// Label for the generator's `delta^2`, reported in the metrics table.
    #[serde(default)]
    pub delta_sq: Option<f64>,
    pub t_len: usize,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    pub replications: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub two_stage: TwoStageConfig,
    #[serde(default)]
    pub cv: CvPlan,
}

fn default_burn_in() -> usize {
    DEFAULT_BURN_IN
}

impl StudyConfig {
    /// Benchmark setting: `T = 100`, 500 replications, orders `{0, 1, 2, 3}`.
    pub fn table1(delta_sq: f64) -> Result<Self> {
        Ok(Self {
            name: Some(format!("table1-delta{delta_sq}")),
            generator: table1_model(delta_sq)?,
            delta_sq: Some(delta_sq),
            t_len: 100,
            burn_in: DEFAULT_BURN_IN,
            replications: 500,
            seed: 20_130_101,
            methods: vec![Method::TwoStage, Method::LassoLl, Method::LassoSs],
            two_stage: TwoStageConfig::default(),
            cv: CvPlan::default(),
        })
    }

    pub fn preset(name: &str) -> Result<Self> {
        let delta_sq = match name {
            "table1-delta1" => 1.0,
            "table1-delta4" => 4.0,
            "table1-delta25" => 25.0,
            "table1-delta100" => 100.0,
            other => {
                return Err(Error::invalid(format!(
                    "unknown preset '{other}'; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        };
        Self::table1(delta_sq)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::invalid("replications must be at least 1"));
        }
        if self.methods.is_empty() {
            return Err(Error::invalid("at least one method is required"));
        }
        self.generator.require_causal()
    }
}

/// `splitmix64(seed ^ index)`: the seed of replication `index`.
pub fn replication_seed(master: u64, index: u64) -> u64 {
    let mut z = (master ^ index).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Outcome of one method on one simulated series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub seed: u64,
    pub method: Method,
    pub p_hat: Option<usize>,
    pub m_hat: Option<usize>,
    pub bic: Option<f64>,
    /// Estimated `A_k(i, j)` indexed `[lag - 1][row][col]`.
    pub coeffs: Option<Vec<Vec<Vec<f64>>>>,
    pub error: Option<String>,
}

impl ReplicationRecord {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub method: Method,
    pub delta_sq: Option<f64>,
    pub p_hat: f64,
    pub m_hat: f64,
    pub bias_sq: f64,
    pub variance: f64,
    pub mse: f64,
    pub successes: usize,
    pub failures: usize,
    /// Set when at least 1% of replications failed.
    pub flagged: bool,
    /// Fraction of replications with `A_k(i, j) != 0`, indexed `[lag - 1]`.
    pub selection_frequency: Vec<DMatrix<f64>>,
    pub mean_estimate: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MethodMetrics>,
    pub records: Vec<ReplicationRecord>,
}

impl MetricsTable {
    pub fn row(&self, method: Method) -> Option<&MethodMetrics> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,delta_sq,p_hat,m_hat,bias_sq,variance,mse\n");
        for r in &self.rows {
            let delta = r.delta_sq.map(|d| format!("{d}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                r.method.label(),
                delta,
                r.p_hat,
                r.m_hat,
                r.bias_sq,
                r.variance,
                r.mse
            ));
        }
        out
    }

    pub fn records_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serialization cannot fail") + "\n")
            .collect()
    }
}

fn coeff_array(model: &VarModel) -> Vec<Vec<Vec<f64>>> {
    model
        .coeffs()
        .iter()
        .map(|a| a.row_iter().map(|r| r.iter().copied().collect()).collect())
        .collect()
}

/// Five-metric summary over successful replications. Estimates and truth
/// are zero-padded to the largest order seen; moments use divisor `R`.
pub fn summarize(
    method: Method,
    truth: &VarModel,
    records: &[ReplicationRecord],
    delta_sq: Option<f64>,
) -> MethodMetrics {
    let k = truth.dim();
    let ok: Vec<&ReplicationRecord> = records.iter().filter(|r| r.method == method && !r.failed()).collect();
    let failures = records.iter().filter(|r| r.method == method && r.failed()).count();
    let n = ok.len();
    let order = ok
        .iter()
        .map(|r| r.coeffs.as_ref().map_or(0, |c| c.len()))
        .chain([truth.order()])
        .max()
        .unwrap_or(0);
    let value = |r: &ReplicationRecord, l: usize, i: usize, j: usize| -> f64 {
        r.coeffs
            .as_ref()
            .and_then(|c| c.get(l))
            .map_or(0.0, |a| a[i][j])
    };
    let truth = truth.padded(order);
    let mut bias_sq = 0.0;
    let mut variance = 0.0;
    let mut freq = vec![DMatrix::zeros(k, k); order];
    let mut mean = vec![DMatrix::zeros(k, k); order];
    if n > 0 {
        let rn = n as f64;
        for l in 0..order {
            for i in 0..k {
                for j in 0..k {
                    let vals: Vec<f64> = ok.iter().map(|r| value(r, l, i, j)).collect();
                    let m = vals.iter().sum::<f64>() / rn;
                    let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / rn;
                    bias_sq += (m - truth.coeff(l + 1)[(i, j)]).powi(2);
                    variance += v;
                    mean[l][(i, j)] = m;
                    freq[l][(i, j)] = vals.iter().filter(|x| **x != 0.0).count() as f64 / rn;
                }
            }
        }
    }
    let avg = |f: &dyn Fn(&ReplicationRecord) -> usize| {
        if n == 0 {
            f64::NAN
        } else {
            ok.iter().map(|r| f(r) as f64).sum::<f64>() / n as f64
        }
    };
    let total = n + failures;
    MethodMetrics {
        method,
        delta_sq,
        p_hat: avg(&|r| r.p_hat.unwrap_or(0)),
        m_hat: avg(&|r| r.m_hat.unwrap_or(0)),
        bias_sq,
        variance,
        mse: bias_sq + variance,
        successes: n,
        failures,
        flagged: total > 0 && failures * 100 >= total,
        selection_frequency: freq,
        mean_estimate: mean,
    }
}

fn run_method(method: Method, series: &MultiSeries, config: &StudyConfig, truth: &SparsityPattern) -> Result<(usize, usize, Option<f64>, VarModel)> {
    match method {
        Method::TwoStage | Method::OracleTwoStage => {
            let report = if method == Method::TwoStage {
                crate::two_stage::fit_svar(series, &config.two_stage)?
            } else {
                oracle_two_stage(series, truth, &config.two_stage)?
            };
            Ok((report.p_star(), report.final_model.nonzero_count(), Some(report.bic()), report.final_model))
        }
        Method::LassoSs | Method::LassoLl => {
            let kind = if method == Method::LassoSs {
                LossKind::SumOfSquares
            } else {
                LossKind::LogLikelihood
            };
            let cv = cross_validate(series, &config.cv, kind)?;
            let m = cv.fit.model.nonzero_count();
            Ok((cv.order, m, None, cv.fit.model))
        }
    }
}

/// Simulates `replications` series and fits every configured method.
/// Replication `r` uses seed `replication_seed(seed, r)`, so results do not
/// depend on the number of worker threads.
pub fn run_study(config: &StudyConfig) -> Result<MetricsTable> {
    config.validate()?;
    let truth = config.generator.support();
    let per_rep: Vec<Vec<ReplicationRecord>> = (0..config.replications)
        .into_par_iter()
        .map(|r| {
            let seed = replication_seed(config.seed, r as u64);
            let series = simulate(&config.generator, config.t_len, config.burn_in, seed);
            config
                .methods
                .iter()
                .map(|&method| {
                    let outcome = series
                        .as_ref()
                        .map_err(Clone::clone)
                        .and_then(|s| run_method(method, s, config, &truth));
                    match outcome {
                        Ok((p_hat, m_hat, bic, model)) => ReplicationRecord {
                            replication: r,
                            seed,
                            method,
                            p_hat: Some(p_hat),
                            m_hat: Some(m_hat),
                            bic,
                            coeffs: Some(coeff_array(&model)),
                            error: None,
                        },
                        Err(e) => {
                            log::warn!("replication {r}, {}: {e}", method.label());
                            ReplicationRecord {
                                replication: r,
                                seed,
                                method,
                                p_hat: None,
                                m_hat: None,
                                bic: None,
                                coeffs: None,
                                error: Some(e.to_string()),
                            }
                        }
                    }
                })
                .collect()
        })
        .collect();
    let records: Vec<ReplicationRecord> = per_rep.into_iter().flatten().collect();
    let rows = config
        .methods
        .iter()
        .map(|&m| summarize(m, &config.generator, &records, config.delta_sq))
        .collect();
    Ok(MetricsTable { rows, records })
}

/// Two-stage fit with stage 1 replaced by the known support: constrained
/// MLE on `true_pattern`, then the usual t-ratio/BIC refinement.
pub fn oracle_two_stage(series: &MultiSeries, true_pattern: &SparsityPattern, config: &TwoStageConfig) -> Result<FitReport> {
    if true_pattern.dim() != series.dim() {
        return Err(Error::invalid("pattern dimension does not match the series"));
    }
    let presample = config.max_order().max(true_pattern.order());
    let (data, means) = series.centered();
    let mom = Moments::new(&StackedDesign::new(&data, true_pattern.order(), presample)?);
    let opts = crate::var::MleOptions {
        tol: config.tol,
        max_iter: config.max_iter,
        presample: Some(presample),
    };
    let fit = fit_on_moments(&mom, true_pattern, &means, presample, &opts)?;
    let bic = fit.neg2_loglik() + (series.len() as f64).ln() * true_pattern.len() as f64;
    let stage1 = Stage1Result {
        order: true_pattern.order(),
        n_pairs: 0,
        bic,
        fit,
        surface: BicSurface {
            p_values: Vec::new(),
            m_values: Vec::new(),
            bic: Vec::new(),
            neg2_loglik: Vec::new(),
        },
        warnings: Vec::new(),
    };
    let stage2 = stage2_refine(series, &stage1.fit, config)?;
    Ok(assemble(series, config, None, stage1, stage2, Timings::default()))
}

fn joined(model: &VarModel, history: Option<&MultiSeries>, test: &MultiSeries) -> Result<(DMatrix<f64>, usize)> {
    let k = model.dim();
    if test.dim() != k || history.is_some_and(|h| h.dim() != k) {
        return Err(Error::invalid("series dimension does not match the model"));
    }
    match history {
        None => Ok((test.values().clone(), 0)),
        Some(h) => {
            let (a, b) = (h.values(), test.values());
            let mut data = DMatrix::zeros(a.nrows() + b.nrows(), k);
            data.rows_mut(0, a.nrows()).copy_from(a);
            data.rows_mut(a.nrows(), b.nrows()).copy_from(b);
            Ok((data, a.nrows()))
        }
    }
}

/// Root mean squared `h`-step forecast error over rolling origins in the
/// test window. The model is never refit. With `history`, the first origin
/// is the end of the history; otherwise it is the first point with a full
/// lag window inside `test`.
pub fn forecast_rmse(model: &VarModel, history: Option<&MultiSeries>, test: &MultiSeries, h: usize) -> Result<f64> {
    if h == 0 {
        return Err(Error::invalid("forecast horizon must be at least 1"));
    }
    if h > test.len() {
        return Err(Error::invalid(format!("horizon {h} exceeds test length {}", test.len())));
    }
    let (data, n_hist) = joined(model, history, test)?;
    let first = n_hist.max(model.order());
    let last = data.nrows() - h;
    if first > last {
        return Err(Error::invalid("test window is too short for the model order"));
    }
    let k = model.dim();
    let mut sse = 0.0;
    for origin in first..=last {
        let path = crate::var::forecast::point_path(model, &data, origin, h);
        for i in 0..k {
            sse += (path[(h - 1, i)] - data[(origin + h - 1, i)]).powi(2);
        }
    }
    Ok((sse / (k * (last - first + 1)) as f64).sqrt())
}

/// Average negative log one-step predictive density `N(forecast, Sigma_Z)`.
/// Targets run from the first test point with a full lag window through the
/// second-to-last test point, giving `T_test - 1` terms when a history
/// covering the lags is supplied.
pub fn log_score(model: &VarModel, history: Option<&MultiSeries>, test: &MultiSeries) -> Result<f64> {
    if test.len() < 2 {
        return Err(Error::invalid("log score needs at least two test observations"));
    }
    let (data, n_hist) = joined(model, history, test)?;
    let first = n_hist.max(model.order());
    let last = data.nrows() - 2;
    if first > last {
        return Err(Error::invalid("test window is too short for the model order"));
    }
    let k = model.dim();
    let chol = linalg::cholesky(model.noise_cov(), "noise covariance")?;
    let logdet = chol.ln_determinant();
    let mut total = 0.0;
    for t in first..=last {
        let pred = crate::var::forecast::point_path(model, &data, t, 1);
        let e = DVector::from_iterator(k, (0..k).map(|i| data[(t, i)] - pred[(0, i)]));
        let z = chol.l().solve_lower_triangular(&e).expect("cholesky factor is invertible");
        total += 0.5 * (k as f64 * (2.0 * PI).ln() + logdet + z.norm_squared());
    }
    Ok(total / (last - first + 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankTest {
    pub u: f64,
    pub z: f64,
    pub p_value: f64,
}

/// Two-sided Mann-Whitney U test, normal approximation with tie correction.
pub fn mann_whitney(x: &[f64], y: &[f64]) -> Result<RankTest> {
    let (n1, n2) = (x.len(), y.len());
    if n1 == 0 || n2 == 0 {
        return Err(Error::invalid("rank test needs two non-empty samples"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::invalid("rank test samples must be finite"));
    }
    let mut all: Vec<(f64, bool)> = x.iter().map(|&v| (v, true)).chain(y.iter().map(|&v| (v, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = all.len();
    let mut rank_sum_x = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        rank_sum_x += all[i..=j].iter().filter(|e| e.1).count() as f64 * avg;
        i = j + 1;
    }
    let (a, b, nn) = (n1 as f64, n2 as f64, n as f64);
    let u = rank_sum_x - a * (a + 1.0) / 2.0;
    let mean = a * b / 2.0;
    let var = a * b / 12.0 * ((nn + 1.0) - tie_term / (nn * (nn - 1.0)).max(1.0));
    if var <= 0.0 {
        return Ok(RankTest { u, z: 0.0, p_value: 1.0 });
    }
    let z = (u - mean) / var.sqrt();
    let normal = Normal::standard();
    Ok(RankTest {
        u,
        z,
        p_value: (2.0 * (1.0 - normal.cdf(z.abs()))).min(1.0),
    })
}
