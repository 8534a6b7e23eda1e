use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use svar::eval::{run_study, MetricsTable, StudyConfig};
use svar::spectral::{estimate_spectrum, model_spectrum, psc_from_inverse_with, PscEstimate};
use svar::two_stage::{fit_svar, FitReport};
use svar::{MultiSeries, VarModel};

use crate::config::{BenchSettings, RunConfig, SimulateSettings};
use crate::error::{CliError, CliResult};
use crate::io::{comment_block, format_coefficients, format_data, num, write_file};

fn compact<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("configuration serialization cannot fail")
}

fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

/// Two-stage fit of a data file. Writes `report.json`, `bic_stage1.csv`,
/// `bic_stage2.csv`, `psc_summary.csv` and `coefficients.csv`.
pub fn cmd_fit(data: &Path, config: &RunConfig, out_dir: &Path) -> CliResult<FitReport> {
    let file = crate::io::read_data(data)?;
    let report = fit_svar(&file.series, &config.two_stage)?;
    let echo = comment_block(&[
        ("command", "svar fit".into()),
        ("input", data.display().to_string()),
        ("config", compact(config)),
    ]);

    let mut s1 = echo.clone();
    s1.push_str("p,m,neg2_loglik,bic\n");
    let surf = &report.stage1.surface;
    for (a, p) in surf.p_values.iter().enumerate() {
        for (b, m) in surf.m_values.iter().enumerate() {
            let _ = writeln!(s1, "{p},{m},{},{}", opt_num(surf.neg2_loglik[a][b]), opt_num(surf.bic[a][b]));
        }
    }

    let mut s2 = echo.clone();
    s2.push_str("m,bic\n");
    for (m, v) in report.stage2.bic_curve.iter().enumerate() {
        let _ = writeln!(s2, "{m},{}", opt_num(*v));
    }

    let mut psc = echo.clone();
    if report.ranking.as_ref().is_some_and(|r| r.ordinary_coherence) {
        psc.push_str("# note: K = 2, the statistic is the ordinary squared coherence\n");
    }
    psc.push_str("rank,i,j,sup_psc_sq\n");
    for (r, pair) in report.ranking.iter().flat_map(|r| r.pairs.iter()).enumerate() {
        let _ = writeln!(psc, "{},{},{},{}", r + 1, pair.i, pair.j, num(pair.statistic));
    }

    write_file(&out_dir.join("report.json"), &(report.to_json() + "\n"))?;
    write_file(&out_dir.join("bic_stage1.csv"), &s1)?;
    write_file(&out_dir.join("bic_stage2.csv"), &s2)?;
    write_file(&out_dir.join("psc_summary.csv"), &psc)?;
    write_file(&out_dir.join("coefficients.csv"), &format_coefficients(&report.final_model, &echo))?;
    Ok(report)
}

/// Where a simulation model comes from.
#[derive(Debug, Clone)]
pub enum ModelSource {
    File(PathBuf),
    Preset(String),
}

impl ModelSource {
    pub fn load(&self) -> CliResult<VarModel> {
        match self {
            ModelSource::File(p) => crate::io::read_model(p),
            ModelSource::Preset(name) => Ok(StudyConfig::preset(name)?.generator),
        }
    }

    fn describe(&self) -> String {
        match self {
            ModelSource::File(p) => p.display().to_string(),
            ModelSource::Preset(name) => format!("preset {name}"),
        }
    }
}

/// Simulates a series and writes it to `out` as CSV.
pub fn cmd_simulate(source: &ModelSource, settings: &SimulateSettings, out: &Path) -> CliResult<MultiSeries> {
    let model = source.load()?;
    let series = svar::var::simulate(&model, settings.t_len, settings.burn_in, settings.seed)?;
    let echo = comment_block(&[
        ("command", "svar simulate".into()),
        ("model", source.describe()),
        ("simulate", compact(settings)),
    ]);
    write_file(out, &format_data(&series, &echo))?;
    Ok(series)
}

/// Resolves the study to run. Precedence: explicit study file, explicit
/// preset, the config's `bench.study`, the config's `bench.preset`. Overrides
/// for replications and seed apply last.
pub fn resolve_study(
    settings: &BenchSettings,
    study: Option<&Path>,
    preset: Option<&str>,
    replications: Option<usize>,
    seed: Option<u64>,
) -> CliResult<StudyConfig> {
    let mut cfg = if let Some(path) = study {
        let text = crate::io::read_file(path)?;
        serde_json::from_str::<StudyConfig>(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?
    } else if let Some(name) = preset {
        StudyConfig::preset(name)?
    } else if let Some(s) = &settings.study {
        s.clone()
    } else if let Some(name) = &settings.preset {
        StudyConfig::preset(name)?
    } else {
        return Err(CliError::input(format!(
            "bench needs a study file or --preset (one of {})",
            svar::eval::PRESETS.join(", ")
        )));
    };
    if let Some(r) = replications.or(settings.replications) {
        cfg.replications = r;
    }
    if let Some(s) = seed.or(settings.seed) {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs a simulation study. Writes `metrics.csv`, `records.jsonl`,
/// `selection_frequency.csv` and the resolved `study.json`, which reruns the
/// study unchanged.
pub fn cmd_bench(study: &StudyConfig, out_dir: &Path) -> CliResult<MetricsTable> {
    let table = run_study(study)?;
    let failures: Vec<String> = table
        .rows
        .iter()
        .map(|r| format!("{}={}{}", r.method.label(), r.failures, if r.flagged { " (flagged)" } else { "" }))
        .collect();
    let echo = comment_block(&[
        ("command", "svar bench".into()),
        ("study", compact(study)),
        ("replications", study.replications.to_string()),
        ("failures", failures.join(", ")),
    ]);
    write_file(&out_dir.join("metrics.csv"), &(echo.clone() + &table.to_csv()))?;
    write_file(&out_dir.join("records.jsonl"), &table.records_jsonl())?;
    let mut freq = echo.clone();
    freq.push_str("method,lag,row,col,frequency,mean_estimate\n");
    for r in &table.rows {
        for (l, (f, m)) in r.selection_frequency.iter().zip(&r.mean_estimate).enumerate() {
            for i in 0..f.nrows() {
                for j in 0..f.ncols() {
                    let _ = writeln!(freq, "{},{},{i},{j},{},{}", r.method.label(), l + 1, num(f[(i, j)]), num(m[(i, j)]));
                }
            }
        }
    }
    write_file(&out_dir.join("selection_frequency.csv"), &freq)?;
    let pretty = serde_json::to_string_pretty(study).expect("configuration serialization cannot fail");
    write_file(&out_dir.join("study.json"), &(pretty + "\n"))?;
    Ok(table)
}

/// Per-frequency `|PSC|^2` for every pair `i < j`.
#[derive(Debug, Clone)]
pub struct PscTable {
    pub frequencies: Vec<f64>,
    pub pairs: Vec<(usize, usize)>,
    /// `[pair][frequency]`.
    pub nonparametric: Option<Vec<Vec<f64>>>,
    pub model: Vec<Vec<f64>>,
    pub ordinary_coherence: bool,
    /// True when the model was fitted here rather than supplied.
    pub fitted: bool,
}

impl PscTable {
    pub fn to_csv(&self, comments: &str) -> String {
        let mut out = String::from(comments);
        if self.ordinary_coherence {
            out.push_str("# note: K = 2, PSC equals the ordinary coherency\n");
        }
        out.push_str("omega,i,j,");
        if self.nonparametric.is_some() {
            out.push_str("psc_sq_nonparametric,");
        }
        out.push_str("psc_sq_model\n");
        for (f, w) in self.frequencies.iter().enumerate() {
            for (p, (i, j)) in self.pairs.iter().enumerate() {
                let _ = write!(out, "{},{i},{j},", num(*w));
                if let Some(np) = &self.nonparametric {
                    let _ = write!(out, "{},", num(np[p][f]));
                }
                let _ = writeln!(out, "{}", num(self.model[p][f]));
            }
        }
        out
    }

    /// Largest `|nonparametric - model|` over pairs and frequencies.
    pub fn max_gap(&self) -> Option<f64> {
        let np = self.nonparametric.as_ref()?;
        Some(
            np.iter()
                .zip(&self.model)
                .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
                .fold(0.0, f64::max),
        )
    }
}

fn squared(psc: &PscEstimate, pairs: &[(usize, usize)]) -> Vec<Vec<f64>> {
    pairs.iter().map(|&(i, j)| psc.squared_modulus(i, j)).collect()
}

/// Nonparametric and model-implied `|PSC|^2`. With data but no model the
/// model is the two-stage fit of the data; with a model alone only the
/// model column is produced, on `config.psc.n_freq` equispaced frequencies
/// in `(0, pi]`.
pub fn compute_psc(data: Option<&MultiSeries>, model: Option<&VarModel>, config: &RunConfig) -> CliResult<PscTable> {
    let k = match (data, model) {
        (Some(d), Some(m)) if d.dim() != m.dim() => {
            return Err(CliError::input(format!("data has {} series but the model has {}", d.dim(), m.dim())))
        }
        (Some(d), _) => d.dim(),
        (None, Some(m)) => m.dim(),
        (None, None) => return Err(CliError::input("psc needs --data, --model or both")),
    };
    if k < 2 {
        return Err(CliError::input("partial spectral coherence needs at least two series"));
    }
    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|i| ((i + 1)..k).map(move |j| (i, j))).collect();
    let ridge = config.spectral.ridge;
    let (frequencies, nonparametric) = match data {
        Some(d) => {
            let est = estimate_spectrum(d, &config.spectral)?;
            let psc = psc_from_inverse_with(&est, ridge)?;
            (est.frequencies.clone(), Some(squared(&psc, &pairs)))
        }
        None => {
            let n = config.psc.n_freq;
            if n == 0 {
                return Err(CliError::input("psc.n_freq must be at least 1"));
            }
            ((1..=n).map(|f| PI * f as f64 / n as f64).collect(), None)
        }
    };
    let (model, fitted) = match (model, data) {
        (Some(m), _) => (m.clone(), false),
        (None, Some(d)) => (fit_svar(d, &config.two_stage)?.final_model, true),
        (None, None) => unreachable!("checked above"),
    };
    let implied = psc_from_inverse_with(&model_spectrum(&model, &frequencies)?, ridge)?;
    Ok(PscTable {
        frequencies,
        model: squared(&implied, &pairs),
        pairs,
        nonparametric,
        ordinary_coherence: k == 2,
        fitted,
    })
}

/// [`compute_psc`] written to `out` as `psc.csv`.
pub fn cmd_psc(data: Option<&Path>, model: Option<&Path>, config: &RunConfig, out: &Path) -> CliResult<PscTable> {
    let series = data.map(crate::io::read_data).transpose()?;
    let given = model.map(crate::io::read_model).transpose()?;
    let table = compute_psc(series.as_ref().map(|f| &f.series), given.as_ref(), config)?;
    let mode = match (data.is_some(), table.fitted) {
        (true, true) => "data with fitted two-stage model",
        (true, false) => "data with given model",
        (false, _) => "model only",
    };
    let mut echo = vec![("command", "svar psc".to_string()), ("mode", mode.to_string())];
    if let Some(d) = data {
        echo.push(("data", d.display().to_string()));
    }
    if let Some(m) = model {
        echo.push(("model", m.display().to_string()));
    }
    echo.push(("config", compact(config)));
    if let Some(gap) = table.max_gap() {
        echo.push(("max_abs_difference", num(gap)));
    }
    write_file(out, &table.to_csv(&comment_block(&echo)))?;
    Ok(table)
}
