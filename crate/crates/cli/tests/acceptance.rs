//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Run alone with `cargo test --release -p svar-cli --test acceptance`.

use std::time::Instant;

use nalgebra::{Complex, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svar::eval::{counterexample_model, mann_whitney, run_study, table1_model, Method, MetricsTable, StudyConfig};
use svar::lasso::{lambda_max, lasso_ll, lasso_ss, LassoFit, LassoOptions, LossKind};
use svar::spectral::{model_spectrum, psc_from_inverse, psc_from_residual_filter, CMatrix, SpectralDensityEstimate, SpectrumSource};
use svar::var::{constrained_mle, simulate, t_statistics, MleOptions};
use svar::{MultiSeries, SparsityPattern, VarModel};

type Outcome = Result<(bool, String), String>;

struct Shared {
    delta1: Option<MetricsTable>,
}

fn study(delta_sq: f64, replications: usize) -> Result<MetricsTable, String> {
    let mut cfg = StudyConfig::table1(delta_sq).map_err(|e| e.to_string())?;
    cfg.replications = replications;
    run_study(&cfg).map_err(|e| e.to_string())
}

fn row(t: &MetricsTable, m: Method) -> Result<&svar::eval::MethodMetrics, String> {
    t.row(m).ok_or_else(|| format!("no row for {}", m.label()))
}

fn within(x: f64, lo: f64, hi: f64) -> bool {
    (lo..=hi).contains(&x)
}

fn criterion_1(shared: &mut Shared) -> Outcome {
    let t = study(1.0, 200)?;
    let r = row(&t, Method::TwoStage)?;
    let pass = within(r.p_hat, 0.98, 1.02) && within(r.m_hat, 5.3, 6.9) && within(r.mse, 0.08, 0.15) && !r.flagged;
    let msg = format!(
        "two-stage at delta^2 = 1, 200 reps: p_hat {:.3} in [0.98, 1.02], m_hat {:.3} in [5.3, 6.9], MSE {:.4} in [0.08, 0.15] (bias^2 {:.4}, var {:.4}, failures {})",
        r.p_hat, r.m_hat, r.mse, r.bias_sq, r.variance, r.failures
    );
    shared.delta1 = Some(t);
    Ok((pass, msg))
}

fn criterion_2(shared: &mut Shared) -> Outcome {
    let t = shared.delta1.as_ref().ok_or("criterion 1 study unavailable")?;
    let ll = row(t, Method::LassoLl)?;
    let ss = row(t, Method::LassoSs)?;
    let pass = ll.m_hat > 12.0 && ll.p_hat > 1.05 && ss.m_hat > 12.0 && ss.p_hat > 1.05;
    Ok((
        pass,
        format!(
            "over-selection at delta^2 = 1: Lasso-LL m_hat {:.2}, p_hat {:.3}; Lasso-SS m_hat {:.2}, p_hat {:.3} (need m_hat > 12, p_hat > 1.05)",
            ll.m_hat, ll.p_hat, ss.m_hat, ss.p_hat
        ),
    ))
}

fn criterion_3(shared: &mut Shared) -> Outcome {
    let t = study(100.0, 100)?;
    let (two, ll, ss) = (row(&t, Method::TwoStage)?, row(&t, Method::LassoLl)?, row(&t, Method::LassoSs)?);
    let ss1 = row(shared.delta1.as_ref().ok_or("criterion 1 study unavailable")?, Method::LassoSs)?.mse;
    let ratio = ss.mse / ss1;
    let pass = two.mse < ll.mse && ll.mse < ss.mse && ratio > 5.0;
    Ok((
        pass,
        format!(
            "delta^2 = 100, 100 reps: MSE two-stage {:.4} < Lasso-LL {:.4} < Lasso-SS {:.4}; Lasso-SS MSE ratio to delta^2 = 1 is {:.2} (need > 5)",
            two.mse, ll.mse, ss.mse, ratio
        ),
    ))
}

fn criterion_4(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0_f64;
    for _ in 0..1000 {
        let k = rng.random_range(3..=6);
        let b = CMatrix::from_fn(k, k, |_, _| Complex::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let f = &b * b.adjoint() + CMatrix::identity(k, k) * Complex::new(0.1, 0.0);
        let est = SpectralDensityEstimate {
            frequencies: vec![1.0],
            matrices: vec![f],
            source: SpectrumSource::Nonparametric,
        };
        let inv = psc_from_inverse(&est).map_err(|e| e.to_string())?;
        for i in 0..k {
            for j in 0..k {
                if i == j {
                    continue;
                }
                let res = psc_from_residual_filter(&est, i, j).map_err(|e| e.to_string())?;
                worst = worst.max((res[0] - inv.psc[0][(i, j)]).norm());
            }
        }
    }
    Ok((worst < 1e-8, format!("1000 random Hermitian PD spectra, K in 3..6: max |inverse - residual| = {worst:.2e} (need < 1e-8)")))
}

fn criterion_5(_: &mut Shared) -> Outcome {
    let model = counterexample_model();
    let grid = svar::spectral::fourier_half_grid(1024);
    let psc = psc_from_inverse(&model_spectrum(&model, &grid).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let worst = psc.psc.iter().map(|m| m[(0, 1)].norm()).fold(0.0, f64::max);
    let a12 = model.coeff(1)[(0, 1)];
    Ok((
        worst < 1e-10 && a12 == 0.5,
        format!("counterexample, {} frequencies: max |PSC_12| = {worst:.2e} (need < 1e-10) with A_1(1,2) = {a12}", grid.len()),
    ))
}

fn criterion_6(_: &mut Shared) -> Outcome {
    let cfg = StudyConfig {
        name: Some("counterexample".into()),
        generator: counterexample_model(),
        delta_sq: None,
        t_len: 100,
        burn_in: 500,
        replications: 200,
        seed: 14,
        methods: vec![Method::TwoStage, Method::OracleTwoStage],
        two_stage: Default::default(),
        cv: Default::default(),
    };
    let t = run_study(&cfg).map_err(|e| e.to_string())?;
    let pick = |m: Method| -> (Vec<f64>, Vec<f64>) {
        t.records
            .iter()
            .filter(|r| r.method == m && !r.failed())
            .map(|r| (r.m_hat.unwrap_or(0) as f64, r.bic.unwrap_or(f64::NAN)))
            .unzip()
    };
    let (m_psc, bic_psc) = pick(Method::TwoStage);
    let (m_orc, bic_orc) = pick(Method::OracleTwoStage);
    let test = mann_whitney(&m_psc, &m_orc).map_err(|e| e.to_string())?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let gap = (mean(&bic_psc) - mean(&bic_orc)).abs() / mean(&bic_orc).abs();
    let pass = test.p_value > 0.01 && gap < 0.01 && m_psc.len() == 200 && m_orc.len() == 200;
    Ok((
        pass,
        format!(
            "counterexample, 200 reps: mean m_hat {:.2} (PSC) vs {:.2} (oracle), rank test p = {:.3} (need > 0.01); mean BIC gap {:.3}% (need < 1%)",
            mean(&m_psc),
            mean(&m_orc),
            test.p_value,
            100.0 * gap
        ),
    ))
}

fn random_stable(k: usize, p: usize, rng: &mut ChaCha8Rng) -> VarModel {
    loop {
        let coeffs: Vec<DMatrix<f64>> = (0..p)
            .map(|_| DMatrix::from_fn(k, k, |_, _| rng.random_range(-0.6..0.6) / k as f64))
            .collect();
        let b = DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
        let sigma = &b * b.transpose() + DMatrix::identity(k, k) * 0.2;
        let mean = DVector::from_fn(k, |_, _| rng.random_range(-2.0..2.0));
        if let Ok(m) = VarModel::new(coeffs, sigma, mean) {
            if m.is_causal() {
                return m;
            }
        }
    }
}

/// Equation-by-equation least squares on the de-meaned series through QR.
fn least_squares(series: &MultiSeries, p: usize) -> DMatrix<f64> {
    let (t, k) = (series.len(), series.dim());
    let y = series.values();
    let mean: Vec<f64> = (0..k).map(|j| y.column(j).sum() / t as f64).collect();
    let n = t - p;
    let x = DMatrix::from_fn(n, k * p, |r, c| y[(r + p - (c / k + 1), c % k)] - mean[c % k]);
    let resp = DMatrix::from_fn(n, k, |r, j| y[(r + p, j)] - mean[j]);
    let qr = x.qr();
    (qr.r().try_inverse().expect("full-rank design") * qr.q().transpose() * resp).transpose()
}

fn criterion_7(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_ls = 0.0_f64;
    let mut bad_traces = 0;
    let mut runs = 0;
    let opts = MleOptions {
        max_iter: 5000,
        ..MleOptions::default()
    };
    for d in 0..100 {
        let k = rng.random_range(2..=5);
        let p = rng.random_range(1..=3);
        let t = rng.random_range(80..=300);
        let model = random_stable(k, p, &mut rng);
        let s = simulate(&model, t, 200, d).map_err(|e| e.to_string())?;
        let full = constrained_mle(&s, p, &SparsityPattern::full(p, k), &opts).map_err(|e| e.to_string())?;
        worst_ls = worst_ls.max((full.model.stacked_coeffs() - least_squares(&s, p)).amax());
        let entries: Vec<_> = SparsityPattern::full(p, k).entries().iter().copied().filter(|_| rng.random_bool(0.5)).collect();
        let sparse = SparsityPattern::new(p, k, entries).map_err(|e| e.to_string())?;
        for fit in [full, constrained_mle(&s, p, &sparse, &opts).map_err(|e| e.to_string())?] {
            runs += 1;
            if fit.neg2_loglik_trace.windows(2).any(|w| w[1] > w[0] + 1e-10 * w[0].abs().max(1.0)) {
                bad_traces += 1;
            }
        }
    }
    Ok((
        worst_ls < 1e-8 && bad_traces == 0,
        format!("100 random datasets: max |MLE - LS| = {worst_ls:.2e} (need < 1e-8); {bad_traces} of {runs} full and sparse runs with an increasing -2 loglik"),
    ))
}

/// Largest subgradient violation of `tr(W E E') + lambda |A|_1`, from raw data.
fn kkt_violation(series: &MultiSeries, fit: &LassoFit) -> f64 {
    let (t, k) = (series.len(), series.dim());
    let p = fit.model.order();
    let v = series.values();
    let mean: Vec<f64> = (0..k).map(|j| v.column(j).sum() / t as f64).collect();
    let n = t - fit.presample;
    let y = DMatrix::from_fn(k, n, |i, c| v[(c + fit.presample, i)] - mean[i]);
    let x = DMatrix::from_fn(k * p, n, |r, c| v[(c + fit.presample - (r / k + 1), r % k)] - mean[r % k]);
    let a = fit.model.stacked_coeffs();
    let grad = -2.0 * &fit.weight * (&y - &a * &x) * x.transpose();
    let mut worst = 0.0_f64;
    for (g, a) in grad.iter().zip(a.iter()) {
        let r = if *a != 0.0 {
            (g + fit.lambda * a.signum()).abs()
        } else {
            (g.abs() - fit.lambda).max(0.0)
        };
        worst = worst.max(r);
    }
    worst
}

fn criterion_8(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let opts = LassoOptions::default();
    let (mut worst, mut converged, mut total, mut nonzero_at_max) = (0.0_f64, 0, 0, 0);
    for d in 0..100u64 {
        let delta = [1.0, 4.0, 25.0, 100.0][(d % 4) as usize];
        let s = simulate(&table1_model(delta).map_err(|e| e.to_string())?, 100, 500, d).map_err(|e| e.to_string())?;
        let p = rng.random_range(1..=3);
        for kind in [LossKind::SumOfSquares, LossKind::LogLikelihood] {
            let lmax = lambda_max(&s, p, kind, &opts).map_err(|e| e.to_string())?;
            let frac = 10f64.powf(rng.random_range(-3.0..0.0));
            for lambda in [frac * lmax, lmax, 2.0 * lmax] {
                let fit = match kind {
                    LossKind::SumOfSquares => lasso_ss(&s, p, lambda, &opts),
                    LossKind::LogLikelihood => lasso_ll(&s, p, lambda, &opts),
                }
                .map_err(|e| e.to_string())?;
                total += 1;
                if fit.converged {
                    converged += 1;
                    worst = worst.max(kkt_violation(&s, &fit));
                }
                if lambda >= lmax && fit.model.coeffs().iter().any(|a| a.iter().any(|v| v.to_bits() != 0)) {
                    nonzero_at_max += 1;
                }
            }
        }
    }
    Ok((
        worst < 1e-5 && nonzero_at_max == 0,
        format!("{converged} of {total} Lasso fits converged; max KKT violation {worst:.2e} (need < 1e-5); {nonzero_at_max} fits at lambda >= lambda_max not exactly zero"),
    ))
}

fn criterion_9(_: &mut Shared) -> Outcome {
    let model = table1_model(1.0).map_err(|e| e.to_string())?;
    let pattern = model.support();
    let mut good = 0;
    for rep in 0..100 {
        let s = simulate(&model, 10_000, 500, 9_000 + rep).map_err(|e| e.to_string())?;
        let fit = constrained_mle(&s, 1, &pattern, &MleOptions::default()).map_err(|e| e.to_string())?;
        let stats = t_statistics(&fit, &s).map_err(|e| e.to_string())?;
        if stats.iter().all(|st| (st.estimate - model.get(st.index)).abs() <= 3.0 * st.std_error) {
            good += 1;
        }
    }
    Ok((good >= 95, format!("T = 10^4, true support: {good} of 100 replications with every coefficient within 3 standard errors (need >= 95)")))
}

fn criterion_10(_: &mut Shared) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = svar_cli::resolve_study(&Default::default(), None, Some("table1-delta1"), Some(8), Some(2024)).map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    svar_cli::cmd_bench(&cfg, &a).map_err(|e| e.to_string())?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().map_err(|e| e.to_string())?;
    pool.install(|| svar_cli::cmd_bench(&cfg, &b)).map_err(|e| e.to_string())?;
    let read = |p: &std::path::Path| std::fs::read(p.join("metrics.csv")).map_err(|e| e.to_string());
    let (x, y) = (read(&a)?, read(&b)?);
    Ok((x == y, format!("two bench runs (default pool, 3-thread pool), 8 reps: metrics.csv {} bytes, identical = {}", x.len(), x == y)))
}

fn main() {
    let criteria: [(&str, fn(&mut Shared) -> Outcome); 10] = [
        ("benchmark reproduction, two-stage", criterion_1),
        ("Lasso over-selection", criterion_2),
        ("noise-ratio sensitivity ordering", criterion_3),
        ("PSC route equivalence", criterion_4),
        ("zero PSC despite lagged coupling", criterion_5),
        ("PSC screening vs oracle first stage", criterion_6),
        ("constrained MLE correctness", criterion_7),
        ("Lasso KKT and exact zeros", criterion_8),
        ("consistency at T = 10^4", criterion_9),
        ("bench determinism", criterion_10),
    ];
    let mut shared = Shared { delta1: None };
    let mut failed = 0;
    for (n, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (pass, detail) = match f(&mut shared) {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!(
            "[{}] criterion {:>2} {name}: {detail} ({:.1}s)",
            if pass { "PASS" } else { "FAIL" },
            n + 1,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
