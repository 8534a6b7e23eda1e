use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svar::eval::table1_model;
use svar::lasso::*;
use svar::var::{constrained_mle, simulate, MleOptions};
use svar::{MultiSeries, SparsityPattern, VarModel};

/// Centered responses `Y` (K x N) and lagged regressors `X` (Kp x N).
fn design(series: &MultiSeries, p: usize, presample: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let (t, k) = (series.len(), series.dim());
    let v = series.values();
    let mean: Vec<f64> = (0..k).map(|j| v.column(j).sum() / t as f64).collect();
    let n = t - presample;
    let y = DMatrix::from_fn(k, n, |i, c| v[(c + presample, i)] - mean[i]);
    let x = DMatrix::from_fn(k * p, n, |r, c| {
        let (lag, j) = (r / k + 1, r % k);
        v[(c + presample - lag, j)] - mean[j]
    });
    (y, x)
}

fn stacked(model: &VarModel) -> DMatrix<f64> {
    model.stacked_coeffs()
}

/// Largest subgradient violation of `tr(W E E') + lambda |A|_1`.
fn kkt_violation(series: &MultiSeries, fit: &LassoFit) -> f64 {
    let p = fit.model.order();
    let (y, x) = design(series, p, fit.presample);
    let a = stacked(&fit.model);
    let e = &y - &a * &x;
    let grad = -2.0 * &fit.weight * e * x.transpose();
    let mut worst = 0.0_f64;
    for c in 0..a.ncols() {
        for r in 0..a.nrows() {
            let g = grad[(r, c)];
            let v = if a[(r, c)] != 0.0 {
                (g + fit.lambda * a[(r, c)].signum()).abs()
            } else {
                (g.abs() - fit.lambda).max(0.0)
            };
            worst = worst.max(v);
        }
    }
    worst
}

fn ls(series: &MultiSeries, p: usize) -> DMatrix<f64> {
    let (y, x) = design(series, p, p);
    let qr = x.transpose().qr();
    (qr.r().try_inverse().unwrap() * qr.q().transpose() * y.transpose()).transpose()
}

fn small_model() -> VarModel {
    let a = DMatrix::from_row_slice(3, 3, &[0.5, 0.0, 0.2, 0.0, 0.4, 0.0, -0.3, 0.0, 0.3]);
    let s = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.2, 2.0, 0.5, 0.0, 0.5, 0.5]);
    VarModel::zero_mean(vec![a], s).unwrap()
}

fn noise(t: usize, k: usize, seed: u64) -> MultiSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MultiSeries::new(DMatrix::from_fn(t, k, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal))).unwrap()
}

#[test]
fn zero_penalty_is_least_squares() {
    let opts = LassoOptions::default();
    for seed in 0..5 {
        let s = simulate(&small_model(), 120, 200, seed).unwrap();
        for p in 1..3 {
            let oracle = ls(&s, p);
            let a = lasso_ss(&s, p, 0.0, &opts).unwrap();
            let b = lasso_ll(&s, p, 0.0, &opts).unwrap();
            assert!(a.converged && b.converged);
            assert!((stacked(&a.model) - &oracle).amax() < 1e-6);
            assert!((stacked(&b.model) - &oracle).amax() < 1e-6);
        }
    }
}

#[test]
fn zero_penalty_ll_matches_unconstrained_mle() {
    let s = simulate(&small_model(), 150, 200, 9).unwrap();
    let ll = lasso_ll(&s, 2, 0.0, &LassoOptions::default()).unwrap();
    let mle = constrained_mle(&s, 2, &SparsityPattern::full(2, 3), &MleOptions::default()).unwrap();
    assert!((stacked(&ll.model) - stacked(&mle.model)).amax() < 1e-6);
    assert!((ll.model.noise_cov() - mle.model.noise_cov()).amax() < 1e-6);
}

#[test]
fn lambda_max_zeroes_everything_exactly() {
    let opts = LassoOptions::default();
    let s = simulate(&table1_model(4.0).unwrap(), 100, 200, 3).unwrap();
    for kind in [LossKind::SumOfSquares, LossKind::LogLikelihood] {
        for p in 1..4 {
            let lmax = lambda_max(&s, p, kind, &opts).unwrap();
            for lambda in [lmax, lmax * 1.5, 1e12] {
                let fit = match kind {
                    LossKind::SumOfSquares => lasso_ss(&s, p, lambda, &opts),
                    LossKind::LogLikelihood => lasso_ll(&s, p, lambda, &opts),
                }
                .unwrap();
                assert!(fit.model.coeffs().iter().all(|a| a.iter().all(|v| v.to_bits() == 0)));
            }
            let below = lasso_ss(&s, p, lmax * 0.99, &opts).unwrap();
            if kind == LossKind::SumOfSquares {
                assert!(below.nonzero_count() > 0);
            }
        }
    }
}

#[test]
fn scalar_soft_threshold_oracle() {
    let model = VarModel::zero_mean(vec![DMatrix::from_element(1, 1, 0.6)], DMatrix::from_element(1, 1, 1.0)).unwrap();
    let s = simulate(&model, 80, 100, 5).unwrap();
    let (y, x) = design(&s, 1, 1);
    let sxx = x.norm_squared();
    let sxy = (&x * y.transpose())[(0, 0)];
    let a_ls = sxy / sxx;
    for lambda in [0.0, 1.0, 10.0, 40.0, 2.0 * sxy.abs() - 1e-9, 2.0 * sxy.abs() + 1.0] {
        let shrink = lambda / (2.0 * sxx);
        let oracle = a_ls.signum() * (a_ls.abs() - shrink).max(0.0);
        let fit = lasso_ss(&s, 1, lambda, &LassoOptions::default()).unwrap();
        assert!((fit.model.coeff(1)[(0, 0)] - oracle).abs() < 1e-12, "{lambda}");
    }
}

#[test]
fn fixed_isotropic_covariance_rescales_lambda() {
    let opts = LassoOptions::default();
    let s = simulate(&small_model(), 100, 200, 11).unwrap();
    let lmax = lambda_max(&s, 2, LossKind::SumOfSquares, &opts).unwrap();
    for c in [0.5, 3.0] {
        let sigma = DMatrix::identity(3, 3) * c;
        for frac in [0.05, 0.2, 0.6] {
            let lambda = frac * lmax / c;
            let ll = lasso_ll_fixed_sigma(&s, 2, lambda, &sigma, &opts).unwrap();
            let ss = lasso_ss(&s, 2, c * lambda, &opts).unwrap();
            assert!((stacked(&ll.model) - stacked(&ss.model)).amax() < 1e-6);
        }
    }
    let skewed = DMatrix::from_diagonal(&DVector::from_vec(vec![0.2, 1.0, 5.0]));
    let lambda = 0.2 * lmax;
    let ll = lasso_ll_fixed_sigma(&s, 2, lambda, &skewed, &opts).unwrap();
    let ss = lasso_ss(&s, 2, lambda, &opts).unwrap();
    assert!((stacked(&ll.model) - stacked(&ss.model)).amax() > 1e-3);
}

#[test]
fn descent_traces_are_monotone() {
    let opts = LassoOptions::default();
    for seed in 0..6 {
        let s = simulate(&table1_model(25.0).unwrap(), 100, 200, seed).unwrap();
        let lmax = lambda_max(&s, 2, LossKind::SumOfSquares, &opts).unwrap();
        for frac in [0.01, 0.1, 0.5] {
            let ss = lasso_ss(&s, 2, frac * lmax, &opts).unwrap();
            for w in ss.objective_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-10 * w[0].abs().max(1.0), "{w:?}");
            }
            let ll = lasso_ll(&s, 2, frac * lmax, &opts).unwrap();
            for w in ll.objective_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-8 * w[0].abs().max(1.0), "{w:?}");
            }
        }
    }
}

#[test]
fn warm_started_path_matches_cold_fits() {
    let s = simulate(&table1_model(1.0).unwrap(), 100, 200, 21).unwrap();
    let lmax = lambda_max(&s, 2, LossKind::SumOfSquares, &LassoOptions::default()).unwrap();
    let grid: Vec<f64> = [0.5, 0.1, 0.02].iter().map(|f| f * lmax).collect();
    let plan = |g: Vec<f64>| CvPlan {
        p_range: vec![2],
        lambda_grid: Some(g),
        ..CvPlan::default()
    };
    for kind in [LossKind::SumOfSquares, LossKind::LogLikelihood] {
        let path = cross_validate(&s, &plan(grid.clone()), kind).unwrap();
        for &lambda in &grid {
            let cold = cross_validate(&s, &plan(vec![lambda]), kind).unwrap();
            for b in &cold.table {
                let a = path.table.iter().find(|a| a.lambda == lambda && a.fold == b.fold).unwrap();
                assert!((a.error - b.error).abs() < 1e-6 * a.error.max(1.0));
            }
        }
    }
}

#[test]
fn cv_with_single_candidate_returns_it() {
    let s = simulate(&small_model(), 100, 200, 2).unwrap();
    let plan = CvPlan {
        p_range: vec![1],
        lambda_grid: Some(vec![3.0]),
        ..CvPlan::default()
    };
    let r = cross_validate(&s, &plan, LossKind::LogLikelihood).unwrap();
    assert_eq!((r.order, r.lambda), (1, 3.0));
    assert_eq!(r.table.len(), 10);
    assert_eq!(r.curve.len(), 1);
    let mean = r.table.iter().map(|x| x.error).sum::<f64>() / 10.0;
    assert!((mean - r.cv_error).abs() < 1e-12);
    assert_eq!(r.fit.lambda, 3.0);
    let csv = r.table_csv();
    assert!(csv.starts_with("p,lambda,fold,error\n"));
    assert_eq!(csv.lines().count(), 11);
}

#[test]
fn cv_on_noise_selects_small_models() {
    let mut total = 0;
    for seed in 0..8 {
        let r = cross_validate(&noise(100, 3, seed), &CvPlan::default(), LossKind::SumOfSquares).unwrap();
        total += r.fit.nonzero_count();
    }
    assert!(total as f64 / 8.0 < 5.0, "{total}");
}

#[test]
fn cv_curve_covers_grid() {
    let s = simulate(&small_model(), 100, 200, 4).unwrap();
    let plan = CvPlan {
        n_lambda: 7,
        ..CvPlan::default()
    };
    let r = cross_validate(&s, &plan, LossKind::SumOfSquares).unwrap();
    // p = 0 contributes one unpenalized point
    assert_eq!(r.curve.len(), 1 + 3 * 7);
    assert_eq!(r.table.len(), 10 * r.curve.len());
    let best = r.curve.iter().map(|c| c.mean_error).fold(f64::INFINITY, f64::min);
    assert_eq!(best, r.cv_error);
    assert_eq!(r.fit.presample, 3);
}

#[test]
fn rejects_invalid_inputs() {
    let s = noise(20, 2, 0);
    let opts = LassoOptions::default();
    assert!(lasso_ss(&s, 1, -1.0, &opts).is_err());
    assert!(lasso_ss(&s, 1, f64::NAN, &opts).is_err());
    assert!(lasso_ss(&s, 20, 1.0, &opts).is_err());
    assert!(lasso_ll_fixed_sigma(&s, 1, 1.0, &DMatrix::identity(3, 3), &opts).is_err());
    let plan = |p| CvPlan {
        p_range: vec![p],
        ..CvPlan::default()
    };
    assert!(cross_validate(&s, &plan(5), LossKind::SumOfSquares).is_ok());
    // 9 of 12 rows per training set cannot identify 2 x 6 coefficients per equation
    assert!(cross_validate(&noise(20, 2, 0), &plan(8), LossKind::SumOfSquares).unwrap_err().is_input_error());
    assert!(cross_validate(&noise(12, 2, 0), &plan(3), LossKind::SumOfSquares).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn converged_fits_satisfy_kkt(seed in any::<u64>(), frac in 0.001f64..1.2, p in 1usize..4, ll in any::<bool>(), delta in prop::sample::select(vec![1.0, 100.0])) {
        let s = simulate(&table1_model(delta).unwrap(), 100, 200, seed).unwrap();
        let opts = LassoOptions::default();
        let kind = if ll { LossKind::LogLikelihood } else { LossKind::SumOfSquares };
        let lambda = frac * lambda_max(&s, p, kind, &opts).unwrap();
        let fit = if ll { lasso_ll(&s, p, lambda, &opts) } else { lasso_ss(&s, p, lambda, &opts) }.unwrap();
        prop_assert!(fit.converged);
        let v = kkt_violation(&s, &fit);
        prop_assert!(v < 1e-5, "violation {}", v);
        prop_assert!((fit.kkt_residual(&s).unwrap() - v).abs() < 1e-6);
    }

    #[test]
    fn nonzeros_shrink_with_lambda(seed in any::<u64>()) {
        let s = simulate(&small_model(), 100, 200, seed).unwrap();
        let opts = LassoOptions::default();
        let lmax = lambda_max(&s, 1, LossKind::SumOfSquares, &opts).unwrap();
        let l1 = |f: &LassoFit| f.model.coeff(1).iter().map(|v| v.abs()).sum::<f64>();
        let mut prev = f64::INFINITY;
        for frac in [0.0, 0.05, 0.2, 0.5, 1.0] {
            let fit = lasso_ss(&s, 1, frac * lmax, &opts).unwrap();
            prop_assert!(l1(&fit) <= prev + 1e-9);
            prev = l1(&fit);
        }
    }
}
