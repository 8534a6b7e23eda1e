use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::VarModel;
use crate::error::{Error, Result};
use crate::linalg;
use crate::series::MultiSeries;

pub const DEFAULT_BURN_IN: usize = 500;

/// Draws `t_len` observations from a causal Gaussian VAR. The recursion starts
/// from zero deviations and the first `burn_in` draws are discarded.
pub fn simulate(model: &VarModel, t_len: usize, burn_in: usize, seed: u64) -> Result<MultiSeries> {
    if t_len == 0 {
        return Err(Error::invalid("cannot simulate an empty series (T = 0)"));
    }
    model.require_causal()?;
    let k = model.dim();
    let p = model.order();
    let root = linalg::sym_sqrt(model.noise_cov())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = burn_in + t_len;
    let mut x: Vec<DVector<f64>> = Vec::with_capacity(total);
    let mut eps = DVector::zeros(k);
    for t in 0..total {
        for e in eps.iter_mut() {
            *e = StandardNormal.sample(&mut rng);
        }
        let mut next = &root * &eps;
        for lag in 1..=p.min(t) {
            next += model.coeff(lag) * &x[t - lag];
        }
        x.push(next);
    }
    let mu = model.mean();
    let values = DMatrix::from_fn(t_len, k, |t, i| x[burn_in + t][i] + mu[i]);
    MultiSeries::new(values)
}
