use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Lagged-regressor layout of a VAR(p) on the sample `t = presample .. T-1`.
///
/// Column `n` of `lagged` stacks `Y_{t-1}, ..., Y_{t-p}` for `t = presample + n`;
/// column `n` of `response` is `Y_t`. Input data are expected to be de-meaned.
#[derive(Debug, Clone)]
pub struct StackedDesign {
    pub lagged: DMatrix<f64>,
    pub response: DMatrix<f64>,
    pub order: usize,
    pub presample: usize,
}

impl StackedDesign {
    pub fn new(data: &DMatrix<f64>, order: usize, presample: usize) -> Result<Self> {
        Self::for_rows(data, order, &(presample..data.nrows()).collect::<Vec<_>>(), presample)
    }

    /// Design restricted to the response time points in `rows` (each `>= order`).
    pub fn for_rows(data: &DMatrix<f64>, order: usize, rows: &[usize], presample: usize) -> Result<Self> {
        let (t_len, k) = data.shape();
        if presample < order {
            return Err(Error::invalid(format!("presample {presample} is smaller than order {order}")));
        }
        if t_len <= presample {
            return Err(Error::invalid(format!(
                "series of length {t_len} leaves no observations after {presample} presample points"
            )));
        }
        if let Some(bad) = rows.iter().find(|&&t| t < order || t >= t_len) {
            return Err(Error::invalid(format!("response row {bad} has no complete lag history")));
        }
        let n = rows.len();
        let mut lagged = DMatrix::zeros(k * order, n);
        let mut response = DMatrix::zeros(k, n);
        for (c, &t) in rows.iter().enumerate() {
            for i in 0..k {
                response[(i, c)] = data[(t, i)];
            }
            for l in 0..order {
                for i in 0..k {
                    lagged[(l * k + i, c)] = data[(t - l - 1, i)];
                }
            }
        }
        Ok(Self {
            lagged,
            response,
            order,
            presample,
        })
    }

    pub fn dim(&self) -> usize {
        self.response.nrows()
    }

    /// Number of response vectors.
    pub fn n_obs(&self) -> usize {
        self.response.ncols()
    }

    /// `Y - A L` for a `K x Kp` coefficient block.
    pub fn residuals(&self, stacked: &DMatrix<f64>) -> DMatrix<f64> {
        if self.order == 0 {
            self.response.clone()
        } else {
            &self.response - stacked * &self.lagged
        }
    }

    /// `(Y - A L)(Y - A L)'`.
    pub fn residual_cross_product(&self, stacked: &DMatrix<f64>) -> DMatrix<f64> {
        let r = self.residuals(stacked);
        &r * r.transpose()
    }
}
