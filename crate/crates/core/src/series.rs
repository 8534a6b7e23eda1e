//! Multivariate observation matrix.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `T x K` block of observations: one row per time point, one column per
/// marginal series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiSeries {
    values: DMatrix<f64>,
}

impl MultiSeries {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::invalid("series must have at least one row and one column"));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let (r, c) = (pos % values.nrows(), pos / values.nrows());
            return Err(Error::invalid(format!("non-finite value at row {r}, column {c}")));
        }
        if values.nrows() <= 2 * values.ncols() {
            log::warn!(
                "short series: T = {} is not above 2K = {}",
                values.nrows(),
                2 * values.ncols()
            );
        }
        Ok(Self { values })
    }

    /// Builds a series from row vectors; all rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let t = rows.len();
        let k = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != k) {
            return Err(Error::invalid(format!(
                "row {bad} has {} values, expected {k}",
                rows[bad].len()
            )));
        }
        Self::new(DMatrix::from_fn(t, k, |i, j| rows[i][j]))
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn means(&self) -> DVector<f64> {
        let t = self.len() as f64;
        DVector::from_iterator(self.dim(), self.values.column_iter().map(|c| c.sum() / t))
    }

    /// Returns the de-meaned observations together with the column means.
    pub fn centered(&self) -> (DMatrix<f64>, DVector<f64>) {
        let means = self.means();
        let mut data = self.values.clone();
        for (j, mut col) in data.column_iter_mut().enumerate() {
            col.add_scalar_mut(-means[j]);
        }
        (data, means)
    }

    /// Rows `start..end` as a new series.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::invalid(format!(
                "row range {start}..{end} out of bounds for length {}",
                self.len()
            )));
        }
        Ok(Self {
            values: self.values.rows(start, end - start).into_owned(),
        })
    }

    /// Reorders the columns: new column `c` is old column `perm[c]`.
    pub fn permute_columns(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.dim())?;
        Ok(Self {
            values: DMatrix::from_fn(self.len(), self.dim(), |t, c| self.values[(t, perm[c])]),
        })
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            values: &self.values * c,
        }
    }
}

pub(crate) fn check_permutation(perm: &[usize], k: usize) -> Result<()> {
    let mut seen = vec![false; k];
    if perm.len() != k {
        return Err(Error::invalid("permutation length does not match dimension"));
    }
    for &p in perm {
        if p >= k || seen[p] {
            return Err(Error::invalid("not a permutation"));
        }
        seen[p] = true;
    }
    Ok(())
}
