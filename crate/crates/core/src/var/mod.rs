//! VAR(p) models: representation, sparsity patterns, constrained maximum
//! likelihood, coefficient inference, forecasting and simulation.

mod design;
pub(crate) mod forecast;
pub(crate) mod mle;
mod simulate;

pub use design::StackedDesign;
pub use forecast::{forecast, Forecast};
pub use mle::{
    constrained_mle, log_likelihood, log_likelihood_conditional, t_statistics, ConstrainedFit,
    MleOptions, TStat,
};
pub use simulate::{simulate, DEFAULT_BURN_IN};

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Position of one autoregressive coefficient `A_lag(row, col)`.
///
/// `lag` is 1-based, `row` and `col` are 0-based series indices. The derived
/// ordering is `(lag, row, col)`, which is the tie-break order used when
/// ranking coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CoeffIndex {
    pub lag: usize,
    pub row: usize,
    pub col: usize,
}

impl CoeffIndex {
    pub fn new(lag: usize, row: usize, col: usize) -> Self {
        Self { lag, row, col }
    }

    /// Position in `vec(A_1, ..., A_p)` (column stacking of the `K x Kp` block).
    pub fn alpha_position(&self, dim: usize) -> usize {
        ((self.lag - 1) * dim + self.col) * dim + self.row
    }

    /// Column of the stacked regressor matrix this coefficient multiplies.
    pub fn regressor(&self, dim: usize) -> usize {
        (self.lag - 1) * dim + self.col
    }
}

impl fmt::Display for CoeffIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "A{}({},{})", self.lag, self.row, self.col)
    }
}

/// Gaussian VAR(p): `Y_t - mu = sum_k A_k (Y_{t-k} - mu) + Z_t`, `Z_t ~ N(0, noise_cov)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelDoc", into = "ModelDoc")]
pub struct VarModel {
    coeffs: Vec<DMatrix<f64>>,
    noise_cov: DMatrix<f64>,
    mean: DVector<f64>,
}

impl VarModel {
    pub fn new(coeffs: Vec<DMatrix<f64>>, noise_cov: DMatrix<f64>, mean: DVector<f64>) -> Result<Self> {
        let k = noise_cov.nrows();
        if k == 0 || noise_cov.ncols() != k {
            return Err(Error::invalid("noise covariance must be a non-empty square matrix"));
        }
        if mean.len() != k {
            return Err(Error::invalid("mean length does not match dimension"));
        }
        for (lag, a) in coeffs.iter().enumerate() {
            if a.nrows() != k || a.ncols() != k {
                return Err(Error::invalid(format!("A_{} is not {k}x{k}", lag + 1)));
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("A_{} has non-finite entries", lag + 1)));
            }
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("mean has non-finite entries"));
        }
        let scale = noise_cov.amax().max(1.0);
        if linalg::max_asymmetry(&noise_cov) > 1e-12 * scale {
            return Err(Error::Domain("noise covariance is not symmetric".into()));
        }
        linalg::cholesky(&noise_cov, "noise covariance")?;
        Ok(Self {
            coeffs,
            noise_cov: linalg::symmetrize(&noise_cov),
            mean,
        })
    }

    /// Zero-mean model.
    pub fn zero_mean(coeffs: Vec<DMatrix<f64>>, noise_cov: DMatrix<f64>) -> Result<Self> {
        let k = noise_cov.nrows();
        Self::new(coeffs, noise_cov, DVector::zeros(k))
    }

    pub fn white_noise(noise_cov: DMatrix<f64>) -> Result<Self> {
        Self::zero_mean(Vec::new(), noise_cov)
    }

    pub fn order(&self) -> usize {
        self.coeffs.len()
    }

    pub fn dim(&self) -> usize {
        self.noise_cov.nrows()
    }

    pub fn coeffs(&self) -> &[DMatrix<f64>] {
        &self.coeffs
    }

    /// `A_lag`, 1-based.
    pub fn coeff(&self, lag: usize) -> &DMatrix<f64> {
        &self.coeffs[lag - 1]
    }

    pub fn get(&self, idx: CoeffIndex) -> f64 {
        if idx.lag == 0 || idx.lag > self.order() {
            0.0
        } else {
            self.coeffs[idx.lag - 1][(idx.row, idx.col)]
        }
    }

    pub fn noise_cov(&self) -> &DMatrix<f64> {
        &self.noise_cov
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn with_mean(mut self, mean: DVector<f64>) -> Result<Self> {
        if mean.len() != self.dim() {
            return Err(Error::invalid("mean length does not match dimension"));
        }
        self.mean = mean;
        Ok(self)
    }

    pub fn with_noise_cov(self, noise_cov: DMatrix<f64>) -> Result<Self> {
        Self::new(self.coeffs, noise_cov, self.mean)
    }

    /// `[A_1 ... A_p]` as a `K x Kp` block.
    pub fn stacked_coeffs(&self) -> DMatrix<f64> {
        let k = self.dim();
        let mut out = DMatrix::zeros(k, k * self.order());
        for (l, a) in self.coeffs.iter().enumerate() {
            out.view_mut((0, l * k), (k, k)).copy_from(a);
        }
        out
    }

    pub fn nonzero_count(&self) -> usize {
        self.coeffs.iter().map(|a| a.iter().filter(|v| **v != 0.0).count()).sum()
    }

    /// Largest lag with a non-zero coefficient.
    pub fn effective_order(&self) -> usize {
        self.coeffs
            .iter()
            .rposition(|a| a.iter().any(|v| *v != 0.0))
            .map_or(0, |l| l + 1)
    }

    /// Drops trailing all-zero lag matrices.
    pub fn truncated(&self) -> Self {
        let p = self.effective_order();
        Self {
            coeffs: self.coeffs[..p].to_vec(),
            noise_cov: self.noise_cov.clone(),
            mean: self.mean.clone(),
        }
    }

    /// Pads with zero lag matrices up to `order`.
    pub fn padded(&self, order: usize) -> Self {
        let mut out = self.clone();
        let k = self.dim();
        while out.coeffs.len() < order {
            out.coeffs.push(DMatrix::zeros(k, k));
        }
        out
    }

    /// Companion matrix of the lag polynomial (`Kp x Kp`).
    pub fn companion(&self) -> DMatrix<f64> {
        let k = self.dim();
        let p = self.order();
        let mut c = DMatrix::zeros(k * p, k * p);
        for (l, a) in self.coeffs.iter().enumerate() {
            c.view_mut((0, l * k), (k, k)).copy_from(a);
        }
        for i in k..k * p {
            c[(i, i - k)] = 1.0;
        }
        c
    }

    /// Largest modulus among companion eigenvalues (0 for p = 0).
    pub fn spectral_radius(&self) -> f64 {
        if self.order() == 0 {
            return 0.0;
        }
        self.companion()
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    /// True iff `det(I - sum A_k z^k)` has no roots in the closed unit disk.
    pub fn is_causal(&self) -> bool {
        self.spectral_radius() < 1.0 - 1e-10
    }

    pub(crate) fn require_causal(&self) -> Result<()> {
        if self.is_causal() {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "model is not causal (companion spectral radius {:.6})",
                self.spectral_radius()
            )))
        }
    }

    /// `I - sum_k A_k z^k` evaluated at a complex point.
    pub fn lag_polynomial(&self, z: Complex<f64>) -> DMatrix<Complex<f64>> {
        let k = self.dim();
        let mut out = DMatrix::<Complex<f64>>::identity(k, k);
        let mut zk = Complex::new(1.0, 0.0);
        for a in &self.coeffs {
            zk *= z;
            for i in 0..k {
                for j in 0..k {
                    out[(i, j)] -= zk * a[(i, j)];
                }
            }
        }
        out
    }

    /// Relabels series: new series `c` is old series `perm[c]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        crate::series::check_permutation(perm, self.dim())?;
        let k = self.dim();
        let pm = |m: &DMatrix<f64>| DMatrix::from_fn(k, k, |i, j| m[(perm[i], perm[j])]);
        Ok(Self {
            coeffs: self.coeffs.iter().map(pm).collect(),
            noise_cov: pm(&self.noise_cov),
            mean: DVector::from_fn(k, |i, _| self.mean[perm[i]]),
        })
    }

    pub fn support(&self) -> SparsityPattern {
        let k = self.dim();
        let mut entries = Vec::new();
        for (l, a) in self.coeffs.iter().enumerate() {
            for j in 0..k {
                for i in 0..k {
                    if a[(i, j)] != 0.0 {
                        entries.push(CoeffIndex::new(l + 1, i, j));
                    }
                }
            }
        }
        SparsityPattern {
            order: self.order(),
            dim: k,
            entries,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::invalid(format!("model JSON: {e}")))
    }
}

/// On-disk form: `{p, K, A: [lag][row][col], sigma_z, mu}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    p: usize,
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "A")]
    a: Vec<Vec<Vec<f64>>>,
    sigma_z: Vec<Vec<f64>>,
    #[serde(default)]
    mu: Option<Vec<f64>>,
}

fn rows_to_matrix(rows: &[Vec<f64>], k: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != k || rows.iter().any(|r| r.len() != k) {
        return Err(Error::invalid(format!("{what} must be {k}x{k}")));
    }
    Ok(DMatrix::from_fn(k, k, |i, j| rows[i][j]))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl TryFrom<ModelDoc> for VarModel {
    type Error = Error;

    fn try_from(doc: ModelDoc) -> Result<Self> {
        if doc.a.len() != doc.p {
            return Err(Error::invalid(format!("A has {} lags but p = {}", doc.a.len(), doc.p)));
        }
        let coeffs = doc
            .a
            .iter()
            .enumerate()
            .map(|(l, rows)| rows_to_matrix(rows, doc.k, &format!("A[{l}]")))
            .collect::<Result<Vec<_>>>()?;
        let sigma = rows_to_matrix(&doc.sigma_z, doc.k, "sigma_z")?;
        let mean = match doc.mu {
            Some(mu) if mu.len() != doc.k => return Err(Error::invalid("mu has wrong length")),
            Some(mu) => DVector::from_vec(mu),
            None => DVector::zeros(doc.k),
        };
        VarModel::new(coeffs, sigma, mean)
    }
}

impl From<VarModel> for ModelDoc {
    fn from(m: VarModel) -> Self {
        ModelDoc {
            p: m.order(),
            k: m.dim(),
            a: m.coeffs.iter().map(matrix_to_rows).collect(),
            sigma_z: matrix_to_rows(&m.noise_cov),
            mu: Some(m.mean.iter().copied().collect()),
        }
    }
}

/// Set of coefficients allowed to be non-zero in a VAR(p) of dimension K.
///
/// Equivalent to a `K^2 p x m` selection matrix with a single 1 per column.
/// Entries keep their insertion order, which is the order of the free
/// parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparsityPattern {
    order: usize,
    dim: usize,
    entries: Vec<CoeffIndex>,
}

impl SparsityPattern {
    pub fn new(order: usize, dim: usize, entries: Vec<CoeffIndex>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for e in &entries {
            if e.lag == 0 || e.lag > order || e.row >= dim || e.col >= dim {
                return Err(Error::invalid(format!("{e} out of range for p = {order}, K = {dim}")));
            }
            if !seen.insert(*e) {
                return Err(Error::invalid(format!("duplicate pattern entry {e}")));
            }
        }
        Ok(Self { order, dim, entries })
    }

    pub fn empty(order: usize, dim: usize) -> Self {
        Self {
            order,
            dim,
            entries: Vec::new(),
        }
    }

    /// Every coefficient free, in `vec` order.
    pub fn full(order: usize, dim: usize) -> Self {
        let mut entries = Vec::with_capacity(dim * dim * order);
        for lag in 1..=order {
            for col in 0..dim {
                for row in 0..dim {
                    entries.push(CoeffIndex::new(lag, row, col));
                }
            }
        }
        Self { order, dim, entries }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[CoeffIndex] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.dim * self.dim * self.order
    }

    pub fn contains(&self, idx: &CoeffIndex) -> bool {
        self.entries.contains(idx)
    }

    pub fn is_subset_of(&self, other: &SparsityPattern) -> bool {
        let set: BTreeSet<_> = other.entries.iter().collect();
        self.entries.iter().all(|e| set.contains(e))
    }

    /// Same entries viewed as a pattern of a (larger) order.
    pub fn with_order(&self, order: usize) -> Result<Self> {
        Self::new(order, self.dim, self.entries.clone())
    }

    /// Dense constraint matrix `R` with `alpha = R gamma`.
    pub fn constraint_matrix(&self) -> DMatrix<f64> {
        let n = self.dim * self.dim * self.order;
        let mut r = DMatrix::zeros(n, self.entries.len());
        for (c, e) in self.entries.iter().enumerate() {
            r[(e.alpha_position(self.dim), c)] = 1.0;
        }
        r
    }

    /// Builds the coefficient matrices `A_1..A_p` from free parameters.
    pub fn scatter(&self, gamma: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let mut coeffs = vec![DMatrix::zeros(self.dim, self.dim); self.order];
        for (e, g) in self.entries.iter().zip(gamma.iter()) {
            coeffs[e.lag - 1][(e.row, e.col)] = *g;
        }
        coeffs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ar1(a: f64) -> VarModel {
        VarModel::zero_mean(vec![DMatrix::from_element(1, 1, a)], DMatrix::identity(1, 1)).unwrap()
    }

    #[test]
    fn causality_examples() {
        assert!(VarModel::white_noise(DMatrix::identity(3, 3)).unwrap().is_causal());
        assert!(!ar1(1.0).is_causal());
        assert!(!ar1(-1.2).is_causal());
        assert!(ar1(0.5).is_causal());
    }

    #[test]
    fn rejects_bad_covariance() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(matches!(VarModel::white_noise(asym), Err(Error::Domain(_))));
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(VarModel::white_noise(indefinite), Err(Error::Domain(_))));
    }

    #[test]
    fn pattern_validation() {
        assert!(SparsityPattern::new(1, 2, vec![CoeffIndex::new(2, 0, 0)]).is_err());
        assert!(SparsityPattern::new(1, 2, vec![CoeffIndex::new(0, 0, 0)]).is_err());
        let dup = vec![CoeffIndex::new(1, 0, 1), CoeffIndex::new(1, 0, 1)];
        assert!(SparsityPattern::new(1, 2, dup).is_err());
    }

    #[test]
    fn constraint_matrix_matches_two_dimensional_var2_layout() {
        // A1(1,1), A1(2,1), A1(2,2), A2(2,1) free (1-based), as in the column-stacked layout.
        let entries = vec![
            CoeffIndex::new(1, 0, 0),
            CoeffIndex::new(1, 1, 0),
            CoeffIndex::new(1, 1, 1),
            CoeffIndex::new(2, 1, 0),
        ];
        let r = SparsityPattern::new(2, 2, entries).unwrap().constraint_matrix();
        let expected_rows = [0usize, 1, 3, 5];
        assert_eq!(r.shape(), (8, 4));
        for (c, &row) in expected_rows.iter().enumerate() {
            for i in 0..8 {
                assert_eq!(r[(i, c)], if i == row { 1.0 } else { 0.0 });
            }
        }
        assert_eq!(r.rank(1e-12), 4);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let a = DMatrix::from_row_slice(2, 2, &[0.1, 1.0 / 3.0, -2.0e-7, 0.7]);
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.123456789012345678, 0.123456789012345678, 2.0]);
        let m = VarModel::new(vec![a], s, DVector::from_vec(vec![std::f64::consts::PI, -1.0])).unwrap();
        let back = VarModel::from_json(&m.to_json()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn json_rejects_unknown_keys() {
        let text = r#"{"p":0,"K":1,"A":[],"sigma_z":[[1.0]],"mu":[0.0],"extra":1}"#;
        assert!(VarModel::from_json(text).is_err());
    }

    #[test]
    fn truncation_and_support() {
        let k = 2;
        let a1 = DMatrix::from_row_slice(k, k, &[0.5, 0.0, 0.0, 0.0]);
        let m = VarModel::zero_mean(vec![a1, DMatrix::zeros(k, k)], DMatrix::identity(k, k)).unwrap();
        assert_eq!(m.effective_order(), 1);
        assert_eq!(m.truncated().order(), 1);
        assert_eq!(m.support().entries(), &[CoeffIndex::new(1, 0, 0)]);
        assert_eq!(m.nonzero_count(), 1);
    }
}
