//! Sparse vector autoregression.
//!
//! The main entry point is [`two_stage::fit_svar`], which screens pairs of
//! series by partial spectral coherence, selects the order and the number of
//! retained pairs by BIC, and then prunes individual coefficients by t-ratio
//! and BIC. Lasso baselines live in [`lasso`]; the simulation study and
//! forecast scoring live in [`eval`].

pub mod error;
pub mod eval;
pub mod lasso;
pub mod linalg;
pub mod series;
pub mod spectral;
pub mod two_stage;
pub mod var;

pub use error::{Error, Result};
pub use series::MultiSeries;
pub use var::{CoeffIndex, SparsityPattern, VarModel};
