//! Independent reference implementations used to check `aesp-core`.
//!
//! Everything here is written with plain loops over `Vec`s and shares no
//! numerical code with the crate under test. It is slow on purpose and only
//! accepts toy sizes.

// Index loops keep the reference close to the written formulas.
#![allow(clippy::needless_range_loop)]

mod finite_diff;
mod forward;
mod losses;
mod report;
mod vote;

pub use finite_diff::{central_difference, gradient_check};
pub use forward::{reference_forward, RefAdapter, RefLayer, RefLayout, RefWeights, MAX_DIM, MAX_LAYERS};
pub use losses::{contrast_loss, cosine, cross_entropy, entropy, multi_key_loss, softmax};
pub use report::OracleReport;
pub use vote::brute_force_vote;

/// Matrices are row-major `Vec` of rows.
pub type Matrix = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub enum OracleError {
    /// Inputs larger than the oracle is willing to handle.
    Refused(String),
    Shape(String),
}

impl std::fmt::Display for OracleError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OracleError::Refused(m) => write!(f, "oracle refused: {m}"),
            OracleError::Shape(m) => write!(f, "oracle shape error: {m}"),
        }
    }
}

impl std::error::Error for OracleError {}
