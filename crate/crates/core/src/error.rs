use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },

    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    #[error("no convergence: {0}")]
    NoConvergence(String),

    #[error("enumeration of 2^{n} supports exceeds the cap of n <= {cap}")]
    EnumerationCap { n: usize, cap: usize },

    #[error("linear algebra failure: {0}")]
    LinearAlgebra(String),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("infeasible magnetization triple: {0}")]
    Infeasible(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field,
            reason: reason.into(),
        }
    }
}
