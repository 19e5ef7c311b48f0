use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A precondition of an operation was not met (shape, arity, domain).
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },
    /// An operation produced NaN or infinity.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },
    /// A custom backward rule returned the wrong number of partials.
    #[error("custom op {name}: expected {expected} partials, got {got}")]
    Arity {
        name: String,
        expected: usize,
        got: usize,
    },
    /// Every coordinate of a gradient check was excluded.
    #[error("gradient check inconclusive: all {0} coordinates excluded")]
    Inconclusive(usize),
    /// A ray has no fired sample, so no surface and no envelope exist.
    #[error("no fired sample along the ray")]
    NoSurface,
}

impl Error {
    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn non_finite(op: impl Into<String>) -> Self {
        Error::NonFinite { op: op.into() }
    }
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
