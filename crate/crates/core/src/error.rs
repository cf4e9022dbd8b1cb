use thiserror::Error;

/// Errors raised by the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("inadmissible exponents (d={d}, rho={rho}, q={q}): {reason}")]
    Inadmissible {
        d: usize,
        rho: String,
        q: String,
        reason: String,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("drift is not in the declared Lq-Lrho class: {0}")]
    NotMember(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("grids do not match: {0}")]
    GridMismatch(String),

    #[error("mass defect {defect:.3e} at step {step} exceeds budget {budget:.3e}; enlarge the grid radius")]
    MassDefect { step: usize, defect: f64, budget: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("quadrature did not reach tolerance: {0}")]
    Quadrature(String),

    #[error("non-convergent iteration: {0}")]
    NonConvergent(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
