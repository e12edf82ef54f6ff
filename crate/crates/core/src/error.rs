use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input data or configuration rejected before any computation.
    #[error("validation error: {0}")]
    Validation(String),

    /// A value outside its family's support, located by subject and marker.
    #[error("domain violation for subject '{subject}', marker '{marker}': {detail}")]
    Domain {
        subject: String,
        marker: String,
        detail: String,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Method not applicable to the model at hand (e.g. closed form with a poisson marker).
    #[error("incompatible method: {0}")]
    Method(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A block of the MCMC sweep failed; carries a compact dump of the state.
    #[error("chain failed at iteration {iteration} in block '{block}': {message}\nstate: {state}")]
    Chain {
        iteration: u64,
        block: &'static str,
        message: String,
        state: String,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by the inputs rather than by the numerics.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_)
                | Error::Domain { .. }
                | Error::Dimension(_)
                | Error::Method(_)
                | Error::Csv(_)
                | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
