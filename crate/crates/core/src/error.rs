use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("model validity: {0}")]
    ModelValidity(String),

    #[error("regularity violation: {0}")]
    Regularity(String),

    #[error("solver failure after {steps} steps on [{t_lo}, {t_hi}]: {reason}")]
    Solver {
        steps: usize,
        t_lo: f64,
        t_hi: f64,
        reason: String,
    },

    #[error("positivity violation in stratum {stratum}: no subjects took action {action}")]
    Positivity { stratum: String, action: u8 },

    #[error("empty stratum: {0}")]
    EmptyStratum(String),

    #[error("identification error: {0}")]
    Identification(String),

    #[error("nuisance fit failed: {0}")]
    Fit(String),

    #[error("variance estimate degenerate: {0}")]
    VarianceDegenerate(String),

    #[error("psi not identified: {0}")]
    NonIdentification(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
