use thiserror::Error;

/// Errors produced by the estimation lab.
#[derive(Debug, Error)]
pub enum Error {
    /// A covariance or problem specification is malformed.
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    /// An operation received an argument outside its admissible range.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Matrix or vector shapes do not agree.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// The closed forms are undefined in the band |n - p_bar| <= 1; callers
    /// receive this tag instead of an extrapolated number.
    #[error("near interpolation threshold (n = {n}, p_bar = {p_bar}): closed form undefined")]
    NearThreshold { n: usize, p_bar: usize },

    /// A formula's hypotheses are violated (e.g. p_bar <= 1).
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Tabular data could not be ingested.
    #[error("ingestion failed: {0}")]
    Ingest(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
