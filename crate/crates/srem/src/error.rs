//! Crate-wide error type.

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Input data failed a structural check (unknown id, overlapping
    /// namespaces, missing stratum, ...). The message names the offender.
    #[error("validation error: {0}")]
    Validation(String),

    /// A lookup into a covariate table or dataset column failed.
    #[error("data error: {0}")]
    Data(String),

    /// An event was applied out of order, twice, or on an excluded dyad.
    #[error("sequencing error: {0}")]
    Sequencing(String),

    /// A dyad's endogenous covariates are undefined because its sender
    /// occupies no region before the query year.
    #[error("missing origin: sender {sender} occupies no region before {year}")]
    MissingOrigin { sender: String, year: i32 },

    /// Not enough at-risk dyads to draw the requested number of controls.
    #[error("sampling exhausted at event {event_index}: {available} at risk, m = {requested}")]
    SamplingExhausted {
        event_index: usize,
        available: usize,
        requested: usize,
    },

    /// Too few distinct values to support the requested basis dimension.
    #[error("basis rank error: {distinct} distinct knot values < k = {k}")]
    BasisRank { distinct: usize, k: usize },

    /// Model term specification inconsistent with the dataset.
    #[error("spec error: {0}")]
    Spec(String),

    /// Optimizer failed to converge within its iteration budget.
    #[error("convergence failure after {iterations} iterations (|grad| = {grad_norm:.3e}): {trace}")]
    Convergence {
        iterations: usize,
        grad_norm: f64,
        trace: String,
    },

    /// Indefinite system, overflow, or other numerical breakdown.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// More coefficients than events; the sampled likelihood cannot support it.
    #[error("model has d = {d} coefficients but only {n_events} events; reduce terms or levels")]
    TooManyCoefficients { d: usize, n_events: usize },

    /// Run configuration problems, all collected at once.
    #[error("config error:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error on {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn csv(path: impl Into<String>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }
}
