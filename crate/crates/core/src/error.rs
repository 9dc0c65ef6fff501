use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("kepler solver did not converge (M = {mean_anomaly}, e = {eccentricity})")]
    SolverFailure { mean_anomaly: f64, eccentricity: f64 },

    #[error("target below elevation mask ({elevation_deg:.3} deg < {mask_deg} deg)")]
    BelowHorizon { elevation_deg: f64, mask_deg: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected}, found {found}")]
    Shape { expected: usize, found: usize },

    #[error("cannot draw {requested} distinct {kind} pairs, only {available} available")]
    SamplingExhausted {
        kind: &'static str,
        requested: usize,
        available: usize,
    },

    #[error("invalid state: {0}")]
    State(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("missing truth labels: {0}")]
    MissingLabels(String),

    #[error("{context}: {source}")]
    Pair {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable machine-readable class name, used by the CLI on failure.
    pub fn class(&self) -> &'static str {
        match self {
            Error::SolverFailure { .. } => "solver_failure",
            Error::BelowHorizon { .. } => "below_horizon",
            Error::Config(_) => "config",
            Error::InvalidInput(_) => "invalid_input",
            Error::Shape { .. } => "shape",
            Error::SamplingExhausted { .. } => "sampling_exhausted",
            Error::State(_) => "state",
            Error::Divergence(_) => "divergence",
            Error::Format(_) => "format",
            Error::Domain(_) => "domain",
            Error::MissingLabels(_) => "missing_labels",
            Error::Pair { source, .. } => source.class(),
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
