use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rejected input: {0}")]
    InvalidInput(String),

    #[error("{path}:{line}: {field}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        field: String,
        message: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Transport failure that survived the retry budget.
    #[error("backend error after {attempts} attempt(s): {message}")]
    Backend { attempts: u32, message: String },

    #[error("http status {status}: {body}")]
    Http { status: u16, body: String },

    #[error("backend `{backend}` does not support {capability}: {hint}")]
    Capability {
        backend: String,
        capability: String,
        hint: String,
    },

    #[error("{} of {total} sampled request(s) failed at indices {indices:?}: {first}", indices.len())]
    PartialFailure {
        indices: Vec<usize>,
        total: usize,
        first: String,
    },

    #[error("could not parse decomposition reply: {raw:?}")]
    Decomposition { raw: String },

    #[error("detector `{detector}`: {message}")]
    Detector { detector: String, message: String },

    #[error("estimator unavailable: {0}")]
    EstimatorUnavailable(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error(
        "no threshold pair reaches BAcc > {min_bacc}; best unconstrained pair \
         ({alpha_low}, {alpha_high}) has BAcc-unknown {bacc_unknown}"
    )]
    Infeasible {
        min_bacc: f64,
        alpha_low: f64,
        alpha_high: f64,
        bacc_unknown: f64,
    },

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("probe: {0}")]
    Probe(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn detector(detector: &str, message: impl Into<String>) -> Self {
        Error::Detector {
            detector: detector.to_string(),
            message: message.into(),
        }
    }

    /// True for errors caused by the remote service or transport rather than input.
    pub fn is_backend(&self) -> bool {
        matches!(
            self,
            Error::Backend { .. }
                | Error::Http { .. }
                | Error::Capability { .. }
                | Error::PartialFailure { .. }
                | Error::Generation(_)
        )
    }
}
