use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("argument outside domain: {0}")]
    Domain(String),

    #[error("{what} did not converge after {iterations} iterations")]
    NoConvergence { what: &'static str, iterations: usize },

    #[error("{family} family does not support {operation}")]
    UnsupportedFamily { family: &'static str, operation: &'static str },

    #[error("degenerate scale matrix: |d_{row}| = {value:e} is below the floor")]
    DegenerateScale { row: usize, value: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("ill-conditioned matrix: {0}")]
    IllConditioned(String),

    #[error("optimization failed at step {step}: {reason}")]
    Divergence { step: usize, reason: String },

    #[error("step {step}: {source}")]
    AtStep { step: usize, source: Box<Error> },

    #[error("data error: {0}")]
    Data(String),

    #[error("column {column} has {found} observations, at least {required} required")]
    TooFewObservations { column: String, found: usize, required: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors raised by numerical evaluation (as opposed to bad input
    /// data or I/O).
    pub fn is_numeric(&self) -> bool {
        if let Error::AtStep { source, .. } = self {
            return source.is_numeric();
        }
        matches!(
            self,
            Error::NonFinite(_)
                | Error::NoConvergence { .. }
                | Error::DegenerateScale { .. }
                | Error::IllConditioned(_)
                | Error::Divergence { .. }
                | Error::Domain(_)
                | Error::UnsupportedFamily { .. }
        )
    }
}
