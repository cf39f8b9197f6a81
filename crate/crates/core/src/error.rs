use thiserror::Error;

/// Errors raised by the dynamics, orbit generation, optimization and simulation layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("state is {distance:e} LU from primary {body}, inside the singularity guard")]
    Singular { body: usize, distance: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("no x-z plane crossing within {span} rad of anomaly")]
    NoCrossing { span: f64 },

    #[error("root bracketing failed: {0}")]
    Bracketing(String),

    #[error("differential correction did not converge after {iterations} iterations (residual {residual:e})")]
    ShootingDiverged { iterations: usize, residual: f64 },

    #[error("singular correction jacobian")]
    SingularJacobian,

    #[error("QP solver numerical failure: {0}")]
    QpNumerical(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
