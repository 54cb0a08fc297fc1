use thiserror::Error;

pub type Result<T> = std::result::Result<T, ScbfError>;

#[derive(Error, Debug)]
pub enum ScbfError {
    /// The state norm crossed the guard threshold during time stepping.
    /// Carries the last finite time and H-norm so callers can report where
    /// the run died; the guard exists because the explicit nonlinearity can
    /// overflow at large dt even though the continuous dynamics cannot.
    #[error("state blew up at t = {t}: ||X||_H = {norm_h} exceeds {guard}")]
    BlowUp { t: f64, norm_h: f64, guard: f64 },

    #[error("fields live on different lattices ({0} vs {1})")]
    LatticeMismatch(String, String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("unsupported Lp exponent p = {0} (supported: 2, 3, 4, 6, inf)")]
    UnsupportedLp(String),

    #[error("linear solve failed: {0}")]
    LinearSolve(String),

    #[error("solver did not converge in {iterations} iterations (residuals: {history:?})")]
    NoConvergence { iterations: usize, history: Vec<f64> },

    #[error("serialized field is invalid: {0}")]
    BadFieldRecord(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("csv write failed: {0}")]
    Csv(String),
}

impl From<csv::Error> for ScbfError {
    fn from(e: csv::Error) -> Self {
        ScbfError::Csv(e.to_string())
    }
}
