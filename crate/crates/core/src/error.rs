use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("field has {got} values but the grid has {expected} nodes")]
    FieldSize { expected: usize, got: usize },

    #[error("incompatible inputs: {0}")]
    Mismatch(String),

    #[error("blow-up at t = {t}: {reason}")]
    BlowUp { t: f64, reason: String },

    #[error("immersion degenerated at node {node}: det g = {det:e}")]
    DegenerateImmersion { node: usize, det: f64 },

    #[error("graph condition lost at t = {t}: min v = {min_v:e}")]
    GraphDegenerate { t: f64, min_v: f64 },

    #[error("point {0:?} lies outside the chart domain")]
    ChartDomain([f64; 4]),

    #[error("invalid probe: {0}")]
    InvalidProbe(String),

    #[error("trajectory completed without blow-up")]
    NoBlowUp,

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("{0}")]
    Validation(String),

    #[error("{0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    pub(crate) fn blow_up(t: f64, reason: impl Into<String>) -> Self {
        Error::BlowUp {
            t,
            reason: reason.into(),
        }
    }
}
