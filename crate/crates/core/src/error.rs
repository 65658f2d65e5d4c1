use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("time not on grid: {0}")]
    OffGrid(f64),
    #[error("interval reversed: s = {s} > t = {t}")]
    Reversed { s: f64, t: f64 },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("exponent must be greater or equal than 1.0, got {0}")]
    Exponent(f64),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("non-finite germ value at sample {sample}, cell ({s}, {t})")]
    NonFinite { sample: usize, s: usize, t: usize },
    #[error("representation requires martingale (conditional drift {defect:e} above {tol:e})")]
    NotMartingale { defect: f64, tol: f64 },
    #[error("grid too coarse for L: dt*L = {0}")]
    GridTooCoarse(f64),
    #[error("outside contraction regime: {0}")]
    OutsideContraction(String),
    #[error("rough path too rough for grid: cell [{start}, {end}] ratio {ratio}")]
    TooRough { start: usize, end: usize, ratio: f64 },
    #[error("outside flow-transform smallness regime: {0}")]
    OutsideFlowRegime(String),
    #[error("flow inversion failed at time index {index} for target {target}")]
    FlowInversion { index: usize, target: f64 },
    #[error("solver failed at (t = {t}, x = {x}): {source}")]
    AtPoint { t: f64, x: f64, source: Box<Error> },
    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
