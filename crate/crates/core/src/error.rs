use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("calibration failed after {iterations} iterations: bracket [{eps_lo}, {eps_hi}] with accuracies [{acc_lo:.4}, {acc_hi:.4}] never hit {target:.4} +/- {tol}")]
    Calibration {
        target: f64,
        tol: f64,
        iterations: usize,
        eps_lo: f64,
        eps_hi: f64,
        acc_lo: f64,
        acc_hi: f64,
    },

    #[error("degenerate system: {0}")]
    Degenerate(String),

    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("parse error{}: {msg}", location(.row, .column))]
    Parse {
        row: Option<usize>,
        column: Option<String>,
        msg: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn location(row: &Option<usize>, column: &Option<String>) -> String {
    match (row, column) {
        (Some(r), Some(c)) => format!(" at row {r}, column `{c}`"),
        (Some(r), None) => format!(" at row {r}"),
        (None, Some(c)) => format!(" in column `{c}`"),
        (None, None) => String::new(),
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
