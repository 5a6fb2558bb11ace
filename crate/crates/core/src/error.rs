use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A physical quantity is outside the range the model accepts.
    #[error("{quantity} = {value} outside [{min}, {max}]")]
    LimitViolation {
        quantity: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("division guard: {0}")]
    DivisionGuard(&'static str),

    #[error("simulation diverged on channel {channel} at t = {time_s:.4} s")]
    SimulationDiverged { channel: usize, time_s: f64 },

    #[error(
        "calibration failed: warm rise {warm_rise_s:.3} s (target {warm_target_s:.3} s), \
         cool rise {cool_rise_s:.3} s (target {cool_target_s:.3} s)"
    )]
    CalibrationFailed {
        warm_rise_s: f64,
        warm_target_s: f64,
        cool_rise_s: f64,
        cool_target_s: f64,
    },

    #[error("no step detected in trace: {0}")]
    NoStep(&'static str),

    #[error("t = {t} s outside profile domain [{start}, {end}]")]
    OutsideProfile { t: f64, start: f64, end: f64 },

    #[error("frame rejected at byte {offset}: {reason}")]
    FrameRejected { offset: usize, reason: &'static str },

    #[error("schema error in `{field}`: {message}")]
    Schema { field: String, message: String },

    #[error("staircase already finished")]
    StaircaseFinished,

    #[error("staircase has not finished")]
    StaircaseNotFinished,

    #[error("all differences are zero")]
    AllZeroDifferences,

    #[error("backend fault: {0}")]
    Backend(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter { name, reason: reason.into() }
    }
}
