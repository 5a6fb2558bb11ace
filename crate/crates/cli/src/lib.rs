//! Session orchestration for the thermogrid palm display: offline sessions,
//! the HTTP/WebSocket service and the `thermogrid` command line.

pub mod api;
pub mod config;
pub mod control;
pub mod events;
pub mod live;
pub mod service;
pub mod session;
mod writer;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input: configuration, arguments or files. Every problem found is
    /// listed.
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<thermogrid::Error> for CliError {
    fn from(e: thermogrid::Error) -> Self {
        use thermogrid::Error as E;
        match e {
            E::Io(e) => CliError::Runtime(e.to_string()),
            E::SimulationDiverged { .. } | E::CalibrationFailed { .. } | E::NoStep(_) => CliError::Runtime(e.to_string()),
            other => CliError::Validation(vec![other.to_string()]),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}
