//! Adaptive staircase, simulated observers, trial tables and statistics.

pub mod observer;
pub mod records;
pub mod staircase;
pub mod stats;
pub mod trials;

use serde::{Deserialize, Serialize};

pub use observer::ObserverModel;
pub use records::TrialRecord;
pub use staircase::{StaircaseConfig, StaircaseState};

/// Direction of a thermal stimulus relative to ambient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Warm,
    Cool,
}

impl Polarity {
    pub fn sign(self) -> f64 {
        match self {
            Polarity::Warm => 1.0,
            Polarity::Cool => -1.0,
        }
    }

    pub const BOTH: [Polarity; 2] = [Polarity::Warm, Polarity::Cool];
}

impl std::fmt::Display for Polarity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Polarity::Warm => "warm",
            Polarity::Cool => "cool",
        })
    }
}

/// Forced-choice judgement of a reference/test pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Response {
    Same,
    Different,
}

impl std::fmt::Display for Response {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Response::Same => "same",
            Response::Different => "different",
        })
    }
}
