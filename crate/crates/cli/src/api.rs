//! Wire types of the HTTP API and the `/stream` socket.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thermogrid::device::ArrayFrame;
use thermogrid::psychophys::records::Experiment;
use thermogrid::psychophys::staircase::StaircaseConfig;
use thermogrid::psychophys::trials::{BrushDesign, PatternPairDesign};
use thermogrid::psychophys::{ObserverModel, Response};

/// Error body: `{"error": {"code": ..., "message": ..., "details": [...]}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub details: Vec<String>,
}

impl ApiError {
    pub fn new(status: u16, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code: code.to_string(),
            message: message.into(),
            details: Vec::new(),
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(400, "bad_request", message)
    }

    pub fn conflict(code: &str, message: impl Into<String>) -> Self {
        ApiError::new(409, code, message)
    }

    pub fn with_details(mut self, details: Vec<String>) -> Self {
        self.details = details;
        self
    }

    pub fn body(&self) -> Value {
        serde_json::json!({ "error": self })
    }
}

pub type ApiResult = Result<Value, ApiError>;

/// `POST /session`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum SessionRequest {
    Start(StartRequest),
    Stop,
    /// Sets defaults used by later `start` requests.
    Configure(ConfigureRequest),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartRequest {
    /// `exp1` (staircase), `exp3` (pattern pairs) or `exp4` (brush with
    /// questionnaire).
    pub experiment: Option<Experiment>,
    pub participant: Option<String>,
    pub seed: Option<u64>,
    /// Exp 1 condition; defaults to the `line` warm staircase.
    pub staircase: Option<StaircaseConfig>,
    pub max_trials: Option<usize>,
    pub pairs: Option<PatternPairDesign>,
    pub brush: Option<BrushDesign>,
    /// Pause between a response and the next stimulus, s.
    pub rest_s: Option<f64>,
    /// Answers on the participant's behalf, for unattended runs.
    pub auto_observer: Option<ObserverModel>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigureRequest {
    pub participant: Option<String>,
    pub seed: Option<u64>,
    pub rest_s: Option<f64>,
}

/// `POST /response`, and `{"type": "response", ...}` on `/stream`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ResponseBody {
    Choice {
        response: Response,
    },
    /// Likert items, each 1 to 7.
    Questionnaire {
        questionnaire: BTreeMap<String, u8>,
    },
}

/// `POST /patterns/play`: a named pattern, or an inline pattern file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlayRequest {
    pub name: Option<String>,
    /// Inline pattern file, same schema as `patterns/*.json`.
    pub pattern: Option<Value>,
    /// Replaces the pattern's offset, °C.
    pub offset_c: Option<f64>,
    /// Hold time for static patterns, s.
    pub duration_s: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct JitterStats {
    pub ticks: u64,
    pub p50_us: f64,
    pub p99_us: f64,
    pub max_us: f64,
    /// Ticks that started a full period or more late.
    pub overruns: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Presenting,
    AwaitingResponse,
    Resting,
    Finished,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaircaseView {
    pub trial_count: usize,
    pub current_step: f64,
    pub reversals: usize,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub experiment: Experiment,
    pub participant: String,
    pub seed: u64,
    pub phase: Phase,
    /// Trial currently shown or awaiting a response.
    pub trial: usize,
    pub trials_completed: usize,
    pub trials_total: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub staircase: Option<StaircaseView>,
    /// `completed` or `aborted` once finished.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub status: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceStatus {
    Idle,
    Playing,
    Session,
    Fault,
}

/// `GET /state`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub status: ServiceStatus,
    pub frame: ArrayFrame,
    pub session: Option<SessionView>,
    pub jitter: JitterStats,
    pub tick_hz: f64,
    pub telemetry_rate: f64,
}

/// Messages sent on `/stream`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum StreamMessage {
    Telemetry {
        frame: ArrayFrame,
    },
    Event {
        event: crate::events::SessionEvent,
    },
    /// This client fell behind and `dropped` messages were skipped.
    Lagged {
        dropped: u64,
    },
    /// Reply to a response sent on the socket.
    Ack {
        result: Value,
    },
    Error {
        error: ApiError,
    },
}
