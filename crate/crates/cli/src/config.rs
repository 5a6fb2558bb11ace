//! Session configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thermogrid::calibrate::ModelFile;
use thermogrid::device::DeviceConfig;
use thermogrid::psychophys::staircase::StaircaseConfig;
use thermogrid::psychophys::trials::{BrushDesign, PassthroughDesign, PatternPairDesign};
use thermogrid::psychophys::{ObserverModel, Polarity};
use thermogrid::SCHEMA_VERSION;

use crate::CliError;

/// Staircase conditions plus the shared presentation timing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Exp1Config {
    /// One staircase per entry, run in order.
    pub conditions: Vec<StaircaseConfig>,
    /// Return-to-ambient pause after each trial, s.
    pub rest_s: f64,
    pub max_trials: usize,
}

impl Default for Exp1Config {
    fn default() -> Self {
        let mut conditions = Vec::new();
        for pattern in ["line", "all"] {
            for polarity in Polarity::BOTH {
                conditions.push(StaircaseConfig::new(pattern, polarity));
            }
        }
        Exp1Config {
            conditions,
            rest_s: 2.0,
            max_trials: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Exp2Config {
    pub design: PassthroughDesign,
    /// Time in contact with each object before judging, s.
    pub contact_s: f64,
    pub rest_s: f64,
}

impl Default for Exp2Config {
    fn default() -> Self {
        Exp2Config {
            design: PassthroughDesign::default(),
            contact_s: 3.0,
            rest_s: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Exp3Config {
    pub design: PatternPairDesign,
    pub rest_s: f64,
}

impl Default for Exp3Config {
    fn default() -> Self {
        Exp3Config {
            design: PatternPairDesign::default(),
            rest_s: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Exp4Config {
    pub design: BrushDesign,
    /// Observation window after each sweep onset, s.
    pub window_s: f64,
}

impl Default for Exp4Config {
    fn default() -> Self {
        Exp4Config {
            design: BrushDesign::default(),
            window_s: 1.0,
        }
    }
}

/// Experiments to run; absent sections are skipped.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experiments {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exp1: Option<Exp1Config>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exp2: Option<Exp2Config>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exp3: Option<Exp3Config>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exp4: Option<Exp4Config>,
}

/// Simulated participant used by offline sessions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Observers {
    /// Judges staircase reference/test pairs.
    pub staircase: ObserverModel,
    /// Judges the temperature difference between two contacted objects.
    pub passthrough: ObserverModel,
    /// Judges the largest per-cell change between two patterns.
    pub pattern: ObserverModel,
}

impl Default for Observers {
    fn default() -> Self {
        Observers {
            staircase: ObserverModel::new(2.5, 0.8, 0),
            passthrough: ObserverModel::new(1.2, 0.6, 0),
            pattern: ObserverModel::new(2.0, 0.8, 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SessionConfig {
    pub schema: u32,
    pub participant: String,
    pub seed: u64,
    pub device: DeviceConfig,
    /// Model file from `calibrate`; the built-in model when absent.
    pub model_file: Option<PathBuf>,
    pub experiments: Experiments,
    pub observers: Observers,
    /// Rate of frames written to `telemetry.jsonl`, Hz.
    pub telemetry_hz: f64,
    pub out_dir: Option<PathBuf>,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            schema: SCHEMA_VERSION,
            participant: "sim01".into(),
            seed: 1,
            device: DeviceConfig::default(),
            model_file: None,
            experiments: Experiments::default(),
            observers: Observers::default(),
            telemetry_hz: 5.0,
            out_dir: None,
        }
    }
}

impl SessionConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Validation(vec![format!("{}: {e}", path.display())]))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(vec![format!("{}: line {} column {}: {e}", path.display(), e.line(), e.column())]))
    }

    /// Every problem with the configuration, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |what: &str, r: thermogrid::Result<()>| {
            if let Err(e) = r {
                out.push(format!("{what}: {e}"));
            }
        };
        if self.schema != SCHEMA_VERSION {
            check("schema", Err(thermogrid::Error::invalid("schema", format!("expected {SCHEMA_VERSION}"))));
        }
        if self.participant.trim().is_empty() {
            check("participant", Err(thermogrid::Error::invalid("participant", "must not be empty")));
        }
        check("device", self.device.validate());
        if let Some(p) = &self.model_file {
            let r = std::fs::read_to_string(p)
                .map_err(thermogrid::Error::from)
                .and_then(|t| ModelFile::from_json(&t).map(|_| ()));
            check(&format!("model_file {}", p.display()), r);
        }
        if !(self.telemetry_hz > 0.0 && self.telemetry_hz <= self.device.tick_hz) {
            check(
                "telemetry_hz",
                Err(thermogrid::Error::invalid("telemetry_hz", "must be positive and at most tick_hz")),
            );
        }
        check("observers.staircase", self.observers.staircase.validate());
        check("observers.passthrough", self.observers.passthrough.validate());
        check("observers.pattern", self.observers.pattern.validate());
        let env = self.device.safety_envelope;
        if let Some(e1) = &self.experiments.exp1 {
            if e1.conditions.is_empty() {
                check("exp1.conditions", Err(thermogrid::Error::invalid("conditions", "need at least one")));
            }
            for (i, c) in e1.conditions.iter().enumerate() {
                check(&format!("exp1.conditions[{i}]"), c.validate(env));
            }
            if !(e1.rest_s >= 0.0) || e1.max_trials == 0 {
                check(
                    "exp1",
                    Err(thermogrid::Error::invalid("rest_s", "rest_s ≥ 0 and max_trials > 0 required")),
                );
            }
        }
        if let Some(e2) = &self.experiments.exp2 {
            check("exp2.design", e2.design.validate(env));
            if !(e2.contact_s > 0.0 && e2.rest_s >= 0.0) {
                check(
                    "exp2",
                    Err(thermogrid::Error::invalid("contact_s", "contact_s > 0 and rest_s ≥ 0 required")),
                );
            }
        }
        if let Some(e3) = &self.experiments.exp3 {
            let d = &e3.design;
            if !(d.offset > 0.0 && d.offset <= env && d.hold_s > 0.0) || !(e3.rest_s >= 0.0) {
                check(
                    "exp3.design",
                    Err(thermogrid::Error::invalid("offset", "0 < offset ≤ envelope and hold_s > 0 required")),
                );
            }
        }
        if let Some(e4) = &self.experiments.exp4 {
            let d = &e4.design;
            if !(d.velocity_m_s > 0.0) || d.row >= 3 || d.sweeps == 0 || !(d.offset.abs() <= env) || !(d.dwell_multiplier > 0.0) {
                check(
                    "exp4.design",
                    Err(thermogrid::Error::invalid(
                        "design",
                        "velocity > 0, row < 3, sweeps > 0, |offset| ≤ envelope, dwell > 0 required",
                    )),
                );
            }
            if !(e4.window_s > 0.0) {
                check("exp4.window_s", Err(thermogrid::Error::invalid("window_s", "must be positive")));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(CliError::Validation(p))
        }
    }

    pub fn model(&self) -> Result<ModelFile, CliError> {
        match &self.model_file {
            None => Ok(ModelFile::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Validation(vec![format!("{}: {e}", p.display())]))?;
                ModelFile::from_json(&text).map_err(|e| CliError::Validation(vec![format!("{}: {e}", p.display())]))
            }
        }
    }

    /// Configuration running all four experiments with their defaults.
    pub fn all_experiments() -> Self {
        SessionConfig {
            experiments: Experiments {
                exp1: Some(Exp1Config::default()),
                exp2: Some(Exp2Config::default()),
                exp3: Some(Exp3Config::default()),
                exp4: Some(Exp4Config::default()),
            },
            ..Default::default()
        }
    }
}
