//! Weighted one-up/one-down staircase for same/different discrimination.
//!
//! Each trial presents a reference at `ambient ± reference_offset` followed
//! directly by a test at `reference ± step`. "Different" shrinks the step by
//! `down_factor`, "same" grows it by `up_factor`. A reversal is a trial whose
//! response differs from the previous one; the step presented on that trial
//! is recorded. The run stops at `reversals_to_stop` reversals and the JND is
//! the mean of the last `reversals_averaged` recorded steps.
//!
//! With multiplicative steps the log step performs a random walk with zero
//! drift when `p·ln(down) + (1 − p)·ln(up) = 0`, so the long-run proportion of
//! "different" answers is `ln(up) / (ln(up) − ln(down))`; see
//! [`equilibrium_p`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ObserverModel, Polarity, Response};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StaircaseConfig {
    /// Magnitude of the reference offset from ambient, °C.
    pub reference_offset: f64,
    pub initial_step: f64,
    pub down_factor: f64,
    pub up_factor: f64,
    pub reversals_to_stop: usize,
    pub reversals_averaged: usize,
    pub stimulus_duration_s: f64,
    pub isi_s: f64,
    /// Name of the pattern the stimuli are shown on (`line` or `all`).
    pub pattern: String,
    pub polarity: Polarity,
    pub step_floor: f64,
    /// Largest step; the default keeps `reference_offset + step` inside a
    /// 15 °C envelope.
    pub step_ceiling: f64,
}

impl Default for StaircaseConfig {
    fn default() -> Self {
        StaircaseConfig {
            reference_offset: 4.0,
            initial_step: 4.0,
            down_factor: 0.9,
            up_factor: 1.3,
            reversals_to_stop: 10,
            reversals_averaged: 8,
            stimulus_duration_s: 3.5,
            isi_s: 0.0,
            pattern: "line".to_string(),
            polarity: Polarity::Warm,
            step_floor: 0.1,
            step_ceiling: 11.0,
        }
    }
}

impl StaircaseConfig {
    pub fn new(pattern: &str, polarity: Polarity) -> Self {
        StaircaseConfig {
            pattern: pattern.to_string(),
            polarity,
            ..Default::default()
        }
    }

    /// Checks the parameters, and that every stimulus stays within
    /// `envelope` of ambient.
    pub fn validate(&self, envelope: f64) -> Result<()> {
        if !(self.down_factor > 0.0 && self.down_factor < 1.0 && self.up_factor > 1.0 && self.up_factor.is_finite()) {
            return Err(Error::invalid("down_factor", "need 0 < down_factor < 1 < up_factor"));
        }
        if self.reversals_to_stop == 0 || self.reversals_averaged == 0 || self.reversals_averaged > self.reversals_to_stop {
            return Err(Error::invalid("reversals_averaged", "need 0 < reversals_averaged ≤ reversals_to_stop"));
        }
        if !(self.step_floor > 0.0 && self.step_floor <= self.initial_step && self.initial_step <= self.step_ceiling) {
            return Err(Error::invalid("initial_step", "need 0 < step_floor ≤ initial_step ≤ step_ceiling"));
        }
        if !(self.reference_offset >= 0.0 && self.reference_offset + self.step_ceiling <= envelope) {
            return Err(Error::invalid(
                "step_ceiling",
                format!("reference_offset + step_ceiling must not exceed the {envelope} °C envelope"),
            ));
        }
        if !(self.stimulus_duration_s > 0.0 && self.isi_s >= 0.0) {
            return Err(Error::invalid("stimulus_duration_s", "durations must be positive"));
        }
        if !matches!(self.pattern.as_str(), "line" | "all") {
            return Err(Error::invalid("pattern", format!("expected line or all, got {:?}", self.pattern)));
        }
        Ok(())
    }
}

/// Proportion of "different" answers the staircase settles at.
pub fn equilibrium_p(down_factor: f64, up_factor: f64) -> f64 {
    up_factor.ln() / (up_factor.ln() - down_factor.ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StaircaseTrial {
    pub step: f64,
    pub response: Response,
    pub reversal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaircaseState {
    pub current_step: f64,
    pub trial_count: usize,
    pub last_response: Option<Response>,
    pub reversal_steps: Vec<f64>,
    pub finished: bool,
    pub history: Vec<StaircaseTrial>,
}

impl StaircaseState {
    pub fn new(cfg: &StaircaseConfig) -> Self {
        StaircaseState {
            current_step: cfg.initial_step,
            trial_count: 0,
            last_response: None,
            reversal_steps: Vec::new(),
            finished: false,
            history: Vec::new(),
        }
    }
}

/// One reference/test presentation, °C.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stimulus {
    pub reference: f64,
    pub test: f64,
}

impl Stimulus {
    pub fn delta(&self) -> f64 {
        (self.test - self.reference).abs()
    }
}

pub fn next_stimulus(cfg: &StaircaseConfig, st: &StaircaseState, ambient: f64) -> Result<Stimulus> {
    if st.finished {
        return Err(Error::StaircaseFinished);
    }
    let s = cfg.polarity.sign();
    let reference = ambient + s * cfg.reference_offset;
    Ok(Stimulus {
        reference,
        test: reference + s * st.current_step,
    })
}

pub fn update(cfg: &StaircaseConfig, st: &StaircaseState, response: Response) -> Result<StaircaseState> {
    if st.finished {
        return Err(Error::StaircaseFinished);
    }
    let mut next = st.clone();
    let reversal = st.last_response.is_some_and(|r| r != response);
    if reversal {
        next.reversal_steps.push(st.current_step);
    }
    let factor = match response {
        Response::Different => cfg.down_factor,
        Response::Same => cfg.up_factor,
    };
    next.current_step = (st.current_step * factor).clamp(cfg.step_floor, cfg.step_ceiling);
    next.trial_count += 1;
    next.last_response = Some(response);
    next.history.push(StaircaseTrial {
        step: st.current_step,
        response,
        reversal,
    });
    next.finished = next.reversal_steps.len() >= cfg.reversals_to_stop;
    Ok(next)
}

pub fn jnd_estimate(cfg: &StaircaseConfig, st: &StaircaseState) -> Result<f64> {
    if !st.finished {
        return Err(Error::StaircaseNotFinished);
    }
    let n = cfg.reversals_averaged.min(st.reversal_steps.len());
    let tail = &st.reversal_steps[st.reversal_steps.len() - n..];
    Ok(tail.iter().sum::<f64>() / n as f64)
}

/// Outcome of a staircase run against a simulated observer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaircaseRun {
    pub state: StaircaseState,
    /// `None` when the trial cap was hit first.
    pub jnd: Option<f64>,
}

/// Runs the staircase to completion (or `max_trials`) with `observer`
/// judging the commanded difference between test and reference.
pub fn run_with_observer<R: Rng + ?Sized>(
    cfg: &StaircaseConfig,
    observer: &ObserverModel,
    ambient: f64,
    max_trials: usize,
    rng: &mut R,
) -> Result<StaircaseRun> {
    let mut st = StaircaseState::new(cfg);
    while !st.finished && st.trial_count < max_trials {
        let stim = next_stimulus(cfg, &st, ambient)?;
        let r = observer.respond(stim.delta(), rng);
        st = update(cfg, &st, r)?;
    }
    let jnd = if st.finished { Some(jnd_estimate(cfg, &st)?) } else { None };
    Ok(StaircaseRun { state: st, jnd })
}
