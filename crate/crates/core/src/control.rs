//! Per-channel PID temperature control.
//!
//! The controller output is a *heating* command in amperes: positive output
//! warms the contact face. Because positive module current pumps heat out of
//! the contact face, the drive applies `current = −output`
//! (see [`output_to_current`]).

use serde::{Deserialize, Serialize};

use crate::thermo::TemParams;
use crate::{Error, Result};

/// Default control tick rate, Hz.
pub const DEFAULT_TICK_HZ: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PidGains {
    /// A/°C
    pub kp: f64,
    /// A/(°C·s)
    pub ki: f64,
    /// A·s/°C
    pub kd: f64,
    /// Symmetric output clamp, A.
    pub output_limit: f64,
    /// Symmetric clamp on the accumulated integral term, A.
    pub integral_limit: f64,
}

impl Default for PidGains {
    /// Shared gains from the rise-time tuning pass against the default plant.
    fn default() -> Self {
        PidGains {
            kp: 0.2173,
            ki: 0.8214,
            kd: 0.0,
            output_limit: 0.2084,
            integral_limit: 0.2084,
        }
    }
}

impl PidGains {
    pub fn validate(&self, tem: &TemParams) -> Result<()> {
        for (name, v) in [("kp", self.kp), ("ki", self.ki), ("kd", self.kd)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(name, format!("gain must be ≥ 0, got {v}")));
            }
        }
        if !(self.output_limit > 0.0 && self.output_limit <= tem.i_max) {
            return Err(Error::invalid(
                "output_limit",
                format!("{} A outside (0, i_max = {}]", self.output_limit, tem.i_max),
            ));
        }
        if !(self.integral_limit.is_finite() && self.integral_limit >= 0.0) {
            return Err(Error::invalid("integral_limit", "must be ≥ 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    /// Accumulated integral contribution, A.
    pub integral: f64,
    pub prev_error: f64,
    /// Previous measurement, for derivative-on-measurement. `None` before the
    /// first step.
    pub prev_measured: Option<f64>,
    pub last_output: f64,
}

/// One positional PID update on `setpoint − measured`.
///
/// The derivative acts on the measurement, so setpoint jumps produce no kick.
/// Anti-windup is conditional integration: if the output with the updated
/// integral would saturate, the integral keeps its previous value.
pub fn pid_step(gains: &PidGains, st: &ControllerState, setpoint: f64, measured: f64, dt: f64) -> (f64, ControllerState) {
    debug_assert!(dt > 0.0);
    let error = setpoint - measured;
    let p = gains.kp * error;
    let d = match st.prev_measured {
        Some(prev) => -gains.kd * (measured - prev) / dt,
        None => 0.0,
    };
    let candidate = (st.integral + gains.ki * error * dt).clamp(-gains.integral_limit, gains.integral_limit);
    let unclamped = p + candidate + d;
    let limit = gains.output_limit;
    let (output, integral) = if unclamped.abs() > limit {
        let held = st.integral.clamp(-gains.integral_limit, gains.integral_limit);
        ((p + held + d).clamp(-limit, limit), held)
    } else {
        (unclamped, candidate)
    };
    let output = if output.is_finite() { output } else { 0.0 };
    (
        output,
        ControllerState {
            integral,
            prev_error: error,
            prev_measured: Some(measured),
            last_output: output,
        },
    )
}

/// Maps a heating command to module current.
pub fn output_to_current(output: f64) -> f64 {
    -output
}

/// Drive stage between controller and module.
///
/// The driver feeds the module through a 5 kHz differential filter, so at
/// control rates of 1 kHz and below the delivered current equals the command
/// and PWM ripple adds no Joule heat. Commands are clamped upstream by the
/// controller; this stage never sees an out-of-range value.
pub fn drive_model(command: f64, _dt: f64) -> f64 {
    command
}

/// A uniformly or non-uniformly sampled scalar signal.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub t: Vec<f64>,
    pub y: Vec<f64>,
}

impl TimeSeries {
    pub fn new(t: Vec<f64>, y: Vec<f64>) -> Self {
        assert_eq!(t.len(), y.len());
        TimeSeries { t, y }
    }

    pub fn push(&mut self, t: f64, y: f64) {
        self.t.push(t);
        self.y.push(y);
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub rise_time: f64,
    /// Peak excursion past the final value, percent of the step.
    pub overshoot_pct: f64,
    /// Time after which the signal stays within 2% of the step of its final value.
    pub settling_2pct: f64,
}

/// Rise time between the `lo_frac` and `hi_frac` crossings, overshoot, and 2%
/// settling time. The baseline is the first sample and the final value is the
/// last sample. A crossing is the first sample at or beyond the level.
pub fn step_response_metrics(trace: &TimeSeries, lo_frac: f64, hi_frac: f64) -> Result<StepMetrics> {
    if trace.len() < 2 {
        return Err(Error::NoStep("fewer than two samples"));
    }
    if !(0.0..1.0).contains(&lo_frac) || !(lo_frac < hi_frac && hi_frac <= 1.0) {
        return Err(Error::invalid("fractions", format!("need 0 ≤ lo < hi ≤ 1, got {lo_frac}, {hi_frac}")));
    }
    let base = trace.y[0];
    let fin = *trace.y.last().expect("len checked");
    let step = fin - base;
    if !(step.abs() > 1e-9) {
        return Err(Error::NoStep("final value equals baseline"));
    }
    let progress = |y: f64| (y - base) / step;
    let t0 = trace.t[0];
    let crossing = |frac: f64| trace.y.iter().position(|&y| progress(y) >= frac).map(|i| trace.t[i]);
    let t_lo = crossing(lo_frac).ok_or(Error::NoStep("low level never reached"))?;
    let t_hi = crossing(hi_frac).ok_or(Error::NoStep("high level never reached"))?;
    let peak = trace.y.iter().map(|&y| progress(y)).fold(f64::NEG_INFINITY, f64::max);
    let overshoot_pct = ((peak - 1.0) * 100.0).max(0.0);
    let band = 0.02;
    let settling_2pct = match trace.y.iter().rposition(|&y| (progress(y) - 1.0).abs() > band) {
        Some(i) if i + 1 < trace.len() => trace.t[i + 1] - t0,
        Some(_) => trace.t[trace.len() - 1] - t0,
        None => 0.0,
    };
    Ok(StepMetrics {
        rise_time: t_hi - t_lo,
        overshoot_pct,
        settling_2pct,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p_only(kp: f64) -> PidGains {
        PidGains {
            kp,
            ki: 0.0,
            kd: 0.0,
            output_limit: 0.7,
            integral_limit: 0.7,
        }
    }

    #[test]
    fn zero_error_zero_output() {
        let g = PidGains::default();
        let mut st = ControllerState::default();
        for _ in 0..100 {
            let (u, next) = pid_step(&g, &st, 30.0, 30.0, 0.01);
            assert_eq!(u, 0.0);
            st = next;
        }
    }

    #[test]
    fn proportional_arithmetic() {
        let (u, _) = pid_step(&p_only(0.1), &ControllerState::default(), 35.0, 30.0, 0.01);
        assert!((u - 0.5).abs() < 1e-12);
    }

    #[test]
    fn saturation_freezes_integral() {
        let g = PidGains {
            kp: 0.5,
            ki: 1.0,
            kd: 0.0,
            output_limit: 0.3,
            integral_limit: 0.3,
        };
        let st = ControllerState {
            integral: 0.05,
            ..Default::default()
        };
        let (u, next) = pid_step(&g, &st, 45.0, 30.0, 0.01);
        assert_eq!(u, 0.3);
        assert_eq!(next.integral, 0.05);
        let (u, next) = pid_step(&g, &next, 15.0, 30.0, 0.01);
        assert_eq!(u, -0.3);
        assert_eq!(next.integral, 0.05);
    }

    #[test]
    fn integral_accumulates_when_unsaturated() {
        let g = PidGains {
            kp: 0.0,
            ki: 0.1,
            kd: 0.0,
            output_limit: 0.7,
            integral_limit: 0.7,
        };
        let mut st = ControllerState::default();
        for _ in 0..100 {
            st = pid_step(&g, &st, 31.0, 30.0, 0.01).1;
        }
        assert!((st.integral - 0.1).abs() < 1e-12);
    }

    #[test]
    fn no_setpoint_kick() {
        let g = PidGains {
            kp: 0.0,
            ki: 0.0,
            kd: 0.05,
            output_limit: 0.7,
            integral_limit: 0.7,
        };
        let (_, st) = pid_step(&g, &ControllerState::default(), 30.0, 30.0, 0.01);
        let (u, _) = pid_step(&g, &st, 40.0, 30.0, 0.01);
        assert_eq!(u, 0.0);
        // A measurement change does produce a derivative term.
        let (u, _) = pid_step(&g, &st, 30.0, 30.1, 0.01);
        assert!((u + 0.5).abs() < 1e-9);
    }

    #[test]
    fn drive_is_pass_through() {
        assert_eq!(drive_model(0.3, 0.01), 0.3);
        assert_eq!(drive_model(-0.7, 0.01), -0.7);
        assert_eq!(output_to_current(0.2), -0.2);
    }

    #[test]
    fn gains_validation() {
        let tem = TemParams::default();
        assert!(PidGains::default().validate(&tem).is_ok());
        let bad = PidGains {
            output_limit: 0.8,
            ..PidGains::default()
        };
        assert!(bad.validate(&tem).is_err());
        let bad = PidGains {
            kp: -1.0,
            ..PidGains::default()
        };
        assert!(bad.validate(&tem).is_err());
    }

    #[test]
    fn first_order_rise_time_is_ln9_tau() {
        let dt = 1e-4;
        let mut ts = TimeSeries::default();
        for n in 0..=200_000 {
            let t = n as f64 * dt;
            ts.push(t, 1.0 - (-t).exp());
        }
        let m = step_response_metrics(&ts, 0.1, 0.9).unwrap();
        assert!((m.rise_time - 9f64.ln()).abs() < 1e-3, "{}", m.rise_time);
        assert_eq!(m.overshoot_pct, 0.0);
        assert!((m.settling_2pct - 50f64.ln()).abs() < 1e-3);
    }

    #[test]
    fn instant_step_has_zero_rise() {
        let ts = TimeSeries::new(vec![0.0, 1.0, 2.0], vec![0.0, 1.0, 1.0]);
        assert_eq!(step_response_metrics(&ts, 0.1, 0.9).unwrap().rise_time, 0.0);
    }

    #[test]
    fn overshoot_and_downward_steps() {
        let ts = TimeSeries::new(vec![0.0, 1.0, 2.0, 3.0, 4.0], vec![30.0, 25.0, 19.0, 20.1, 20.0]);
        let m = step_response_metrics(&ts, 0.1, 0.9).unwrap();
        assert_eq!(m.rise_time, 1.0);
        assert!((m.overshoot_pct - 10.0).abs() < 1e-9);
        assert_eq!(m.settling_2pct, 3.0);
    }

    #[test]
    fn flat_trace_is_an_error() {
        let ts = TimeSeries::new(vec![0.0, 1.0], vec![30.0, 30.0]);
        assert!(matches!(step_response_metrics(&ts, 0.1, 0.9), Err(Error::NoStep(_))));
    }

    proptest! {
        #[test]
        fn output_always_within_limit(
            seq in prop::collection::vec((0.0f64..60.0, 0.0f64..60.0), 1..200),
            kp in 0.0f64..5.0, ki in 0.0f64..5.0, kd in 0.0f64..1.0, lim in 0.01f64..0.7,
        ) {
            let g = PidGains { kp, ki, kd, output_limit: lim, integral_limit: lim };
            let mut st = ControllerState::default();
            for (sp, m) in seq {
                let (u, next) = pid_step(&g, &st, sp, m, 0.01);
                prop_assert!(u.abs() <= lim);
                prop_assert!(next.integral.abs() <= lim);
                st = next;
            }
        }

        #[test]
        fn deterministic(seq in prop::collection::vec((20.0f64..40.0, 20.0f64..40.0), 1..50)) {
            let g = PidGains::default();
            let run = || {
                let mut st = ControllerState::default();
                seq.iter().map(|&(sp, m)| { let (u, n) = pid_step(&g, &st, sp, m, 0.01); st = n; u.to_bits() }).collect::<Vec<_>>()
            };
            prop_assert_eq!(run(), run());
        }
    }
}
