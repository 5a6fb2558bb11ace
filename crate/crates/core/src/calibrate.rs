//! Closed-loop characterisation and fitting of the plant to measured rise times.
//!
//! [`calibrate_plant`] fits the cold-node heat capacity and the two contact
//! conductances so that the simulated closed-loop 10–90% rise times of a warm
//! and a cool step match the targets. [`tune_gains`] is the inner pass that
//! produced the shared default [`PidGains`]: it adjusts the controller for a
//! fixed plant.

use serde::{Deserialize, Serialize};

use crate::control::{drive_model, output_to_current, pid_step, step_response_metrics, ControllerState, PidGains, TimeSeries};
use crate::plant::{ChannelThermalModel, PlantModel, PlantState, SensorBank};
use crate::thermo::{CoolantParams, TemParams};
use crate::{ChannelArray, Error, Result, CHANNELS};

/// Default step magnitude used for rise-time characterisation, °C.
pub const STEP_MAGNITUDE: f64 = 10.0;

/// Relative tolerance a calibration must meet on both rise times.
pub const RISE_TOLERANCE: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiseTargets {
    pub warm_s: f64,
    pub cool_s: f64,
}

impl Default for RiseTargets {
    fn default() -> Self {
        RiseTargets { warm_s: 1.4, cool_s: 2.4 }
    }
}

/// Closed-loop step experiment settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepExperiment {
    pub ambient_c: f64,
    pub step_c: f64,
    pub duration_s: f64,
    pub tick_hz: f64,
    /// Seed for sensor noise; `None` reads the noise-free lagged sensor.
    pub noise_seed: Option<u64>,
}

impl StepExperiment {
    pub fn new(step_c: f64) -> Self {
        StepExperiment {
            ambient_c: 30.0,
            step_c,
            duration_s: 8.0,
            tick_hz: crate::control::DEFAULT_TICK_HZ,
            noise_seed: None,
        }
    }
}

/// Traces from a closed-loop step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTraces {
    pub t: Vec<f64>,
    pub setpoint: Vec<f64>,
    /// True contact-face temperature per channel.
    pub cold: Vec<ChannelArray>,
    /// Sensor reading per channel (what the controller saw).
    pub measured: Vec<ChannelArray>,
    /// Module current per channel.
    pub current: Vec<ChannelArray>,
}

impl StepTraces {
    /// Mean contact-face temperature across the array.
    pub fn mean_cold(&self) -> TimeSeries {
        TimeSeries::new(
            self.t.clone(),
            self.cold.iter().map(|c| c.iter().sum::<f64>() / CHANNELS as f64).collect(),
        )
    }

    pub fn channel_cold(&self, k: usize) -> TimeSeries {
        TimeSeries::new(self.t.clone(), self.cold.iter().map(|c| c[k]).collect())
    }
}

/// Runs every channel of `plant` through the same closed-loop setpoint step
/// from the ambient equilibrium, with shared `gains`.
pub fn simulate_step(plant: &PlantModel, gains: &PidGains, exp: &StepExperiment) -> Result<StepTraces> {
    let dt = 1.0 / exp.tick_hz;
    let ticks = (exp.duration_s * exp.tick_hz).round() as usize;
    let mut state = PlantState::uniform(exp.ambient_c);
    let mut ctl = [ControllerState::default(); CHANNELS];
    let mut sensors = exp.noise_seed.map(|s| SensorBank::new(plant, s));
    let setpoint = exp.ambient_c + exp.step_c;
    let mut out = StepTraces::default();
    out.t.push(0.0);
    out.setpoint.push(exp.ambient_c);
    out.cold.push(state.t_cold);
    out.measured.push(state.t_sensor);
    out.current.push([0.0; CHANNELS]);
    for n in 1..=ticks {
        let measured = match sensors.as_mut() {
            Some(bank) => bank.read_all(&state),
            None => state.t_sensor,
        };
        let mut currents = [0.0; CHANNELS];
        for k in 0..CHANNELS {
            let (u, next) = pid_step(gains, &ctl[k], setpoint, measured[k], dt);
            ctl[k] = next;
            currents[k] = drive_model(output_to_current(u), dt);
        }
        state = plant.step(&state, &currents, dt)?;
        out.t.push(n as f64 * dt);
        out.setpoint.push(setpoint);
        out.cold.push(state.t_cold);
        out.measured.push(measured);
        out.current.push(currents);
    }
    Ok(out)
}

/// Warm and cool 10–90% rise times of the array-mean contact temperature for
/// ±[`STEP_MAGNITUDE`] steps.
pub fn rise_times(plant: &PlantModel, gains: &PidGains) -> Result<(f64, f64)> {
    let warm = simulate_step(plant, gains, &StepExperiment::new(STEP_MAGNITUDE))?;
    let cool = simulate_step(plant, gains, &StepExperiment::new(-STEP_MAGNITUDE))?;
    let w = step_response_metrics(&warm.mean_cold(), 0.1, 0.9)?.rise_time;
    let c = step_response_metrics(&cool.mean_cold(), 0.1, 0.9)?.rise_time;
    Ok((w, c))
}

/// Search box for [`calibrate_plant`]; each pair is `(lower, upper)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBounds {
    pub heat_capacity: (f64, f64),
    pub g_skin: (f64, f64),
    pub g_sink: (f64, f64),
}

impl Default for CalibrationBounds {
    fn default() -> Self {
        CalibrationBounds {
            heat_capacity: (0.01, 2.0),
            g_skin: (0.002, 0.012),
            g_sink: (0.3, 3.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub model: ChannelThermalModel,
    pub warm_rise_s: f64,
    pub cool_rise_s: f64,
    pub evaluations: usize,
}

fn residual(w: f64, c: f64, t: &RiseTargets) -> f64 {
    let rw = (w - t.warm_s) / t.warm_s;
    let rc = (c - t.cool_s) / t.cool_s;
    rw * rw + rc * rc
}

/// Golden-section minimisation of `f` on `[lo, hi]` in log space.
fn golden_log(mut f: impl FnMut(f64) -> f64, lo: f64, hi: f64, iters: usize) -> (f64, f64) {
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo.ln(), hi.ln());
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut fc = f(c.exp());
    let mut fd = f(d.exp());
    for _ in 0..iters {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c.exp());
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d.exp());
        }
    }
    if fc < fd {
        (c.exp(), fc)
    } else {
        (d.exp(), fd)
    }
}

/// Fits `(heat_capacity, g_skin, g_sink)` by coordinate descent inside
/// `bounds`, starting from `base` (other fields of `base` are kept).
///
/// Each sweep runs a golden-section search along one coordinate at a time and
/// keeps the move only if it lowers the squared relative rise-time residual.
/// The procedure is deterministic. It fails with
/// [`Error::CalibrationFailed`] unless both rise times end within
/// [`RISE_TOLERANCE`] of their targets.
pub fn calibrate_plant(
    targets: &RiseTargets,
    gains: &PidGains,
    tem: &TemParams,
    coolant: &CoolantParams,
    base: &ChannelThermalModel,
    bounds: &CalibrationBounds,
) -> Result<Calibration> {
    if !(targets.warm_s > 0.0 && targets.cool_s > 0.0) {
        return Err(Error::invalid("targets", "rise times must be positive"));
    }
    if targets.cool_s < targets.warm_s {
        return Err(Error::invalid("targets", "cool rise time must not be shorter than warm"));
    }
    gains.validate(tem)?;
    let mut evaluations = 0usize;
    // Noise-free sensor keeps the objective deterministic and smooth.
    let mut eval = |m: &ChannelThermalModel| -> (f64, f64, f64) {
        evaluations += 1;
        let plant = PlantModel::uniform(*tem, *coolant, m.with_noise(0.0));
        match rise_times(&plant, gains) {
            Ok((w, c)) => (residual(w, c, targets), w, c),
            Err(_) => (f64::INFINITY, f64::NAN, f64::NAN),
        }
    };
    let clamp = |v: f64, (lo, hi): (f64, f64)| v.clamp(lo, hi);
    let mut model = ChannelThermalModel {
        heat_capacity: clamp(base.heat_capacity, bounds.heat_capacity),
        g_skin: clamp(base.g_skin, bounds.g_skin),
        g_sink: clamp(base.g_sink, bounds.g_sink),
        ..*base
    };
    let (mut best, mut w, mut c) = eval(&model);
    for _sweep in 0..4 {
        for coord in 0..3 {
            let range = match coord {
                0 => bounds.heat_capacity,
                1 => bounds.g_skin,
                _ => bounds.g_sink,
            };
            let with = |m: &ChannelThermalModel, v: f64| {
                let mut m = *m;
                match coord {
                    0 => m.heat_capacity = v,
                    1 => m.g_skin = v,
                    _ => m.g_sink = v,
                }
                m
            };
            let current = model;
            let (v, _) = golden_log(|v| eval(&with(&current, v)).0, range.0, range.1, 24);
            let candidate = with(&model, v);
            let (r, cw, cc) = eval(&candidate);
            if r < best {
                best = r;
                model = candidate;
                w = cw;
                c = cc;
            }
        }
        if best < 1e-4 {
            break;
        }
    }
    let ok = w.is_finite()
        && c.is_finite()
        && ((w - targets.warm_s) / targets.warm_s).abs() <= RISE_TOLERANCE
        && ((c - targets.cool_s) / targets.cool_s).abs() <= RISE_TOLERANCE;
    if !ok {
        return Err(Error::CalibrationFailed {
            warm_rise_s: w,
            warm_target_s: targets.warm_s,
            cool_rise_s: c,
            cool_target_s: targets.cool_s,
        });
    }
    Ok(Calibration {
        model,
        warm_rise_s: w,
        cool_rise_s: c,
        evaluations,
    })
}

/// Adjusts `(kp, ki, output_limit)` for a fixed plant so that the closed loop
/// meets the rise-time targets and settles quickly. The integral clamp follows
/// the output limit. Used offline to produce the shared default gains.
pub fn tune_gains(targets: &RiseTargets, plant: &PlantModel, start: &PidGains) -> Result<PidGains> {
    let settle_weight = 0.01;
    let objective = |g: &PidGains| -> f64 {
        let warm = simulate_step(plant, g, &StepExperiment::new(STEP_MAGNITUDE));
        let cool = simulate_step(plant, g, &StepExperiment::new(-STEP_MAGNITUDE));
        let (Ok(warm), Ok(cool)) = (warm, cool) else {
            return f64::INFINITY;
        };
        let (Ok(mw), Ok(mc)) = (
            step_response_metrics(&warm.mean_cold(), 0.1, 0.9),
            step_response_metrics(&cool.mean_cold(), 0.1, 0.9),
        ) else {
            return f64::INFINITY;
        };
        10.0 * residual(mw.rise_time, mc.rise_time, targets) + settle_weight * (mw.settling_2pct.powi(2) + mc.settling_2pct.powi(2))
    };
    let mut g = *start;
    g.validate(&plant.tem)?;
    let mut best = objective(&g);
    let ranges = [(0.01, 2.0), (0.01, 5.0), (0.05, plant.tem.i_max)];
    for _sweep in 0..3 {
        for (coord, &(lo, hi)) in ranges.iter().enumerate() {
            let with = |g: &PidGains, v: f64| {
                let mut g = *g;
                match coord {
                    0 => g.kp = v,
                    1 => g.ki = v,
                    _ => {
                        g.output_limit = v;
                        g.integral_limit = v;
                    }
                }
                g
            };
            let current = g;
            let (v, r) = golden_log(|v| objective(&with(&current, v)), lo, hi, 20);
            if r < best {
                best = r;
                g = with(&g, v);
            }
        }
    }
    Ok(g)
}

/// Steady-state contact temperatures reachable with constant currents up to
/// `current_limit`, as `(coldest, warmest)` over channels, °C. All channels
/// are driven together so the shared coolant sees the full load.
pub fn steady_state_range(plant: &PlantModel, current_limit: f64) -> Result<(f64, f64)> {
    let limit = current_limit.min(plant.tem.i_max);
    let n = 140;
    let mut best_cold = [f64::INFINITY; CHANNELS];
    let mut best_warm = [f64::NEG_INFINITY; CHANNELS];
    for j in 0..=n {
        let i = limit * j as f64 / n as f64;
        let cool = plant.steady_state(&[i; CHANNELS])?;
        let warm = plant.steady_state(&[-i; CHANNELS])?;
        for k in 0..CHANNELS {
            best_cold[k] = best_cold[k].min(cool.t_cold[k]);
            best_warm[k] = best_warm[k].max(warm.t_cold[k]);
        }
    }
    // Report the weakest channel in each direction.
    let coldest = best_cold.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let warmest = best_warm.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((coldest, warmest))
}

/// Rise times a model file was fitted to, and what it achieved.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitReport {
    pub targets: RiseTargets,
    pub warm_rise_s: f64,
    pub cool_rise_s: f64,
}

/// Persisted plant model and controller gains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub schema: u32,
    pub tem: TemParams,
    pub coolant: CoolantParams,
    pub channel: ChannelThermalModel,
    pub gains: PidGains,
    /// Relative per-channel spread of the skin contact conductance.
    #[serde(default)]
    pub contact_spread: f64,
    #[serde(default)]
    pub fit: Option<FitReport>,
}

impl Default for ModelFile {
    fn default() -> Self {
        ModelFile {
            schema: crate::SCHEMA_VERSION,
            tem: TemParams::default(),
            coolant: CoolantParams::default(),
            channel: ChannelThermalModel::default(),
            gains: PidGains::default(),
            contact_spread: 0.0,
            fit: None,
        }
    }
}

impl ModelFile {
    pub fn from_calibration(cal: &Calibration, targets: RiseTargets, tem: TemParams, coolant: CoolantParams, gains: PidGains) -> Self {
        ModelFile {
            tem,
            coolant,
            channel: cal.model,
            gains,
            fit: Some(FitReport {
                targets,
                warm_rise_s: cal.warm_rise_s,
                cool_rise_s: cal.cool_rise_s,
            }),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != crate::SCHEMA_VERSION {
            return Err(Error::Schema {
                field: "schema".into(),
                message: format!("unsupported version {}", self.schema),
            });
        }
        self.tem.validate()?;
        self.coolant.validate()?;
        self.channel.validate()?;
        self.gains.validate(&self.tem)?;
        if !(0.0..1.0).contains(&self.contact_spread) {
            return Err(Error::invalid("contact_spread", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// The array plant; `seed` draws the per-channel contact spread.
    pub fn plant(&self, seed: u64) -> PlantModel {
        let p = PlantModel::uniform(self.tem, self.coolant, self.channel);
        if self.contact_spread > 0.0 {
            p.with_contact_spread(self.contact_spread, seed)
        } else {
            p
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: ModelFile = serde_json::from_str(text).map_err(|e| Error::Schema {
            field: format!("line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serialises")
    }
}

impl ChannelThermalModel {
    fn with_noise(self, sigma: f64) -> Self {
        ChannelThermalModel {
            sensor_noise_sigma: sigma,
            ..self
        }
    }
}
