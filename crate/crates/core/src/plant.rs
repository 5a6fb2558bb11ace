//! Lumped thermal model of the nine-channel array pressed against a palm.
//!
//! Each channel has two nodes. The cold node (ceramic plate, contact plate and
//! thermistor) carries heat capacity and exchanges heat with the skin through a
//! contact conductance. The hot node is quasi-static: the heatsink settles
//! against the coolant within a control tick, so its temperature is solved
//! algebraically from the hot-face heat balance. The coolant is a shared bus
//! whose temperature rises with the instantaneous total heat rejected by all
//! nine hot faces.
//!
//! ```text
//!   skin ──g_skin── [cold node, C] ══TEM══ (hot node) ──g_sink── coolant ── reservoir
//! ```
//!
//! State temperatures are °C; the Peltier terms are evaluated in kelvin.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::thermo::{raw, CoolantParams, TemParams};
use crate::{Celsius, ChannelArray, Error, Result, CHANNELS};

const KELVIN_OFFSET: f64 = 273.15;

/// Simulation safety envelope for every node temperature, °C.
pub const SAFE_TEMP_RANGE: (f64, f64) = (0.0, 80.0);

/// Largest timestep [`PlantModel::step`] accepts, s.
pub const MAX_STEP: f64 = 0.01;

/// Default internal integration step (1 kHz), s.
pub const DEFAULT_SUBSTEP: f64 = 1e-3;

/// Thermal parameters of one channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelThermalModel {
    /// Heat capacity of the cold-node lump, J/K.
    pub heat_capacity: f64,
    /// Contact conductance to the skin, W/K.
    pub g_skin: f64,
    /// Conductance from the hot face through the heatsink to the coolant, W/K.
    pub g_sink: f64,
    /// Temperature of the tissue behind the contact, °C.
    pub skin_core_temp: f64,
    /// First-order lag of the thermistor reading, s.
    pub sensor_lag_tau: f64,
    /// Standard deviation of additive sensor noise, °C.
    pub sensor_noise_sigma: f64,
}

impl Default for ChannelThermalModel {
    fn default() -> Self {
        ChannelThermalModel {
            heat_capacity: 0.0873,
            g_skin: 0.008,
            g_sink: 1.0,
            skin_core_temp: 30.0,
            sensor_lag_tau: 0.05,
            sensor_noise_sigma: 0.05,
        }
    }
}

impl ChannelThermalModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.heat_capacity.is_finite() && self.heat_capacity > 0.0) {
            return Err(Error::invalid("heat_capacity", "must be > 0"));
        }
        for (name, v) in [
            ("g_skin", self.g_skin),
            ("g_sink", self.g_sink),
            ("sensor_lag_tau", self.sensor_lag_tau),
            ("sensor_noise_sigma", self.sensor_noise_sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(name, format!("must be finite and ≥ 0, got {v}")));
            }
        }
        if !self.skin_core_temp.is_finite() {
            return Err(Error::invalid("skin_core_temp", "must be finite"));
        }
        Ok(())
    }

    /// Same model with an ideal (lag-free, noise-free) thermistor.
    pub fn ideal_sensor(self) -> Self {
        ChannelThermalModel {
            sensor_lag_tau: 0.0,
            sensor_noise_sigma: 0.0,
            ..self
        }
    }
}

/// Node temperatures of the whole array at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub t_cold: ChannelArray,
    pub t_hot: ChannelArray,
    /// Lagged thermistor temperature (before noise).
    pub t_sensor: ChannelArray,
    pub t_coolant: f64,
    pub sim_time: f64,
}

impl PlantState {
    /// Every node at `temp`, clock at zero.
    pub fn uniform(temp: f64) -> Self {
        PlantState {
            t_cold: [temp; CHANNELS],
            t_hot: [temp; CHANNELS],
            t_sensor: [temp; CHANNELS],
            t_coolant: temp,
            sim_time: 0.0,
        }
    }

    pub fn mean_cold(&self) -> f64 {
        self.t_cold.iter().sum::<f64>() / CHANNELS as f64
    }
}

/// Everything needed to advance a [`PlantState`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantModel {
    pub tem: TemParams,
    pub coolant: CoolantParams,
    pub channels: [ChannelThermalModel; CHANNELS],
    /// Internal RK4 step, s.
    pub substep: f64,
}

impl Default for PlantModel {
    fn default() -> Self {
        PlantModel::uniform(TemParams::default(), CoolantParams::default(), ChannelThermalModel::default())
    }
}

/// Hot-node and coolant temperatures (kelvin) consistent with a cold-node state.
struct HotSide {
    t_hot_k: ChannelArray,
    t_coolant_k: f64,
}

impl PlantModel {
    pub fn uniform(tem: TemParams, coolant: CoolantParams, channel: ChannelThermalModel) -> Self {
        PlantModel {
            tem,
            coolant,
            channels: [channel; CHANNELS],
            substep: DEFAULT_SUBSTEP,
        }
    }

    /// Scales each channel's skin conductance by an independent factor drawn
    /// uniformly from `[1 − spread, 1 + spread]`, emulating uneven contact
    /// pressure across the palm.
    pub fn with_contact_spread(mut self, spread: f64, seed: u64) -> Self {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spread = spread.clamp(0.0, 1.0);
        for ch in &mut self.channels {
            let factor: f64 = if spread > 0.0 {
                rng.random_range(1.0 - spread..=1.0 + spread)
            } else {
                1.0
            };
            ch.g_skin *= factor;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.tem.validate()?;
        self.coolant.validate()?;
        for ch in &self.channels {
            ch.validate()?;
        }
        if !(self.substep > 0.0 && self.substep <= MAX_STEP) {
            return Err(Error::invalid("substep", format!("{} s outside (0, {MAX_STEP}]", self.substep)));
        }
        Ok(())
    }

    /// Zero-current equilibrium with skin, coolant and faces all at `temp`.
    /// Only a fixed point when `temp` equals the skin core and reservoir
    /// temperatures.
    pub fn equilibrium(&self, temp: Celsius) -> PlantState {
        PlantState::uniform(temp.0)
    }

    /// Solves the hot-node heat balance for all channels at once.
    ///
    /// Per channel `q_h = A_k − T_h/R_th` with
    /// `A_k = α·T_c·i + T_c/R_th + ½·R_el·i²`, and `q_h = g_sink·(T_h − T_w)`.
    /// The coolant obeys `T_w = T_res + Σq_h / (ρ·V̇·c)`. Both are linear in
    /// `T_w`, so the coupled system has a closed form.
    fn hot_side(&self, t_cold_k: &ChannelArray, currents: &ChannelArray) -> HotSide {
        let p = &self.tem;
        let inv_rth = 1.0 / p.r_thermal;
        let rate = self.coolant.capacity_rate();
        let t_res = self.coolant.reservoir_temp.0 + KELVIN_OFFSET;
        let mut a = [0.0; CHANNELS];
        let mut sum_sa = 0.0;
        let mut sum_s = 0.0;
        for k in 0..CHANNELS {
            let i = currents[k];
            a[k] = p.seebeck_alpha * t_cold_k[k] * i + t_cold_k[k] * inv_rth + 0.5 * p.r_electrical * i * i;
            let g = self.channels[k].g_sink;
            let s = g / (inv_rth + g);
            sum_sa += s * a[k];
            sum_s += s;
        }
        let t_w = (t_res + sum_sa / rate) / (1.0 + sum_s * inv_rth / rate);
        let mut t_hot_k = [0.0; CHANNELS];
        for k in 0..CHANNELS {
            let g = self.channels[k].g_sink;
            t_hot_k[k] = (a[k] + g * t_w) / (inv_rth + g);
        }
        HotSide { t_hot_k, t_coolant_k: t_w }
    }

    /// Time derivative of the cold and sensor nodes (°C/s).
    fn derivative(&self, t_cold: &ChannelArray, t_sensor: &ChannelArray, currents: &ChannelArray) -> (ChannelArray, ChannelArray) {
        let mut tc_k = [0.0; CHANNELS];
        for k in 0..CHANNELS {
            tc_k[k] = t_cold[k] + KELVIN_OFFSET;
        }
        let hot = self.hot_side(&tc_k, currents);
        let mut d_cold = [0.0; CHANNELS];
        let mut d_sensor = [0.0; CHANNELS];
        for k in 0..CHANNELS {
            let ch = &self.channels[k];
            let q_in = raw::cold_flow(&self.tem, tc_k[k], hot.t_hot_k[k], currents[k]);
            d_cold[k] = (q_in + ch.g_skin * (ch.skin_core_temp - t_cold[k])) / ch.heat_capacity;
            if ch.sensor_lag_tau > 0.0 {
                d_sensor[k] = (t_cold[k] - t_sensor[k]) / ch.sensor_lag_tau;
            }
        }
        (d_cold, d_sensor)
    }

    /// Advances the state by `dt` under constant `currents` with fixed-step RK4.
    ///
    /// `dt` is split into equal sub-steps no longer than [`PlantModel::substep`].
    pub fn step(&self, state: &PlantState, currents: &ChannelArray, dt: f64) -> Result<PlantState> {
        if !(dt > 0.0 && dt <= MAX_STEP) {
            return Err(Error::LimitViolation {
                quantity: "dt",
                value: dt,
                min: 0.0,
                max: MAX_STEP,
            });
        }
        for &i in currents {
            if !(i.abs() <= self.tem.i_max) {
                return Err(Error::LimitViolation {
                    quantity: "current",
                    value: i,
                    min: -self.tem.i_max,
                    max: self.tem.i_max,
                });
            }
        }
        let n = (dt / self.substep - 1e-9).ceil().max(1.0) as usize;
        let h = dt / n as f64;
        let mut tc = state.t_cold;
        let mut ts = state.t_sensor;
        for _ in 0..n {
            let (k1c, k1s) = self.derivative(&tc, &ts, currents);
            let (k2c, k2s) = self.derivative(&axpy(&tc, &k1c, 0.5 * h), &axpy(&ts, &k1s, 0.5 * h), currents);
            let (k3c, k3s) = self.derivative(&axpy(&tc, &k2c, 0.5 * h), &axpy(&ts, &k2s, 0.5 * h), currents);
            let (k4c, k4s) = self.derivative(&axpy(&tc, &k3c, h), &axpy(&ts, &k3s, h), currents);
            for k in 0..CHANNELS {
                tc[k] += h / 6.0 * (k1c[k] + 2.0 * k2c[k] + 2.0 * k3c[k] + k4c[k]);
                if self.channels[k].sensor_lag_tau > 0.0 {
                    ts[k] += h / 6.0 * (k1s[k] + 2.0 * k2s[k] + 2.0 * k3s[k] + k4s[k]);
                } else {
                    ts[k] = tc[k];
                }
            }
        }
        let sim_time = state.sim_time + dt;
        let mut tc_k = [0.0; CHANNELS];
        for k in 0..CHANNELS {
            tc_k[k] = tc[k] + KELVIN_OFFSET;
        }
        let hot = self.hot_side(&tc_k, currents);
        let mut t_hot = [0.0; CHANNELS];
        for k in 0..CHANNELS {
            t_hot[k] = hot.t_hot_k[k] - KELVIN_OFFSET;
        }
        let next = PlantState {
            t_cold: tc,
            t_hot,
            t_sensor: ts,
            t_coolant: hot.t_coolant_k - KELVIN_OFFSET,
            sim_time,
        };
        check_envelope(&next)?;
        Ok(next)
    }

    /// Heat flow into the coolant at the given state, W.
    pub fn coolant_load(&self, state: &PlantState) -> f64 {
        (state.t_coolant - self.coolant.reservoir_temp.0) * self.coolant.capacity_rate()
    }

    /// Steady-state cold-face temperatures under constant `currents`, found by
    /// fixed-point iteration on the coolant temperature. Each channel's cold
    /// node balance is linear in its own temperature once the coolant is known.
    pub fn steady_state(&self, currents: &ChannelArray) -> Result<PlantState> {
        let p = &self.tem;
        let inv_rth = 1.0 / p.r_thermal;
        let rate = self.coolant.capacity_rate();
        let t_res = self.coolant.reservoir_temp.0 + KELVIN_OFFSET;
        let mut t_w = t_res;
        let mut tc_k = [t_res; CHANNELS];
        let mut th_k = [t_res; CHANNELS];
        for _ in 0..200 {
            let mut q_total = 0.0;
            for k in 0..CHANNELS {
                let ch = &self.channels[k];
                let i = currents[k];
                let g = ch.g_sink;
                let joule = 0.5 * p.r_electrical * i * i;
                // Hot node: T_h = (α·T_c·i + T_c/R + J + g·T_w) / (1/R + g) =: u·T_c + v
                let den = inv_rth + g;
                let u = (p.seebeck_alpha * i + inv_rth) / den;
                let v = (joule + g * t_w) / den;
                // Cold node: −α·T_c·i + (T_h − T_c)/R + J + g_skin·(T_s − T_c) = 0
                let t_skin = ch.skin_core_temp + KELVIN_OFFSET;
                let coef = -p.seebeck_alpha * i + inv_rth * (u - 1.0) - ch.g_skin;
                let rhs = -(inv_rth * v + joule + ch.g_skin * t_skin);
                if coef.abs() < 1e-15 {
                    return Err(Error::DivisionGuard("singular steady-state balance"));
                }
                tc_k[k] = rhs / coef;
                th_k[k] = u * tc_k[k] + v;
                q_total += g * (th_k[k] - t_w);
            }
            let next = t_res + q_total / rate;
            let converged = (next - t_w).abs() < 1e-12;
            t_w = next;
            if converged {
                break;
            }
        }
        let state = PlantState {
            t_cold: tc_k.map(|t| t - KELVIN_OFFSET),
            t_hot: th_k.map(|t| t - KELVIN_OFFSET),
            t_sensor: tc_k.map(|t| t - KELVIN_OFFSET),
            t_coolant: t_w - KELVIN_OFFSET,
            sim_time: 0.0,
        };
        if state.t_cold.iter().any(|t| !t.is_finite()) {
            return Err(Error::SimulationDiverged {
                channel: state.t_cold.iter().position(|t| !t.is_finite()).unwrap_or(0),
                time_s: 0.0,
            });
        }
        Ok(state)
    }
}

fn axpy(x: &ChannelArray, d: &ChannelArray, h: f64) -> ChannelArray {
    let mut out = *x;
    for k in 0..CHANNELS {
        out[k] += h * d[k];
    }
    out
}

fn check_envelope(s: &PlantState) -> Result<()> {
    let (lo, hi) = SAFE_TEMP_RANGE;
    for k in 0..CHANNELS {
        for t in [s.t_cold[k], s.t_hot[k], s.t_sensor[k]] {
            if !t.is_finite() || t < lo || t > hi {
                return Err(Error::SimulationDiverged {
                    channel: k,
                    time_s: s.sim_time,
                });
            }
        }
    }
    if !s.t_coolant.is_finite() || s.t_coolant < lo || s.t_coolant > hi {
        return Err(Error::SimulationDiverged {
            channel: 0,
            time_s: s.sim_time,
        });
    }
    Ok(())
}

/// Noisy thermistor readout on top of the lagged sensor node.
///
/// Noise draws come from one seeded stream in channel order, so a replay with
/// the same seed and the same read sequence is bit-identical.
#[derive(Debug, Clone)]
pub struct SensorBank {
    rng: ChaCha8Rng,
    sigma: ChannelArray,
}

impl SensorBank {
    pub fn new(model: &PlantModel, seed: u64) -> Self {
        SensorBank {
            rng: ChaCha8Rng::seed_from_u64(seed),
            sigma: model.channels.map(|c| c.sensor_noise_sigma),
        }
    }

    /// Reading of channel `k`, °C.
    pub fn read(&mut self, state: &PlantState, k: usize) -> f64 {
        let base = state.t_sensor[k];
        let sigma = self.sigma[k];
        if sigma > 0.0 {
            let n = Normal::new(0.0, sigma).expect("sigma validated non-negative");
            base + n.sample(&mut self.rng)
        } else {
            base
        }
    }

    pub fn read_all(&mut self, state: &PlantState) -> ChannelArray {
        let mut out = [0.0; CHANNELS];
        for (k, v) in out.iter_mut().enumerate() {
            *v = self.read(state, k);
        }
        out
    }
}

/// Temperatures of one profile knot: one value shared by all listed cells, or
/// one per listed cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KnotTemps {
    Uniform(f64),
    PerCell(Vec<f64>),
}

/// Piecewise-linear surface temperature over time, for the outward-facing
/// thermistors of the array. Cells not listed sit at `background_c`.
///
/// ```json
/// {"schema": 1, "cells": [0, 2, 4, 6, 8], "times_s": [0, 4], "temps_c": [30, 38], "background_c": 30}
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimedTemperatureProfile {
    #[serde(default = "schema_one")]
    pub schema: u32,
    /// Cells the profile drives; empty means all nine.
    #[serde(default)]
    pub cells: Vec<usize>,
    pub times_s: Vec<f64>,
    pub temps_c: Vec<KnotTemps>,
    #[serde(default = "default_background")]
    pub background_c: f64,
}

fn schema_one() -> u32 {
    crate::SCHEMA_VERSION
}

fn default_background() -> f64 {
    30.0
}

impl TimedTemperatureProfile {
    /// The same temperature on all nine cells over `[0, duration_s]`.
    pub fn constant(temp_c: f64, duration_s: f64) -> Self {
        TimedTemperatureProfile {
            schema: crate::SCHEMA_VERSION,
            cells: Vec::new(),
            times_s: vec![0.0, duration_s],
            temps_c: vec![KnotTemps::Uniform(temp_c), KnotTemps::Uniform(temp_c)],
            background_c: temp_c,
        }
    }

    /// A fixed per-cell pattern over `[0, duration_s]`.
    pub fn per_cell(temps: ChannelArray, duration_s: f64) -> Self {
        TimedTemperatureProfile {
            schema: crate::SCHEMA_VERSION,
            cells: (0..CHANNELS).collect(),
            times_s: vec![0.0, duration_s],
            temps_c: vec![KnotTemps::PerCell(temps.to_vec()), KnotTemps::PerCell(temps.to_vec())],
            background_c: 30.0,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: TimedTemperatureProfile = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let schema_err = |field: &str, message: String| Error::Schema {
            field: field.to_string(),
            message,
        };
        if self.schema != crate::SCHEMA_VERSION {
            return Err(schema_err("schema", format!("unsupported version {}", self.schema)));
        }
        if self.times_s.is_empty() {
            return Err(schema_err("times_s", "at least one knot required".into()));
        }
        if self.times_s.len() != self.temps_c.len() {
            return Err(schema_err(
                "temps_c",
                format!("{} rows for {} knot times", self.temps_c.len(), self.times_s.len()),
            ));
        }
        if self.times_s.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(schema_err("times_s", "must be strictly increasing".into()));
        }
        for (i, &c) in self.cells.iter().enumerate() {
            if c >= CHANNELS {
                return Err(schema_err(&format!("cells[{i}]"), format!("cell index {c} not in 0..9")));
            }
        }
        let n_cells = if self.cells.is_empty() { CHANNELS } else { self.cells.len() };
        for (i, row) in self.temps_c.iter().enumerate() {
            let vals: &[f64] = match row {
                KnotTemps::Uniform(v) => std::slice::from_ref(v),
                KnotTemps::PerCell(v) => {
                    if v.len() != n_cells {
                        return Err(schema_err(&format!("temps_c[{i}]"), format!("{} values for {n_cells} cells", v.len())));
                    }
                    v
                }
            };
            if vals.iter().any(|t| !t.is_finite()) {
                return Err(schema_err(&format!("temps_c[{i}]"), "non-finite temperature".into()));
            }
        }
        Ok(())
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.times_s[0], *self.times_s.last().expect("validated non-empty"))
    }

    fn knot(&self, idx: usize, slot: usize) -> f64 {
        match &self.temps_c[idx] {
            KnotTemps::Uniform(v) => *v,
            KnotTemps::PerCell(v) => v[slot],
        }
    }
}

/// Temperatures a contacted surface presents to the nine outward sensors at
/// time `t`, interpolated linearly between profile knots.
pub fn external_surface_source(profile: &TimedTemperatureProfile, t: f64) -> Result<ChannelArray> {
    let (start, end) = profile.domain();
    if !(t >= start && t <= end) {
        return Err(Error::OutsideProfile { t, start, end });
    }
    let times = &profile.times_s;
    let seg = times.partition_point(|&x| x <= t).saturating_sub(1).min(times.len() - 1);
    let (i0, i1, w) = if seg + 1 < times.len() {
        let w = (t - times[seg]) / (times[seg + 1] - times[seg]);
        (seg, seg + 1, w)
    } else {
        (seg, seg, 0.0)
    };
    let mut out = [profile.background_c; CHANNELS];
    let cells: Vec<usize> = if profile.cells.is_empty() {
        (0..CHANNELS).collect()
    } else {
        profile.cells.clone()
    };
    for (slot, &cell) in cells.iter().enumerate() {
        let a = profile.knot(i0, slot);
        let b = profile.knot(i1, slot);
        out[cell] = a + (b - a) * w;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::thermo::{array_heat_budget, coolant_delta_t};

    fn model() -> PlantModel {
        PlantModel::default()
    }

    #[test]
    fn equilibrium_is_fixed_point() {
        let m = model();
        let mut s = m.equilibrium(Celsius(30.0));
        for _ in 0..1000 {
            let next = m.step(&s, &[0.0; CHANNELS], 0.01).unwrap();
            for k in 0..CHANNELS {
                assert!((next.t_cold[k] - s.t_cold[k]).abs() < 1e-9);
                assert!((next.t_hot[k] - 30.0).abs() < 1e-9);
            }
            s = next;
        }
        assert!((s.sim_time - 10.0).abs() < 1e-9);
    }

    #[test]
    fn passive_relaxation_is_monotone() {
        let m = model();
        let mut s = m.equilibrium(Celsius(30.0));
        s.t_cold = [40.0; CHANNELS];
        s.t_sensor = [40.0; CHANNELS];
        let mut prev = 40.0;
        for _ in 0..3000 {
            s = m.step(&s, &[0.0; CHANNELS], 0.01).unwrap();
            assert!(s.t_cold[0] < prev && s.t_cold[0] > 30.0);
            prev = s.t_cold[0];
        }
        assert!(prev < 39.0);
    }

    #[test]
    fn rejects_bad_dt_and_current() {
        let m = model();
        let s = m.equilibrium(Celsius(30.0));
        assert!(m.step(&s, &[0.0; CHANNELS], 0.0).is_err());
        assert!(m.step(&s, &[0.0; CHANNELS], 0.02).is_err());
        let mut i = [0.0; CHANNELS];
        i[3] = 0.8;
        assert!(matches!(m.step(&s, &i, 0.01), Err(Error::LimitViolation { quantity: "current", .. })));
    }

    #[test]
    fn nan_is_reported_as_divergence() {
        let m = model();
        let mut s = m.equilibrium(Celsius(30.0));
        s.t_cold[2] = f64::NAN;
        assert!(matches!(m.step(&s, &[0.0; CHANNELS], 0.01), Err(Error::SimulationDiverged { .. })));
    }

    #[test]
    fn positive_current_cools_and_negative_warms() {
        let m = model();
        let s0 = m.equilibrium(Celsius(30.0));
        let mut cool = s0.clone();
        let mut warm = s0.clone();
        for _ in 0..100 {
            cool = m.step(&cool, &[0.3; CHANNELS], 0.01).unwrap();
            warm = m.step(&warm, &[-0.3; CHANNELS], 0.01).unwrap();
        }
        assert!(cool.t_cold[0] < 29.0);
        assert!(warm.t_cold[0] > 31.0);
        // Joule heat helps warming and fights cooling.
        assert!(warm.t_cold[0] - 30.0 > 30.0 - cool.t_cold[0]);
    }

    #[test]
    fn halving_substep_converges() {
        let run = |substep: f64| {
            let mut m = model();
            m.substep = substep;
            let mut s = m.equilibrium(Celsius(30.0));
            let mut traj = Vec::new();
            for n in 0..1000 {
                let i = if (n / 100) % 2 == 0 { 0.5 } else { -0.6 };
                s = m.step(&s, &[i; CHANNELS], 0.01).unwrap();
                traj.push(s.t_cold[0]);
            }
            traj
        };
        let a = run(1e-3);
        let b = run(5e-4);
        let max = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(max < 0.01, "{max}");
    }

    #[test]
    fn steady_state_matches_long_simulation() {
        let m = model();
        let i = [0.2; CHANNELS];
        let ss = m.steady_state(&i).unwrap();
        let mut s = m.equilibrium(Celsius(30.0));
        for _ in 0..20_000 {
            s = m.step(&s, &i, 0.01).unwrap();
        }
        assert!((s.t_cold[0] - ss.t_cold[0]).abs() < 1e-3, "{} vs {}", s.t_cold[0], ss.t_cold[0]);
        assert!((s.t_coolant - ss.t_coolant).abs() < 1e-6);
    }

    #[test]
    fn contact_spread_is_seeded_and_bounded() {
        let a = model().with_contact_spread(0.3, 7);
        let b = model().with_contact_spread(0.3, 7);
        assert_eq!(a, b);
        let base = ChannelThermalModel::default().g_skin;
        for ch in &a.channels {
            assert!(ch.g_skin >= 0.7 * base - 1e-15 && ch.g_skin <= 1.3 * base + 1e-15);
        }
        assert!(a.channels.iter().any(|c| c.g_skin != base));
    }

    #[test]
    fn ideal_sensor_reads_cold_face() {
        let mut m = model();
        for ch in &mut m.channels {
            *ch = ch.ideal_sensor();
        }
        let mut s = m.equilibrium(Celsius(30.0));
        let mut bank = SensorBank::new(&m, 1);
        for _ in 0..50 {
            s = m.step(&s, &[0.4; CHANNELS], 0.01).unwrap();
            assert_eq!(bank.read(&s, 4), s.t_cold[4]);
        }
    }

    #[test]
    fn sensor_lag_reaches_63_percent_at_tau() {
        // Freeze the cold face with an enormous capacity and no couplings.
        let ch = ChannelThermalModel {
            heat_capacity: 1e12,
            g_skin: 0.0,
            sensor_lag_tau: 0.1,
            sensor_noise_sigma: 0.0,
            ..ChannelThermalModel::default()
        };
        let m = PlantModel::uniform(TemParams::default(), CoolantParams::default(), ch);
        let mut s = m.equilibrium(Celsius(30.0));
        s.t_cold = [40.0; CHANNELS];
        for _ in 0..10 {
            s = m.step(&s, &[0.0; CHANNELS], 0.01).unwrap();
        }
        let frac = (s.t_sensor[0] - 30.0) / 10.0;
        let expected = 1.0 - (-1.0f64).exp();
        assert!((frac - expected).abs() < 0.01 * expected, "{frac}");
    }

    #[test]
    fn sensor_noise_replays_bit_identically() {
        let m = model();
        let s = m.equilibrium(Celsius(30.0));
        let mut a = SensorBank::new(&m, 42);
        let mut b = SensorBank::new(&m, 42);
        let ra: Vec<u64> = (0..100).map(|_| a.read(&s, 3).to_bits()).collect();
        let rb: Vec<u64> = (0..100).map(|_| b.read(&s, 3).to_bits()).collect();
        assert_eq!(ra, rb);
        assert!(ra.iter().any(|&x| f64::from_bits(x) != 30.0));
    }

    #[test]
    fn coolant_rise_within_budget() {
        let m = model();
        let bound = coolant_delta_t(array_heat_budget(&m.tem), &m.coolant).unwrap() * 1.05;
        let mut s = m.equilibrium(Celsius(30.0));
        for n in 0..2000 {
            let i = if n < 1000 { 0.7 } else { -0.7 };
            s = m.step(&s, &[i; CHANNELS], 0.01).unwrap();
            assert!(s.t_coolant - 30.0 <= bound, "{}", s.t_coolant);
            if s.t_cold[0] > 44.0 {
                break;
            }
        }
    }

    #[test]
    fn profile_constant_and_ramp() {
        let c = TimedTemperatureProfile::constant(34.0, 10.0);
        assert_eq!(external_surface_source(&c, 3.3).unwrap(), [34.0; CHANNELS]);
        let ramp = TimedTemperatureProfile::from_json(r#"{"times_s":[0,4],"temps_c":[30,38]}"#).unwrap();
        let v = external_surface_source(&ramp, 2.0).unwrap();
        for t in v {
            assert!((t - 34.0).abs() < 1e-12);
        }
        assert!(matches!(external_surface_source(&ramp, 4.5), Err(Error::OutsideProfile { .. })));
    }

    #[test]
    fn profile_checkerboard_identity() {
        let text = r#"{"schema":1,"cells":[0,2,4,6,8],"times_s":[0,5],"temps_c":[[36,24,36,24,36],[36,24,36,24,36]],"background_c":30}"#;
        let p = TimedTemperatureProfile::from_json(text).unwrap();
        let v = external_surface_source(&p, 1.0).unwrap();
        assert_eq!(v, [36.0, 30.0, 24.0, 30.0, 36.0, 30.0, 24.0, 30.0, 36.0]);
    }

    #[test]
    fn profile_rejects_bad_cells_and_unknown_fields() {
        let bad = r#"{"cells":[9],"times_s":[0,1],"temps_c":[30,31]}"#;
        match TimedTemperatureProfile::from_json(bad) {
            Err(Error::Schema { field, .. }) => assert_eq!(field, "cells[0]"),
            other => panic!("{other:?}"),
        }
        assert!(TimedTemperatureProfile::from_json(r#"{"times_s":[0],"temps_c":[30],"extra":1}"#).is_err());
        assert!(TimedTemperatureProfile::from_json(r#"{"times_s":[1,0],"temps_c":[30,31]}"#).is_err());
    }
}
