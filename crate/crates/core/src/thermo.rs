//! Thermoelectric module heat flow and the array's water-cooling budget.
//!
//! Sign conventions: a positive drive current pumps heat *out of* the
//! controlled ("cold") face, so [`peltier_heat`] is negative for positive
//! current. The cold face is the one touching the skin regardless of whether
//! the module is heating or cooling it.
//!
//! Resistive heating `r_el·i²` is split evenly between the two faces, which
//! makes `cold_side_flow + hot_side_flow == r_el·i²` an exact identity.

use serde::{Deserialize, Serialize};

use crate::{Celsius, Error, Kelvin, Result};

/// Reference temperature used to back out the Seebeck coefficient from the
/// datasheet `q_max` rating.
pub const T_REF: Kelvin = Kelvin(303.15);

/// Admissible absolute temperature range for the heat-flow relations.
pub const T_MIN: Kelvin = Kelvin(250.0);
pub const T_MAX: Kelvin = Kelvin(400.0);

/// Hard sanity bound on module current.
pub const I_MAX_SANITY: f64 = 2.0;

/// Per-module physical constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemParams {
    /// Seebeck coefficient, V/K.
    pub seebeck_alpha: f64,
    /// Internal conduction resistance between the two faces, K/W.
    pub r_thermal: f64,
    /// Electrical resistance, Ω.
    pub r_electrical: f64,
    /// Maximum drive current, A.
    pub i_max: f64,
    /// Rated maximum heat pumping at zero temperature difference, W.
    pub q_max: f64,
    /// Number of modules sharing the coolant loop.
    pub n_modules: u32,
}

impl Default for TemParams {
    /// The 6.5 mm module used in the array: 1.7 W, 0.7 A, 4.17 Ω, nine modules.
    fn default() -> Self {
        Self::from_rating(1.7, 0.7, 4.17, 100.0, 9).expect("default module rating is valid")
    }
}

impl TemParams {
    /// Builds parameters from a rating sheet, deriving the Seebeck coefficient
    /// as `q_max / (T_REF · i_max)`.
    pub fn from_rating(q_max: f64, i_max: f64, r_electrical: f64, r_thermal: f64, n_modules: u32) -> Result<Self> {
        if !(i_max > 0.0) {
            return Err(Error::invalid("i_max", "must be strictly positive"));
        }
        let p = TemParams {
            seebeck_alpha: q_max / (T_REF.0 * i_max),
            r_thermal,
            r_electrical,
            i_max,
            q_max,
            n_modules,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("seebeck_alpha", self.seebeck_alpha),
            ("r_thermal", self.r_thermal),
            ("r_electrical", self.r_electrical),
            ("i_max", self.i_max),
            ("q_max", self.q_max),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(name, format!("must be finite and > 0, got {v}")));
            }
        }
        if self.n_modules == 0 {
            return Err(Error::invalid("n_modules", "must be at least 1"));
        }
        if self.i_max > I_MAX_SANITY {
            return Err(Error::invalid(
                "i_max",
                format!("{} A exceeds the {I_MAX_SANITY} A sanity bound", self.i_max),
            ));
        }
        let implied = self.seebeck_alpha * T_REF.0 * self.i_max;
        if (implied - self.q_max).abs() > 0.2 * self.q_max {
            return Err(Error::invalid(
                "q_max",
                format!("{} W inconsistent with alpha·T_ref·i_max = {implied:.4} W (> 20% apart)", self.q_max),
            ));
        }
        Ok(())
    }

    fn check_current(&self, i: f64) -> Result<()> {
        if !(i.abs() <= self.i_max) {
            return Err(Error::LimitViolation {
                quantity: "current",
                value: i,
                min: -self.i_max,
                max: self.i_max,
            });
        }
        Ok(())
    }
}

fn check_temperature(quantity: &'static str, t: Kelvin) -> Result<()> {
    if !(t.0 >= T_MIN.0 && t.0 <= T_MAX.0) {
        return Err(Error::LimitViolation {
            quantity,
            value: t.0,
            min: T_MIN.0,
            max: T_MAX.0,
        });
    }
    Ok(())
}

/// Peltier heat absorbed at the cold face, `−α·T_c·i`, in watts.
pub fn peltier_heat(p: &TemParams, t_cold: Kelvin, i: f64) -> Result<f64> {
    p.check_current(i)?;
    check_temperature("t_cold", t_cold)?;
    Ok(raw::peltier(p, t_cold.0, i))
}

/// Net heat flow into the cold face: Peltier pumping, back-conduction from the
/// hot face and half of the Joule heat.
pub fn cold_side_flow(p: &TemParams, t_cold: Kelvin, t_hot: Kelvin, i: f64) -> Result<f64> {
    p.check_current(i)?;
    check_temperature("t_cold", t_cold)?;
    check_temperature("t_hot", t_hot)?;
    Ok(raw::cold_flow(p, t_cold.0, t_hot.0, i))
}

/// Net heat flow into the hot face. Uses the cold-face temperature in the
/// Peltier term so that the two faces exchange exactly the pumped heat.
pub fn hot_side_flow(p: &TemParams, t_cold: Kelvin, t_hot: Kelvin, i: f64) -> Result<f64> {
    p.check_current(i)?;
    check_temperature("t_cold", t_cold)?;
    check_temperature("t_hot", t_hot)?;
    Ok(raw::hot_flow(p, t_cold.0, t_hot.0, i))
}

/// Worst-case heat the coolant must remove from the whole array: every module
/// at rated pumping plus its hot-side share of Joule heat at maximum current.
pub fn array_heat_budget(p: &TemParams) -> f64 {
    f64::from(p.n_modules) * (p.q_max + 0.5 * p.r_electrical * p.i_max * p.i_max)
}

/// Water-cooling loop parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoolantParams {
    /// kg/m³
    pub density: f64,
    /// m³/s
    pub flow_rate: f64,
    /// J/(kg·K)
    pub specific_heat: f64,
    /// Temperature the reservoir heater holds.
    pub reservoir_temp: Celsius,
}

impl Default for CoolantParams {
    /// Water at 2.25 ml/s held at 30 °C.
    fn default() -> Self {
        CoolantParams {
            density: 1000.0,
            flow_rate: 2.25e-6,
            specific_heat: 4184.0,
            reservoir_temp: Celsius(30.0),
        }
    }
}

impl CoolantParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("density", self.density),
            ("flow_rate", self.flow_rate),
            ("specific_heat", self.specific_heat),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(name, format!("must be finite and > 0, got {v}")));
            }
        }
        let t = self.reservoir_temp.0;
        if !(25.0..=36.0).contains(&t) {
            return Err(Error::invalid(
                "reservoir_temp",
                format!("{t} °C outside the 25–36 °C skin-temperature band"),
            ));
        }
        Ok(())
    }

    /// Heat capacity rate `ρ·V̇·c` of the coolant stream, W/K.
    pub fn capacity_rate(&self) -> f64 {
        self.density * self.flow_rate * self.specific_heat
    }
}

/// Temperature rise of the coolant when it absorbs `q` watts.
pub fn coolant_delta_t(q: f64, c: &CoolantParams) -> Result<f64> {
    let rate = c.capacity_rate();
    if !(rate > 0.0) || !rate.is_finite() {
        return Err(Error::DivisionGuard("coolant capacity rate must be > 0"));
    }
    Ok(q / rate)
}

/// Result of [`max_delta_t`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaxDeltaT {
    /// Largest sustainable `t_hot − t_cold` with no external load, K.
    pub delta_t_max: f64,
    /// Current that achieves it, A.
    pub i_opt: f64,
}

/// Unloaded cold-face equilibrium temperature for a given current, found by
/// setting [`cold_side_flow`] to zero.
pub fn unloaded_cold_temp(p: &TemParams, t_hot: Kelvin, i: f64) -> Kelvin {
    let num = t_hot.0 / p.r_thermal + 0.5 * p.r_electrical * i * i;
    let den = p.seebeck_alpha * i + 1.0 / p.r_thermal;
    Kelvin(num / den)
}

/// Largest unloaded temperature difference across a module whose hot face is
/// held at `t_hot`, searched over currents in `(0, i_max]`.
///
/// The unloaded cold temperature `t_c(i)` has a single stationary point on
/// `i > 0`, the positive root of `½·r_el·α·i² + (r_el/r_th)·i − α·t_hot/r_th`.
/// Past the root the Joule term wins and `t_c` rises again, so the optimum is
/// the root clamped to `i_max`.
pub fn max_delta_t(p: &TemParams, t_hot: Kelvin) -> MaxDeltaT {
    let a = 0.5 * p.r_electrical * p.seebeck_alpha;
    let b = p.r_electrical / p.r_thermal;
    let c = -p.seebeck_alpha * t_hot.0 / p.r_thermal;
    let root = if a > 0.0 {
        // Numerically stable form of (−b + √(b² − 4ac)) / 2a for c ≤ 0.
        let disc = (b * b - 4.0 * a * c).max(0.0).sqrt();
        let denom = b + disc;
        if denom > 0.0 {
            -2.0 * c / denom
        } else {
            0.0
        }
    } else {
        0.0
    };
    let i_opt = root.clamp(0.0, p.i_max);
    if i_opt <= 0.0 {
        return MaxDeltaT {
            delta_t_max: 0.0,
            i_opt: 0.0,
        };
    }
    let dt = t_hot.0 - unloaded_cold_temp(p, t_hot, i_opt).0;
    if dt > 0.0 {
        MaxDeltaT { delta_t_max: dt, i_opt }
    } else {
        MaxDeltaT {
            delta_t_max: 0.0,
            i_opt: 0.0,
        }
    }
}

/// Unchecked forms used in the simulation inner loop.
pub(crate) mod raw {
    use super::TemParams;

    #[inline]
    pub fn peltier(p: &TemParams, t_cold_k: f64, i: f64) -> f64 {
        -p.seebeck_alpha * t_cold_k * i
    }

    #[inline]
    pub fn cold_flow(p: &TemParams, t_cold_k: f64, t_hot_k: f64, i: f64) -> f64 {
        peltier(p, t_cold_k, i) + (t_hot_k - t_cold_k) / p.r_thermal + 0.5 * p.r_electrical * i * i
    }

    #[inline]
    pub fn hot_flow(p: &TemParams, t_cold_k: f64, t_hot_k: f64, i: f64) -> f64 {
        p.seebeck_alpha * t_cold_k * i + (t_cold_k - t_hot_k) / p.r_thermal + 0.5 * p.r_electrical * i * i
    }
}
