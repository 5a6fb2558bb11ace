//! Simulation and control core for a 3×3 palm-worn thermoelectric display.
//!
//! The crate is organised bottom-up:
//!
//! - [`thermo`]: thermoelectric heat-flow relations and the water-cooling budget.
//! - [`plant`]: lumped two-node thermal model of the nine channels against a palm.
//! - [`control`]: per-channel PID temperature control and step-response metrics.
//! - [`calibrate`]: fitting plant parameters (and controller gains) to rise-time targets.
//! - [`device`]: array geometry, safety clamping, passthrough and device backends.
//! - [`serial`]: the binary frame format spoken to the hardware controller.
//! - [`pattern`]: spatial patterns, timed transitions and moving "brush" schedules.
//! - [`psychophys`]: the adaptive staircase, simulated observers, trial tables and
//!   post-hoc statistics.

pub mod calibrate;
pub mod control;
pub mod device;
mod error;
pub mod pattern;
pub mod plant;
pub mod psychophys;
pub mod serial;
pub mod thermo;
mod units;

pub use error::{Error, Result};
pub use units::{Celsius, Kelvin};

/// Number of thermoelectric channels in the array.
pub const CHANNELS: usize = 9;

/// One value per channel, row-major.
pub type ChannelArray = [f64; CHANNELS];

/// Version stamped into every persisted file format.
pub const SCHEMA_VERSION: u32 = 1;
