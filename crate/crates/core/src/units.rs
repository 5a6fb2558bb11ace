use serde::{Deserialize, Serialize};

const ZERO_CELSIUS_IN_KELVIN: f64 = 273.15;

/// Absolute temperature.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Kelvin(pub f64);

/// Temperature on the Celsius scale, used at every user-facing boundary.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Celsius(pub f64);

impl Kelvin {
    pub fn to_celsius(self) -> Celsius {
        Celsius(self.0 - ZERO_CELSIUS_IN_KELVIN)
    }
}

impl Celsius {
    pub fn to_kelvin(self) -> Kelvin {
        Kelvin(self.0 + ZERO_CELSIUS_IN_KELVIN)
    }
}

impl From<Celsius> for Kelvin {
    fn from(c: Celsius) -> Self {
        c.to_kelvin()
    }
}

impl From<Kelvin> for Celsius {
    fn from(k: Kelvin) -> Self {
        k.to_celsius()
    }
}
