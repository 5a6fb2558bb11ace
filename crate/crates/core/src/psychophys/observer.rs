//! Simulated participant answering same/different from a psychometric curve.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::Response;
use crate::{Error, Result};

/// Cumulative-normal observer with guess and lapse rates.
///
/// `sigma = 0` is accepted and gives a hard threshold: always "different"
/// above `threshold_mu`, always "same" below, a fair coin exactly at it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObserverModel {
    pub threshold_mu: f64,
    pub slope_sigma: f64,
    #[serde(default)]
    pub lapse_rate: f64,
    #[serde(default)]
    pub guess_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ObserverModel {
    pub fn new(threshold_mu: f64, slope_sigma: f64, seed: u64) -> Self {
        ObserverModel {
            threshold_mu,
            slope_sigma,
            lapse_rate: 0.0,
            guess_rate: 0.0,
            seed,
        }
    }

    /// A hard-threshold observer at `theta`.
    pub fn deterministic(theta: f64) -> Self {
        ObserverModel::new(theta, 0.0, 0)
    }

    /// Observer whose probability of answering "different" equals `p` at a
    /// difference of `delta`, with slope `sigma` and no guessing or lapses.
    pub fn with_quantile(delta: f64, p: f64, sigma: f64, seed: u64) -> Self {
        let z = Normal::standard().inverse_cdf(p);
        ObserverModel::new(delta - sigma * z, sigma, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.threshold_mu.is_finite() {
            return Err(Error::invalid("threshold_mu", "must be finite"));
        }
        if !(self.slope_sigma >= 0.0 && self.slope_sigma.is_finite()) {
            return Err(Error::invalid("slope_sigma", "must be non-negative"));
        }
        for (name, v) in [("lapse_rate", self.lapse_rate), ("guess_rate", self.guess_rate)] {
            if !(0.0..=0.1).contains(&v) {
                return Err(Error::invalid(name, "must lie in [0, 0.1]"));
            }
        }
        Ok(())
    }

    /// Probability of answering "different" for an absolute difference `delta`.
    pub fn p_different(&self, delta: f64) -> f64 {
        let core = if self.slope_sigma > 0.0 {
            Normal::standard().cdf((delta - self.threshold_mu) / self.slope_sigma)
        } else if delta > self.threshold_mu {
            1.0
        } else if delta < self.threshold_mu {
            0.0
        } else {
            0.5
        };
        self.guess_rate + (1.0 - self.guess_rate - self.lapse_rate) * core
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    pub fn respond<R: Rng + ?Sized>(&self, delta: f64, rng: &mut R) -> Response {
        let p = self.p_different(delta.abs());
        if p >= 1.0 || (p > 0.0 && rng.random::<f64>() < p) {
            Response::Different
        } else {
            Response::Same
        }
    }
}

/// Parses `mu=2.5,sigma=0.8[,lapse=..][,guess=..][,seed=..]`.
impl std::str::FromStr for ObserverModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut m = ObserverModel::new(f64::NAN, f64::NAN, 0);
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::invalid("observer", format!("expected key=value, got {part:?}")))?;
            let num = || {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::invalid("observer", format!("{k}: not a number: {v:?}")))
            };
            match k.trim() {
                "mu" => m.threshold_mu = num()?,
                "sigma" => m.slope_sigma = num()?,
                "lapse" => m.lapse_rate = num()?,
                "guess" => m.guess_rate = num()?,
                "seed" => {
                    m.seed = v
                        .trim()
                        .parse()
                        .map_err(|_| Error::invalid("observer", format!("seed: not an integer: {v:?}")))?
                }
                other => return Err(Error::invalid("observer", format!("unknown key {other:?}"))),
            }
        }
        if m.threshold_mu.is_nan() {
            return Err(Error::invalid("observer", "mu is required"));
        }
        if m.slope_sigma.is_nan() {
            m.slope_sigma = 0.0;
        }
        m.validate()?;
        Ok(m)
    }
}
