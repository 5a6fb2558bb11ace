//! Trial tables for the passthrough, pattern-discrimination and brush
//! experiments. Tables are seeded permutations of their design sets.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Polarity;
use crate::pattern::ROW_COLUMN_PATTERNS;
use crate::{Error, Result};

/// Which two objects are compared in a passthrough trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    /// Physical object felt through the device against its virtual replica.
    RealVsVirtual,
    /// Physical object with the bare hand, then through the device.
    BareVsDevice,
}

impl Comparison {
    pub const BOTH: [Comparison; 2] = [Comparison::RealVsVirtual, Comparison::BareVsDevice];

    pub fn as_str(self) -> &'static str {
        match self {
            Comparison::RealVsVirtual => "real_vs_virtual",
            Comparison::BareVsDevice => "bare_vs_device",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PassthroughDesign {
    /// Trials per comparison × polarity cell; half equal, half different.
    pub repetitions: usize,
    /// Offset of the first object from ambient, °C (sign from polarity).
    pub base_offset: f64,
    /// Temperature differences used on "different" trials, cycled in order.
    pub deltas: Vec<f64>,
}

impl Default for PassthroughDesign {
    fn default() -> Self {
        PassthroughDesign {
            repetitions: 10,
            base_offset: 8.0,
            deltas: vec![2.0, 4.0],
        }
    }
}

impl PassthroughDesign {
    pub fn validate(&self, envelope: f64) -> Result<()> {
        if self.repetitions == 0 || !self.repetitions.is_multiple_of(2) {
            return Err(Error::invalid("repetitions", "must be a positive even number"));
        }
        if self.deltas.is_empty() || self.deltas.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::invalid("deltas", "need at least one positive delta"));
        }
        let max_delta = self.deltas.iter().copied().fold(0.0, f64::max);
        if !(self.base_offset >= 0.0 && self.base_offset + max_delta <= envelope) {
            return Err(Error::invalid("base_offset", "base_offset + delta must stay inside the envelope"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassthroughTrial {
    pub comparison: Comparison,
    pub polarity: Polarity,
    /// Offsets from ambient of the two objects, °C.
    pub first_offset: f64,
    pub second_offset: f64,
    pub equal: bool,
}

/// The passthrough-comparison table: every comparison × polarity cell with
/// `repetitions` trials each, half at equal object temperatures and half with
/// the second object `delta` further from ambient, shuffled with `seed`.
pub fn exp2_trial_table(design: &PassthroughDesign, seed: u64) -> Vec<PassthroughTrial> {
    let mut out = Vec::new();
    for comparison in Comparison::BOTH {
        for polarity in Polarity::BOTH {
            let s = polarity.sign();
            let base = s * design.base_offset;
            for r in 0..design.repetitions {
                let equal = r % 2 == 0;
                let delta = design.deltas[(r / 2) % design.deltas.len()];
                out.push(PassthroughTrial {
                    comparison,
                    polarity,
                    first_offset: base,
                    second_offset: if equal { base } else { base + s * delta },
                    equal,
                });
            }
        }
    }
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatternPairDesign {
    /// Same-pattern trials per polarity; each of the six patterns is used in
    /// turn.
    pub catch_per_polarity: usize,
    /// Magnitude of the stimulus offset from ambient, °C.
    pub offset: f64,
    pub hold_s: f64,
}

impl Default for PatternPairDesign {
    fn default() -> Self {
        PatternPairDesign {
            catch_per_polarity: 6,
            offset: 8.0,
            hold_s: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PatternPair {
    pub first: String,
    pub second: String,
    pub polarity: Polarity,
}

impl PatternPair {
    pub fn changed(&self) -> bool {
        self.first != self.second
    }
}

/// Every ordered pair of distinct row/column patterns plus the catch pairs,
/// for both polarities, shuffled with `seed`.
pub fn exp3_pair_table(design: &PatternPairDesign, seed: u64) -> Vec<PatternPair> {
    let mut out = Vec::new();
    for polarity in Polarity::BOTH {
        for a in ROW_COLUMN_PATTERNS {
            for b in ROW_COLUMN_PATTERNS {
                if a != b {
                    out.push(PatternPair {
                        first: a.to_string(),
                        second: b.to_string(),
                        polarity,
                    });
                }
            }
        }
        for i in 0..design.catch_per_polarity {
            let p = ROW_COLUMN_PATTERNS[i % ROW_COLUMN_PATTERNS.len()];
            out.push(PatternPair {
                first: p.to_string(),
                second: p.to_string(),
                polarity,
            });
        }
    }
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BrushDesign {
    pub velocity_m_s: f64,
    pub offset: f64,
    pub row: usize,
    /// Sweeps per polarity.
    pub sweeps: usize,
    pub dwell_multiplier: f64,
}

impl Default for BrushDesign {
    fn default() -> Self {
        BrushDesign {
            velocity_m_s: 3.5,
            offset: 10.0,
            row: 1,
            sweeps: 4,
            dwell_multiplier: 1.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn exp2_counts() {
        let t = exp2_trial_table(&PassthroughDesign::default(), 3);
        assert_eq!(t.len(), 40);
        assert_eq!(t.iter().filter(|x| x.equal).count(), 20);
        let mut cells: BTreeMap<(Comparison, Polarity), (usize, usize)> = BTreeMap::new();
        for x in &t {
            let e = cells.entry((x.comparison, x.polarity)).or_default();
            if x.equal {
                e.0 += 1;
            } else {
                e.1 += 1;
            }
            assert_eq!(x.equal, x.first_offset == x.second_offset);
            assert!(x.second_offset.abs() <= 15.0);
        }
        assert_eq!(cells.len(), 4);
        assert!(cells.values().all(|&c| c == (5, 5)));
        assert_eq!(t, exp2_trial_table(&PassthroughDesign::default(), 3));
        assert_ne!(t, exp2_trial_table(&PassthroughDesign::default(), 4));
    }

    #[test]
    fn exp2_validation() {
        assert!(PassthroughDesign::default().validate(15.0).is_ok());
        assert!(PassthroughDesign {
            repetitions: 3,
            ..Default::default()
        }
        .validate(15.0)
        .is_err());
        assert!(PassthroughDesign {
            base_offset: 12.0,
            ..Default::default()
        }
        .validate(15.0)
        .is_err());
    }

    #[test]
    fn exp3_counts() {
        let t = exp3_pair_table(&PatternPairDesign::default(), 9);
        for pol in Polarity::BOTH {
            let mine: Vec<_> = t.iter().filter(|p| p.polarity == pol).collect();
            assert_eq!(mine.iter().filter(|p| p.changed()).count(), 30);
            assert_eq!(mine.len(), 36);
        }
        assert_eq!(t, exp3_pair_table(&PatternPairDesign::default(), 9));
    }

    #[test]
    fn exp3_is_a_permutation_of_the_design() {
        let mut a = exp3_pair_table(&PatternPairDesign::default(), 1);
        let mut b = exp3_pair_table(&PatternPairDesign::default(), 2);
        a.sort();
        b.sort();
        assert_eq!(a, b);
        let changed: std::collections::BTreeSet<_> = a.iter().filter(|p| p.changed()).collect();
        assert_eq!(changed.len(), 60);
    }
}
