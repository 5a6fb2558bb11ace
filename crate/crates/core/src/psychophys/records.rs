//! Per-trial records: JSON Lines persistence and CSV export.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::{Error, Result, SCHEMA_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    /// Staircase JND.
    Exp1,
    /// Passthrough comparisons.
    Exp2,
    /// Pattern-pair discrimination.
    Exp3,
    /// Moving source.
    Exp4,
}

impl Experiment {
    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::Exp1 => "exp1",
            Experiment::Exp2 => "exp2",
            Experiment::Exp3 => "exp3",
            Experiment::Exp4 => "exp4",
        }
    }
}

/// One trial. Maps are ordered so serialisation is deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialRecord {
    pub schema: u32,
    pub seed: u64,
    pub session_id: String,
    pub participant: String,
    pub experiment: Experiment,
    pub trial: usize,
    pub condition: BTreeMap<String, String>,
    pub stimulus: BTreeMap<String, f64>,
    pub response: String,
    pub response_time_s: Option<f64>,
    pub ground_truth: Option<String>,
    /// Session clock at stimulus onset, µs.
    pub onset_us: u64,
}

impl TrialRecord {
    pub fn new(session_id: &str, participant: &str, seed: u64, experiment: Experiment, trial: usize) -> Self {
        TrialRecord {
            schema: SCHEMA_VERSION,
            seed,
            session_id: session_id.to_string(),
            participant: participant.to_string(),
            experiment,
            trial,
            condition: BTreeMap::new(),
            stimulus: BTreeMap::new(),
            response: String::new(),
            response_time_s: None,
            ground_truth: None,
            onset_us: 0,
        }
    }

    pub fn condition(mut self, k: &str, v: impl ToString) -> Self {
        self.condition.insert(k.to_string(), v.to_string());
        self
    }

    pub fn stimulus(mut self, k: &str, v: f64) -> Self {
        self.stimulus.insert(k.to_string(), v);
        self
    }
}

pub fn write_jsonl<W: Write>(mut w: W, records: &[TrialRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<TrialRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrialRecord = serde_json::from_str(&line).map_err(|e| Error::Schema {
            field: format!("line {}", i + 1),
            message: e.to_string(),
        })?;
        if rec.schema != SCHEMA_VERSION {
            return Err(Error::Schema {
                field: format!("line {}", i + 1),
                message: format!("unsupported schema {}", rec.schema),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

/// Columns of [`export_csv`].
pub const CSV_COLUMNS: [&str; 7] = ["participant", "experiment", "condition", "stimulus", "response", "rt", "ground_truth"];

fn join<V>(m: &BTreeMap<String, V>, f: impl Fn(&V) -> String) -> String {
    m.iter().map(|(k, v)| format!("{k}={}", f(v))).collect::<Vec<_>>().join(";")
}

/// Flattens records to CSV. `condition` and `stimulus` become `key=value`
/// lists joined with `;`; missing values are empty cells.
pub fn export_csv<W: Write>(w: W, records: &[TrialRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_COLUMNS)?;
    for r in records {
        out.write_record([
            r.participant.clone(),
            r.experiment.as_str().to_string(),
            join(&r.condition, |v| v.clone()),
            join(&r.stimulus, |v| v.to_string()),
            r.response.clone(),
            r.response_time_s.map(|v| v.to_string()).unwrap_or_default(),
            r.ground_truth.clone().unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
