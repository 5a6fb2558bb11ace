//! Session event log.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thermogrid::SCHEMA_VERSION;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    SessionStart,
    SessionEnd,
    StimulusOn,
    StimulusOff,
    Response,
    Reversal,
    Fault,
    Clamp,
    Command,
}

/// One line of `events.jsonl`. `t_us` is the session clock: control ticks
/// since the session started, in microseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub schema: u32,
    pub seed: u64,
    pub seq: u64,
    pub t_us: u64,
    pub kind: EventKind,
    pub payload: Value,
}

/// Assigns sequence numbers and appends events to a JSON Lines file.
pub struct EventLog {
    seed: u64,
    seq: u64,
    out: Option<BufWriter<File>>,
}

impl EventLog {
    pub fn create(path: &Path, seed: u64) -> std::io::Result<Self> {
        Ok(EventLog {
            seed,
            seq: 0,
            out: Some(BufWriter::new(File::create(path)?)),
        })
    }

    /// A log that numbers events but writes nothing.
    pub fn discard(seed: u64) -> Self {
        EventLog { seed, seq: 0, out: None }
    }

    /// Seed stamped on later events.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }

    pub fn make(&mut self, t_us: u64, kind: EventKind, payload: Value) -> SessionEvent {
        let e = SessionEvent {
            schema: SCHEMA_VERSION,
            seed: self.seed,
            seq: self.seq,
            t_us,
            kind,
            payload,
        };
        self.seq += 1;
        e
    }

    pub fn write(&mut self, e: &SessionEvent) -> std::io::Result<()> {
        if let Some(w) = self.out.as_mut() {
            serde_json::to_writer(&mut *w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn emit(&mut self, t_us: u64, kind: EventKind, payload: Value) -> std::io::Result<SessionEvent> {
        let e = self.make(t_us, kind, payload);
        self.write(&e)?;
        Ok(e)
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        if let Some(w) = self.out.as_mut() {
            w.flush()?;
        }
        Ok(())
    }
}
