//! Spatial patterns, timed pattern transitions and moving-source schedules.
//!
//! Cells are indexed row-major with cell 0 at the top left when the palm
//! faces down (see [`crate::device::ArrayGeometry`]):
//!
//! ```text
//!   0 1 2     fingers
//!   3 4 5
//!   6 7 8     base of palm
//! ```

use std::fmt;
use std::path::Path;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::device::{clamp_setpoints, ArrayGeometry, DeviceConfig};
use crate::{ChannelArray, Error, Result, CHANNELS, SCHEMA_VERSION};

/// A set of active cells driven to `ambient + offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pattern {
    pub name: String,
    /// Sorted, unique cell indices.
    pub cells: Vec<usize>,
    /// Signed offset from ambient, °C.
    pub offset_c: f64,
}

impl Pattern {
    pub fn new(name: impl Into<String>, cells: impl IntoIterator<Item = usize>, offset_c: f64) -> Result<Self> {
        let mut cells: Vec<usize> = cells.into_iter().collect();
        cells.sort_unstable();
        cells.dedup();
        let p = Pattern {
            name: name.into(),
            cells,
            offset_c,
        };
        p.check(None)?;
        Ok(p)
    }

    fn check(&self, envelope: Option<f64>) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(schema("name", "must not be empty"));
        }
        for (i, &c) in self.cells.iter().enumerate() {
            if c >= CHANNELS {
                return Err(schema(format!("cells[{i}]"), format!("cell index {c} outside 0..{CHANNELS}")));
            }
        }
        if self.cells.windows(2).any(|w| w[0] >= w[1]) {
            return Err(schema("cells", "indices must be unique"));
        }
        if !self.offset_c.is_finite() {
            return Err(schema("offset_c", "must be finite"));
        }
        if let Some(env) = envelope {
            if self.offset_c.abs() > env {
                return Err(schema("offset_c", format!("|{}| exceeds the ±{env} °C envelope", self.offset_c)));
            }
        }
        Ok(())
    }

    pub fn contains(&self, cell: usize) -> bool {
        self.cells.binary_search(&cell).is_ok()
    }

    /// The same cells with a different offset.
    pub fn with_offset(&self, offset_c: f64) -> Pattern {
        Pattern { offset_c, ..self.clone() }
    }

    /// Setpoints holding this pattern.
    pub fn setpoints(&self, cfg: &DeviceConfig) -> ChannelArray {
        let mut sp = [cfg.ambient_temp; CHANNELS];
        for &c in &self.cells {
            sp[c] = cfg.ambient_temp + self.offset_c;
        }
        clamp_setpoints(&sp, cfg).0
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {:?} {:+} °C", self.name, self.cells, self.offset_c)
    }
}

fn schema(field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Schema {
        field: field.into(),
        message: message.into(),
    }
}

/// Names of the six row/column patterns, in [`canonical_patterns`] order.
pub const ROW_COLUMN_PATTERNS: [&str; 6] = ["top_row", "middle_row", "bottom_row", "left_column", "middle_column", "right_column"];

/// The three rows, the three columns, `line` (the bottom row) and `all`,
/// each with a zero offset.
pub fn canonical_patterns() -> [Pattern; 8] {
    let p = |name: &str, cells: [usize; 3]| Pattern {
        name: name.to_string(),
        cells: cells.to_vec(),
        offset_c: 0.0,
    };
    [
        p("top_row", [0, 1, 2]),
        p("middle_row", [3, 4, 5]),
        p("bottom_row", [6, 7, 8]),
        p("left_column", [0, 3, 6]),
        p("middle_column", [1, 4, 7]),
        p("right_column", [2, 5, 8]),
        p("line", [6, 7, 8]),
        Pattern {
            name: "all".to_string(),
            cells: (0..CHANNELS).collect(),
            offset_c: 0.0,
        },
    ]
}

pub fn canonical_pattern(name: &str) -> Option<Pattern> {
    canonical_patterns().into_iter().find(|p| p.name == name)
}

/// Piecewise-constant setpoint stream on the control tick grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetpointStream {
    pub tick_hz: f64,
    pub ambient_c: f64,
    /// `(start tick, setpoints)`, strictly increasing in tick. Each segment
    /// holds until the next one starts.
    pub segments: Vec<(u64, ChannelArray)>,
    /// First tick after the stream; from here on everything is ambient.
    pub end_tick: u64,
}

impl SetpointStream {
    /// Setpoints at tick `n` relative to stream start; `None` once finished.
    pub fn at_tick(&self, n: u64) -> Option<ChannelArray> {
        if n >= self.end_tick {
            return None;
        }
        let i = self.segments.partition_point(|(t, _)| *t <= n);
        Some(if i == 0 { [self.ambient_c; CHANNELS] } else { self.segments[i - 1].1 })
    }

    pub fn duration_s(&self) -> f64 {
        self.end_tick as f64 / self.tick_hz
    }

    /// Expanded per-tick setpoints.
    pub fn samples(&self) -> Vec<ChannelArray> {
        (0..self.end_tick).filter_map(|n| self.at_tick(n)).collect()
    }
}

fn to_tick(t: f64, tick_hz: f64) -> u64 {
    (t * tick_hz).round().max(0.0) as u64
}

fn check_offset(offset_c: f64, cfg: &DeviceConfig) -> Result<()> {
    if !offset_c.is_finite() || offset_c.abs() > cfg.safety_envelope {
        return Err(Error::LimitViolation {
            quantity: "pattern offset",
            value: offset_c,
            min: -cfg.safety_envelope,
            max: cfg.safety_envelope,
        });
    }
    Ok(())
}

/// Pattern `a` for `hold_s`, then pattern `b` for `hold_s`, then ambient, all
/// at `ambient + offset_c`. Cells shared by `a` and `b` stay active across
/// the switch. Switch times are rounded to the nearest control tick.
pub fn transition_schedule(a: &Pattern, b: &Pattern, hold_s: f64, offset_c: f64, cfg: &DeviceConfig, tick_hz: f64) -> Result<SetpointStream> {
    check_offset(offset_c, cfg)?;
    if !(hold_s > 0.0 && hold_s.is_finite()) {
        return Err(Error::invalid("hold_s", "must be positive"));
    }
    if !(tick_hz > 0.0 && tick_hz.is_finite()) {
        return Err(Error::invalid("tick_hz", "must be positive"));
    }
    let first = a.with_offset(offset_c).setpoints(cfg);
    let second = b.with_offset(offset_c).setpoints(cfg);
    let mut segments = vec![(0, first)];
    let switch = to_tick(hold_s, tick_hz);
    if second != first {
        segments.push((switch, second));
    }
    Ok(SetpointStream {
        tick_hz,
        ambient_c: cfg.ambient_temp,
        segments,
        end_tick: to_tick(2.0 * hold_s, tick_hz),
    })
}

/// Holds one pattern for `duration_s`.
pub fn pattern_stream(p: &Pattern, duration_s: f64, cfg: &DeviceConfig, tick_hz: f64) -> Result<SetpointStream> {
    check_offset(p.offset_c, cfg)?;
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(Error::invalid("duration_s", "must be positive"));
    }
    Ok(SetpointStream {
        tick_hz,
        ambient_c: cfg.ambient_temp,
        segments: vec![(0, p.setpoints(cfg))],
        end_tick: to_tick(duration_s, tick_hz).max(1),
    })
}

/// Direction a brush sweeps along its row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepDirection {
    #[default]
    LeftToRight,
    RightToLeft,
}

/// Parameters of a straight moving source across one row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrushSpec {
    pub name: String,
    pub row: usize,
    pub velocity_m_s: f64,
    pub offset_c: f64,
    /// Active time per cell as a multiple of the inter-onset interval.
    #[serde(default = "one")]
    pub dwell_multiplier: f64,
    #[serde(default)]
    pub direction: SweepDirection,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrushEvent {
    /// Exact onset, seconds.
    #[serde(skip)]
    pub onset: Ratio<i64>,
    pub time_s: f64,
    pub cell: usize,
    pub offset_c: f64,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrushSchedule {
    pub spec: BrushSpec,
    /// Exact inter-onset interval, seconds.
    #[serde(skip)]
    pub inter_onset: Ratio<i64>,
    pub inter_onset_s: f64,
    /// Cell centres the source passes over, in order, mm.
    pub path_mm: Vec<(f64, f64)>,
    pub events: Vec<BrushEvent>,
}

/// `x` as an exact rational to the nearest millionth, which recovers decimal
/// inputs such as 3.5 m/s or 18 mm without error.
fn exact(x: f64, name: &'static str) -> Result<Ratio<i64>> {
    let scaled = (x * 1e6).round();
    if !x.is_finite() || scaled.abs() > 1e12 {
        return Err(Error::invalid(name, "out of range"));
    }
    Ok(Ratio::new(scaled as i64, 1_000_000))
}

/// Sequential activation of the cells along one row by a source moving at
/// `velocity_m_s`. Cell `k` on the path starts at `k · pitch / velocity`
/// (exact rational arithmetic) and stays on for `dwell_multiplier` inter-onset
/// intervals. The offset is clamped into the envelope.
pub fn brush_schedule(geometry: &ArrayGeometry, spec: &BrushSpec, cfg: &DeviceConfig) -> Result<BrushSchedule> {
    if !(spec.velocity_m_s > 0.0 && spec.velocity_m_s.is_finite()) {
        return Err(Error::invalid("velocity_m_s", "must be positive"));
    }
    if spec.row >= geometry.rows {
        return Err(Error::invalid("row", format!("row {} outside 0..{}", spec.row, geometry.rows)));
    }
    if !(spec.dwell_multiplier > 0.0 && spec.dwell_multiplier.is_finite()) {
        return Err(Error::invalid("dwell_multiplier", "must be positive"));
    }
    let pitch_m = exact(geometry.pitch_mm, "pitch_mm")? / Ratio::from_integer(1000);
    let velocity = exact(spec.velocity_m_s, "velocity_m_s")?;
    let inter_onset = pitch_m / velocity;
    let offset = spec.offset_c.clamp(-cfg.safety_envelope, cfg.safety_envelope);
    let mut cols: Vec<usize> = (0..geometry.cols).collect();
    if spec.direction == SweepDirection::RightToLeft {
        cols.reverse();
    }
    let dwell = spec.dwell_multiplier * ratio_f64(inter_onset);
    let events = cols
        .iter()
        .enumerate()
        .map(|(k, &col)| {
            let onset = inter_onset * Ratio::from_integer(k as i64);
            BrushEvent {
                onset,
                time_s: ratio_f64(onset),
                cell: geometry.index(spec.row, col),
                offset_c: offset,
                duration_s: dwell,
            }
        })
        .collect();
    let path_mm = cols.iter().map(|&c| geometry.center_mm(geometry.index(spec.row, c))).collect();
    Ok(BrushSchedule {
        spec: spec.clone(),
        inter_onset,
        inter_onset_s: ratio_f64(inter_onset),
        path_mm,
        events,
    })
}

pub fn ratio_f64(r: Ratio<i64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

impl BrushSchedule {
    /// Renders the schedule on the control tick grid. Every event keeps at
    /// least one tick so fast sweeps still reach each cell; the intended
    /// timing survives in `events`.
    pub fn to_stream(&self, cfg: &DeviceConfig, tick_hz: f64) -> SetpointStream {
        let mut edges: Vec<(u64, usize, bool)> = Vec::new();
        for e in &self.events {
            let on = to_tick(e.time_s, tick_hz);
            let off = to_tick(e.time_s + e.duration_s, tick_hz).max(on + 1);
            edges.push((on, e.cell, true));
            edges.push((off, e.cell, false));
        }
        let mut ticks: Vec<u64> = edges.iter().map(|e| e.0).collect();
        ticks.sort_unstable();
        ticks.dedup();
        let mut segments = Vec::new();
        for &t in &ticks {
            let mut sp = [cfg.ambient_temp; CHANNELS];
            for e in &self.events {
                let on = to_tick(e.time_s, tick_hz);
                let off = to_tick(e.time_s + e.duration_s, tick_hz).max(on + 1);
                if on <= t && t < off {
                    sp[e.cell] = cfg.ambient_temp + e.offset_c;
                }
            }
            segments.push((t, clamp_setpoints(&sp, cfg).0));
        }
        let end_tick = ticks.last().copied().unwrap_or(0);
        SetpointStream {
            tick_hz,
            ambient_c: cfg.ambient_temp,
            segments,
            end_tick,
        }
    }
}

/// Contents of a pattern file, as written. Reading goes through
/// [`parse_pattern_file`].
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PatternFile {
    Pattern {
        schema: u32,
        name: String,
        cells: Vec<usize>,
        offset_c: f64,
    },
    Brush {
        schema: u32,
        name: String,
        row: usize,
        velocity_m_s: f64,
        offset_c: f64,
        #[serde(default = "one")]
        dwell_multiplier: f64,
        #[serde(default)]
        direction: SweepDirection,
    },
}

/// A loaded, invariant-checked pattern file.
#[derive(Debug, Clone, PartialEq)]
pub enum Loaded {
    Pattern(Pattern),
    Brush(BrushSchedule),
}

impl BrushSpec {
    pub fn to_file(&self) -> PatternFile {
        PatternFile::Brush {
            schema: SCHEMA_VERSION,
            name: self.name.clone(),
            row: self.row,
            velocity_m_s: self.velocity_m_s,
            offset_c: self.offset_c,
            dwell_multiplier: self.dwell_multiplier,
            direction: self.direction,
        }
    }
}

impl Pattern {
    pub fn to_file(&self) -> PatternFile {
        PatternFile::Pattern {
            schema: SCHEMA_VERSION,
            name: self.name.clone(),
            cells: self.cells.clone(),
            offset_c: self.offset_c,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("pattern serialises")
    }
}

#[derive(Deserialize)]
struct Probe {
    kind: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PatternDoc {
    schema: u32,
    #[allow(dead_code)]
    kind: String,
    name: String,
    cells: Vec<usize>,
    offset_c: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BrushDoc {
    schema: u32,
    #[allow(dead_code)]
    kind: String,
    name: String,
    row: usize,
    velocity_m_s: f64,
    offset_c: f64,
    #[serde(default = "one")]
    dwell_multiplier: f64,
    #[serde(default)]
    direction: SweepDirection,
}

fn located(e: serde_json::Error) -> Error {
    Error::Schema {
        field: format!("line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    }
}

/// Parses and validates a pattern or brush file. Syntax and unknown-field
/// errors report the line and column; invariant errors name the field.
pub fn parse_pattern_file(text: &str, cfg: &DeviceConfig) -> Result<Loaded> {
    // Dispatch on `kind` first so the typed pass keeps error positions.
    let probe: Probe = serde_json::from_str(text).map_err(located)?;
    match probe.kind.as_deref() {
        Some("pattern") => {
            let d: PatternDoc = serde_json::from_str(text).map_err(located)?;
            check_schema(d.schema)?;
            let p = Pattern {
                name: d.name,
                cells: d.cells,
                offset_c: d.offset_c,
            };
            p.check(Some(cfg.safety_envelope))?;
            Ok(Loaded::Pattern(p))
        }
        Some("brush") => {
            let d: BrushDoc = serde_json::from_str(text).map_err(located)?;
            check_schema(d.schema)?;
            let spec = BrushSpec {
                name: d.name,
                row: d.row,
                velocity_m_s: d.velocity_m_s,
                offset_c: d.offset_c,
                dwell_multiplier: d.dwell_multiplier,
                direction: d.direction,
            };
            if spec.name.trim().is_empty() {
                return Err(schema("name", "must not be empty"));
            }
            if spec.offset_c.abs() > cfg.safety_envelope || !spec.offset_c.is_finite() {
                return Err(schema(
                    "offset_c",
                    format!("|{}| exceeds the ±{} °C envelope", spec.offset_c, cfg.safety_envelope),
                ));
            }
            brush_schedule(&ArrayGeometry::default(), &spec, cfg)
                .map(Loaded::Brush)
                .map_err(|e| match e {
                    Error::InvalidParameter { name, reason } => schema(name, reason),
                    other => other,
                })
        }
        Some(other) => Err(schema("kind", format!("unknown kind {other:?}, expected pattern or brush"))),
        None => Err(schema("kind", "missing")),
    }
}

fn check_schema(s: u32) -> Result<()> {
    if s != SCHEMA_VERSION {
        return Err(schema("schema", format!("unsupported version {s}, expected {SCHEMA_VERSION}")));
    }
    Ok(())
}

pub fn load_pattern_file(path: &Path, cfg: &DeviceConfig) -> Result<Loaded> {
    let text = std::fs::read_to_string(path)?;
    parse_pattern_file(&text, cfg)
}
