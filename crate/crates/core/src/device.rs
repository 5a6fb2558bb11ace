//! Device abstraction: array geometry, safety clamping, passthrough, backends
//! and the per-tick control loop.
//!
//! Cell layout, palm facing down, viewed from the back of the hand:
//!
//! ```text
//!          fingers
//!     +----+----+----+
//!     |  0 |  1 |  2 |   distal palm
//!     +----+----+----+
//!     |  3 |  4 |  5 |   central palm
//!     +----+----+----+
//!     |  6 |  7 |  8 |   base of palm (thenar)
//!     +----+----+----+
//!          wrist
//! ```

use serde::{Deserialize, Serialize};

use crate::control::{drive_model, output_to_current, pid_step, ControllerState, PidGains, DEFAULT_TICK_HZ};
use crate::pattern::SetpointStream;
use crate::plant::{external_surface_source, PlantModel, PlantState, SensorBank, TimedTemperatureProfile};
use crate::serial::{self, Frame};
use crate::{ChannelArray, Error, Result, CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub rows: usize,
    pub cols: usize,
    pub cell_size_mm: f64,
    /// Centre-to-centre spacing, mm.
    pub pitch_mm: f64,
}

impl Default for ArrayGeometry {
    fn default() -> Self {
        ArrayGeometry {
            rows: 3,
            cols: 3,
            cell_size_mm: 6.5,
            pitch_mm: 18.0,
        }
    }
}

impl ArrayGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.rows * self.cols != CHANNELS {
            return Err(Error::invalid("rows", format!("{}×{} is not {CHANNELS} cells", self.rows, self.cols)));
        }
        if !(self.cell_size_mm > 0.0 && self.pitch_mm > self.cell_size_mm) {
            return Err(Error::invalid("pitch_mm", "pitch must exceed the cell size"));
        }
        Ok(())
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn row_col(&self, cell: usize) -> (usize, usize) {
        (cell / self.cols, cell % self.cols)
    }

    /// Centre of `cell` relative to cell 0, `(x right, y towards wrist)`, mm.
    pub fn center_mm(&self, cell: usize) -> (f64, f64) {
        let (r, c) = self.row_col(cell);
        (c as f64 * self.pitch_mm, r as f64 * self.pitch_mm)
    }

    pub fn region(&self, cell: usize) -> &'static str {
        match self.row_col(cell).0 {
            0 => "distal palm",
            1 => "central palm",
            _ => "base of palm (thenar)",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Sim,
    Serial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Idle,
    Direct,
    Passthrough,
    Pattern,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeviceConfig {
    /// Baseline the array holds at rest, °C.
    pub ambient_temp: f64,
    /// Half-width of the allowed setpoint band around ambient, °C.
    pub safety_envelope: f64,
    pub backend: BackendKind,
    /// Rate of telemetry published to clients, Hz.
    pub telemetry_rate: f64,
    pub tick_hz: f64,
    /// Passthrough smoothing time constant, s. Zero maps one to one.
    pub passthrough_tau: f64,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        DeviceConfig {
            ambient_temp: 30.0,
            safety_envelope: 15.0,
            backend: BackendKind::Sim,
            telemetry_rate: 50.0,
            tick_hz: DEFAULT_TICK_HZ,
            passthrough_tau: 0.0,
        }
    }
}

impl DeviceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(25.0..=36.0).contains(&self.ambient_temp) {
            return Err(Error::LimitViolation {
                quantity: "ambient_temp",
                value: self.ambient_temp,
                min: 25.0,
                max: 36.0,
            });
        }
        if !(self.safety_envelope > 0.0 && self.safety_envelope <= 15.0) {
            return Err(Error::LimitViolation {
                quantity: "safety_envelope",
                value: self.safety_envelope,
                min: 0.0,
                max: 15.0,
            });
        }
        if !(self.tick_hz >= 10.0 && self.tick_hz <= 1000.0) {
            return Err(Error::invalid("tick_hz", "must be within 10..=1000 Hz"));
        }
        if !(self.telemetry_rate > 0.0 && self.telemetry_rate <= self.tick_hz) {
            return Err(Error::invalid("telemetry_rate", "must be positive and at most tick_hz"));
        }
        if !(self.passthrough_tau >= 0.0 && self.passthrough_tau.is_finite()) {
            return Err(Error::invalid("passthrough_tau", "must be non-negative"));
        }
        Ok(())
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.ambient_temp - self.safety_envelope, self.ambient_temp + self.safety_envelope)
    }
}

/// Snapshot of one control tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayFrame {
    pub tick_index: u64,
    pub time_s: f64,
    pub mode: Mode,
    pub setpoints: ChannelArray,
    pub measured: ChannelArray,
    pub currents: ChannelArray,
    pub external: ChannelArray,
    /// Setpoints clamped into the envelope on this tick.
    pub clamped: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault: Option<String>,
}

/// Clamps each setpoint into `ambient ± envelope` and counts the values that
/// moved. Non-finite requests fall back to ambient and count as clamped.
pub fn clamp_setpoints(raw: &ChannelArray, cfg: &DeviceConfig) -> (ChannelArray, u32) {
    let (lo, hi) = cfg.bounds();
    let mut n = 0;
    let out = raw.map(|v| {
        let c = if v.is_finite() { v.clamp(lo, hi) } else { cfg.ambient_temp };
        if c != v {
            n += 1;
        }
        c
    });
    (out, n)
}

/// Result of [`passthrough_map`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Passthrough {
    pub setpoints: ChannelArray,
    /// Channels whose external reading was not finite.
    pub invalid: [bool; CHANNELS],
    pub clamped: u32,
}

/// Maps external surface readings one to one onto setpoints, through a
/// first-order smoother when `smoothing_tau > 0`, then clamps.
///
/// The smoother is the exact discretisation of `τ·ẏ = x − y`, so a step
/// reaches `1 − e^(−t/τ)` of its size after `t`. `prev` is the previous
/// output. A non-finite reading puts that channel at ambient.
pub fn passthrough_map(external: &ChannelArray, cfg: &DeviceConfig, smoothing_tau: f64, dt: f64, prev: &ChannelArray) -> Passthrough {
    let a = if smoothing_tau > 0.0 { 1.0 - (-dt / smoothing_tau).exp() } else { 1.0 };
    let mut invalid = [false; CHANNELS];
    let mut raw = [cfg.ambient_temp; CHANNELS];
    for k in 0..CHANNELS {
        if external[k].is_finite() {
            let p = if prev[k].is_finite() { prev[k] } else { cfg.ambient_temp };
            raw[k] = if a == 1.0 { external[k] } else { p + a * (external[k] - p) };
        } else {
            invalid[k] = true;
        }
    }
    let (setpoints, clamped) = clamp_setpoints(&raw, cfg);
    Passthrough { setpoints, invalid, clamped }
}

/// Sensor readings for one tick. Non-finite entries mark faulted channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reading {
    pub measured: ChannelArray,
    pub external: ChannelArray,
}

/// A device the control loop can drive.
pub trait Backend: Send {
    fn kind(&self) -> BackendKind;
    fn read(&mut self) -> Result<Reading>;
    /// Applies currents for one tick of length `dt` and advances the device.
    fn apply(&mut self, tick: u64, setpoints: &ChannelArray, currents: &ChannelArray, dt: f64) -> Result<()>;
    /// True contact temperatures when the backend knows them.
    fn truth(&self) -> Option<ChannelArray> {
        None
    }
    /// The simulation behind this backend, if any.
    fn sim_mut(&mut self) -> Option<&mut SimBackend> {
        None
    }
}

/// Simulated array: plant model, noisy sensors and a surface profile for the
/// outward-facing thermistors.
#[derive(Debug, Clone)]
pub struct SimBackend {
    pub plant: PlantModel,
    state: PlantState,
    sensors: SensorBank,
    external: Option<TimedTemperatureProfile>,
    external_start: f64,
    faults: [bool; CHANNELS],
    ambient: f64,
}

impl SimBackend {
    pub fn new(plant: PlantModel, ambient: f64, seed: u64) -> Result<Self> {
        plant.validate()?;
        let sensors = SensorBank::new(&plant, seed);
        let state = plant.equilibrium(crate::Celsius(ambient));
        Ok(SimBackend {
            plant,
            state,
            sensors,
            external: None,
            external_start: 0.0,
            faults: [false; CHANNELS],
            ambient,
        })
    }

    pub fn state(&self) -> &PlantState {
        &self.state
    }

    /// Surface the external sensors see from now on. Before and after the
    /// profile's domain the nearest end value holds.
    pub fn set_external(&mut self, profile: Option<TimedTemperatureProfile>) -> Result<()> {
        if let Some(p) = &profile {
            p.validate()?;
        }
        self.external = profile;
        self.external_start = self.state.sim_time;
        Ok(())
    }

    pub fn inject_sensor_fault(&mut self, channel: usize, faulted: bool) {
        self.faults[channel] = faulted;
    }

    fn external_now(&self) -> ChannelArray {
        match &self.external {
            None => [self.ambient; CHANNELS],
            Some(p) => {
                let (start, end) = p.domain();
                let t = (self.state.sim_time - self.external_start).clamp(start, end);
                external_surface_source(p, t).unwrap_or([self.ambient; CHANNELS])
            }
        }
    }
}

impl Backend for SimBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Sim
    }

    fn read(&mut self) -> Result<Reading> {
        let mut measured = self.sensors.read_all(&self.state);
        for k in 0..CHANNELS {
            if self.faults[k] {
                measured[k] = f64::NAN;
            }
        }
        Ok(Reading {
            measured,
            external: self.external_now(),
        })
    }

    fn apply(&mut self, _tick: u64, _setpoints: &ChannelArray, currents: &ChannelArray, dt: f64) -> Result<()> {
        self.state = self.plant.step(&self.state, currents, dt)?;
        Ok(())
    }

    fn truth(&self) -> Option<ChannelArray> {
        Some(self.state.t_cold)
    }

    fn sim_mut(&mut self) -> Option<&mut SimBackend> {
        Some(self)
    }
}

/// Serial link stub: commands are encoded into frames, passed through an
/// in-memory loopback to a simulated controller, and its telemetry frames
/// are decoded on the way back. External readings bypass the link.
#[derive(Debug)]
pub struct SerialBackend {
    remote: SimBackend,
    to_device: Vec<u8>,
    from_device: serial::FrameReader,
    last: Option<Frame>,
    /// Ticks after which the link stops answering, for fault testing.
    pub disconnect_after: Option<u64>,
    ticks: u64,
}

impl SerialBackend {
    pub fn new(remote: SimBackend) -> Self {
        let mut b = SerialBackend {
            remote,
            to_device: Vec::new(),
            from_device: serial::FrameReader::new(),
            last: None,
            disconnect_after: None,
            ticks: 0,
        };
        b.remote_publish(0, &[0.0; CHANNELS], &[0.0; CHANNELS]);
        b
    }

    fn connected(&self) -> bool {
        self.disconnect_after.is_none_or(|n| self.ticks < n)
    }

    fn remote_publish(&mut self, tick: u32, setpoints: &ChannelArray, currents: &ChannelArray) {
        let measured = self.remote.read().map(|r| r.measured).unwrap_or([f64::NAN; CHANNELS]);
        let f = Frame::from_engineering(tick, setpoints, &measured, currents);
        self.from_device.push(&serial::encode(&f));
    }
}

impl Backend for SerialBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Serial
    }

    fn read(&mut self) -> Result<Reading> {
        if !self.connected() {
            return Err(Error::Backend("serial link timed out".into()));
        }
        while let Some(f) = self.from_device.next_frame() {
            self.last = Some(f);
        }
        let f = self.last.ok_or_else(|| Error::Backend("no telemetry frame received".into()))?;
        Ok(Reading {
            measured: f.measured_c(),
            external: self.remote.external_now(),
        })
    }

    fn apply(&mut self, tick: u64, setpoints: &ChannelArray, currents: &ChannelArray, dt: f64) -> Result<()> {
        if !self.connected() {
            return Err(Error::Backend("serial link timed out".into()));
        }
        let cmd = Frame::from_engineering(tick as u32, setpoints, &[0.0; CHANNELS], currents);
        self.to_device.extend_from_slice(&serial::encode(&cmd));
        // Remote side: decode the command, drive the plant, report back.
        let mut reader = serial::FrameReader::new();
        reader.push(&std::mem::take(&mut self.to_device));
        while let Some(f) = reader.next_frame() {
            self.remote.apply(tick, &f.setpoints_c(), &f.currents_a(), dt)?;
            self.remote_publish(f.tick, &f.setpoints_c(), &f.currents_a());
        }
        self.ticks += 1;
        Ok(())
    }

    fn truth(&self) -> Option<ChannelArray> {
        self.remote.truth()
    }

    fn sim_mut(&mut self) -> Option<&mut SimBackend> {
        Some(&mut self.remote)
    }
}

/// Commands accepted between ticks.
#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    SetMode(Mode),
    /// Direct setpoints, °C; switches to direct mode.
    SetDirect(ChannelArray),
    /// Plays a compiled stream from the next tick; switches to pattern mode.
    Play(Box<SetpointStream>),
    /// Stops any stream and returns to idle.
    Stop,
}

/// Owns a backend and advances the control loop one tick at a time.
pub struct Device {
    pub cfg: DeviceConfig,
    pub gains: PidGains,
    i_max: f64,
    backend: Box<dyn Backend>,
    mode: Mode,
    controllers: [ControllerState; CHANNELS],
    direct: ChannelArray,
    passthrough_prev: ChannelArray,
    stream: Option<(u64, SetpointStream)>,
    tick: u64,
    fault: Option<String>,
    last_frame: Option<ArrayFrame>,
}

impl std::fmt::Debug for Device {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Device")
            .field("mode", &self.mode)
            .field("tick", &self.tick)
            .field("fault", &self.fault)
            .finish_non_exhaustive()
    }
}

impl Device {
    pub fn new(cfg: DeviceConfig, gains: PidGains, i_max: f64, backend: Box<dyn Backend>) -> Result<Self> {
        cfg.validate()?;
        if !(i_max > 0.0 && gains.output_limit <= i_max) {
            return Err(Error::invalid("output_limit", "must not exceed i_max"));
        }
        Ok(Device {
            cfg,
            gains,
            i_max,
            backend,
            mode: Mode::Idle,
            controllers: [ControllerState::default(); CHANNELS],
            direct: [cfg.ambient_temp; CHANNELS],
            passthrough_prev: [cfg.ambient_temp; CHANNELS],
            stream: None,
            tick: 0,
            fault: None,
            last_frame: None,
        })
    }

    /// Simulated device with the default plant.
    pub fn simulated(cfg: DeviceConfig, plant: PlantModel, gains: PidGains, seed: u64) -> Result<Self> {
        let i_max = plant.tem.i_max;
        let sim = SimBackend::new(plant, cfg.ambient_temp, seed)?;
        let backend: Box<dyn Backend> = match cfg.backend {
            BackendKind::Sim => Box::new(sim),
            BackendKind::Serial => Box::new(SerialBackend::new(sim)),
        };
        Device::new(cfg, gains, i_max, backend)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn fault(&self) -> Option<&str> {
        self.fault.as_deref()
    }

    pub fn tick_index(&self) -> u64 {
        self.tick
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.cfg.tick_hz
    }

    pub fn last_frame(&self) -> Option<&ArrayFrame> {
        self.last_frame.as_ref()
    }

    pub fn backend(&self) -> &dyn Backend {
        self.backend.as_ref()
    }

    pub fn backend_mut(&mut self) -> &mut dyn Backend {
        self.backend.as_mut()
    }

    /// True when a pattern stream is still playing.
    pub fn playing(&self) -> bool {
        self.stream.is_some()
    }

    pub fn command(&mut self, cmd: Command) {
        match cmd {
            Command::SetMode(m) => {
                if m != Mode::Pattern {
                    self.stream = None;
                }
                if m == Mode::Passthrough {
                    self.passthrough_prev = self.last_frame.as_ref().map_or([self.cfg.ambient_temp; CHANNELS], |f| f.setpoints);
                }
                self.mode = m;
            }
            Command::SetDirect(sp) => {
                self.stream = None;
                self.direct = sp;
                self.mode = Mode::Direct;
            }
            Command::Play(s) => {
                self.stream = Some((self.tick, *s));
                self.mode = Mode::Pattern;
            }
            Command::Stop => {
                self.stream = None;
                self.mode = Mode::Idle;
            }
        }
    }

    /// Clears a latched backend fault so the loop may resume.
    pub fn clear_fault(&mut self) {
        self.fault = None;
    }

    /// One control period: read sensors, derive setpoints for the mode, clamp,
    /// run PID per channel, drive the modules, advance the backend and return
    /// the frame.
    pub fn tick(&mut self) -> ArrayFrame {
        let dt = self.dt();
        let ambient = self.cfg.ambient_temp;
        let mut warnings = Vec::new();
        let reading = if self.fault.is_some() {
            Err(Error::Backend(self.fault.clone().unwrap_or_default()))
        } else {
            self.backend.read()
        };
        let reading = match reading {
            Ok(r) => r,
            Err(e) => return self.fault_frame(e.to_string()),
        };

        let raw = match self.mode {
            Mode::Idle => [ambient; CHANNELS],
            Mode::Direct => self.direct,
            Mode::Passthrough => {
                let p = passthrough_map(&reading.external, &self.cfg, self.cfg.passthrough_tau, dt, &self.passthrough_prev);
                for (k, bad) in p.invalid.iter().enumerate() {
                    if *bad {
                        warnings.push(format!("external sensor {k} invalid; holding ambient"));
                    }
                }
                self.passthrough_prev = p.setpoints;
                p.setpoints
            }
            Mode::Pattern => match &self.stream {
                Some((start, s)) => match s.at_tick(self.tick - start) {
                    Some(sp) => sp,
                    None => {
                        self.stream = None;
                        self.mode = Mode::Idle;
                        [ambient; CHANNELS]
                    }
                },
                None => [ambient; CHANNELS],
            },
        };
        let (mut setpoints, clamped) = clamp_setpoints(&raw, &self.cfg);

        let mut currents = [0.0; CHANNELS];
        for k in 0..CHANNELS {
            if !reading.measured[k].is_finite() {
                // Faulted thermistor: hold the channel passive at ambient.
                warnings.push(format!("sensor {k} fault; channel disabled"));
                setpoints[k] = ambient;
                self.controllers[k] = ControllerState::default();
                continue;
            }
            let (u, next) = pid_step(&self.gains, &self.controllers[k], setpoints[k], reading.measured[k], dt);
            self.controllers[k] = next;
            currents[k] = drive_model(output_to_current(u), dt).clamp(-self.i_max, self.i_max);
        }

        if let Err(e) = self.backend.apply(self.tick, &setpoints, &currents, dt) {
            return self.fault_frame(e.to_string());
        }
        let frame = ArrayFrame {
            tick_index: self.tick,
            time_s: self.tick as f64 * dt,
            mode: self.mode,
            setpoints,
            measured: reading.measured,
            currents,
            external: reading.external,
            clamped,
            warnings,
            fault: None,
        };
        self.tick += 1;
        self.last_frame = Some(frame.clone());
        frame
    }

    fn fault_frame(&mut self, reason: String) -> ArrayFrame {
        self.mode = Mode::Idle;
        self.stream = None;
        self.controllers = [ControllerState::default(); CHANNELS];
        self.fault = Some(reason.clone());
        let frame = ArrayFrame {
            tick_index: self.tick,
            time_s: self.tick as f64 * self.dt(),
            mode: Mode::Idle,
            setpoints: [self.cfg.ambient_temp; CHANNELS],
            measured: [f64::NAN; CHANNELS],
            currents: [0.0; CHANNELS],
            external: [f64::NAN; CHANNELS],
            clamped: 0,
            warnings: Vec::new(),
            fault: Some(reason),
        };
        self.tick += 1;
        self.last_frame = Some(frame.clone());
        frame
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::ChannelThermalModel;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> DeviceConfig {
        DeviceConfig::default()
    }

    fn sim_device(seed: u64) -> Device {
        Device::simulated(cfg(), PlantModel::default(), PidGains::default(), seed).unwrap()
    }

    fn sim_mut(d: &mut Device) -> &mut SimBackend {
        d.backend_mut().sim_mut().unwrap()
    }

    #[test]
    fn geometry_row_major() {
        let g = ArrayGeometry::default();
        g.validate().unwrap();
        assert_eq!(g.index(2, 0), 6);
        assert_eq!(g.row_col(5), (1, 2));
        assert_eq!(g.center_mm(8), (36.0, 36.0));
        assert_eq!(g.region(7), "base of palm (thenar)");
        let bad = ArrayGeometry { pitch_mm: 6.0, ..g };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_bounds() {
        assert!(DeviceConfig { ambient_temp: 24.9, ..cfg() }.validate().is_err());
        assert!(DeviceConfig { ambient_temp: 36.0, ..cfg() }.validate().is_ok());
    }

    #[test]
    fn clamp_examples() {
        let c = cfg();
        assert_eq!(clamp_setpoints(&[30.0; 9], &c), ([30.0; 9], 0));
        let (sp, n) = clamp_setpoints(&[50.0, 10.0, 30.0, f64::NAN, 45.0, 15.0, 30.0, 30.0, 30.0], &c);
        assert_eq!(sp[..6], [45.0, 15.0, 30.0, 30.0, 45.0, 15.0]);
        assert_eq!(n, 3);
    }

    #[test]
    fn passthrough_examples() {
        let c = cfg();
        let p = passthrough_map(&[34.0; 9], &c, 0.0, 0.01, &[30.0; 9]);
        assert_eq!(p.setpoints, [34.0; 9]);
        let p = passthrough_map(&[60.0; 9], &c, 0.0, 0.01, &[30.0; 9]);
        assert_eq!(p.setpoints, [45.0; 9]);
        assert_eq!(p.clamped, 9);
        let mut ext = [34.0; 9];
        ext[2] = f64::INFINITY;
        let p = passthrough_map(&ext, &c, 0.0, 0.01, &[30.0; 9]);
        assert!(p.invalid[2] && !p.invalid[1]);
        assert_eq!(p.setpoints[2], 30.0);
    }

    #[test]
    fn smoothed_step_reaches_37_within_046_s() {
        let c = cfg();
        let mut prev = [30.0; 9];
        let mut t = 0.0;
        while prev[0] < 37.0 {
            prev = passthrough_map(&[38.0; 9], &c, 0.2, 0.01, &prev).setpoints;
            t += 0.01;
            assert!(t < 1.0);
        }
        // Continuous-time oracle: 0.2·ln 8 = 0.416 s, rounded up to a tick.
        assert!(t <= 0.46, "{t}");
        assert!((t - 0.2 * 8f64.ln()).abs() < 0.011);
    }

    #[test]
    fn idle_holds_ambient_with_no_current() {
        let mut d = sim_device(1);
        let frames: Vec<_> = (0..600).map(|_| d.tick()).collect();
        let tail = &frames[300..];
        assert!(tail.iter().all(|f| f.setpoints == [30.0; 9] && f.mode == Mode::Idle));
        // Sensor noise keeps the loop busy; on average it does nothing.
        for k in 0..9 {
            let mean = tail.iter().map(|f| f.currents[k]).sum::<f64>() / tail.len() as f64;
            assert!(mean.abs() < 2e-3, "channel {k}: {mean}");
        }
        let quiet = Device::simulated(
            cfg(),
            PlantModel::uniform(Default::default(), Default::default(), ChannelThermalModel::default().ideal_sensor()),
            PidGains::default(),
            1,
        );
        let mut quiet = quiet.unwrap();
        let last = (0..100).map(|_| quiet.tick()).last().unwrap();
        assert!(last.currents.iter().all(|i| i.abs() < 1e-9), "{:?}", last.currents);
    }

    #[test]
    fn passthrough_converges_to_34() {
        let mut d = sim_device(2);
        sim_mut(&mut d).set_external(Some(TimedTemperatureProfile::constant(34.0, 10.0))).unwrap();
        d.command(Command::SetMode(Mode::Passthrough));
        let mut frames = Vec::new();
        for _ in 0..300 {
            frames.push(d.tick());
        }
        let truth = d.backend().truth().unwrap();
        assert!(truth.iter().all(|t| (t - 34.0).abs() <= 0.3), "{truth:?}");
        assert!(frames.last().unwrap().setpoints == [34.0; 9]);
    }

    #[test]
    fn sensor_fault_is_isolated() {
        let mut a = sim_device(3);
        let mut b = sim_device(3);
        for d in [&mut a, &mut b] {
            d.command(Command::SetDirect([36.0; 9]));
        }
        for _ in 0..150 {
            assert_eq!(a.tick(), b.tick());
        }
        sim_mut(&mut b).inject_sensor_fault(4, true);
        let (fa, fb) = (a.tick(), b.tick());
        for k in (0..9).filter(|&k| k != 4) {
            assert_eq!(fa.setpoints[k], fb.setpoints[k]);
            assert_eq!(fa.currents[k], fb.currents[k]);
        }
        assert_eq!(fb.setpoints[4], 30.0);
        assert_eq!(fb.currents[4], 0.0);
        assert!(!fb.warnings.is_empty());
        // The healthy channels keep regulating; the faulted one drifts back
        // towards ambient with the passive time constant of several seconds.
        for _ in 0..2000 {
            let f = b.tick();
            assert_eq!(f.currents[4], 0.0);
        }
        let truth = b.backend().truth().unwrap();
        for k in (0..9).filter(|&k| k != 4) {
            assert!((truth[k] - 36.0).abs() < 0.3, "cell {k}: {}", truth[k]);
        }
        assert!((truth[4] - 30.0).abs() < 0.5, "{}", truth[4]);
    }

    #[test]
    fn serial_backend_tracks_like_sim() {
        let c = DeviceConfig {
            backend: BackendKind::Serial,
            ..cfg()
        };
        let mut d = Device::simulated(c, PlantModel::default(), PidGains::default(), 4).unwrap();
        d.command(Command::SetDirect([26.0; 9]));
        for _ in 0..500 {
            d.tick();
        }
        let truth = d.backend().truth().unwrap();
        assert!(truth.iter().all(|t| (t - 26.0).abs() < 0.3), "{truth:?}");
    }

    #[test]
    fn serial_timeout_faults_to_idle() {
        let sim = SimBackend::new(PlantModel::default(), 30.0, 5).unwrap();
        let mut link = SerialBackend::new(sim);
        link.disconnect_after = Some(50);
        let mut d = Device::new(cfg(), PidGains::default(), 0.7, Box::new(link)).unwrap();
        d.command(Command::SetDirect([40.0; 9]));
        let frames: Vec<_> = (0..60).map(|_| d.tick()).collect();
        assert!(frames[49].fault.is_none());
        let f = &frames[50];
        assert!(f.fault.as_deref().unwrap().contains("timed out"));
        assert_eq!(f.setpoints, [30.0; 9]);
        assert_eq!(f.currents, [0.0; 9]);
        assert_eq!(d.mode(), Mode::Idle);
        assert!(frames[59].fault.is_some());
    }

    #[test]
    fn pattern_stream_plays_then_idles() {
        use crate::pattern::{canonical_pattern, pattern_stream};
        let mut d = sim_device(6);
        let p = canonical_pattern("line").unwrap().with_offset(5.0);
        d.command(Command::Play(Box::new(pattern_stream(&p, 0.5, &cfg(), 100.0).unwrap())));
        let first = d.tick();
        assert_eq!(first.mode, Mode::Pattern);
        assert_eq!(first.setpoints[6..], [35.0; 3]);
        assert_eq!(first.setpoints[0], 30.0);
        for _ in 0..60 {
            d.tick();
        }
        assert_eq!(d.mode(), Mode::Idle);
        assert!(!d.playing());
    }

    #[test]
    fn heterogeneous_channels_all_reach_setpoint() {
        let plant = PlantModel::uniform(Default::default(), Default::default(), ChannelThermalModel::default()).with_contact_spread(0.3, 11);
        let mut d = Device::simulated(cfg(), plant, PidGains::default(), 7).unwrap();
        d.command(Command::SetDirect([20.0, 25.0, 30.0, 35.0, 40.0, 42.0, 18.0, 33.0, 27.0]));
        for _ in 0..800 {
            d.tick();
        }
        let truth = d.backend().truth().unwrap();
        let want = [20.0, 25.0, 30.0, 35.0, 40.0, 42.0, 18.0, 33.0, 27.0];
        for k in 0..9 {
            assert!((truth[k] - want[k]).abs() < 0.3, "cell {k}: {}", truth[k]);
        }
    }

    fn random_command(rng: &mut ChaCha8Rng) -> Command {
        let wild = |rng: &mut ChaCha8Rng| match rng.random_range(0..10) {
            0 => f64::NAN,
            1 => f64::INFINITY,
            2 => -1e9,
            _ => rng.random_range(-20.0..80.0),
        };
        match rng.random_range(0..4) {
            0 => Command::SetMode([Mode::Idle, Mode::Direct, Mode::Passthrough, Mode::Pattern][rng.random_range(0..4)]),
            1 => Command::SetDirect(std::array::from_fn(|_| wild(rng))),
            2 => Command::Play(Box::new(SetpointStream {
                tick_hz: 100.0,
                ambient_c: 30.0,
                segments: vec![(0, std::array::from_fn(|_| wild(rng)))],
                end_tick: rng.random_range(1..50),
            })),
            _ => Command::Stop,
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn fuzzed_commands_never_leave_the_envelope(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut d = sim_device(seed);
            let mut ext = [30.0; 9];
            for k in 0..9 {
                ext[k] = rng.random_range(0.0..70.0);
            }
            sim_mut(&mut d).set_external(Some(TimedTemperatureProfile::per_cell(ext, 100.0))).unwrap();
            for _ in 0..400 {
                if rng.random_bool(0.05) {
                    d.command(random_command(&mut rng));
                }
                let f = d.tick();
                for k in 0..9 {
                    prop_assert!((15.0..=45.0).contains(&f.setpoints[k]));
                    prop_assert!(f.currents[k].abs() <= 0.7);
                }
            }
        }
    }
}
