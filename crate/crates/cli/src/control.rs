//! The service's control thread. It owns the device, ticks it on a fixed
//! schedule and is the only place device or session state changes. Other
//! contexts talk to it through the command queue and observe it through the
//! snapshot and the telemetry broadcast.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::extract::ws::Utf8Bytes;
use crossbeam_channel::{Receiver, Sender};
use serde_json::{json, Value};
use thermogrid::device::{ArrayFrame, Command, Device, Mode};
use thermogrid::pattern::SetpointStream;
use thermogrid::psychophys::records::TrialRecord;
use thermogrid::CHANNELS;
use tokio::sync::{broadcast, oneshot, watch};

use crate::api::{ApiError, ApiResult, JitterStats, ResponseBody, ServiceStatus, SessionRequest, Snapshot, StreamMessage};
use crate::events::{EventKind, EventLog};
use crate::live::{Defaults, LiveSession};
use crate::writer::WriterMsg;

pub(crate) type Reply = oneshot::Sender<ApiResult>;

#[allow(clippy::large_enum_variant)]
pub(crate) enum Ctl {
    Session(SessionRequest, Reply),
    Response(ResponseBody, Reply),
    Play {
        name: String,
        stream: Box<SetpointStream>,
        reply: Reply,
    },
    Shutdown,
}

/// Where the control thread publishes events, trials and telemetry.
pub(crate) struct Sink {
    log: EventLog,
    writer: Sender<WriterMsg>,
    stream: broadcast::Sender<Utf8Bytes>,
    tick_hz: f64,
    now_tick: u64,
}

impl Sink {
    fn t_us(&self) -> u64 {
        (self.now_tick as f64 * 1e6 / self.tick_hz).round() as u64
    }

    pub fn emit(&mut self, kind: EventKind, payload: Value) {
        let e = self.log.make(self.t_us(), kind, payload);
        if let Ok(line) = serde_json::to_string(&e) {
            let _ = self.writer.send(WriterMsg::Event(line));
        }
        self.broadcast(&StreamMessage::Event { event: e });
    }

    fn broadcast(&self, msg: &StreamMessage) {
        if self.stream.receiver_count() > 0 {
            if let Ok(s) = serde_json::to_string(msg) {
                // Fails only without subscribers; slow ones lose old messages.
                let _ = self.stream.send(Utf8Bytes::from(s));
            }
        }
    }

    pub fn trial(&mut self, rec: &TrialRecord) {
        if let Ok(line) = serde_json::to_string(rec) {
            let _ = self.writer.send(WriterMsg::Trial(line));
        }
    }

    pub fn open_session(&mut self, dir: PathBuf, seed: u64) {
        self.log.set_seed(seed);
        let _ = self.writer.send(WriterMsg::OpenSession(dir));
    }

    pub fn close_session(&mut self, summary: &Value) {
        let text = serde_json::to_string_pretty(summary).unwrap_or_default();
        let _ = self.writer.send(WriterMsg::CloseSession(text));
    }
}

/// Histogram of tick start lateness in 1 µs buckets.
pub(crate) struct Jitter {
    buckets: Vec<u64>,
    overflow: u64,
    n: u64,
    max_us: f64,
    overruns: u64,
    period_us: f64,
}

impl Jitter {
    const RANGE_US: usize = 20_000;

    pub fn new(period: Duration) -> Self {
        Jitter {
            buckets: vec![0; Self::RANGE_US],
            overflow: 0,
            n: 0,
            max_us: 0.0,
            overruns: 0,
            period_us: period.as_secs_f64() * 1e6,
        }
    }

    pub fn record(&mut self, late: Duration) {
        let us = late.as_secs_f64() * 1e6;
        self.n += 1;
        self.max_us = self.max_us.max(us);
        if us >= self.period_us {
            self.overruns += 1;
        }
        match self.buckets.get_mut(us as usize) {
            Some(b) => *b += 1,
            None => self.overflow += 1,
        }
    }

    /// Upper edge of the bucket holding quantile `q`.
    fn quantile(&self, q: f64) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        let rank = (q * self.n as f64).ceil().max(1.0) as u64;
        let mut seen = 0;
        for (i, c) in self.buckets.iter().enumerate() {
            seen += c;
            if seen >= rank {
                return (i + 1) as f64;
            }
        }
        self.max_us
    }

    pub fn stats(&self) -> JitterStats {
        JitterStats {
            ticks: self.n,
            p50_us: self.quantile(0.5),
            p99_us: self.quantile(0.99),
            max_us: self.max_us,
            overruns: self.overruns,
        }
    }
}

/// Sleeps until shortly before `deadline`, then spins the rest of the way;
/// plain sleeps overshoot by more than the jitter budget.
fn wait_until(deadline: Instant) {
    const SPIN: Duration = Duration::from_micros(400);
    loop {
        let now = Instant::now();
        if now >= deadline {
            return;
        }
        let left = deadline - now;
        if left > SPIN {
            std::thread::sleep(left - SPIN);
        } else {
            std::thread::yield_now();
        }
    }
}

pub(crate) struct Control {
    pub device: Device,
    pub sink: Sink,
    pub session: Option<LiveSession>,
    pub defaults: Defaults,
    pub out_dir: PathBuf,
    pub snapshot: watch::Sender<Arc<Snapshot>>,
    sessions_started: u64,
    jitter: Jitter,
    jitter_stats: JitterStats,
    telemetry_every: u64,
    clamping: bool,
}

impl Control {
    pub fn new(
        device: Device,
        defaults: Defaults,
        out_dir: PathBuf,
        writer: Sender<WriterMsg>,
        stream: broadcast::Sender<Utf8Bytes>,
        snapshot: watch::Sender<Arc<Snapshot>>,
    ) -> Self {
        let cfg = device.cfg;
        Control {
            sink: Sink {
                log: EventLog::discard(defaults.seed),
                writer,
                stream,
                tick_hz: cfg.tick_hz,
                now_tick: 0,
            },
            jitter: Jitter::new(Duration::from_secs_f64(1.0 / cfg.tick_hz)),
            jitter_stats: JitterStats::default(),
            telemetry_every: (cfg.tick_hz / cfg.telemetry_rate).round().max(1.0) as u64,
            device,
            session: None,
            defaults,
            out_dir,
            snapshot,
            sessions_started: 0,
            clamping: false,
        }
    }

    /// The frame shown before the first tick: everything at ambient.
    pub fn initial_snapshot(device: &Device) -> Snapshot {
        let a = device.cfg.ambient_temp;
        Snapshot {
            status: ServiceStatus::Idle,
            frame: ArrayFrame {
                tick_index: 0,
                time_s: 0.0,
                mode: Mode::Idle,
                setpoints: [a; CHANNELS],
                measured: [a; CHANNELS],
                currents: [0.0; CHANNELS],
                external: [f64::NAN; CHANNELS],
                clamped: 0,
                warnings: Vec::new(),
                fault: None,
            },
            session: None,
            jitter: JitterStats::default(),
            tick_hz: device.cfg.tick_hz,
            telemetry_rate: device.cfg.telemetry_rate,
        }
    }

    fn session_active(&self) -> bool {
        self.session.as_ref().is_some_and(|s| s.active())
    }

    /// Marks the service start in the service-wide log.
    pub fn announce(&mut self, payload: Value) {
        self.sink.emit(EventKind::SessionStart, payload);
    }

    fn command_event(&mut self, endpoint: &str, request: Value) {
        self.sink.emit(EventKind::Command, json!({"endpoint": endpoint, "request": request}));
    }

    fn handle_session(&mut self, req: SessionRequest) -> ApiResult {
        self.command_event("POST /session", serde_json::to_value(&req).unwrap_or(Value::Null));
        let now = self.device.tick_index();
        match req {
            SessionRequest::Start(start) => {
                if self.session_active() {
                    return Err(ApiError::conflict("session_active", "a session is already running; stop it first"));
                }
                if let Some(f) = self.device.fault() {
                    return Err(ApiError::new(503, "device_fault", f.to_string()));
                }
                let s = LiveSession::start(start, &self.defaults, &self.device.cfg, &self.out_dir, self.sessions_started, now)?;
                self.sessions_started += 1;
                self.device.command(Command::Stop);
                self.sink.open_session(s.dir.clone(), s.seed);
                self.sink.emit(
                    EventKind::SessionStart,
                    json!({"session_id": s.id, "participant": s.participant, "experiment": s.experiment, "seed": s.seed}),
                );
                let view = s.view();
                let dir = s.dir.display().to_string();
                self.session = Some(s);
                Ok(json!({"session": view, "dir": dir}))
            }
            SessionRequest::Stop => match self.session.as_mut().filter(|s| s.active()) {
                Some(s) => {
                    s.abort("stopped by operator", &mut self.device, &mut self.sink);
                    Ok(json!({"session": s.view()}))
                }
                None => Err(ApiError::conflict("no_session", "no session is running")),
            },
            SessionRequest::Configure(c) => {
                if let Some(p) = c.participant {
                    if p.trim().is_empty() {
                        return Err(ApiError::new(422, "invalid_session", "participant must not be empty"));
                    }
                    self.defaults.participant = p;
                }
                if let Some(s) = c.seed {
                    self.defaults.seed = s;
                }
                if let Some(r) = c.rest_s {
                    if !(r >= 0.0 && r.is_finite()) {
                        return Err(ApiError::new(422, "invalid_session", "rest_s must be non-negative"));
                    }
                    self.defaults.rest_s = r;
                }
                Ok(json!({"participant": self.defaults.participant, "seed": self.defaults.seed, "rest_s": self.defaults.rest_s}))
            }
        }
    }

    /// Applies a command; the reply is held back until the next snapshot is
    /// published so a client that reads `/state` after a reply sees its effect.
    fn handle(&mut self, cmd: Ctl) -> Option<(Reply, ApiResult)> {
        match cmd {
            Ctl::Session(req, reply) => {
                let r = self.handle_session(req);
                Some((reply, r))
            }
            Ctl::Response(body, reply) => {
                self.command_event("POST /response", serde_json::to_value(&body).unwrap_or(Value::Null));
                let now = self.device.tick_index();
                let r = match self.session.as_mut() {
                    Some(s) => s.respond(body, now, &mut self.device, &mut self.sink),
                    None => Err(ApiError::conflict("no_active_trial", "no session is running")),
                };
                if let Err(e) = &r {
                    self.sink.emit(EventKind::Command, json!({"endpoint": "POST /response", "rejected": e}));
                }
                Some((reply, r))
            }
            Ctl::Play { name, stream, reply } => {
                self.command_event("POST /patterns/play", json!({"name": name, "duration_s": stream.duration_s()}));
                let r = if self.session_active() {
                    Err(ApiError::conflict("session_active", "patterns cannot be played during a session"))
                } else if let Some(f) = self.device.fault() {
                    Err(ApiError::new(503, "device_fault", f.to_string()))
                } else {
                    let start_tick = self.device.tick_index();
                    let duration_s = stream.duration_s();
                    self.device.command(Command::Play(stream));
                    Ok(json!({"playing": name, "start_tick": start_tick, "duration_s": duration_s}))
                };
                Some((reply, r))
            }
            Ctl::Shutdown => None,
        }
    }

    fn publish(&mut self, frame: ArrayFrame) {
        let status = if self.device.fault().is_some() {
            ServiceStatus::Fault
        } else if self.session_active() {
            ServiceStatus::Session
        } else if self.device.playing() {
            ServiceStatus::Playing
        } else {
            ServiceStatus::Idle
        };
        let snap = Snapshot {
            status,
            frame,
            session: self.session.as_ref().map(|s| s.view()),
            jitter: self.jitter_stats,
            tick_hz: self.device.cfg.tick_hz,
            telemetry_rate: self.device.cfg.telemetry_rate,
        };
        self.snapshot.send_replace(Arc::new(snap));
    }

    fn step(&mut self) {
        let now = self.device.tick_index();
        self.sink.now_tick = now;
        if let Some(s) = self.session.as_mut() {
            s.before_tick(now, &mut self.device, &mut self.sink);
        }
        let frame = self.device.tick();
        if let Some(s) = self.session.as_mut() {
            s.after_tick(&frame);
        }
        if frame.clamped > 0 && !self.clamping {
            self.sink
                .emit(EventKind::Clamp, json!({"tick": frame.tick_index, "count": frame.clamped}));
        }
        self.clamping = frame.clamped > 0;
        if let (Some(f), Some(s)) = (&frame.fault, self.session.as_mut()) {
            s.abort(f, &mut self.device, &mut self.sink);
        }
        if frame.tick_index.is_multiple_of(self.telemetry_every) {
            let msg = StreamMessage::Telemetry { frame: frame.clone() };
            self.sink.broadcast(&msg);
            if let Some(s) = self.session.as_ref().filter(|s| s.active()) {
                let line = json!({"schema": thermogrid::SCHEMA_VERSION, "seed": s.seed, "frame": frame});
                let _ = self.sink.writer.send(WriterMsg::Telemetry(line.to_string()));
            }
        }
        self.publish(frame);
    }

    /// Runs until [`Ctl::Shutdown`] arrives or every command sender is gone.
    pub fn run(mut self, rx: Receiver<Ctl>) {
        let hz = self.device.cfg.tick_hz;
        let start = Instant::now();
        let mut fault_reported = false;
        let mut replies = Vec::new();
        for n in 0u64.. {
            let deadline = start + Duration::from_secs_f64(n as f64 / hz);
            wait_until(deadline);
            self.jitter.record(Instant::now().saturating_duration_since(deadline));
            if n % 50 == 0 {
                self.jitter_stats = self.jitter.stats();
            }
            loop {
                match rx.try_recv() {
                    Ok(Ctl::Shutdown) | Err(crossbeam_channel::TryRecvError::Disconnected) => return self.shutdown(),
                    Ok(cmd) => replies.extend(self.handle(cmd)),
                    Err(crossbeam_channel::TryRecvError::Empty) => break,
                }
            }
            self.step();
            for (reply, r) in replies.drain(..) {
                let _ = reply.send(r);
            }
            match (self.device.fault().map(str::to_string), fault_reported) {
                (Some(f), false) => {
                    self.sink.emit(EventKind::Fault, json!({"reason": f}));
                    fault_reported = true;
                }
                (None, _) => fault_reported = false,
                _ => {}
            }
        }
    }

    fn shutdown(mut self) {
        if let Some(s) = self.session.as_mut() {
            s.abort("service shut down", &mut self.device, &mut self.sink);
        }
        self.sink.emit(EventKind::SessionEnd, json!({"service": "shutdown"}));
    }
}
