//! HTTP and WebSocket front end of the service.
//!
//! | Route                 | Purpose                                        |
//! |-----------------------|------------------------------------------------|
//! | `GET /state`          | latest frame, session status, tick jitter      |
//! | `POST /session`       | `start`, `stop` or `configure` a session       |
//! | `POST /response`      | same/different or questionnaire answer         |
//! | `GET /patterns`       | canonical and on-disk patterns                 |
//! | `POST /patterns/play` | play a pattern outside a session               |
//! | `GET /stream`         | WebSocket: telemetry and events; takes answers |

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::ws::{Message, Utf8Bytes, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use crossbeam_channel::Sender;
use futures_util::{SinkExt, StreamExt};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};
use thermogrid::calibrate::ModelFile;
use thermogrid::device::{BackendKind, Device, DeviceConfig, SerialBackend, SimBackend};
use thermogrid::pattern::{self, brush_schedule, canonical_patterns, pattern_stream, Loaded, SetpointStream};
use tokio::net::TcpListener;
use tokio::sync::{broadcast, oneshot, watch};

use crate::api::{ApiError, ApiResult, PlayRequest, ResponseBody, SessionRequest, Snapshot, StreamMessage};
use crate::control::{Control, Ctl};
use crate::live::Defaults;
use crate::writer;
use crate::CliError;

/// Messages a client may fall behind before it starts losing the oldest.
const STREAM_BUFFER: usize = 256;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub device: DeviceConfig,
    pub model: ModelFile,
    pub seed: u64,
    pub participant: String,
    pub rest_s: f64,
    pub out_dir: PathBuf,
    /// Directory of extra `*.json` pattern files.
    pub pattern_dir: Option<PathBuf>,
    pub addr: SocketAddr,
}

impl ServiceConfig {
    pub fn new(out_dir: PathBuf) -> Self {
        ServiceConfig {
            device: DeviceConfig::default(),
            model: ModelFile::default(),
            seed: 1,
            participant: "p01".into(),
            rest_s: 2.0,
            out_dir,
            pattern_dir: None,
            addr: ([127, 0, 0, 1], 8080).into(),
        }
    }
}

#[derive(Clone)]
struct AppState {
    ctl: Sender<Ctl>,
    snapshot: watch::Receiver<Arc<Snapshot>>,
    stream: broadcast::Sender<Utf8Bytes>,
    shutdown: watch::Receiver<bool>,
    device: DeviceConfig,
    pattern_dir: Option<PathBuf>,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.body())).into_response()
    }
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError::new(400, "malformed_request", "request body is not valid for this endpoint").with_details(vec![e.to_string()]))
}

async fn call(st: &AppState, make: impl FnOnce(oneshot::Sender<ApiResult>) -> Ctl) -> ApiResult {
    let (tx, rx) = oneshot::channel();
    st.ctl
        .send(make(tx))
        .map_err(|_| ApiError::new(503, "unavailable", "control loop is not running"))?;
    match tokio::time::timeout(Duration::from_secs(5), rx).await {
        Ok(Ok(r)) => r,
        _ => Err(ApiError::new(503, "unavailable", "control loop did not answer")),
    }
}

fn reply(r: ApiResult) -> Response {
    match r {
        Ok(v) => Json(v).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn get_state(State(st): State<AppState>) -> Response {
    let snap = st.snapshot.borrow().clone();
    Json(&*snap).into_response()
}

async fn post_session(State(st): State<AppState>, body: Bytes) -> Response {
    match parse::<SessionRequest>(&body) {
        Ok(req) => reply(call(&st, |tx| Ctl::Session(req, tx)).await),
        Err(e) => e.into_response(),
    }
}

async fn post_response(State(st): State<AppState>, body: Bytes) -> Response {
    match parse::<ResponseBody>(&body) {
        Ok(req) => reply(call(&st, |tx| Ctl::Response(req, tx)).await),
        Err(e) => e.into_response(),
    }
}

fn describe(l: &Loaded) -> Value {
    match l {
        Loaded::Pattern(p) => json!({"kind": "pattern", "name": p.name, "cells": p.cells, "offset_c": p.offset_c}),
        Loaded::Brush(b) => json!({
            "kind": "brush",
            "name": b.spec.name,
            "row": b.spec.row,
            "velocity_m_s": b.spec.velocity_m_s,
            "offset_c": b.spec.offset_c,
            "inter_onset_s": b.inter_onset_s,
            "cells": b.events.iter().map(|e| e.cell).collect::<Vec<_>>(),
        }),
    }
}

/// Canonical patterns, overridden or extended by the valid files in `dir`
/// (sorted by file name), plus the problems with any invalid files.
pub fn list_patterns(dir: Option<&std::path::Path>, cfg: &DeviceConfig) -> (Vec<Loaded>, Vec<String>) {
    let mut out: Vec<Loaded> = canonical_patterns().into_iter().map(Loaded::Pattern).collect();
    let mut problems = Vec::new();
    if let Some(dir) = dir {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map(|rd| {
                rd.filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|x| x == "json"))
                    .collect()
            })
            .unwrap_or_default();
        files.sort();
        for f in files {
            match pattern::load_pattern_file(&f, cfg) {
                Ok(l) => {
                    let name = match &l {
                        Loaded::Pattern(p) => p.name.clone(),
                        Loaded::Brush(b) => b.spec.name.clone(),
                    };
                    // A file named like a canonical pattern replaces it.
                    match out.iter().position(|o| matches!(o, Loaded::Pattern(p) if p.name == name)) {
                        Some(i) => out[i] = l,
                        None => out.push(l),
                    }
                }
                Err(e) => problems.push(format!("{}: {e}", f.display())),
            }
        }
    }
    (out, problems)
}

async fn get_patterns(State(st): State<AppState>) -> Response {
    let (list, problems) = list_patterns(st.pattern_dir.as_deref(), &st.device);
    Json(json!({
        "patterns": list.iter().map(describe).collect::<Vec<_>>(),
        "skipped": problems,
    }))
    .into_response()
}

fn resolve_play(req: PlayRequest, st: &AppState) -> Result<(String, SetpointStream), ApiError> {
    let cfg = &st.device;
    let loaded = match (&req.name, &req.pattern) {
        (Some(_), Some(_)) | (None, None) => return Err(ApiError::bad_request("give exactly one of `name` or `pattern`")),
        (Some(name), None) => list_patterns(st.pattern_dir.as_deref(), cfg)
            .0
            .into_iter()
            .find(|l| match l {
                Loaded::Pattern(p) => &p.name == name,
                Loaded::Brush(b) => &b.spec.name == name,
            })
            .ok_or_else(|| ApiError::new(404, "unknown_pattern", format!("no pattern named {name:?}")))?,
        (None, Some(v)) => pattern::parse_pattern_file(&v.to_string(), cfg)
            .map_err(|e| ApiError::new(422, "invalid_pattern", "pattern failed validation").with_details(vec![e.to_string()]))?,
    };
    let invalid = |e: thermogrid::Error| ApiError::new(422, "invalid_pattern", "pattern failed validation").with_details(vec![e.to_string()]);
    let duration = req.duration_s.unwrap_or(3.0);
    if !(duration > 0.0 && duration <= 600.0) {
        return Err(ApiError::new(422, "invalid_pattern", "duration_s must be in (0, 600]"));
    }
    match loaded {
        Loaded::Pattern(p) => {
            let p = match req.offset_c {
                Some(o) => p.with_offset(o),
                None => p,
            };
            let s = pattern_stream(&p, duration, cfg, cfg.tick_hz).map_err(invalid)?;
            Ok((p.name, s))
        }
        Loaded::Brush(b) => {
            let mut spec = b.spec;
            if let Some(o) = req.offset_c {
                spec.offset_c = o;
            }
            let sched = brush_schedule(&thermogrid::device::ArrayGeometry::default(), &spec, cfg).map_err(invalid)?;
            Ok((spec.name.clone(), sched.to_stream(cfg, cfg.tick_hz)))
        }
    }
}

async fn post_play(State(st): State<AppState>, body: Bytes) -> Response {
    let req = match parse::<PlayRequest>(&body) {
        Ok(r) => r,
        Err(e) => return e.into_response(),
    };
    match resolve_play(req, &st) {
        Ok((name, stream)) => reply(
            call(&st, |tx| Ctl::Play {
                name,
                stream: Box::new(stream),
                reply: tx,
            })
            .await,
        ),
        Err(e) => e.into_response(),
    }
}

async fn get_stream(State(st): State<AppState>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| stream_client(socket, st))
}

fn encode(msg: &StreamMessage) -> Message {
    Message::text(serde_json::to_string(msg).unwrap_or_default())
}

/// One `/stream` client. Sending and receiving run concurrently so a client
/// that never reads still has its answers handled, and a slow reader only
/// loses its own oldest messages.
async fn stream_client(socket: WebSocket, st: AppState) {
    let (mut tx, mut rx) = socket.split();
    let mut feed = st.stream.subscribe();
    let mut shutdown = st.shutdown.clone();
    let (local_tx, mut local_rx) = tokio::sync::mpsc::channel::<Message>(16);
    let reader_state = st.clone();
    let reader = tokio::spawn(async move {
        while let Some(Ok(msg)) = rx.next().await {
            let text = match msg {
                Message::Text(t) => t,
                Message::Close(_) => break,
                _ => continue,
            };
            let out = match serde_json::from_str::<Value>(text.as_str()) {
                Ok(v) if v.get("type").and_then(Value::as_str) == Some("response") => {
                    let mut v = v;
                    if let Some(o) = v.as_object_mut() {
                        o.remove("type");
                    }
                    match parse::<ResponseBody>(v.to_string().as_bytes()) {
                        Ok(body) => match call(&reader_state, |tx| Ctl::Response(body, tx)).await {
                            Ok(result) => StreamMessage::Ack { result },
                            Err(error) => StreamMessage::Error { error },
                        },
                        Err(error) => StreamMessage::Error { error },
                    }
                }
                _ => StreamMessage::Error {
                    error: ApiError::bad_request("expected {\"type\": \"response\", ...}"),
                },
            };
            if local_tx.send(encode(&out)).await.is_err() {
                break;
            }
        }
    });
    loop {
        let msg = tokio::select! {
            m = feed.recv() => match m {
                Ok(text) => Message::Text(text),
                Err(broadcast::error::RecvError::Lagged(n)) => encode(&StreamMessage::Lagged { dropped: n }),
                Err(broadcast::error::RecvError::Closed) => break,
            },
            Some(m) = local_rx.recv() => m,
            _ = shutdown.changed() => break,
        };
        if tx.send(msg).await.is_err() {
            break;
        }
    }
    reader.abort();
    let _ = tx.send(Message::Close(None)).await;
}

fn router(st: AppState) -> Router {
    Router::new()
        .route("/state", get(get_state))
        .route("/session", post(post_session))
        .route("/response", post(post_response))
        .route("/patterns", get(get_patterns))
        .route("/patterns/play", post(post_play))
        .route("/stream", get(get_stream))
        .fallback(|| async { ApiError::new(404, "not_found", "no such endpoint") })
        .with_state(st)
}

/// A running service. Dropping it without [`Service::shutdown`] leaves the
/// threads running until the process exits.
pub struct Service {
    pub addr: SocketAddr,
    ctl: Sender<Ctl>,
    snapshot: watch::Receiver<Arc<Snapshot>>,
    shutdown_tx: watch::Sender<bool>,
    control: Option<JoinHandle<()>>,
    writer: Option<JoinHandle<std::io::Result<()>>>,
    server: tokio::task::JoinHandle<std::io::Result<()>>,
}

fn build_device(cfg: &ServiceConfig) -> Result<Device, CliError> {
    let plant = cfg.model.plant(cfg.seed);
    let d = cfg.device;
    Ok(match d.backend {
        BackendKind::Sim => Device::simulated(d, plant, cfg.model.gains, cfg.seed)?,
        BackendKind::Serial => {
            let sim = SimBackend::new(plant, d.ambient_temp, cfg.seed)?;
            Device::new(d, cfg.model.gains, cfg.model.tem.i_max, Box::new(SerialBackend::new(sim)))?
        }
    })
}

impl Service {
    /// Binds, starts the control and writer threads and begins serving.
    pub async fn start(cfg: ServiceConfig) -> Result<Service, CliError> {
        cfg.device.validate()?;
        cfg.model.validate()?;
        let device = build_device(&cfg)?;
        std::fs::create_dir_all(&cfg.out_dir)?;
        let listener = TcpListener::bind(cfg.addr)
            .await
            .map_err(|e| CliError::Runtime(format!("cannot bind {}: {e}", cfg.addr)))?;
        let addr = listener.local_addr()?;

        let (writer_tx, writer_h) = writer::spawn(cfg.out_dir.clone());
        let (stream_tx, _) = broadcast::channel(STREAM_BUFFER);
        let (snap_tx, snap_rx) = watch::channel(Arc::new(Control::initial_snapshot(&device)));
        let (ctl_tx, ctl_rx) = crossbeam_channel::bounded::<Ctl>(256);
        let (shutdown_tx, shutdown_rx) = watch::channel(false);
        let defaults = Defaults {
            participant: cfg.participant.clone(),
            seed: cfg.seed,
            rest_s: cfg.rest_s,
        };
        let device_cfg = device.cfg;
        let mut control = Control::new(device, defaults, cfg.out_dir.clone(), writer_tx.clone(), stream_tx.clone(), snap_tx);
        control.announce(json!({"service": "start", "addr": addr.to_string(), "seed": cfg.seed}));
        drop(writer_tx);
        let control_h = std::thread::Builder::new()
            .name("thermogrid-control".into())
            .spawn(move || control.run(ctl_rx))?;

        let state = AppState {
            ctl: ctl_tx.clone(),
            snapshot: snap_rx.clone(),
            stream: stream_tx,
            shutdown: shutdown_rx.clone(),
            device: device_cfg,
            pattern_dir: cfg.pattern_dir.clone(),
        };
        let app = router(state);
        let mut stop = shutdown_rx;
        let server = tokio::spawn(async move {
            axum::serve(listener, app)
                .with_graceful_shutdown(async move {
                    let _ = stop.changed().await;
                })
                .await
        });
        Ok(Service {
            addr,
            ctl: ctl_tx,
            snapshot: snap_rx,
            shutdown_tx,
            control: Some(control_h),
            writer: Some(writer_h),
            server,
        })
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.borrow().clone()
    }

    /// Stops serving, aborts any running session and flushes all files.
    pub async fn shutdown(mut self) -> Result<(), CliError> {
        let _ = self.shutdown_tx.send(true);
        let _ = self.ctl.send(Ctl::Shutdown);
        let control = self.control.take();
        let writer = self.writer.take();
        tokio::task::spawn_blocking(move || {
            if let Some(h) = control {
                let _ = h.join();
            }
            if let Some(h) = writer {
                let _ = h.join();
            }
        })
        .await
        .map_err(|e| CliError::Runtime(e.to_string()))?;
        match tokio::time::timeout(Duration::from_secs(5), self.server).await {
            Ok(Ok(Ok(()))) | Err(_) => Ok(()),
            Ok(Ok(Err(e))) => Err(e.into()),
            Ok(Err(e)) => Err(CliError::Runtime(e.to_string())),
        }
    }
}
