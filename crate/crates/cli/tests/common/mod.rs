#![allow(dead_code)]

use std::path::Path;
use std::time::{Duration, Instant};

use serde_json::Value;
use thermogrid_cli::service::{Service, ServiceConfig};

pub async fn start(out: &Path) -> Service {
    let mut cfg = ServiceConfig::new(out.to_path_buf());
    cfg.addr = ([127, 0, 0, 1], 0).into();
    cfg.pattern_dir = Some(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../patterns"));
    Service::start(cfg).await.expect("service starts")
}

pub struct Api {
    pub base: String,
    pub http: reqwest::Client,
}

impl Api {
    pub fn new(svc: &Service) -> Self {
        Api {
            base: format!("http://{}", svc.addr),
            http: reqwest::Client::new(),
        }
    }

    pub async fn get(&self, path: &str) -> (u16, Value) {
        let r = self.http.get(format!("{}{path}", self.base)).send().await.unwrap();
        let status = r.status().as_u16();
        (status, r.json().await.unwrap())
    }

    pub async fn post(&self, path: &str, body: &Value) -> (u16, Value) {
        self.post_raw(path, body.to_string()).await
    }

    pub async fn post_raw(&self, path: &str, body: String) -> (u16, Value) {
        let r = self
            .http
            .post(format!("{}{path}", self.base))
            .header("content-type", "application/json")
            .body(body)
            .send()
            .await
            .unwrap();
        let status = r.status().as_u16();
        (status, r.json().await.unwrap())
    }

    /// Polls `/state` until `pred` holds.
    pub async fn wait_state(&self, what: &str, timeout: Duration, pred: impl Fn(&Value) -> bool) -> Value {
        let t0 = Instant::now();
        loop {
            let (_, s) = self.get("/state").await;
            if pred(&s) {
                return s;
            }
            assert!(t0.elapsed() < timeout, "timed out waiting for {what}; last state {s}");
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
    }

    pub async fn wait_phase(&self, phase: &str) -> Value {
        self.wait_state(phase, Duration::from_secs(20), |s| s["session"]["phase"] == phase).await
    }
}

pub fn read_lines(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap_or_default()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}
