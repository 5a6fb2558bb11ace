//! Interactive sessions run inside the service's control thread. Each trial
//! moves through present → await response → rest; responses arrive from
//! HTTP, the socket or an automatic observer.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use thermogrid::device::{ArrayFrame, ArrayGeometry, Command, Device, DeviceConfig};
use thermogrid::pattern::{brush_schedule, canonical_pattern, transition_schedule, BrushSpec, Pattern, SetpointStream, SweepDirection};
use thermogrid::psychophys::records::{Experiment, TrialRecord};
use thermogrid::psychophys::staircase::{self, StaircaseConfig, StaircaseState, Stimulus};
use thermogrid::psychophys::stats::binomial_test;
use thermogrid::psychophys::trials::{exp3_pair_table, BrushDesign, PatternPair, PatternPairDesign};
use thermogrid::psychophys::{ObserverModel, Polarity, Response};
use thermogrid::{ChannelArray, CHANNELS, SCHEMA_VERSION};

use crate::api::{ApiError, ApiResult, Phase, ResponseBody, SessionView, StaircaseView, StartRequest};
use crate::control::Sink;
use crate::events::EventKind;
use crate::session::staircase_stream;

/// Simulated reaction time of the automatic observer, s.
const AUTO_RESPONSE_S: f64 = 0.3;

/// Defaults applied to `start` requests that leave fields out.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Defaults {
    pub participant: String,
    pub seed: u64,
    pub rest_s: f64,
}

enum Kind {
    Staircase {
        cfg: StaircaseConfig,
        pattern: Pattern,
        st: StaircaseState,
        max_trials: usize,
    },
    Pairs {
        design: PatternPairDesign,
        table: Vec<PatternPair>,
        tally: BTreeMap<String, (u64, u64)>,
    },
    Brush {
        design: BrushDesign,
        sweeps: Vec<(Polarity, SetpointStream, f64)>,
    },
}

struct Pending {
    index: usize,
    record: TrialRecord,
    start_tick: u64,
    /// Stream ticks in the first interval and in total.
    switch_rel: u64,
    end_rel: u64,
    cells: Vec<usize>,
    first: Option<ChannelArray>,
    last: Option<ChannelArray>,
    stimulus: Option<Stimulus>,
    truth: Option<Response>,
}

pub(crate) struct LiveSession {
    pub id: String,
    pub dir: PathBuf,
    pub participant: String,
    pub seed: u64,
    pub experiment: Experiment,
    kind: Kind,
    phase: Phase,
    /// End of presentation, start of waiting, or end of rest, by phase.
    phase_tick: u64,
    rest_ticks: u64,
    tick_hz: f64,
    ambient: f64,
    observer: Option<(ObserverModel, ChaCha8Rng)>,
    completed: usize,
    pending: Option<Pending>,
    status: Option<String>,
}

fn invalid(problems: Vec<String>) -> ApiError {
    ApiError::new(422, "invalid_session", "session request failed validation").with_details(problems)
}

fn mean_over(cells: &[usize], t: &ChannelArray) -> f64 {
    cells.iter().map(|&k| t[k]).sum::<f64>() / cells.len() as f64
}

impl LiveSession {
    pub fn start(
        req: StartRequest,
        defaults: &Defaults,
        dcfg: &DeviceConfig,
        out_dir: &std::path::Path,
        ordinal: u64,
        now: u64,
    ) -> Result<Self, ApiError> {
        let experiment = req.experiment.unwrap_or(Experiment::Exp1);
        let participant = req.participant.unwrap_or_else(|| defaults.participant.clone());
        let seed = req.seed.unwrap_or(defaults.seed);
        let rest_s = req.rest_s.unwrap_or(defaults.rest_s);
        let mut problems = Vec::new();
        if participant.trim().is_empty() {
            problems.push("participant: must not be empty".to_string());
        }
        if !(rest_s >= 0.0 && rest_s.is_finite()) {
            problems.push("rest_s: must be non-negative".to_string());
        }
        if let Some(o) = &req.auto_observer {
            if let Err(e) = o.validate() {
                problems.push(format!("auto_observer: {e}"));
            }
            if experiment == Experiment::Exp4 {
                problems.push("auto_observer: exp4 takes questionnaire responses".to_string());
            }
        }
        let env = dcfg.safety_envelope;
        let kind = match experiment {
            Experiment::Exp1 => {
                let cfg = req.staircase.unwrap_or_default();
                let valid = cfg.validate(env).map_err(|e| problems.push(format!("staircase: {e}"))).is_ok();
                let max_trials = req.max_trials.unwrap_or(500);
                if max_trials == 0 {
                    problems.push("max_trials: must be positive".to_string());
                }
                match canonical_pattern(&cfg.pattern) {
                    Some(pattern) => Some(Kind::Staircase {
                        st: StaircaseState::new(&cfg),
                        cfg,
                        pattern,
                        max_trials,
                    }),
                    None => {
                        if valid {
                            problems.push(format!("staircase.pattern: unknown pattern {:?}", cfg.pattern));
                        }
                        None
                    }
                }
            }
            Experiment::Exp3 => {
                let design = req.pairs.unwrap_or_default();
                if !(design.offset > 0.0 && design.offset <= env && design.hold_s > 0.0) {
                    problems.push("pairs: 0 < offset ≤ envelope and hold_s > 0 required".to_string());
                }
                Some(Kind::Pairs {
                    table: exp3_pair_table(&design, seed),
                    design,
                    tally: BTreeMap::new(),
                })
            }
            Experiment::Exp4 => {
                let design = req.brush.unwrap_or_default();
                let mut sweeps = Vec::new();
                for polarity in Polarity::BOTH {
                    let spec = BrushSpec {
                        name: format!("brush_{polarity}"),
                        row: design.row,
                        velocity_m_s: design.velocity_m_s,
                        offset_c: polarity.sign() * design.offset.abs(),
                        dwell_multiplier: design.dwell_multiplier,
                        direction: SweepDirection::LeftToRight,
                    };
                    match brush_schedule(&ArrayGeometry::default(), &spec, dcfg) {
                        Ok(s) => {
                            for _ in 0..design.sweeps {
                                sweeps.push((polarity, s.to_stream(dcfg, dcfg.tick_hz), s.inter_onset_s));
                            }
                        }
                        Err(e) => {
                            problems.push(format!("brush: {e}"));
                            break;
                        }
                    }
                }
                if design.sweeps == 0 {
                    problems.push("brush.sweeps: must be positive".to_string());
                }
                Some(Kind::Brush { design, sweeps })
            }
            Experiment::Exp2 => {
                problems.push("experiment: exp2 needs physical objects and runs offline only".to_string());
                None
            }
        };
        if !problems.is_empty() {
            return Err(invalid(problems));
        }
        let id = format!("{participant}-{seed:016x}-{ordinal:03}");
        Ok(LiveSession {
            dir: out_dir.join("sessions").join(&id),
            id,
            participant,
            seed,
            experiment,
            kind: kind.expect("problems checked"),
            phase: Phase::Resting,
            phase_tick: now,
            rest_ticks: (rest_s * dcfg.tick_hz).round() as u64,
            tick_hz: dcfg.tick_hz,
            ambient: dcfg.ambient_temp,
            observer: req.auto_observer.map(|o| (o, o.rng())),
            completed: 0,
            pending: None,
            status: None,
        })
    }

    pub fn active(&self) -> bool {
        self.phase != Phase::Finished
    }

    pub fn view(&self) -> SessionView {
        let staircase = match &self.kind {
            Kind::Staircase { st, .. } => Some(StaircaseView {
                trial_count: st.trial_count,
                current_step: st.current_step,
                reversals: st.reversal_steps.len(),
                finished: st.finished,
            }),
            _ => None,
        };
        let total = match &self.kind {
            Kind::Staircase { .. } => None,
            Kind::Pairs { table, .. } => Some(table.len()),
            Kind::Brush { sweeps, .. } => Some(sweeps.len()),
        };
        SessionView {
            session_id: self.id.clone(),
            experiment: self.experiment,
            participant: self.participant.clone(),
            seed: self.seed,
            phase: self.phase,
            trial: self.pending.as_ref().map_or(self.completed, |p| p.index),
            trials_completed: self.completed,
            trials_total: total,
            staircase,
            status: self.status.clone(),
        }
    }

    fn t_us(&self, tick: u64) -> u64 {
        (tick as f64 * 1e6 / self.tick_hz).round() as u64
    }

    /// Phase transitions due before the tick at `now`.
    pub fn before_tick(&mut self, now: u64, device: &mut Device, sink: &mut Sink) {
        match self.phase {
            Phase::Resting if now >= self.phase_tick => self.next_trial(now, device, sink),
            Phase::Presenting if now >= self.phase_tick => {
                let index = self.pending.as_ref().map_or(0, |p| p.index);
                sink.emit(EventKind::StimulusOff, json!({"session_id": self.id, "trial": index}));
                self.phase = Phase::AwaitingResponse;
                self.phase_tick = now;
            }
            Phase::AwaitingResponse => {
                let due = self.phase_tick + (AUTO_RESPONSE_S * self.tick_hz).round() as u64;
                if now >= due {
                    if let Some((obs, mut rng)) = self.observer.take() {
                        let r = obs.respond(self.judged_difference(), &mut rng);
                        self.observer = Some((obs, rng));
                        let _ = self.respond(ResponseBody::Choice { response: r }, now, device, sink);
                    }
                }
            }
            _ => {}
        }
    }

    /// Records the measured temperatures at the end of each interval.
    pub fn after_tick(&mut self, frame: &ArrayFrame) {
        if self.phase != Phase::Presenting {
            return;
        }
        if let Some(p) = self.pending.as_mut() {
            let rel = frame.tick_index.saturating_sub(p.start_tick) + 1;
            if rel == p.switch_rel {
                p.first = Some(frame.measured);
            }
            if rel == p.end_rel {
                p.last = Some(frame.measured);
            }
        }
    }

    /// Difference the automatic observer judges: the commanded step for a
    /// staircase, the largest measured per-cell change for a pattern pair.
    fn judged_difference(&self) -> f64 {
        let Some(p) = &self.pending else { return 0.0 };
        if let Some(s) = p.stimulus {
            return s.delta();
        }
        match (p.first, p.last) {
            (Some(a), Some(b)) => (0..CHANNELS).map(|k| (a[k] - b[k]).abs()).fold(0.0, f64::max),
            _ => 0.0,
        }
    }

    /// Why no further trial can start, if so.
    fn exhausted(&self) -> Option<&'static str> {
        match &self.kind {
            Kind::Staircase { st, .. } if st.finished => Some("completed"),
            Kind::Staircase { st, max_trials, .. } if st.trial_count >= *max_trials => Some("trial_cap_reached"),
            Kind::Staircase { .. } => None,
            Kind::Pairs { table, .. } if self.completed >= table.len() => Some("completed"),
            Kind::Brush { sweeps, .. } if self.completed >= sweeps.len() => Some("completed"),
            _ => None,
        }
    }

    fn next_trial(&mut self, now: u64, device: &mut Device, sink: &mut Sink) {
        let dcfg = device.cfg;
        let index = self.completed;
        let mut record = TrialRecord::new(&self.id, &self.participant, self.seed, self.experiment, index);
        record.onset_us = self.t_us(now);
        if let Some(status) = self.exhausted() {
            return self.finish(status, device, sink);
        }
        let built = match &mut self.kind {
            Kind::Staircase { cfg, pattern, st, .. } => staircase::next_stimulus(cfg, st, dcfg.ambient_temp).map(|stim| {
                let stream = staircase_stream(cfg, pattern, &stim, &dcfg);
                let hold = (cfg.stimulus_duration_s * dcfg.tick_hz).round() as u64;
                let record = record
                    .condition("pattern", &cfg.pattern)
                    .condition("polarity", cfg.polarity)
                    .stimulus("reference_c", stim.reference)
                    .stimulus("test_c", stim.test)
                    .stimulus("step_c", st.current_step);
                let payload = json!({"pattern": cfg.pattern, "polarity": cfg.polarity, "reference": stim.reference, "test": stim.test, "step": st.current_step});
                (stream, hold, pattern.cells.clone(), Some(stim), None, payload, record)
            }),
            Kind::Pairs { design, table, .. } => {
                let pair = table[index].clone();
                let a = canonical_pattern(&pair.first).expect("table uses canonical names");
                let b = canonical_pattern(&pair.second).expect("table uses canonical names");
                let offset = pair.polarity.sign() * design.offset;
                transition_schedule(&a, &b, design.hold_s, offset, &dcfg, dcfg.tick_hz).map(|stream| {
                let switch = stream.segments.get(1).map_or(stream.end_tick / 2, |s| s.0);
                let mut record = record
                    .condition("first", &pair.first)
                    .condition("second", &pair.second)
                    .condition("polarity", pair.polarity)
                    .stimulus("offset_c", offset);
                let truth = if pair.changed() { Response::Different } else { Response::Same };
                record.ground_truth = Some(truth.to_string());
                let payload = json!({"first": pair.first, "second": pair.second, "polarity": pair.polarity, "offset_c": offset});
                (stream, switch, (0..CHANNELS).collect(), None, Some(truth), payload, record)
                })
            }
            Kind::Brush { design, sweeps } => {
                let (polarity, stream, inter_onset_s) = sweeps[index].clone();
                let record = record
                    .condition("polarity", polarity)
                    .condition("row", design.row)
                    .stimulus("velocity_m_s", design.velocity_m_s)
                    .stimulus("inter_onset_s", inter_onset_s);
                let payload = json!({"polarity": polarity, "row": design.row, "velocity_m_s": design.velocity_m_s, "inter_onset_s": inter_onset_s});
                let end = stream.end_tick;
                Ok((stream, end, (0..CHANNELS).collect(), None, None, payload, record))
            }
        };
        let (stream, switch_rel, cells, stimulus, truth, mut payload, record) = match built {
            Ok(b) => b,
            Err(e) => return self.abort(&e.to_string(), device, sink),
        };
        let end_rel = stream.end_tick;
        payload["session_id"] = json!(self.id);
        payload["trial"] = json!(index);
        sink.emit(EventKind::StimulusOn, payload);
        device.command(Command::Play(Box::new(stream)));
        self.pending = Some(Pending {
            index,
            record,
            start_tick: now,
            switch_rel,
            end_rel,
            cells,
            first: None,
            last: None,
            stimulus,
            truth,
        });
        self.phase = Phase::Presenting;
        self.phase_tick = now + end_rel;
    }

    /// Applies one participant response. Only accepted while a trial is
    /// awaiting one; anything else is rejected with the reason.
    pub fn respond(&mut self, body: ResponseBody, now: u64, device: &mut Device, sink: &mut Sink) -> ApiResult {
        match self.phase {
            Phase::AwaitingResponse => {}
            Phase::Presenting => {
                return Err(ApiError::conflict(
                    "stimulus_playing",
                    "the stimulus is still playing; respond after it ends",
                ))
            }
            Phase::Resting => {
                return Err(ApiError::conflict(
                    "already_answered",
                    format!(
                        "trial {} already has a response; wait for the next stimulus",
                        self.completed.saturating_sub(1)
                    ),
                ))
            }
            Phase::Finished => return Err(ApiError::conflict("no_active_trial", "the session has finished")),
        }
        let mut p = self.pending.take().expect("awaiting implies a pending trial");
        let rt = (now - self.phase_tick) as f64 / self.tick_hz;
        let mut reply = json!({"accepted": true, "session_id": self.id, "trial": p.index});
        let mut reversal = None;
        match (&mut self.kind, &body) {
            (Kind::Staircase { cfg, st, .. }, ResponseBody::Choice { response }) => {
                let next = match staircase::update(cfg, st, *response) {
                    Ok(n) => n,
                    Err(e) => {
                        self.pending = Some(p);
                        return Err(ApiError::conflict("staircase_finished", e.to_string()));
                    }
                };
                if next.reversal_steps.len() > st.reversal_steps.len() {
                    reversal = Some(json!({"session_id": self.id, "trial": p.index, "step": st.current_step, "count": next.reversal_steps.len()}));
                }
                *st = next;
                p.record.response = response.to_string();
                reply["staircase"] = json!({"trial_count": st.trial_count, "current_step": st.current_step, "reversals": st.reversal_steps.len(), "finished": st.finished});
            }
            (Kind::Pairs { tally, .. }, ResponseBody::Choice { response }) => {
                p.record.response = response.to_string();
                let polarity = p.record.condition.get("polarity").cloned().unwrap_or_default();
                let e = tally.entry(polarity).or_default();
                e.1 += 1;
                if Some(*response) == p.truth {
                    e.0 += 1;
                }
            }
            (Kind::Brush { .. }, ResponseBody::Questionnaire { questionnaire }) => {
                let bad: Vec<String> = questionnaire
                    .iter()
                    .filter(|(_, v)| !(1..=7).contains(*v))
                    .map(|(k, v)| format!("{k}: {v} outside 1..=7"))
                    .collect();
                if questionnaire.is_empty() || !bad.is_empty() {
                    self.pending = Some(p);
                    return Err(ApiError::bad_request("questionnaire items must be Likert ratings 1 to 7").with_details(bad));
                }
                p.record.response = questionnaire.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";");
                for (k, v) in questionnaire {
                    p.record.stimulus.insert(format!("likert_{k}"), f64::from(*v));
                }
            }
            (Kind::Brush { .. }, _) => {
                self.pending = Some(p);
                return Err(ApiError::bad_request("this session expects a questionnaire payload"));
            }
            (_, _) => {
                self.pending = Some(p);
                return Err(ApiError::bad_request("this session expects a same/different response"));
            }
        }
        if let (Some(a), Some(b)) = (p.first, p.last) {
            if p.stimulus.is_some() {
                p.record
                    .stimulus
                    .insert("achieved_reference_c".into(), (mean_over(&p.cells, &a) * 1e6).round() / 1e6);
                p.record
                    .stimulus
                    .insert("achieved_test_c".into(), (mean_over(&p.cells, &b) * 1e6).round() / 1e6);
            } else if matches!(self.kind, Kind::Pairs { .. }) {
                let change = (0..CHANNELS).map(|k| (a[k] - b[k]).abs()).fold(0.0, f64::max);
                p.record.stimulus.insert("max_cell_change_c".into(), (change * 1e6).round() / 1e6);
            }
        }
        p.record.response_time_s = Some(rt);
        sink.emit(
            EventKind::Response,
            json!({"session_id": self.id, "trial": p.index, "response": body, "response_time_s": rt}),
        );
        if let Some(r) = reversal {
            sink.emit(EventKind::Reversal, r);
        }
        sink.trial(&p.record);
        self.completed += 1;
        self.phase = Phase::Resting;
        self.phase_tick = now + self.rest_ticks;
        reply["next_stimulus_tick"] = json!(self.phase_tick);
        if let Some(status) = self.exhausted() {
            self.finish(status, device, sink);
            reply["next_stimulus_tick"] = Value::Null;
        }
        reply["session"] = serde_json::to_value(self.view()).unwrap_or(Value::Null);
        Ok(reply)
    }

    pub fn abort(&mut self, reason: &str, device: &mut Device, sink: &mut Sink) {
        if self.active() {
            sink.emit(EventKind::Fault, json!({"session_id": self.id, "reason": reason}));
            self.finish("aborted", device, sink);
        }
    }

    fn results(&self) -> Value {
        match &self.kind {
            Kind::Staircase { cfg, st, .. } => json!({
                "pattern": cfg.pattern,
                "polarity": cfg.polarity,
                "trials": st.trial_count,
                "reversal_steps": st.reversal_steps,
                "jnd_c": staircase::jnd_estimate(cfg, st).ok(),
            }),
            Kind::Pairs { tally, .. } => {
                let acc: BTreeMap<&String, Value> = tally
                    .iter()
                    .map(|(p, (k, n))| {
                        (
                            p,
                            json!({"correct": k, "n": n, "accuracy": *k as f64 / *n as f64, "binomial_p": binomial_test(*k, *n, 0.5).ok()}),
                        )
                    })
                    .collect();
                json!({"accuracy": acc})
            }
            Kind::Brush { design, sweeps } => json!({
                "velocity_m_s": design.velocity_m_s,
                "commanded_inter_onset_ms": sweeps.first().map(|s| s.2 * 1e3),
            }),
        }
    }

    fn finish(&mut self, status: &str, device: &mut Device, sink: &mut Sink) {
        device.command(Command::Stop);
        self.pending = None;
        self.phase = Phase::Finished;
        self.status = Some(status.to_string());
        sink.emit(
            EventKind::SessionEnd,
            json!({"session_id": self.id, "status": status, "trials": self.completed}),
        );
        let summary = json!({
            "schema": SCHEMA_VERSION,
            "seed": self.seed,
            "session_id": self.id,
            "participant": self.participant,
            "experiment": self.experiment,
            "status": status,
            "trials": self.completed,
            "results": self.results(),
            "ambient_c": self.ambient,
            "wall_clock": {"finished_unix_s": std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)},
        });
        sink.close_session(&summary);
    }
}
