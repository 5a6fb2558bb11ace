//! Offline sessions: every experiment driven through the simulated device with
//! simulated observers, written to a session directory.
//!
//! Output files:
//!
//! - `events.jsonl`: stimulus, response, reversal, clamp and fault events.
//! - `trials.jsonl`: one [`TrialRecord`] per trial.
//! - `telemetry.jsonl`: decimated device frames.
//! - `summary.json`: per-experiment results. Wall-clock fields live only
//!   under its `wall_clock` key; everything else is a pure function of the
//!   configuration.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use thermogrid::calibrate::ModelFile;
use thermogrid::device::{ArrayFrame, ArrayGeometry, Command, Device, DeviceConfig, Mode};
use thermogrid::pattern::{self, brush_schedule, canonical_pattern, transition_schedule, BrushSpec, Pattern, SetpointStream, SweepDirection};
use thermogrid::plant::TimedTemperatureProfile;
use thermogrid::psychophys::records::{write_jsonl, Experiment, TrialRecord};
use thermogrid::psychophys::staircase::{self, equilibrium_p, StaircaseConfig, StaircaseState, Stimulus};
use thermogrid::psychophys::stats::binomial_test;
use thermogrid::psychophys::trials::{exp2_trial_table, exp3_pair_table, Comparison};
use thermogrid::psychophys::{Polarity, Response};
use thermogrid::{ChannelArray, CHANNELS, SCHEMA_VERSION};

use crate::config::{Exp1Config, Exp2Config, Exp3Config, Exp4Config, SessionConfig};
use crate::events::{EventKind, EventLog};
use crate::CliError;

pub fn session_id(cfg: &SessionConfig) -> String {
    format!("{}-{:016x}", cfg.participant, cfg.seed)
}

/// Independent, reproducible random stream for one part of the session.
fn substream(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(tag);
    r
}

/// The simulated device plus the files it reports into.
struct Rig {
    device: Device,
    events: EventLog,
    telemetry: Option<BufWriter<File>>,
    decimation: u64,
    seed: u64,
    clamp_events: u64,
    fault: Option<String>,
}

impl Rig {
    fn t_us(&self) -> u64 {
        (self.device.tick_index() as f64 * 1e6 / self.device.cfg.tick_hz).round() as u64
    }

    fn event(&mut self, kind: EventKind, payload: Value) -> Result<(), CliError> {
        let t = self.t_us();
        self.events.emit(t, kind, payload)?;
        Ok(())
    }

    fn tick(&mut self) -> Result<ArrayFrame, CliError> {
        let f = self.device.tick();
        if f.clamped > 0 {
            self.clamp_events += 1;
            self.event(EventKind::Clamp, json!({"tick": f.tick_index, "count": f.clamped}))?;
        }
        if let Some(fault) = &f.fault {
            self.fault = Some(fault.clone());
            self.event(EventKind::Fault, json!({"tick": f.tick_index, "reason": fault}))?;
            return Err(CliError::Runtime(format!("device fault: {fault}")));
        }
        if let Some(w) = self.telemetry.as_mut() {
            if f.tick_index.is_multiple_of(self.decimation) {
                serde_json::to_writer(&mut *w, &json!({"schema": SCHEMA_VERSION, "seed": self.seed, "frame": f}))?;
                w.write_all(b"\n")?;
            }
        }
        Ok(f)
    }

    fn ticks(&self, seconds: f64) -> u64 {
        (seconds * self.device.cfg.tick_hz).round() as u64
    }

    /// Runs `n` ticks and returns the true contact temperatures after each.
    fn run(&mut self, n: u64) -> Result<Vec<ChannelArray>, CliError> {
        let mut out = Vec::with_capacity(n as usize);
        for _ in 0..n {
            self.tick()?;
            out.push(self.truth());
        }
        Ok(out)
    }

    fn truth(&self) -> ChannelArray {
        self.device.backend().truth().unwrap_or([f64::NAN; CHANNELS])
    }

    fn play(&mut self, stream: SetpointStream) -> Result<Vec<ChannelArray>, CliError> {
        let n = stream.end_tick;
        self.device.command(Command::Play(Box::new(stream)));
        self.run(n)
    }

    fn rest(&mut self, seconds: f64) -> Result<(), CliError> {
        self.device.command(Command::Stop);
        let n = self.ticks(seconds);
        self.run(n)?;
        Ok(())
    }

    fn set_external(&mut self, profile: Option<TimedTemperatureProfile>) -> Result<(), CliError> {
        match self.device.backend_mut().sim_mut() {
            Some(sim) => Ok(sim.set_external(profile)?),
            None => Err(CliError::Runtime("passthrough trials need a simulated backend".into())),
        }
    }
}

fn mean_over(cells: &[usize], t: &ChannelArray) -> f64 {
    cells.iter().map(|&k| t[k]).sum::<f64>() / cells.len() as f64
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub schema: u32,
    pub seed: u64,
    pub session_id: String,
    pub participant: String,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub experiments: BTreeMap<String, Value>,
    pub device: Value,
    pub wall_clock: Value,
}

/// Runs every configured experiment and writes the session directory.
/// On a runtime failure the partial files and a summary marked `aborted`
/// are still written.
pub fn run_session(cfg: &SessionConfig, out_dir: &Path) -> Result<Summary, CliError> {
    cfg.validate()?;
    let model = cfg.model()?;
    fs::create_dir_all(out_dir)?;
    let started = SystemTime::now();
    let clock = Instant::now();

    let plant = model.plant(cfg.seed);
    let device = Device::simulated(cfg.device, plant, model.gains, cfg.seed)?;
    let decimation = (cfg.device.tick_hz / cfg.telemetry_hz).round().max(1.0) as u64;
    let mut rig = Rig {
        device,
        events: EventLog::create(&out_dir.join("events.jsonl"), cfg.seed)?,
        telemetry: Some(BufWriter::new(File::create(out_dir.join("telemetry.jsonl"))?)),
        decimation,
        seed: cfg.seed,
        clamp_events: 0,
        fault: None,
    };
    let sid = session_id(cfg);
    rig.event(
        EventKind::SessionStart,
        json!({"session_id": sid, "participant": cfg.participant, "config": cfg}),
    )?;

    let mut trials: Vec<TrialRecord> = Vec::new();
    let mut results = BTreeMap::new();
    let outcome = (|| -> Result<(), CliError> {
        if let Some(e1) = &cfg.experiments.exp1 {
            results.insert("exp1".to_string(), run_exp1(cfg, e1, &sid, &mut rig, &mut trials)?);
        }
        if let Some(e2) = &cfg.experiments.exp2 {
            results.insert("exp2".to_string(), run_exp2(cfg, e2, &sid, &mut rig, &mut trials)?);
        }
        if let Some(e3) = &cfg.experiments.exp3 {
            results.insert("exp3".to_string(), run_exp3(cfg, e3, &sid, &mut rig, &mut trials)?);
        }
        if let Some(e4) = &cfg.experiments.exp4 {
            results.insert("exp4".to_string(), run_exp4(cfg, e4, &sid, &mut rig, &mut trials)?);
        }
        Ok(())
    })();

    let (status, error) = match &outcome {
        Ok(()) => ("completed", None),
        Err(e) => ("aborted", Some(e.to_string())),
    };
    rig.event(EventKind::SessionEnd, json!({"status": status}))?;
    rig.events.flush()?;
    if let Some(w) = rig.telemetry.as_mut() {
        w.flush()?;
    }
    let mut tw = BufWriter::new(File::create(out_dir.join("trials.jsonl"))?);
    write_jsonl(&mut tw, &trials)?;
    tw.flush()?;

    let summary = Summary {
        schema: SCHEMA_VERSION,
        seed: cfg.seed,
        session_id: sid,
        participant: cfg.participant.clone(),
        status: status.to_string(),
        error,
        experiments: results,
        device: json!({
            "ticks": rig.device.tick_index(),
            "tick_hz": cfg.device.tick_hz,
            "clamp_events": rig.clamp_events,
            "fault": rig.fault,
            "model": model,
        }),
        wall_clock: json!({
            "started_unix_s": started.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0),
            "elapsed_s": clock.elapsed().as_secs_f64(),
        }),
    };
    fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    outcome.map(|_| summary)
}

fn run_exp1(cfg: &SessionConfig, e1: &Exp1Config, sid: &str, rig: &mut Rig, trials: &mut Vec<TrialRecord>) -> Result<Value, CliError> {
    let dcfg = cfg.device;
    let mut rng = substream(cfg.seed, 1);
    let mut conditions = Vec::new();
    for sc in &e1.conditions {
        let pat = canonical_pattern(&sc.pattern).ok_or_else(|| CliError::Validation(vec![format!("unknown pattern {}", sc.pattern)]))?;
        let mut st = StaircaseState::new(sc);
        let hold = rig.ticks(sc.stimulus_duration_s);
        while !st.finished && st.trial_count < e1.max_trials {
            let stim = staircase::next_stimulus(sc, &st, dcfg.ambient_temp)?;
            let stream = staircase_stream(sc, &pat, &stim, &dcfg);
            let onset = rig.t_us();
            rig.event(
                EventKind::StimulusOn,
                json!({"experiment": "exp1", "trial": st.trial_count, "pattern": sc.pattern, "polarity": sc.polarity, "reference": stim.reference, "test": stim.test}),
            )?;
            let temps = rig.play(stream)?;
            let achieved_ref = mean_over(&pat.cells, &temps[(hold - 1) as usize]);
            let achieved_test = mean_over(&pat.cells, &temps[temps.len() - 1]);
            rig.event(EventKind::StimulusOff, json!({"experiment": "exp1", "trial": st.trial_count}))?;
            let response = cfg.observers.staircase.respond(stim.delta(), &mut rng);
            rig.event(
                EventKind::Response,
                json!({"experiment": "exp1", "trial": st.trial_count, "response": response}),
            )?;
            let next = staircase::update(sc, &st, response)?;
            let reversal = next.reversal_steps.len() > st.reversal_steps.len();
            if reversal {
                rig.event(
                    EventKind::Reversal,
                    json!({"experiment": "exp1", "trial": st.trial_count, "step": st.current_step, "count": next.reversal_steps.len()}),
                )?;
            }
            let mut rec = TrialRecord::new(sid, &cfg.participant, cfg.seed, Experiment::Exp1, trials.len())
                .condition("pattern", &sc.pattern)
                .condition("polarity", sc.polarity)
                .stimulus("reference_c", stim.reference)
                .stimulus("test_c", stim.test)
                .stimulus("step_c", st.current_step)
                .stimulus("achieved_reference_c", round6(achieved_ref))
                .stimulus("achieved_test_c", round6(achieved_test));
            rec.response = response.to_string();
            rec.onset_us = onset;
            trials.push(rec);
            st = next;
            rig.rest(e1.rest_s)?;
        }
        let jnd = staircase::jnd_estimate(sc, &st).ok();
        conditions.push(json!({
            "pattern": sc.pattern,
            "polarity": sc.polarity,
            "finished": st.finished,
            "trials": st.trial_count,
            "reversal_steps": st.reversal_steps,
            "jnd_c": jnd,
        }));
    }
    let first = e1.conditions.first().expect("validated non-empty");
    Ok(json!({
        "conditions": conditions,
        "equilibrium_p_different": equilibrium_p(first.down_factor, first.up_factor),
        "observer": cfg.observers.staircase,
    }))
}

/// Reference then test on the staircase pattern, each held for the
/// stimulus duration, with an ambient gap of `isi_s` between them.
pub fn staircase_stream(sc: &StaircaseConfig, pattern: &Pattern, stim: &Stimulus, dcfg: &DeviceConfig) -> SetpointStream {
    let hold = (sc.stimulus_duration_s * dcfg.tick_hz).round() as u64;
    let gap = (sc.isi_s * dcfg.tick_hz).round() as u64;
    let sp = |temp: f64| pattern.with_offset(temp - dcfg.ambient_temp).setpoints(dcfg);
    let mut segments = vec![(0, sp(stim.reference))];
    if gap > 0 {
        segments.push((hold, [dcfg.ambient_temp; CHANNELS]));
    }
    segments.push((hold + gap, sp(stim.test)));
    SetpointStream {
        tick_hz: dcfg.tick_hz,
        ambient_c: dcfg.ambient_temp,
        segments,
        end_tick: 2 * hold + gap,
    }
}

fn run_exp2(cfg: &SessionConfig, e2: &Exp2Config, sid: &str, rig: &mut Rig, trials: &mut Vec<TrialRecord>) -> Result<Value, CliError> {
    let dcfg = cfg.device;
    let ambient = dcfg.ambient_temp;
    let table = exp2_trial_table(&e2.design, cfg.seed);
    let mut rng = substream(cfg.seed, 2);
    let contact = rig.ticks(e2.contact_s);
    let all: Vec<usize> = (0..CHANNELS).collect();
    let mut tally: BTreeMap<(String, String), (u64, u64)> = BTreeMap::new();

    for (i, t) in table.iter().enumerate() {
        let first_c = ambient + t.first_offset;
        let second_c = ambient + t.second_offset;
        let onset = rig.t_us();
        rig.event(
            EventKind::StimulusOn,
            json!({"experiment": "exp2", "trial": i, "comparison": t.comparison.as_str(), "polarity": t.polarity, "first_c": first_c, "second_c": second_c}),
        )?;
        // Passthrough of a held object at a constant surface temperature.
        let through_device = |rig: &mut Rig, temp: f64| -> Result<f64, CliError> {
            rig.set_external(Some(TimedTemperatureProfile::constant(temp, e2.contact_s + 1.0)))?;
            rig.device.command(Command::SetMode(Mode::Passthrough));
            let temps = rig.run(contact)?;
            rig.set_external(None)?;
            Ok(mean_over(&all, temps.last().expect("contact_s > 0")))
        };
        let (felt_first, felt_second) = match t.comparison {
            Comparison::RealVsVirtual => {
                let a = through_device(rig, first_c)?;
                // The virtual replica is rendered from its nominal temperature.
                rig.device.command(Command::SetDirect([second_c; CHANNELS]));
                let temps = rig.run(contact)?;
                (a, mean_over(&all, temps.last().expect("contact_s > 0")))
            }
            Comparison::BareVsDevice => (first_c, through_device(rig, second_c)?),
        };
        rig.event(EventKind::StimulusOff, json!({"experiment": "exp2", "trial": i}))?;
        let response = cfg.observers.passthrough.respond((felt_first - felt_second).abs(), &mut rng);
        let truth = if t.equal { Response::Same } else { Response::Different };
        rig.event(EventKind::Response, json!({"experiment": "exp2", "trial": i, "response": response}))?;
        let e = tally.entry((t.comparison.as_str().to_string(), t.polarity.to_string())).or_default();
        e.1 += 1;
        if response == truth {
            e.0 += 1;
        }
        let mut rec = TrialRecord::new(sid, &cfg.participant, cfg.seed, Experiment::Exp2, trials.len())
            .condition("comparison", t.comparison.as_str())
            .condition("polarity", t.polarity)
            .stimulus("first_c", first_c)
            .stimulus("second_c", second_c)
            .stimulus("felt_first_c", round6(felt_first))
            .stimulus("felt_second_c", round6(felt_second));
        rec.response = response.to_string();
        rec.ground_truth = Some(truth.to_string());
        rec.onset_us = onset;
        trials.push(rec);
        rig.rest(e2.rest_s)?;
    }
    let cells: Vec<Value> = tally
        .iter()
        .map(|((c, p), (k, n))| json!({"comparison": c, "polarity": p, "correct": k, "n": n, "accuracy": *k as f64 / *n as f64}))
        .collect();
    let (k, n) = tally.values().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    let by_comparison: Vec<Value> = Comparison::BOTH
        .iter()
        .map(|c| {
            let (k, n) = tally
                .iter()
                .filter(|((cc, _), _)| cc == c.as_str())
                .fold((0, 0), |a, (_, b)| (a.0 + b.0, a.1 + b.1));
            json!({"comparison": c.as_str(), "accuracy": k as f64 / n as f64, "binomial_p": binomial_test(k, n, 0.5).ok()})
        })
        .collect();
    Ok(json!({
        "cells": cells,
        "by_comparison": by_comparison,
        "overall": {"correct": k, "n": n, "accuracy": k as f64 / n as f64, "binomial_p": binomial_test(k, n, 0.5)?},
        "observer": cfg.observers.passthrough,
    }))
}

fn run_exp3(cfg: &SessionConfig, e3: &Exp3Config, sid: &str, rig: &mut Rig, trials: &mut Vec<TrialRecord>) -> Result<Value, CliError> {
    let dcfg = cfg.device;
    let table = exp3_pair_table(&e3.design, cfg.seed);
    let mut rng = substream(cfg.seed, 3);
    let mut per_pol: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    let mut matrix: BTreeMap<String, BTreeMap<String, BTreeMap<String, f64>>> = BTreeMap::new();
    let mut max_timing_err_ticks: f64 = 0.0;
    for (i, pair) in table.iter().enumerate() {
        let a = canonical_pattern(&pair.first).expect("table uses canonical names");
        let b = canonical_pattern(&pair.second).expect("table uses canonical names");
        let offset = pair.polarity.sign() * e3.design.offset;
        let stream = transition_schedule(&a, &b, e3.design.hold_s, offset, &dcfg, dcfg.tick_hz)?;
        let switch = stream.segments.get(1).map_or(stream.end_tick / 2, |s| s.0);
        max_timing_err_ticks = max_timing_err_ticks
            .max((switch as f64 - e3.design.hold_s * dcfg.tick_hz).abs())
            .max((stream.end_tick as f64 - 2.0 * e3.design.hold_s * dcfg.tick_hz).abs());
        let onset = rig.t_us();
        rig.event(
            EventKind::StimulusOn,
            json!({"experiment": "exp3", "trial": i, "first": pair.first, "second": pair.second, "polarity": pair.polarity, "offset_c": offset}),
        )?;
        let temps = rig.play(stream)?;
        rig.event(EventKind::StimulusOff, json!({"experiment": "exp3", "trial": i}))?;
        let end_a = temps[switch as usize - 1];
        let end_b = temps[temps.len() - 1];
        let change = (0..CHANNELS).map(|k| (end_a[k] - end_b[k]).abs()).fold(0.0, f64::max);
        let response = cfg.observers.pattern.respond(change, &mut rng);
        let truth = if pair.changed() { Response::Different } else { Response::Same };
        rig.event(EventKind::Response, json!({"experiment": "exp3", "trial": i, "response": response}))?;
        let e = per_pol.entry(pair.polarity.to_string()).or_default();
        e.1 += 1;
        let correct = response == truth;
        if correct {
            e.0 += 1;
        }
        *matrix
            .entry(pair.polarity.to_string())
            .or_default()
            .entry(pair.first.clone())
            .or_default()
            .entry(pair.second.clone())
            .or_default() += if correct { 1.0 } else { 0.0 };
        let mut rec = TrialRecord::new(sid, &cfg.participant, cfg.seed, Experiment::Exp3, trials.len())
            .condition("first", &pair.first)
            .condition("second", &pair.second)
            .condition("polarity", pair.polarity)
            .stimulus("offset_c", offset)
            .stimulus("max_cell_change_c", round6(change));
        rec.response = response.to_string();
        rec.ground_truth = Some(truth.to_string());
        rec.onset_us = onset;
        trials.push(rec);
        rig.rest(e3.rest_s)?;
    }
    let polarities: BTreeMap<String, Value> = per_pol
        .iter()
        .map(|(p, (k, n))| {
            (
                p.clone(),
                json!({"correct": k, "n": n, "accuracy": *k as f64 / *n as f64, "binomial_p": binomial_test(*k, *n, 0.5).ok()}),
            )
        })
        .collect();
    let changed_per_polarity: BTreeMap<String, usize> = Polarity::BOTH
        .iter()
        .map(|p| (p.to_string(), table.iter().filter(|t| t.polarity == *p && t.changed()).count()))
        .collect();
    Ok(json!({
        "trials": table.len(),
        "changed_pairs_per_polarity": changed_per_polarity,
        "max_timing_error_ticks": max_timing_err_ticks,
        "accuracy": polarities,
        "correct_matrix": matrix,
        "observer": cfg.observers.pattern,
    }))
}

fn run_exp4(cfg: &SessionConfig, e4: &Exp4Config, sid: &str, rig: &mut Rig, trials: &mut Vec<TrialRecord>) -> Result<Value, CliError> {
    let dcfg = cfg.device;
    let d = &e4.design;
    let geometry = ArrayGeometry::default();
    let window = rig.ticks(e4.window_s);
    let mut per_polarity = BTreeMap::new();
    let mut commanded = None;
    for polarity in Polarity::BOTH {
        let spec = BrushSpec {
            name: format!("brush_{polarity}"),
            row: d.row,
            velocity_m_s: d.velocity_m_s,
            offset_c: polarity.sign() * d.offset.abs(),
            dwell_multiplier: d.dwell_multiplier,
            direction: SweepDirection::LeftToRight,
        };
        let sched = brush_schedule(&geometry, &spec, &dcfg)?;
        let stream = sched.to_stream(&dcfg, dcfg.tick_hz);
        commanded = Some((sched.inter_onset, sched.inter_onset_s));
        let path: Vec<usize> = sched.events.iter().map(|e| e.cell).collect();
        let mut peak = [0.0f64; CHANNELS];
        let mut peak_time = [0.0f64; CHANNELS];
        for sweep in 0..d.sweeps {
            let onset = rig.t_us();
            rig.event(
                EventKind::StimulusOn,
                json!({"experiment": "exp4", "polarity": polarity, "sweep": sweep, "cells": path, "inter_onset_s": sched.inter_onset_s}),
            )?;
            let n = stream.end_tick;
            rig.device.command(Command::Play(Box::new(stream.clone())));
            let mut temps = rig.run(n)?;
            rig.device.command(Command::Stop);
            temps.extend(rig.run(window.saturating_sub(n))?);
            rig.event(EventKind::StimulusOff, json!({"experiment": "exp4", "sweep": sweep}))?;
            let mut sweep_peak = [0.0f64; CHANNELS];
            for (j, t) in temps.iter().enumerate() {
                for k in 0..CHANNELS {
                    let dev = (t[k] - dcfg.ambient_temp).abs();
                    if dev > sweep_peak[k] {
                        sweep_peak[k] = dev;
                        if sweep == 0 {
                            peak_time[k] = j as f64 / dcfg.tick_hz;
                        }
                    }
                }
            }
            for k in 0..CHANNELS {
                peak[k] += sweep_peak[k] / d.sweeps as f64;
            }
            let mut rec = TrialRecord::new(sid, &cfg.participant, cfg.seed, Experiment::Exp4, trials.len())
                .condition("polarity", polarity)
                .condition("row", d.row)
                .stimulus("velocity_m_s", d.velocity_m_s)
                .stimulus("offset_c", spec.offset_c)
                .stimulus("inter_onset_s", sched.inter_onset_s);
            for &k in &path {
                rec = rec.stimulus(&format!("achieved_amplitude_c_cell{k}"), round6(sweep_peak[k]));
            }
            rec.onset_us = onset;
            trials.push(rec);
            rig.rest(1.0)?;
        }
        let cells: Vec<Value> = path
            .iter()
            .map(|&k| json!({"cell": k, "commanded_amplitude_c": spec.offset_c.abs(), "achieved_amplitude_c": round6(peak[k]), "time_to_peak_s": peak_time[k]}))
            .collect();
        let off_path = (0..CHANNELS).filter(|k| !path.contains(k)).map(|k| peak[k]).fold(0.0, f64::max);
        per_polarity.insert(polarity.to_string(), json!({"path": cells, "max_off_path_deviation_c": round6(off_path)}));
    }
    let (exact, secs) = commanded.expect("two polarities");
    Ok(json!({
        "velocity_m_s": d.velocity_m_s,
        "pitch_mm": geometry.pitch_mm,
        "commanded_inter_onset_ms": secs * 1e3,
        "commanded_inter_onset_exact_s": format!("{}/{}", exact.numer(), exact.denom()),
        "control_tick_ms": 1e3 / dcfg.tick_hz,
        "polarity": per_polarity,
    }))
}

/// Renders a pattern on the simulated device and reports the per-cell
/// temperatures it reached.
pub fn play_offline(model: &ModelFile, dcfg: DeviceConfig, stream: SetpointStream, seed: u64) -> Result<(Vec<ArrayFrame>, ChannelArray), CliError> {
    let mut device = Device::simulated(dcfg, model.plant(seed), model.gains, seed)?;
    let n = stream.end_tick;
    device.command(Command::Play(Box::new(stream)));
    let mut frames = Vec::with_capacity(n as usize);
    for _ in 0..n {
        frames.push(device.tick());
    }
    let truth = device.backend().truth().unwrap_or([f64::NAN; CHANNELS]);
    Ok((frames, truth))
}

/// Resolves a pattern name: `dir/<name>.json` first, then the canonical set.
pub fn find_pattern(name: &str, dir: Option<&Path>, dcfg: &DeviceConfig) -> Result<pattern::Loaded, CliError> {
    if let Some(dir) = dir {
        let path: PathBuf = dir.join(format!("{name}.json"));
        if path.exists() {
            return Ok(pattern::load_pattern_file(&path, dcfg)?);
        }
    }
    if let Some(p) = canonical_pattern(name) {
        return Ok(pattern::Loaded::Pattern(p));
    }
    Err(CliError::Validation(vec![format!("unknown pattern {name:?}")]))
}

/// Draws a seed for a sub-run from the session seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    substream(seed, tag).random()
}
