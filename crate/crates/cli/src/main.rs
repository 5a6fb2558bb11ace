use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use thermogrid::calibrate::{
    self, calibrate_plant, rise_times, simulate_step, steady_state_range, CalibrationBounds, ModelFile, RiseTargets, StepExperiment,
};
use thermogrid::control::step_response_metrics;
use thermogrid::pattern::{pattern_stream, Loaded};
use thermogrid::plant::{PlantState, SensorBank};
use thermogrid::psychophys::records::{export_csv, read_jsonl};
use thermogrid::psychophys::staircase::{equilibrium_p, run_with_observer, StaircaseConfig};
use thermogrid::psychophys::{ObserverModel, Polarity};
use thermogrid::thermo::{array_heat_budget, coolant_delta_t};
use thermogrid::CHANNELS;
use thermogrid_cli::config::SessionConfig;
use thermogrid_cli::service::{list_patterns, Service, ServiceConfig};
use thermogrid_cli::session::{find_pattern, play_offline, run_session};
use thermogrid_cli::CliError;

/// Simulation, calibration and session tooling for the 3×3 palm thermal
/// display.
///
/// Exit status: 0 on success, 2 on invalid input, 3 on a runtime fault.
#[derive(Debug, Parser)]
#[command(name = "thermogrid", version)]
struct Cli {
    /// Seed for every random draw; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Session configuration file (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Print the array heat budget and coolant temperature rise.
    Budget,
    /// Simulate a temperature step and write the trace as CSV.
    Simulate(SimulateArgs),
    /// Fit the plant to rise-time targets and write a model file.
    Calibrate(CalibrateArgs),
    /// Run the adaptive staircase against a simulated observer.
    Staircase(StaircaseArgs),
    /// List, show or play spatial patterns.
    Patterns {
        #[command(subcommand)]
        action: PatternCmd,
        /// Directory of extra pattern files.
        #[arg(long, global = true, default_value = "patterns")]
        dir: PathBuf,
    },
    /// Run the HTTP/WebSocket service.
    Serve(ServeArgs),
    /// Run the experiments in the config file with simulated observers.
    Run,
    /// Convert a trials.jsonl file to CSV.
    ExportCsv { trials: PathBuf },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StepMode {
    Warm,
    Cool,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Step size from ambient, °C; the sign is taken from --mode when given.
    #[arg(long, allow_negative_numbers = true)]
    step: f64,
    #[arg(long, value_enum)]
    mode: Option<StepMode>,
    /// Trace length, s.
    #[arg(long, default_value_t = 8.0)]
    duration: f64,
    /// Drive a constant current instead of closing the loop, A (signed;
    /// positive cools).
    #[arg(long, allow_negative_numbers = true)]
    open_loop_current: Option<f64>,
    /// Add sensor noise drawn from --seed.
    #[arg(long)]
    noise: bool,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[arg(long, default_value_t = 1.4)]
    warm_rise: f64,
    #[arg(long, default_value_t = 2.4)]
    cool_rise: f64,
}

#[derive(Debug, Args)]
struct StaircaseArgs {
    /// Observer as `mu=..,sigma=..[,lapse=..,guess=..,seed=..]`.
    #[arg(long, default_value = "mu=2.5,sigma=0.8")]
    observer: ObserverModel,
    #[arg(long, default_value_t = 1)]
    runs: usize,
    #[arg(long, default_value = "line")]
    pattern: String,
    #[arg(long, value_enum, default_value = "warm")]
    polarity: PolarityArg,
    #[arg(long, default_value_t = 500)]
    max_trials: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PolarityArg {
    Warm,
    Cool,
}

#[derive(Debug, Subcommand)]
enum PatternCmd {
    List,
    Show {
        name: String,
    },
    /// Play a pattern on the simulated device and write the trace as CSV.
    Play {
        name: String,
        #[arg(long, allow_negative_numbers = true)]
        offset: Option<f64>,
        #[arg(long, default_value_t = 3.0)]
        duration: f64,
    },
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: std::net::SocketAddr,
    /// Directory of extra pattern files served by GET /patterns.
    #[arg(long, default_value = "patterns")]
    pattern_dir: PathBuf,
}

fn load_config(cli: &Cli) -> Result<SessionConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => SessionConfig::load(p)?,
        None => SessionConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// `--out` as a file, or stdout.
fn output(out: &Option<PathBuf>) -> Result<Box<dyn Write>, CliError> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn budget() -> Result<(), CliError> {
    let m = ModelFile::default();
    let q = array_heat_budget(&m.tem);
    let dt = coolant_delta_t(q, &m.coolant)?;
    println!("modules                 {}", m.tem.n_modules);
    println!("module q_max            {:.3} W", m.tem.q_max);
    println!("module i_max            {:.3} A", m.tem.i_max);
    println!("module r_el             {:.3} ohm", m.tem.r_electrical);
    println!("Q_max array             {q:.2} W");
    println!("coolant flow            {:.2} ml/s", m.coolant.flow_rate * 1e6);
    println!("coolant capacity rate   {:.3} W/K", m.coolant.capacity_rate());
    println!("coolant delta T         {dt:.2} K");
    Ok(())
}

fn simulate(cli: &Cli, a: &SimulateArgs) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    let model = cfg.model()?;
    let step = match a.mode {
        Some(StepMode::Warm) => a.step.abs(),
        Some(StepMode::Cool) => -a.step.abs(),
        None => a.step,
    };
    let mut problems = Vec::new();
    if step == 0.0 || !step.is_finite() || step.abs() > cfg.device.safety_envelope {
        problems.push(format!("step: {step} must be non-zero and within ±{} °C", cfg.device.safety_envelope));
    }
    if !(a.duration > 0.0 && a.duration <= 600.0) {
        problems.push("duration: must be in (0, 600] s".into());
    }
    if !problems.is_empty() {
        return Err(CliError::Validation(problems));
    }
    let plant = model.plant(cfg.seed);
    let mut w = output(&cli.out)?;
    let mut header = String::from("t_s,setpoint_c");
    for kind in ["cold", "measured", "current"] {
        for k in 0..CHANNELS {
            header.push_str(&format!(",{kind}{k}"));
        }
    }
    writeln!(w, "{header}")?;
    let row = |w: &mut dyn Write, t: f64, sp: f64, cold: &[f64; CHANNELS], meas: &[f64; CHANNELS], cur: &[f64; CHANNELS]| -> io::Result<()> {
        write!(w, "{t:.3},{sp:.4}")?;
        for v in cold.iter().chain(meas).chain(cur) {
            write!(w, ",{v:.6}")?;
        }
        writeln!(w)
    };
    let ambient = cfg.device.ambient_temp;
    let mean_cold;
    if let Some(i) = a.open_loop_current {
        if !(i.abs() <= model.tem.i_max) {
            return Err(CliError::Validation(vec![format!(
                "open_loop_current: |{i}| exceeds i_max {}",
                model.tem.i_max
            )]));
        }
        let dt = 1.0 / cfg.device.tick_hz;
        let mut state = PlantState::uniform(ambient);
        let mut sensors = a.noise.then(|| SensorBank::new(&plant, cfg.seed));
        let currents = [i; CHANNELS];
        let mut t = Vec::new();
        let mut y = Vec::new();
        let n = (a.duration / dt).round() as usize;
        for j in 0..=n {
            let meas = sensors.as_mut().map_or(state.t_sensor, |s| s.read_all(&state));
            row(&mut *w, j as f64 * dt, ambient + step, &state.t_cold, &meas, &currents)?;
            t.push(j as f64 * dt);
            y.push(state.t_cold.iter().sum::<f64>() / CHANNELS as f64);
            state = plant.step(&state, &currents, dt)?;
        }
        mean_cold = thermogrid::control::TimeSeries::new(t, y);
    } else {
        let exp = StepExperiment {
            ambient_c: ambient,
            step_c: step,
            duration_s: a.duration,
            tick_hz: cfg.device.tick_hz,
            noise_seed: a.noise.then_some(cfg.seed),
        };
        let tr = simulate_step(&plant, &model.gains, &exp)?;
        for j in 0..tr.t.len() {
            row(&mut *w, tr.t[j], tr.setpoint[j], &tr.cold[j], &tr.measured[j], &tr.current[j])?;
        }
        mean_cold = tr.mean_cold();
    }
    w.flush()?;
    match step_response_metrics(&mean_cold, 0.1, 0.9) {
        Ok(m) => eprintln!("10-90% rise time {:.3} s, overshoot {:.1}%", m.rise_time, m.overshoot_pct),
        Err(e) => eprintln!("no rise time: {e}"),
    }
    Ok(())
}

fn calibrate_cmd(cli: &Cli, a: &CalibrateArgs) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    let base = cfg.model()?;
    let targets = RiseTargets {
        warm_s: a.warm_rise,
        cool_s: a.cool_rise,
    };
    let cal = calibrate_plant(
        &targets,
        &base.gains,
        &base.tem,
        &base.coolant,
        &base.channel,
        &CalibrationBounds::default(),
    )?;
    let model = ModelFile {
        contact_spread: base.contact_spread,
        ..ModelFile::from_calibration(&cal, targets, base.tem, base.coolant, base.gains)
    };
    let plant = model.plant(cfg.seed);
    let (coldest, warmest) = steady_state_range(&plant, base.gains.output_limit)?;
    let (w_rise, c_rise) = rise_times(&plant, &base.gains)?;
    eprintln!(
        "fit after {} evaluations: warm rise {w_rise:.3} s, cool rise {c_rise:.3} s, steady range {coldest:.1}..{warmest:.1} °C (tolerance ±{:.0}%)",
        cal.evaluations,
        calibrate::RISE_TOLERANCE * 100.0
    );
    let mut w = output(&cli.out)?;
    writeln!(w, "{}", model.to_json())?;
    w.flush()?;
    Ok(())
}

/// Difference at which the observer says "different" with probability `p`.
fn observer_quantile(o: &ObserverModel, p: f64) -> Option<f64> {
    let (mut lo, mut hi) = (0.0, 100.0);
    if o.p_different(hi) < p || o.p_different(lo) > p {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if o.p_different(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

fn staircase_cmd(cli: &Cli, a: &StaircaseArgs) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    let polarity = match a.polarity {
        PolarityArg::Warm => Polarity::Warm,
        PolarityArg::Cool => Polarity::Cool,
    };
    let sc = StaircaseConfig::new(&a.pattern, polarity);
    let mut problems = Vec::new();
    if let Err(e) = sc.validate(cfg.device.safety_envelope) {
        problems.push(format!("staircase: {e}"));
    }
    if let Err(e) = a.observer.validate() {
        problems.push(format!("observer: {e}"));
    }
    if a.runs == 0 || a.max_trials == 0 {
        problems.push("runs and max_trials must be positive".into());
    }
    if !problems.is_empty() {
        return Err(CliError::Validation(problems));
    }
    let seed = cli.seed.unwrap_or(a.observer.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jnds = Vec::new();
    let mut trials = Vec::new();
    for _ in 0..a.runs {
        let run = run_with_observer(&sc, &a.observer, cfg.device.ambient_temp, a.max_trials, &mut rng)?;
        trials.push(run.state.trial_count);
        if let Some(j) = run.jnd {
            jnds.push(j);
        }
    }
    let n = jnds.len() as f64;
    let mean = jnds.iter().sum::<f64>() / n;
    let sd = (jnds.iter().map(|j| (j - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    let p_eq = equilibrium_p(sc.down_factor, sc.up_factor);
    let oracle = observer_quantile(&a.observer, p_eq);
    let report = json!({
        "seed": seed,
        "runs": a.runs,
        "finished": jnds.len(),
        "mean_jnd_c": if jnds.is_empty() { None } else { Some(mean) },
        "sd_jnd_c": if jnds.len() > 1 { Some(sd) } else { None },
        "mean_trials": trials.iter().sum::<usize>() as f64 / trials.len() as f64,
        "equilibrium_p_different": p_eq,
        "observer_delta_at_equilibrium_c": oracle,
        "observer": a.observer,
    });
    let mut w = output(&cli.out)?;
    writeln!(w, "{}", serde_json::to_string_pretty(&report)?)?;
    w.flush()?;
    Ok(())
}

fn patterns_cmd(cli: &Cli, action: &PatternCmd, dir: &Path) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    let dcfg = cfg.device;
    let dir = dir.is_dir().then_some(dir);
    match action {
        PatternCmd::List => {
            let (list, problems) = list_patterns(dir, &dcfg);
            for l in &list {
                match l {
                    Loaded::Pattern(p) => println!("{:<16} pattern  cells {:?}  offset {:+} °C", p.name, p.cells, p.offset_c),
                    Loaded::Brush(b) => println!(
                        "{:<16} brush    row {}  {} m/s  offset {:+} °C  inter-onset {:.3} ms",
                        b.spec.name,
                        b.spec.row,
                        b.spec.velocity_m_s,
                        b.spec.offset_c,
                        b.inter_onset_s * 1e3
                    ),
                }
            }
            for p in problems {
                eprintln!("skipped {p}");
            }
        }
        PatternCmd::Show { name } => {
            let text = match find_pattern(name, dir, &dcfg)? {
                Loaded::Pattern(p) => {
                    let mut grid = String::new();
                    for r in 0..3 {
                        for c in 0..3 {
                            grid.push_str(if p.contains(3 * r + c) { " #" } else { " ." });
                        }
                        grid.push('\n');
                    }
                    format!("{}\n{grid}", p.to_json())
                }
                Loaded::Brush(b) => serde_json::to_string_pretty(&b)?,
            };
            let mut w = output(&cli.out)?;
            write!(w, "{text}")?;
            w.flush()?;
        }
        PatternCmd::Play { name, offset, duration } => {
            let model = cfg.model()?;
            let stream = match find_pattern(name, dir, &dcfg)? {
                Loaded::Pattern(p) => {
                    let p = offset.map_or(p.clone(), |o| p.with_offset(o));
                    pattern_stream(&p, *duration, &dcfg, dcfg.tick_hz)?
                }
                Loaded::Brush(b) => b.to_stream(&dcfg, dcfg.tick_hz),
            };
            let (frames, truth) = play_offline(&model, dcfg, stream, cfg.seed)?;
            let mut w = output(&cli.out)?;
            let mut header = String::from("t_s");
            for kind in ["setpoint", "measured"] {
                for k in 0..CHANNELS {
                    header.push_str(&format!(",{kind}{k}"));
                }
            }
            writeln!(w, "{header}")?;
            for f in &frames {
                write!(w, "{:.3}", f.time_s)?;
                for v in f.setpoints.iter().chain(&f.measured) {
                    write!(w, ",{v:.4}")?;
                }
                writeln!(w)?;
            }
            w.flush()?;
            let cells: Vec<String> = truth.iter().map(|t| format!("{t:.2}")).collect();
            eprintln!("contact temperatures at end: [{}] °C", cells.join(", "));
        }
    }
    Ok(())
}

fn serve(cli: &Cli, a: &ServeArgs) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(CliError::Validation(problems));
    }
    let out_dir = cli.out.clone().or(cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("service-out"));
    let scfg = ServiceConfig {
        device: cfg.device,
        model: cfg.model()?,
        seed: cfg.seed,
        participant: cfg.participant.clone(),
        rest_s: cfg.experiments.exp1.as_ref().map_or(2.0, |e| e.rest_s),
        out_dir,
        pattern_dir: a.pattern_dir.is_dir().then(|| a.pattern_dir.clone()),
        addr: a.addr,
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let svc = Service::start(scfg).await?;
        eprintln!("listening on http://{}", svc.addr);
        let _ = tokio::signal::ctrl_c().await;
        eprintln!("shutting down");
        svc.shutdown().await
    })
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    let cfg = if cli.config.is_none() {
        SessionConfig {
            seed: cfg.seed,
            ..SessionConfig::all_experiments()
        }
    } else {
        cfg
    };
    let out = cli.out.clone().or(cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("session-out"));
    let summary = run_session(&cfg, &out)?;
    eprintln!("session {} {} -> {}", summary.session_id, summary.status, out.display());
    Ok(())
}

fn export(cli: &Cli, trials: &Path) -> Result<(), CliError> {
    let f = File::open(trials).map_err(|e| CliError::Validation(vec![format!("{}: {e}", trials.display())]))?;
    let recs = read_jsonl(BufReader::new(f))?;
    let w = output(&cli.out)?;
    export_csv(w, &recs)?;
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Cmd::Budget => budget(),
        Cmd::Simulate(a) => simulate(cli, a),
        Cmd::Calibrate(a) => calibrate_cmd(cli, a),
        Cmd::Staircase(a) => staircase_cmd(cli, a),
        Cmd::Patterns { action, dir } => patterns_cmd(cli, action, dir),
        Cmd::Serve(a) => serve(cli, a),
        Cmd::Run => run(cli),
        Cmd::ExportCsv { trials } => export(cli, trials),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
