//! `hydrolab`: run scenarios, tune, recompute metrics, or serve a live session.
//!
//! Exit codes: 0 ok, 1 invalid input, 2 I/O or bind failure, 3 tuning
//! failure, 4 simulation failure, 64 usage error. Failures print a single
//! `error[Kind]: message` line on stderr.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use hydrolab::control::ControllerMode;
use hydrolab::presets::{PresetError, PresetLibrary};
use hydrolab::scenario::{
    compute_metrics, format_metrics_table, parse_scenario, ParseError, ScenarioError, DEFAULT_BAND_PCT,
};
use hydrolab::series::TimeSeries;
use hydrolab::tuning::{find_ultimate_gain, zn_gains, RigPlant, TuneError, UltimateGainSearch};
use hydrolab_runtime::{Command, Server, SessionConfig, SessionError, SessionHandle, Speed};

#[derive(Parser)]
#[command(name = "hydrolab", version, about = "Water-tank level control simulator")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario file headless and write its CSV log.
    Simulate(SimulateArgs),
    /// Find the ultimate gain of a preset and print Ziegler-Nichols gains.
    Tune(TuneArgs),
    /// Start a live session behind an NDJSON/WebSocket server.
    Serve(ServeArgs),
    /// Recompute transient metrics from an existing CSV log.
    Metrics(MetricsArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Override the scenario step size, seconds.
    #[arg(long)]
    dt: Option<f64>,
    /// Print the metrics table after the run.
    #[arg(long)]
    metrics: bool,
    #[arg(long, default_value_t = DEFAULT_BAND_PCT)]
    band: f64,
}

#[derive(Args)]
struct TuneArgs {
    #[arg(long, required_unless_present = "formulas_only")]
    plant: Option<String>,
    /// Operating point, percent of span. Defaults to the preset setpoint.
    #[arg(long)]
    sp: Option<f64>,
    #[arg(long, default_value_t = 0.05)]
    tol: f64,
    #[arg(long, default_value_t = 0.1)]
    kp_lo: f64,
    #[arg(long, default_value_t = 1000.0)]
    kp_hi: f64,
    #[arg(long, requires = "pu")]
    ku: Option<f64>,
    #[arg(long, requires = "ku")]
    pu: Option<f64>,
    /// Skip the experiment and apply the rules to --ku and --pu.
    #[arg(long, requires_all = ["ku", "pu"], conflicts_with = "plant")]
    formulas_only: bool,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    bind: String,
    #[arg(long, default_value = "paper_default")]
    preset: String,
    /// Simulated seconds per wall second, or `inf`.
    #[arg(long, default_value = "1")]
    speed: Speed,
    #[arg(long, default_value = "hydrolab-session.csv")]
    log: PathBuf,
    /// Directory searched by `load_scenario`.
    #[arg(long)]
    scenario_dir: Option<PathBuf>,
    /// Stop after this many wall-clock seconds.
    #[arg(long)]
    run_for: Option<f64>,
    /// Leave the clock stopped until a client sends `start`.
    #[arg(long, conflicts_with = "run_for")]
    paused: bool,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    csv: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BAND_PCT)]
    band: f64,
}

#[derive(Debug)]
enum CliError {
    Input { kind: &'static str, message: String },
    Io(String),
    Tune(TuneError),
    Simulation(String),
}

impl CliError {
    fn input(kind: &'static str, message: impl ToString) -> Self {
        CliError::Input {
            kind,
            message: message.to_string(),
        }
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Input { .. } => 1,
            CliError::Io(_) => 2,
            CliError::Tune(_) => 3,
            CliError::Simulation(_) => 4,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Input { kind, .. } => kind,
            CliError::Io(_) => "IoError",
            CliError::Tune(e) => e.name(),
            CliError::Simulation(_) => "SimulationError",
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Input { message, .. } | CliError::Io(message) | CliError::Simulation(message) => message.clone(),
            CliError::Tune(e) => {
                let text = e.to_string();
                text.strip_prefix(&format!("{}: ", e.name()))
                    .map(str::to_string)
                    .unwrap_or(text)
            }
        }
    }
}

impl From<ParseError> for CliError {
    fn from(e: ParseError) -> Self {
        let kind = match e {
            ParseError::Syntax { .. } => "SyntaxError",
            ParseError::Validation { .. } => "ValidationError",
        };
        CliError::input(kind, e)
    }
}

impl From<PresetError> for CliError {
    fn from(e: PresetError) -> Self {
        match e {
            PresetError::Io { ref path, .. } => CliError::io(path, &e),
            PresetError::Unknown(_) => CliError::input("UnknownPreset", e),
            _ => CliError::input("PresetError", e),
        }
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Parse(p) => p.into(),
            ScenarioError::Preset(p) => p.into(),
            ScenarioError::Engine(e) => CliError::Simulation(e.to_string()),
        }
    }
}

impl From<SessionError> for CliError {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::Config(m) => CliError::input("ValidationError", m),
            SessionError::Io { ref path, .. } => CliError::io(path, &e),
            SessionError::Closed => CliError::Simulation(e.to_string()),
        }
    }
}

fn simulate(args: SimulateArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&args.scenario).map_err(|e| CliError::io(&args.scenario, e))?;
    let mut scenario = parse_scenario(&text)?;
    if let Some(dt) = args.dt {
        scenario = scenario.with_dt(dt)?;
    }
    let series = scenario.run(&PresetLibrary::from_env())?;
    let csv = series.to_csv_string();
    fs::write(&args.out, &csv).map_err(|e| CliError::io(&args.out, e))?;
    if args.metrics {
        // Measure what was written so `metrics --csv` reproduces the table.
        let logged = TimeSeries::read_csv(csv.as_bytes()).map_err(|e| CliError::input("CsvError", e))?;
        print_metrics(&logged, args.band)?;
    }
    Ok(())
}

fn print_metrics(series: &TimeSeries, band: f64) -> Result<(), CliError> {
    let metrics = compute_metrics(series, band).map_err(|e| CliError::input("MetricsError", e))?;
    print!("{}", format_metrics_table(&metrics));
    Ok(())
}

fn metrics(args: MetricsArgs) -> Result<(), CliError> {
    let file = fs::File::open(&args.csv).map_err(|e| CliError::io(&args.csv, e))?;
    let series = TimeSeries::read_csv(io::BufReader::new(file)).map_err(|e| CliError::input("CsvError", e))?;
    print_metrics(&series, args.band)
}

/// Up to three decimals, trailing zeros dropped.
fn num(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

fn gain_table(ku: f64, pu: f64) -> Result<String, CliError> {
    let mut out = format!("{:<5}{:>12}{:>12}{:>12}\n", "mode", "Kp", "Ki", "Kd");
    for mode in [
        ControllerMode::P,
        ControllerMode::PD,
        ControllerMode::PI,
        ControllerMode::PID,
    ] {
        let g = zn_gains(mode, ku, pu).map_err(|e| match e {
            TuneError::InvalidArgument(m) => CliError::input("ValidationError", m),
            e => CliError::Tune(e),
        })?;
        let opt = |used: bool, v: f64| if used { num(v) } else { "-".to_string() };
        out.push_str(&format!(
            "{:<5}{:>12}{:>12}{:>12}\n",
            mode.name().to_uppercase(),
            num(g.kp),
            opt(mode.uses_integral(), g.ki),
            opt(matches!(mode, ControllerMode::PD | ControllerMode::PID), g.kd),
        ));
    }
    Ok(out)
}

fn tune(args: TuneArgs) -> Result<(), CliError> {
    if args.formulas_only {
        let (ku, pu) = (args.ku.unwrap_or_default(), args.pu.unwrap_or_default());
        print!("{}", gain_table(ku, pu)?);
        return Ok(());
    }
    let name = args.plant.as_deref().unwrap_or_default();
    let preset = PresetLibrary::from_env().resolve(name)?;
    let sp = args.sp.unwrap_or(preset.control.setpoint_pct);
    if !(0.0..=100.0).contains(&sp) {
        return Err(CliError::input(
            "ValidationError",
            format!("setpoint {sp} outside 0..100"),
        ));
    }
    let mut search = UltimateGainSearch::new(sp, args.kp_lo, args.kp_hi);
    search.tol = args.tol;
    let result = find_ultimate_gain(&RigPlant::new(preset.rig), &search).map_err(|e| match e {
        TuneError::InvalidArgument(m) => CliError::input("ValidationError", m),
        e => CliError::Tune(e),
    })?;
    println!("Ku = {}", num(result.ku));
    println!("Pu = {} s", num(result.pu_s));
    println!(
        "decay ratio {:.3} over {} periods (period std {:.2e} s), {} iterations",
        result.decay_ratio, result.periods_used, result.period_std_s, result.iterations
    );
    print!("{}", gain_table(result.ku, result.pu_s)?);
    Ok(())
}

fn serve(args: ServeArgs) -> Result<(), CliError> {
    if let Some(s) = args.run_for {
        if !(s.is_finite() && s > 0.0) {
            return Err(CliError::input("ValidationError", "--run-for must be > 0"));
        }
    }
    let presets = PresetLibrary::from_env();
    let config = SessionConfig {
        speed: args.speed,
        log_path: Some(args.log.clone()),
        scenario_dir: args.scenario_dir.clone(),
        ..SessionConfig::from_preset(&presets, &args.preset)?
    };
    let dt = config.dt;
    let session = SessionHandle::start(config)?;
    let server = match Server::bind(args.bind.as_str(), session.clone()) {
        Ok(s) => s,
        Err(e) => {
            let _ = session.shutdown();
            return Err(CliError::Io(format!("cannot bind {}: {e}", args.bind)));
        }
    };
    println!("listening on {}", server.local_addr());
    let _ = io::stdout().flush();

    let (stop_tx, stop_rx) = crossbeam_channel::bounded::<()>(4);
    let on_signal = stop_tx.clone();
    ctrlc::set_handler(move || {
        let _ = on_signal.try_send(());
    })
    .map_err(|e| CliError::Simulation(format!("cannot install signal handler: {e}")))?;

    match args.run_for {
        // Finite speed: stop on the exact step the wall-clock budget buys.
        Some(secs) if !args.speed.is_unlimited() => {
            let steps = (secs * args.speed.0 / dt).round() as u64;
            let s = session.clone();
            thread::spawn(move || {
                let _ = s.run_to(steps);
                let _ = stop_tx.try_send(());
            });
        }
        Some(secs) => {
            session
                .apply(Command::Start {})
                .map_err(|e| CliError::Simulation(e.to_string()))?;
            thread::spawn(move || {
                thread::sleep(Duration::from_secs_f64(secs));
                let _ = stop_tx.try_send(());
            });
        }
        None if !args.paused => {
            session
                .apply(Command::Start {})
                .map_err(|e| CliError::Simulation(e.to_string()))?;
        }
        None => {}
    }

    let _ = stop_rx.recv();
    server.shutdown();
    let summary = session.shutdown()?;
    eprintln!(
        "stopped at t = {} s, {} rows in {}",
        num(summary.steps as f64 * dt),
        summary.log_rows,
        args.log.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(64)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Cmd::Simulate(a) => simulate(a),
        Cmd::Tune(a) => tune(a),
        Cmd::Serve(a) => serve(a),
        Cmd::Metrics(a) => metrics(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.message().replace('\n', " ");
            eprintln!("error[{}]: {message}", e.kind());
            ExitCode::from(e.exit_code())
        }
    }
}
