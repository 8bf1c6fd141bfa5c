//! The live session: one stepper thread owns the loop, everything else talks
//! to it through a command queue.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, Weak};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, unbounded, Receiver, RecvTimeoutError, Sender, TryRecvError, TrySendError};
use hydrolab::control::ControllerMode;
use hydrolab::engine::{ControllerSetup, InitialConditions, LoopEngine};
use hydrolab::plant::Rig;
use hydrolab::presets::PresetLibrary;
use hydrolab::scenario::{event_step, parse_scenario};
use hydrolab::tuning::{find_ultimate_gain, zn_gains, RigPlant, TuneError, UltimateGainResult, UltimateGainSearch};
use serde_json::json;
use thiserror::Error;

use crate::log::{LoopRecord, ScheduledCommand, SessionLog};
use crate::protocol::{Clock, Command, Hello, Snapshot, Speed, TuneParams, PROTOCOL_VERSION};

pub const DEFAULT_SUBSCRIBER_CAPACITY: usize = 256;
pub const DEFAULT_KP_LO: f64 = 0.1;
pub const DEFAULT_KP_HI: f64 = 1000.0;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("ConfigError: {0}")]
    Config(String),
    #[error("IoError: {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("SessionClosed")]
    Closed,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CommandError {
    #[error("ValidationError: {0}")]
    Validation(String),
    #[error("SessionClosed")]
    SessionClosed,
}

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub rig: Rig,
    pub control: ControllerSetup,
    pub initial: InitialConditions,
    pub dt: f64,
    pub speed: Speed,
    /// Name reported in the hello frame when the rig came from a preset.
    pub preset: Option<String>,
    /// CSV log; a `.meta.json` sidecar is written next to it.
    pub log_path: Option<PathBuf>,
    /// Directory searched by `load_scenario`.
    pub scenario_dir: Option<PathBuf>,
    pub presets: PresetLibrary,
    /// Commands applied before the given steps, for scripted or replayed runs.
    pub schedule: Vec<ScheduledCommand>,
    pub subscriber_capacity: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            rig: Rig::default(),
            control: ControllerSetup::default(),
            initial: InitialConditions::default(),
            dt: 0.1,
            speed: Speed(1.0),
            preset: None,
            log_path: None,
            scenario_dir: None,
            presets: PresetLibrary::builtin(),
            schedule: Vec::new(),
            subscriber_capacity: DEFAULT_SUBSCRIBER_CAPACITY,
        }
    }
}

impl SessionConfig {
    pub fn from_preset(presets: &PresetLibrary, name: &str) -> Result<SessionConfig, SessionError> {
        let preset = presets.resolve(name).map_err(|e| SessionError::Config(e.to_string()))?;
        Ok(SessionConfig {
            rig: preset.rig,
            control: preset.control,
            preset: Some(name.to_string()),
            presets: presets.clone(),
            ..SessionConfig::default()
        })
    }

    fn record(&self) -> LoopRecord {
        LoopRecord {
            preset: self.preset.clone(),
            dt: self.dt,
            rig: self.rig,
            control: self.control,
            initial: self.initial,
        }
    }

    pub fn validate(&self) -> Result<(), SessionError> {
        if !(self.dt > 0.0 && self.dt <= 1.0) {
            return Err(SessionError::Config(format!("dt must be in (0, 1] s, got {}", self.dt)));
        }
        self.speed.validate().map_err(SessionError::Config)?;
        if self.subscriber_capacity == 0 {
            return Err(SessionError::Config("subscriber capacity must be > 0".into()));
        }
        if self.schedule.windows(2).any(|w| w[1].step < w[0].step) {
            return Err(SessionError::Config("schedule must be sorted by step".into()));
        }
        for sc in &self.schedule {
            if sc.command.to_action().is_none() {
                return Err(SessionError::Config(format!(
                    "`{}` cannot be scheduled",
                    sc.command.name()
                )));
            }
            sc.command.validate().map_err(SessionError::Config)?;
        }
        self.record()
            .engine()
            .map_err(|e| SessionError::Config(e.to_string()))?;
        Ok(())
    }
}

fn hello_for(record: &LoopRecord) -> Hello {
    Hello {
        version: PROTOCOL_VERSION.to_string(),
        config: json!(record),
    }
}

/// Returned by [`SessionHandle::shutdown`].
#[derive(Debug, Clone, PartialEq)]
pub struct SessionSummary {
    pub steps: u64,
    pub log_path: Option<PathBuf>,
    pub log_rows: u64,
}

type Reply<T> = Sender<T>;

enum Request {
    Command(Command, Reply<Result<u64, CommandError>>),
    RunTo(u64, Reply<u64>),
    Shutdown(Reply<Result<SessionSummary, SessionError>>),
}

struct Subscriber {
    tx: Sender<Arc<Snapshot>>,
    /// Kept to drop the oldest frame when the subscriber falls behind.
    rx: Receiver<Arc<Snapshot>>,
    /// Dead once the [`Subscription`] is dropped.
    alive: Weak<()>,
}

struct Shared {
    subscribers: Mutex<Vec<Subscriber>>,
    latest: Mutex<Arc<Snapshot>>,
    hello: Mutex<Hello>,
    capacity: usize,
}

impl Shared {
    fn publish(&self, snap: Snapshot) {
        let snap = Arc::new(snap);
        *self.latest.lock().expect("latest lock") = snap.clone();
        let mut subs = self.subscribers.lock().expect("subscriber lock");
        subs.retain(|s| loop {
            if s.alive.strong_count() == 0 {
                break false;
            }
            match s.tx.try_send(snap.clone()) {
                Ok(()) => break true,
                Err(TrySendError::Full(_)) => {
                    let _ = s.rx.try_recv();
                }
                Err(TrySendError::Disconnected(_)) => break false,
            }
        });
    }
}

/// Live snapshot feed. Slow readers lose the oldest frames, never the newest.
pub struct Subscription {
    rx: Receiver<Arc<Snapshot>>,
    _alive: Arc<()>,
}

impl Subscription {
    pub fn receiver(&self) -> &Receiver<Arc<Snapshot>> {
        &self.rx
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Option<Arc<Snapshot>> {
        self.rx.recv_timeout(timeout).ok()
    }

    pub fn try_recv(&self) -> Option<Arc<Snapshot>> {
        self.rx.try_recv().ok()
    }
}

/// Cloneable handle to a running session.
#[derive(Clone)]
pub struct SessionHandle {
    tx: Sender<Request>,
    shared: Arc<Shared>,
    join: Arc<Mutex<Option<JoinHandle<()>>>>,
}

impl SessionHandle {
    /// Start the stepper thread. The session begins paused at t = 0.
    pub fn start(config: SessionConfig) -> Result<SessionHandle, SessionError> {
        config.validate()?;
        let record = config.record();
        let engine = record.engine().map_err(|e| SessionError::Config(e.to_string()))?;
        let log = match &config.log_path {
            Some(path) => Some(
                SessionLog::create(path, record.clone()).map_err(|source| SessionError::Io {
                    path: path.clone(),
                    source,
                })?,
            ),
            None => None,
        };
        let shared = Arc::new(Shared {
            subscribers: Mutex::new(Vec::new()),
            latest: Mutex::new(Arc::new(snapshot_of(&engine, config.speed, true, &[]))),
            hello: Mutex::new(hello_for(&record)),
            capacity: config.subscriber_capacity,
        });
        let (tx, rx) = unbounded();
        let stepper = Stepper {
            schedule: config.schedule.iter().cloned().collect(),
            base_schedule: config.schedule.clone(),
            record,
            engine,
            paused: true,
            speed: config.speed,
            log,
            stop_at: None,
            run_waiters: Vec::new(),
            tuning: None,
            tune_alarm: None,
            anchor: None,
            scenario_dir: config.scenario_dir.clone(),
            presets: config.presets.clone(),
            shared: shared.clone(),
            rx,
        };
        let join = thread::Builder::new()
            .name("hydrolab-session".into())
            .spawn(move || stepper.run())
            .map_err(|e| SessionError::Config(format!("cannot spawn stepper: {e}")))?;
        Ok(SessionHandle {
            tx,
            shared,
            join: Arc::new(Mutex::new(Some(join))),
        })
    }

    /// Enqueue a command and wait until it has been applied at a step
    /// boundary; returns that step index.
    pub fn apply(&self, command: Command) -> Result<u64, CommandError> {
        command.validate().map_err(CommandError::Validation)?;
        let (reply, wait) = bounded(1);
        self.tx
            .send(Request::Command(command, reply))
            .map_err(|_| CommandError::SessionClosed)?;
        wait.recv().map_err(|_| CommandError::SessionClosed)?
    }

    /// Run until `step` steps have completed, then pause. Blocks.
    pub fn run_to(&self, step: u64) -> Result<u64, SessionError> {
        let (reply, wait) = bounded(1);
        self.tx
            .send(Request::RunTo(step, reply))
            .map_err(|_| SessionError::Closed)?;
        wait.recv().map_err(|_| SessionError::Closed)
    }

    pub fn subscribe(&self) -> Subscription {
        let (tx, rx) = bounded(self.shared.capacity);
        let alive = Arc::new(());
        let _ = tx.try_send(self.snapshot());
        self.shared
            .subscribers
            .lock()
            .expect("subscriber lock")
            .push(Subscriber {
                tx,
                rx: rx.clone(),
                alive: Arc::downgrade(&alive),
            });
        Subscription { rx, _alive: alive }
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.shared.latest.lock().expect("latest lock").clone()
    }

    pub fn hello(&self) -> Hello {
        self.shared.hello.lock().expect("hello lock").clone()
    }

    /// Stop the stepper, flush the log and join the thread.
    pub fn shutdown(&self) -> Result<SessionSummary, SessionError> {
        let (reply, wait) = bounded(1);
        self.tx
            .send(Request::Shutdown(reply))
            .map_err(|_| SessionError::Closed)?;
        let summary = wait.recv().map_err(|_| SessionError::Closed)?;
        if let Some(join) = self.join.lock().expect("join lock").take() {
            let _ = join.join();
        }
        summary
    }
}

fn snapshot_of(engine: &LoopEngine, speed: Speed, paused: bool, extra_alarms: &[String]) -> Snapshot {
    let row = engine.row();
    let plant = engine.plant();
    let mut alarms = Vec::new();
    if plant.overflow {
        alarms.push("overflow".to_string());
    }
    if plant.underflow {
        alarms.push("underflow".to_string());
    }
    alarms.extend(extra_alarms.iter().cloned());
    Snapshot {
        t_s: row.t_s,
        level_pct: row.level_pct,
        level_m: row.level_m,
        setpoint_pct: row.sp_pct,
        output_v: row.u_volts,
        valve_frac: row.valve_frac,
        q_in: row.q_in_m3s,
        q_out: row.q_out_m3s,
        mode: row.mode,
        gains: engine.controller().gains,
        clock: Clock { speed, paused },
        alarms,
    }
}

type TuneOutcome = Result<(ControllerMode, UltimateGainResult), TuneError>;

enum Flow {
    Continue,
    Exit,
}

struct Stepper {
    record: LoopRecord,
    engine: LoopEngine,
    paused: bool,
    speed: Speed,
    log: Option<SessionLog>,
    schedule: VecDeque<ScheduledCommand>,
    base_schedule: Vec<ScheduledCommand>,
    stop_at: Option<u64>,
    run_waiters: Vec<(u64, Reply<u64>)>,
    tuning: Option<Receiver<TuneOutcome>>,
    tune_alarm: Option<String>,
    /// Wall-clock pacing reference: (instant, step index at that instant).
    anchor: Option<(Instant, u64)>,
    scenario_dir: Option<PathBuf>,
    presets: PresetLibrary,
    shared: Arc<Shared>,
    rx: Receiver<Request>,
}

impl Stepper {
    fn run(mut self) {
        loop {
            loop {
                match self.rx.try_recv() {
                    Ok(req) => {
                        if let Flow::Exit = self.handle(req) {
                            return;
                        }
                    }
                    Err(TryRecvError::Empty) => break,
                    Err(TryRecvError::Disconnected) => {
                        let _ = self.close();
                        return;
                    }
                }
            }
            self.poll_tuning();
            if self.paused {
                let wait = if self.tuning.is_some() {
                    Duration::from_millis(20)
                } else {
                    Duration::from_secs(3600)
                };
                match self.rx.recv_timeout(wait) {
                    Ok(req) => {
                        if let Flow::Exit = self.handle(req) {
                            return;
                        }
                    }
                    Err(RecvTimeoutError::Timeout) => {}
                    Err(RecvTimeoutError::Disconnected) => {
                        let _ = self.close();
                        return;
                    }
                }
                continue;
            }
            self.step_once();
            if let Flow::Exit = self.pace() {
                return;
            }
        }
    }

    fn step_once(&mut self) {
        let k = self.engine.step_index();
        while let Some(sc) = self.schedule.front() {
            if sc.step > k {
                break;
            }
            let sc = self.schedule.pop_front().expect("front exists");
            // Scheduled commands were validated up front; a rejection here
            // (e.g. an on-off setpoint below the band) is skipped.
            let _ = self.apply_loop_command(&sc.command);
        }
        let row = match self.engine.step() {
            Ok(row) => row,
            Err(e) => {
                self.paused = true;
                self.tune_alarm = Some(format!("engine_error:{e}"));
                self.publish();
                return;
            }
        };
        if let Some(log) = &mut self.log {
            if log.append(&row).is_err() {
                self.paused = true;
                self.tune_alarm = Some("log_write_failed".into());
            }
        }
        let done = self.engine.step_index();
        if self.stop_at.is_some_and(|s| done >= s) {
            self.stop_at = None;
            self.set_paused(true);
        }
        self.publish();
        let waiters = std::mem::take(&mut self.run_waiters);
        for (target, reply) in waiters {
            if done >= target {
                let _ = reply.send(done);
            } else {
                self.run_waiters.push((target, reply));
            }
        }
    }

    /// Sleep until the wall clock catches up, serving requests meanwhile.
    fn pace(&mut self) -> Flow {
        if self.speed.is_unlimited() || self.paused {
            return Flow::Continue;
        }
        let (t0, k0) = *self.anchor.get_or_insert((Instant::now(), self.engine.step_index()));
        let sim = (self.engine.step_index() - k0) as f64 * self.record.dt;
        let deadline = t0 + Duration::from_secs_f64(sim / self.speed.0);
        loop {
            let now = Instant::now();
            if now >= deadline || self.paused || self.anchor.is_none() {
                return Flow::Continue;
            }
            match self.rx.recv_timeout(deadline - now) {
                Ok(req) => {
                    if let Flow::Exit = self.handle(req) {
                        return Flow::Exit;
                    }
                }
                Err(RecvTimeoutError::Timeout) => return Flow::Continue,
                Err(RecvTimeoutError::Disconnected) => {
                    let _ = self.close();
                    return Flow::Exit;
                }
            }
        }
    }

    fn handle(&mut self, req: Request) -> Flow {
        match req {
            Request::Command(cmd, reply) => {
                let result = self.apply_command(cmd);
                self.publish();
                let _ = reply.send(result);
                Flow::Continue
            }
            Request::RunTo(step, reply) => {
                if self.engine.step_index() >= step {
                    let _ = reply.send(self.engine.step_index());
                } else {
                    self.stop_at = Some(step);
                    self.run_waiters.push((step, reply));
                    self.set_paused(false);
                    self.publish();
                }
                Flow::Continue
            }
            Request::Shutdown(reply) => {
                let summary = self.close();
                let _ = reply.send(summary);
                Flow::Exit
            }
        }
    }

    fn close(&mut self) -> Result<SessionSummary, SessionError> {
        self.paused = true;
        let mut summary = SessionSummary {
            steps: self.engine.step_index(),
            log_path: None,
            log_rows: 0,
        };
        if let Some(log) = &mut self.log {
            log.flush().map_err(|source| SessionError::Io {
                path: log.path().to_path_buf(),
                source,
            })?;
            summary.log_path = Some(log.path().to_path_buf());
            summary.log_rows = log.rows();
        }
        Ok(summary)
    }

    fn set_paused(&mut self, paused: bool) {
        self.paused = paused;
        self.anchor = None;
        if paused {
            if let Some(log) = &mut self.log {
                let _ = log.flush();
            }
        }
    }

    fn apply_command(&mut self, cmd: Command) -> Result<u64, CommandError> {
        let at = self.engine.step_index();
        cmd.validate().map_err(CommandError::Validation)?;
        match cmd {
            Command::Start {} => self.set_paused(false),
            Command::Pause {} => self.set_paused(true),
            Command::SetSpeed { multiplier } => {
                self.speed = multiplier;
                self.anchor = None;
            }
            Command::Reset {} => self.reset(self.record.clone(), self.base_schedule.clone())?,
            Command::LoadScenario { name } => self.load_scenario(&name)?,
            Command::StartTune(params) => self.start_tune(params)?,
            Command::SetGains { .. } | Command::SetMode { .. } | Command::SetOnOff { .. } if self.tuning.is_some() => {
                return Err(CommandError::Validation(format!(
                    "{} rejected: tuning owns the controller",
                    cmd.name()
                )));
            }
            other => self.apply_loop_command(&other)?,
        }
        Ok(at)
    }

    /// Apply a process-changing command and record it for replay.
    fn apply_loop_command(&mut self, cmd: &Command) -> Result<(), CommandError> {
        let action = cmd.to_action().expect("loop command");
        self.engine
            .apply(&action)
            .map_err(|e| CommandError::Validation(e.to_string()))?;
        if let Some(log) = &mut self.log {
            let _ = log.record(self.engine.step_index(), cmd.clone());
        }
        Ok(())
    }

    fn reset(&mut self, record: LoopRecord, schedule: Vec<ScheduledCommand>) -> Result<(), CommandError> {
        let engine = record.engine().map_err(|e| CommandError::Validation(e.to_string()))?;
        if let Some(log) = &mut self.log {
            log.rotate(record.clone())
                .map_err(|e| CommandError::Validation(format!("cannot rotate log: {e}")))?;
        }
        *self.shared.hello.lock().expect("hello lock") = hello_for(&record);
        self.engine = engine;
        self.record = record;
        self.schedule = schedule.iter().cloned().collect();
        self.base_schedule = schedule;
        self.tuning = None;
        self.tune_alarm = None;
        self.stop_at = None;
        self.set_paused(true);
        Ok(())
    }

    fn load_scenario(&mut self, name: &str) -> Result<(), CommandError> {
        let dir = self
            .scenario_dir
            .clone()
            .ok_or_else(|| CommandError::Validation("no scenario directory configured".into()))?;
        let path = scenario_path(&dir, name);
        let text = fs::read_to_string(&path)
            .map_err(|e| CommandError::Validation(format!("cannot read {}: {e}", path.display())))?;
        let scenario = parse_scenario(&text).map_err(|e| CommandError::Validation(e.to_string()))?;
        let rig = scenario
            .resolve_rig(&self.presets)
            .map_err(|e| CommandError::Validation(e.to_string()))?;
        let record = LoopRecord {
            preset: match &scenario.plant {
                hydrolab::scenario::PlantSpec::Preset(p) => Some(p.clone()),
                hydrolab::scenario::PlantSpec::Inline(_) => None,
            },
            dt: scenario.dt_s,
            rig,
            control: scenario.control,
            initial: InitialConditions::default(),
        };
        let schedule = scenario
            .events
            .iter()
            .map(|ev| ScheduledCommand {
                step: event_step(ev.at_s, scenario.dt_s),
                command: Command::from_action(&ev.action),
            })
            .collect();
        self.reset(record, schedule)?;
        self.stop_at = Some(scenario.step_count());
        Ok(())
    }

    fn start_tune(&mut self, params: TuneParams) -> Result<(), CommandError> {
        if self.tuning.is_some() {
            return Err(CommandError::Validation("a tuning run is already in progress".into()));
        }
        let mode = params.mode.unwrap_or(ControllerMode::PID);
        let mut search = UltimateGainSearch::new(
            params.sp.unwrap_or(self.engine.setpoint_pct()),
            params.kp_lo.unwrap_or(DEFAULT_KP_LO),
            params.kp_hi.unwrap_or(DEFAULT_KP_HI),
        );
        if let Some(tol) = params.tol {
            search.tol = tol;
        }
        let plant = RigPlant {
            rig: *self.engine.rig(),
            inlet_limit: self.engine.inlet_limit(),
            load_fraction: self.engine.load_fraction(),
        };
        let (tx, rx) = bounded(1);
        thread::Builder::new()
            .name("hydrolab-tune".into())
            .spawn(move || {
                let _ = tx.send(find_ultimate_gain(&plant, &search).map(|r| (mode, r)));
            })
            .map_err(|e| CommandError::Validation(format!("cannot start tuner: {e}")))?;
        self.tuning = Some(rx);
        self.tune_alarm = None;
        Ok(())
    }

    fn poll_tuning(&mut self) {
        let Some(rx) = &self.tuning else { return };
        let outcome = match rx.try_recv() {
            Ok(outcome) => outcome,
            Err(TryRecvError::Empty) => return,
            Err(TryRecvError::Disconnected) => Err(TuneError::InvalidArgument("tuner thread died".into())),
        };
        self.tuning = None;
        match outcome.and_then(|(mode, r)| zn_gains(mode, r.ku, r.pu_s).map(|g| (mode, g))) {
            Ok((mode, gains)) => {
                let _ = self.apply_loop_command(&Command::SetMode { mode });
                let _ = self.apply_loop_command(&Command::SetGains {
                    kp: gains.kp,
                    ki: gains.ki,
                    kd: gains.kd,
                });
            }
            Err(e) => self.tune_alarm = Some(format!("tune_failed:{}", e.name())),
        }
        self.publish();
    }

    fn publish(&self) {
        let mut extra = Vec::new();
        if self.tuning.is_some() {
            extra.push("tuning".to_string());
        }
        extra.extend(self.tune_alarm.iter().cloned());
        self.shared
            .publish(snapshot_of(&self.engine, self.speed, self.paused, &extra));
    }
}

pub fn scenario_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.scn"))
}
