use std::fs;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use hydrolab::control::{ControllerMode, Gains};
use hydrolab::presets::PresetLibrary;
use hydrolab::scenario::parse_scenario;
use hydrolab::series::TimeSeries;
use hydrolab_runtime::log::sidecar_path;
use hydrolab_runtime::{
    replay, Command, ScheduledCommand, SessionConfig, SessionError, SessionHandle, Sidecar, Speed, TuneParams,
};

fn read_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(str::to_string)
        .collect()
}

fn logged(dir: &Path, name: &str, speed: Speed) -> SessionConfig {
    SessionConfig {
        log_path: Some(dir.join(name)),
        speed,
        ..SessionConfig::from_preset(&PresetLibrary::builtin(), "paper_like_delay").unwrap()
    }
}

fn scenario_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

#[test]
fn starts_paused_at_zero() {
    let s = SessionHandle::start(SessionConfig::default()).unwrap();
    let snap = s.snapshot();
    assert_eq!(snap.t_s, 0.0);
    assert_eq!(snap.level_m, 0.0);
    assert!(snap.clock.paused);
    thread::sleep(Duration::from_millis(50));
    assert_eq!(s.snapshot().t_s, 0.0);
    assert_eq!(s.shutdown().unwrap().steps, 0);
}

#[test]
fn rejects_bad_config() {
    let bad = SessionConfig {
        dt: 0.0,
        ..SessionConfig::default()
    };
    assert!(matches!(SessionHandle::start(bad), Err(SessionError::Config(_))));
    let unwritable = SessionConfig {
        log_path: Some(PathBuf::from("/nonexistent-dir/x/run.csv")),
        ..SessionConfig::default()
    };
    assert!(matches!(SessionHandle::start(unwritable), Err(SessionError::Io { .. })));
}

#[test]
fn paper_preset_carries_table_three_pid() {
    let cfg = SessionConfig::from_preset(&PresetLibrary::builtin(), "paper_default").unwrap();
    let s = SessionHandle::start(cfg).unwrap();
    let snap = s.snapshot();
    assert_eq!(snap.mode, ControllerMode::PID);
    assert_eq!(
        snap.gains,
        Gains {
            kp: 48.0,
            ki: 8.0 / 3.0,
            kd: 216.0
        }
    );
    s.shutdown().unwrap();
}

#[test]
fn setpoint_command_shows_in_next_snapshot() {
    let s = SessionHandle::start(SessionConfig::default()).unwrap();
    let feed = s.subscribe();
    assert_eq!(feed.recv_timeout(Duration::from_secs(1)).unwrap().t_s, 0.0);
    let step = s.apply(Command::SetSetpoint { pct: 50.0 }).unwrap();
    assert_eq!(step, 0);
    let next = feed.recv_timeout(Duration::from_secs(1)).unwrap();
    assert_eq!(next.setpoint_pct, 50.0);
    assert!(s.apply(Command::SetSetpoint { pct: 120.0 }).is_err());
    s.shutdown().unwrap();
}

#[test]
fn hundred_ticks_make_hundred_rows() {
    let dir = tempfile::tempdir().unwrap();
    let s = SessionHandle::start(logged(dir.path(), "run.csv", Speed::UNLIMITED)).unwrap();
    assert_eq!(s.run_to(100).unwrap(), 100);
    let summary = s.shutdown().unwrap();
    assert_eq!(summary.log_rows, 100);
    let ts = TimeSeries::read_csv(fs::read_to_string(dir.path().join("run.csv")).unwrap().as_bytes()).unwrap();
    assert_eq!(ts.len(), 100);
    assert!(ts.rows.windows(2).all(|w| w[1].t_s > w[0].t_s));
    assert!((ts.rows[99].t_s - 10.0).abs() < 1e-9);
}

#[test]
fn paused_session_appends_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.csv");
    let s = SessionHandle::start(logged(dir.path(), "run.csv", Speed(100.0))).unwrap();
    s.apply(Command::Start {}).unwrap();
    thread::sleep(Duration::from_millis(200));
    let at = s.apply(Command::Pause {}).unwrap();
    assert!(at > 0);
    let rows = read_rows(&path).len();
    assert_eq!(rows as u64, at);
    thread::sleep(Duration::from_millis(200));
    assert_eq!(read_rows(&path).len(), rows);
    assert_eq!(s.snapshot().t_s, at as f64 * 0.1);
    s.shutdown().unwrap();
}

#[test]
fn speed_sets_simulated_seconds_per_wall_second() {
    let s = SessionHandle::start(SessionConfig::default()).unwrap();
    s.apply(Command::SetSpeed {
        multiplier: Speed(60.0),
    })
    .unwrap();
    let t0 = Instant::now();
    s.apply(Command::Start {}).unwrap();
    thread::sleep(Duration::from_millis(1000));
    let at = s.apply(Command::Pause {}).unwrap();
    let wall = t0.elapsed().as_secs_f64();
    let sim = at as f64 * 0.1;
    assert!((sim / (60.0 * wall) - 1.0).abs() < 0.1, "{sim} s in {wall} s");
    s.shutdown().unwrap();
}

fn scheduled() -> Vec<ScheduledCommand> {
    vec![
        ScheduledCommand {
            step: 200,
            command: Command::SetSetpoint { pct: 50.0 },
        },
        ScheduledCommand {
            step: 600,
            command: Command::SetOutputLoad { fraction: 0.7 },
        },
        ScheduledCommand {
            step: 900,
            command: Command::SetGains {
                kp: 36.0,
                ki: 1.2,
                kd: 0.0,
            },
        },
        ScheduledCommand {
            step: 900,
            command: Command::SetMode {
                mode: ControllerMode::PI,
            },
        },
    ]
}

#[test]
fn replay_is_speed_independent() {
    let dir = tempfile::tempdir().unwrap();
    let mut logs = Vec::new();
    for (name, speed) in [("fast.csv", Speed::UNLIMITED), ("paced.csv", Speed(150.0))] {
        let cfg = SessionConfig {
            schedule: scheduled(),
            ..logged(dir.path(), name, speed)
        };
        let s = SessionHandle::start(cfg).unwrap();
        s.run_to(1500).unwrap();
        s.shutdown().unwrap();
        logs.push(fs::read(dir.path().join(name)).unwrap());
    }
    assert_eq!(logs[0].len(), logs[1].len());
    assert!(logs[0] == logs[1], "CSV differs between speeds");

    let sidecar = Sidecar::read(&sidecar_path(&dir.path().join("paced.csv"))).unwrap();
    assert_eq!(sidecar.commands, scheduled());
    let again = replay(&sidecar.config, &sidecar.commands, 1500).unwrap();
    assert_eq!(again.to_csv_string().into_bytes(), logs[0]);
}

#[test]
fn live_commands_replay_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("live.csv");
    let s = SessionHandle::start(logged(dir.path(), "live.csv", Speed(400.0))).unwrap();
    s.apply(Command::Start {}).unwrap();
    for (i, cmd) in [
        Command::SetSetpoint { pct: 40.0 },
        Command::SetInputLimit { fraction: 0.8 },
        Command::SetSetpoint { pct: 60.0 },
        Command::SetMode {
            mode: ControllerMode::PI,
        },
    ]
    .into_iter()
    .enumerate()
    {
        thread::sleep(Duration::from_millis(40 + 10 * i as u64));
        s.apply(cmd).unwrap();
    }
    thread::sleep(Duration::from_millis(50));
    s.apply(Command::Pause {}).unwrap();
    let summary = s.shutdown().unwrap();
    let sidecar = Sidecar::read(&sidecar_path(&path)).unwrap();
    assert_eq!(sidecar.commands.len(), 4);
    let again = replay(&sidecar.config, &sidecar.commands, summary.log_rows).unwrap();
    assert_eq!(again.to_csv_string(), fs::read_to_string(&path).unwrap());
}

#[test]
fn snapshots_track_the_latest_step() {
    let s = SessionHandle::start(SessionConfig {
        speed: Speed::UNLIMITED,
        ..SessionConfig::default()
    })
    .unwrap();
    let feed = s.subscribe();
    s.run_to(50).unwrap();
    assert!((s.snapshot().t_s - 5.0).abs() < 1e-12);
    let mut last = -1.0;
    while let Some(snap) = feed.try_recv() {
        assert!(snap.t_s >= last);
        let k = (snap.t_s / 0.1).round();
        assert!((snap.t_s - k * 0.1).abs() < 1e-9);
        last = snap.t_s;
    }
    assert!((last - 5.0).abs() < 1e-12);
    s.shutdown().unwrap();
}

#[test]
fn slow_subscribers_lose_oldest_frames() {
    let s = SessionHandle::start(SessionConfig {
        speed: Speed::UNLIMITED,
        subscriber_capacity: 4,
        ..SessionConfig::default()
    })
    .unwrap();
    let feed = s.subscribe();
    s.run_to(100).unwrap();
    let frames: Vec<f64> = std::iter::from_fn(|| feed.try_recv()).map(|snap| snap.t_s).collect();
    assert!(frames.len() <= 4, "{frames:?}");
    assert!((frames.last().unwrap() - 10.0).abs() < 1e-12);
    s.shutdown().unwrap();
}

#[test]
fn reset_rotates_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let s = SessionHandle::start(logged(dir.path(), "run.csv", Speed::UNLIMITED)).unwrap();
    s.run_to(30).unwrap();
    s.apply(Command::Reset {}).unwrap();
    assert_eq!(s.snapshot().t_s, 0.0);
    assert!(s.snapshot().clock.paused);
    s.run_to(10).unwrap();
    s.shutdown().unwrap();
    assert_eq!(read_rows(&dir.path().join("run.csv")).len(), 30);
    assert_eq!(read_rows(&dir.path().join("run-1.csv")).len(), 10);
    assert!(dir.path().join("run-1.meta.json").exists());
}

#[test]
fn loaded_scenario_matches_batch_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SessionConfig {
        scenario_dir: Some(scenario_dir()),
        ..logged(dir.path(), "live.csv", Speed::UNLIMITED)
    };
    let s = SessionHandle::start(cfg).unwrap();
    assert!(s.apply(Command::LoadScenario { name: "missing".into() }).is_err());
    s.apply(Command::LoadScenario { name: "fig6e".into() }).unwrap();
    let scenario = parse_scenario(&fs::read_to_string(scenario_dir().join("fig6e.scn")).unwrap()).unwrap();
    let steps = scenario.step_count();
    // Loading arms a stop at the scenario's end.
    s.apply(Command::Start {}).unwrap();
    let deadline = Instant::now() + Duration::from_secs(60);
    while !(s.snapshot().clock.paused && s.snapshot().t_s > 0.0) {
        assert!(Instant::now() < deadline);
        thread::sleep(Duration::from_millis(10));
    }
    let summary = s.shutdown().unwrap();
    assert_eq!(summary.log_rows, steps);
    let batch = scenario.run(&PresetLibrary::builtin()).unwrap().to_csv_string();
    assert_eq!(fs::read_to_string(dir.path().join("live-1.csv")).unwrap(), batch);
}

#[test]
fn tuning_owns_the_controller() {
    let cfg = SessionConfig::from_preset(&PresetLibrary::builtin(), "paper_like_delay").unwrap();
    let s = SessionHandle::start(cfg).unwrap();
    s.apply(Command::StartTune(TuneParams {
        sp: Some(50.0),
        ..Default::default()
    }))
    .unwrap();
    let err = s
        .apply(Command::SetGains {
            kp: 1.0,
            ki: 0.0,
            kd: 0.0,
        })
        .unwrap_err();
    assert!(err.to_string().starts_with("ValidationError"), "{err}");
    assert!(s
        .apply(Command::SetMode {
            mode: ControllerMode::P
        })
        .is_err());
    assert!(s.snapshot().alarms.contains(&"tuning".to_string()));
    let deadline = Instant::now() + Duration::from_secs(120);
    while s.snapshot().alarms.contains(&"tuning".to_string()) {
        assert!(Instant::now() < deadline, "tuning did not finish");
        thread::sleep(Duration::from_millis(20));
    }
    let snap = s.snapshot();
    assert!(snap.alarms.is_empty(), "{:?}", snap.alarms);
    assert_eq!(snap.mode, ControllerMode::PID);
    assert!(snap.gains.kp > 100.0 && snap.gains.kd > 0.0, "{:?}", snap.gains);
    s.apply(Command::SetGains {
        kp: 1.0,
        ki: 0.0,
        kd: 0.0,
    })
    .unwrap();
    s.shutdown().unwrap();
}

#[test]
fn failed_tuning_raises_alarm() {
    let cfg = SessionConfig::from_preset(&PresetLibrary::builtin(), "paper_no_delay").unwrap();
    let s = SessionHandle::start(cfg).unwrap();
    s.apply(Command::StartTune(TuneParams::default())).unwrap();
    let deadline = Instant::now() + Duration::from_secs(30);
    loop {
        let alarms = s.snapshot().alarms.clone();
        if alarms.contains(&"tune_failed:PureFirstOrderPlant".to_string()) {
            break;
        }
        assert!(Instant::now() < deadline, "{alarms:?}");
        thread::sleep(Duration::from_millis(10));
    }
    s.shutdown().unwrap();
}
