use std::f64::consts::PI;

use hydrolab::control::ControllerMode;
use hydrolab::engine::{ControllerSetup, LoopEngine};
use hydrolab::plant::{
    analytic_step_response, linearized_model, plant_step, ModelOutput, PlantState, Rig, ValveConfig,
};
use hydrolab::presets::PresetLibrary;
use hydrolab::tuning::{find_ultimate_gain, RigPlant, TestPlant, TuneError, UltimateGainSearch};

/// Frequency-scan oracle for `K e^{-θs}/(τs+1)`: the phase crossover solves
/// `atan(ωτ) + ωθ = π`, found here by bisection.
fn fopdt_oracle(k: f64, tau: f64, theta: f64) -> (f64, f64) {
    let phase = |w: f64| (w * tau).atan() + w * theta - PI;
    let (mut lo, mut hi) = (1e-9, PI / theta);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if phase(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let w = 0.5 * (lo + hi);
    ((1.0 + (w * tau).powi(2)).sqrt() / k, 2.0 * PI / w)
}

#[test]
fn oracle_self_check() {
    let (ku, pu) = fopdt_oracle(1.0, 10.0, 2.0);
    assert!((ku - 8.502424988).abs() < 1e-6);
    assert!((pu - 7.441522726).abs() < 1e-6);
}

#[test]
fn open_valve_matches_first_order_response() {
    let rig = Rig::default();
    let valve = ValveConfig {
        travel_time_s: 0.0,
        ..rig.valve
    };
    let model = linearized_model(&rig.tank, ModelOutput::Level);
    let dt = 0.1;
    let mut state = PlantState {
        valve_opening: 1.0,
        ..PlantState::at_level(0.0)
    };
    let mut worst: f64 = 0.0;
    for k in 1..=30_378 {
        state = plant_step(&state, &rig.tank, &valve, 10.0, 1.0, 1.0, dt).unwrap();
        let want = analytic_step_response(&model, rig.tank.q_in_max, k as f64 * dt);
        worst = worst.max((state.h - want).abs());
    }
    assert!(worst < 1e-6, "{worst}");
    let tau = rig.tank.time_constant();
    assert!((tau - 1012.6).abs() < 1e-9);
    let after_5tau = analytic_step_response(&model, rig.tank.q_in_max, 5.0 * tau);
    assert!((after_5tau - 0.9932620530009145).abs() < 1e-12);
}

#[test]
fn ultimate_gain_of_fopdt() {
    let (ku, pu) = fopdt_oracle(1.0, 10.0, 2.0);
    let plant = TestPlant::Fopdt {
        gain: 1.0,
        tau_s: 10.0,
        dead_time_s: 2.0,
    };
    let r = find_ultimate_gain(&plant, &UltimateGainSearch::new(50.0, 0.5, 50.0)).unwrap();
    assert!((r.ku / ku - 1.0).abs() < 0.05, "{} vs {ku}", r.ku);
    assert!((r.pu_s / pu - 1.0).abs() < 0.05, "{} vs {pu}", r.pu_s);
    assert!(r.periods_used >= 5);
}

#[test]
fn ultimate_gain_of_integrator_with_delay() {
    let plant = TestPlant::IntegratorDelay {
        gain: 1.0,
        dead_time_s: 1.0,
    };
    let r = find_ultimate_gain(&plant, &UltimateGainSearch::new(50.0, 0.1, 10.0)).unwrap();
    assert!((r.ku / (PI / 2.0) - 1.0).abs() < 0.05, "{}", r.ku);
    assert!((r.pu_s / 4.0 - 1.0).abs() < 0.05, "{}", r.pu_s);
}

#[test]
fn ultimate_gain_of_fopdt_rig_preset() {
    let (ku, pu) = fopdt_oracle(1.0, 10.0, 2.0);
    let rig = PresetLibrary::builtin().resolve("fopdt_test").unwrap().rig;
    let r = find_ultimate_gain(&RigPlant::new(rig), &UltimateGainSearch::new(50.0, 0.1, 1000.0)).unwrap();
    assert!((r.ku / ku - 1.0).abs() < 0.05, "{} vs {ku}", r.ku);
    assert!((r.pu_s / pu - 1.0).abs() < 0.05, "{} vs {pu}", r.pu_s);
}

#[test]
fn paper_like_rig_has_finite_ultimate_gain() {
    let rig = PresetLibrary::builtin().resolve("paper_like_delay").unwrap().rig;
    let r = find_ultimate_gain(&RigPlant::new(rig), &UltimateGainSearch::new(50.0, 0.1, 1000.0)).unwrap();
    // Small-signal crossover of the 4 s delay on a slow tank: close to the
    // integrator-plus-delay estimate Ku = tau*pi/(2*K*theta), Pu = 4*theta.
    let k = rig.tank.q_in_max * rig.tank.resistance / rig.sensor.span_level_m();
    let ku_est = rig.tank.time_constant() * PI / (2.0 * k * 4.0);
    assert!((r.ku / ku_est - 1.0).abs() < 0.05, "{} vs {ku_est}", r.ku);
    assert!((r.pu_s / 16.0 - 1.0).abs() < 0.05, "{}", r.pu_s);
}

#[test]
fn no_delay_rig_is_first_order() {
    let rig = PresetLibrary::builtin().resolve("paper_no_delay").unwrap().rig;
    let err = find_ultimate_gain(&RigPlant::new(rig), &UltimateGainSearch::new(50.0, 0.1, 1000.0)).unwrap_err();
    assert_eq!(err, TuneError::PureFirstOrderPlant);
}

fn onoff_levels(travel_s: f64, duration_s: f64) -> (Rig, Vec<f64>) {
    let mut rig = Rig::default();
    rig.valve.travel_time_s = travel_s;
    let setup = ControllerSetup {
        mode: ControllerMode::OnOff,
        setpoint_pct: 70.0,
        hysteresis_pct: 10.0,
        ..ControllerSetup::default()
    };
    let mut engine = LoopEngine::new(rig, setup, 0.1).unwrap();
    let levels = (0..(duration_s / 0.1) as usize)
        .map(|_| engine.step().unwrap().level_pct)
        .collect();
    (rig, levels)
}

#[test]
fn onoff_valve_travel_overshoots() {
    let (_, levels) = onoff_levels(25.0, 4000.0);
    let first_close = levels.iter().position(|&l| l >= 70.0).unwrap();
    let peak = levels[first_close..].iter().cloned().fold(f64::MIN, f64::max);
    assert!(peak > 70.0, "{peak}");
    let tail = &levels[levels.len() / 2..];
    assert!(tail.iter().all(|&l| l > 55.0 && l < 85.0));
}

#[test]
fn onoff_instant_valve_stays_in_band() {
    let (rig, levels) = onoff_levels(0.0, 4000.0);
    let one_step = rig
        .sensor
        .level_m_to_pct(rig.tank.q_in_max * 0.1 / rig.tank.capacitance);
    let start = levels.iter().position(|&l| l >= 60.0).unwrap();
    for &l in &levels[start..] {
        assert!(l >= 60.0 - one_step && l <= 70.0 + one_step, "{l}");
    }
}
