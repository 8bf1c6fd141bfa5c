//! Tank, proportional valve and pressure-transmitter models.
//!
//! The level ODE is `C * dh/dt = q_in - q_out` where the outflow either goes
//! through a linear resistance (`q_out = h / R`) or drains under gravity
//! (`q_out = k * sqrt(h)`). Both are scaled by the manual load vane. The
//! linear variant has the first-order transfer function `R / (RCs + 1)`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::integrate::{rk4_autonomous, rk4_weighted};

/// Level at which the Torricelli coefficient is matched to the linear model.
pub const TORRICELLI_MATCH_LEVEL_M: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("invalid plant configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite or out-of-range input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutflowModel {
    LinearResistance,
    Torricelli,
}

impl OutflowModel {
    pub fn keyword(self) -> &'static str {
        match self {
            OutflowModel::LinearResistance => "linear",
            OutflowModel::Torricelli => "torricelli",
        }
    }
}

/// Physical tank parameters.
///
/// `capacitance` drives the ODE; `area` is geometric metadata only. The
/// default training-set tank uses C = 0.5063 m^3/m so that R*C = 1012.6 s,
/// even though a 0.15 m diameter cylinder would have a much smaller area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TankConfig {
    /// m^3 per m of level.
    pub capacitance: f64,
    /// Outflow resistance, s/m^2.
    pub resistance: f64,
    /// Geometric cross-section, m^2.
    pub area: f64,
    /// Usable tank height, m.
    pub h_max: f64,
    /// Inflow with the valve fully open and the inlet vane fully open, m^3/s.
    pub q_in_max: f64,
    pub outflow: OutflowModel,
    /// Drain coefficient for the Torricelli model, m^2.5/s.
    pub torricelli_coeff: f64,
}

impl TankConfig {
    pub fn paper_default() -> Self {
        let resistance = 2000.0;
        TankConfig {
            capacitance: 0.5063,
            resistance,
            area: 0.5063,
            h_max: 1.0,
            q_in_max: 0.0005,
            outflow: OutflowModel::LinearResistance,
            torricelli_coeff: matched_torricelli_coeff(resistance),
        }
    }

    /// Same tank with the capacitance derived from the 0.15 m diameter.
    pub fn geometric_consistent() -> Self {
        let area = std::f64::consts::PI * 0.15 * 0.15 / 4.0;
        TankConfig {
            capacitance: area,
            area,
            ..Self::paper_default()
        }
    }

    pub fn validate(&self) -> Result<(), PlantError> {
        let positive = [
            ("capacitance", self.capacitance),
            ("resistance", self.resistance),
            ("h_max", self.h_max),
            ("q_in_max", self.q_in_max),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(PlantError::InvalidConfig(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.area.is_finite() && self.area >= 0.0) {
            return Err(PlantError::InvalidConfig(format!(
                "area must be >= 0, got {}",
                self.area
            )));
        }
        if self.outflow == OutflowModel::Torricelli
            && !(self.torricelli_coeff.is_finite() && self.torricelli_coeff > 0.0)
        {
            return Err(PlantError::InvalidConfig(format!(
                "torricelli_coeff must be > 0, got {}",
                self.torricelli_coeff
            )));
        }
        Ok(())
    }

    /// Outflow through the load vane at level `h`.
    pub fn outflow_at(&self, h: f64, load_fraction: f64) -> f64 {
        let h = h.max(0.0);
        match self.outflow {
            OutflowModel::LinearResistance => load_fraction * h / self.resistance,
            OutflowModel::Torricelli => load_fraction * self.torricelli_coeff * h.sqrt(),
        }
    }

    pub fn time_constant(&self) -> f64 {
        self.resistance * self.capacitance
    }
}

/// Drain coefficient that makes `k * sqrt(h0) == h0 / R` at the match level.
pub fn matched_torricelli_coeff(resistance: f64) -> f64 {
    TORRICELLI_MATCH_LEVEL_M.sqrt() / resistance
}

/// Proportional inlet valve driven by a 0-10 V command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValveConfig {
    /// Full-stroke time in seconds; 0 means the valve follows instantly.
    pub travel_time_s: f64,
    pub v_min: f64,
    pub v_max: f64,
}

impl Default for ValveConfig {
    fn default() -> Self {
        ValveConfig {
            travel_time_s: 25.0,
            v_min: 0.0,
            v_max: 10.0,
        }
    }
}

impl ValveConfig {
    pub fn validate(&self) -> Result<(), PlantError> {
        if !(self.travel_time_s.is_finite() && self.travel_time_s >= 0.0) {
            return Err(PlantError::InvalidConfig(format!(
                "travel_time_s must be >= 0, got {}",
                self.travel_time_s
            )));
        }
        if !(self.v_min.is_finite() && self.v_max.is_finite() && self.v_min < self.v_max) {
            return Err(PlantError::InvalidConfig("v_min must be < v_max".into()));
        }
        Ok(())
    }

    /// Opening fraction the valve settles at for a command voltage.
    pub fn target_opening(&self, command_v: f64) -> f64 {
        ((command_v - self.v_min) / (self.v_max - self.v_min)).clamp(0.0, 1.0)
    }
}

/// Differential-pressure level transmitter with a 4-20 mA output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    pub p_span_pa: f64,
    pub i_min_ma: f64,
    pub i_max_ma: f64,
    /// Water density, kg/m^3.
    pub rho: f64,
    pub g: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        SensorConfig {
            p_span_pa: 6600.0,
            i_min_ma: 4.0,
            i_max_ma: 20.0,
            rho: 998.2,
            g: 9.8,
        }
    }
}

impl SensorConfig {
    pub fn validate(&self) -> Result<(), PlantError> {
        if !(self.p_span_pa.is_finite() && self.p_span_pa > 0.0) {
            return Err(PlantError::InvalidConfig("p_span_pa must be > 0".into()));
        }
        if !(self.i_min_ma.is_finite() && self.i_max_ma.is_finite() && self.i_min_ma < self.i_max_ma) {
            return Err(PlantError::InvalidConfig("i_min_ma must be < i_max_ma".into()));
        }
        if !(self.rho > 0.0 && self.g > 0.0 && self.rho.is_finite() && self.g.is_finite()) {
            return Err(PlantError::InvalidConfig("rho and g must be > 0".into()));
        }
        Ok(())
    }

    /// Level in metres that produces the full-span pressure (about 0.6747 m).
    pub fn span_level_m(&self) -> f64 {
        self.p_span_pa / (self.rho * self.g)
    }

    pub fn level_m_to_pct(&self, h: f64) -> f64 {
        100.0 * h / self.span_level_m()
    }

    pub fn pct_to_level_m(&self, pct: f64) -> f64 {
        pct / 100.0 * self.span_level_m()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PlantState {
    pub t: f64,
    /// Level, m.
    pub h: f64,
    pub valve_opening: f64,
    pub q_in: f64,
    pub q_out: f64,
    /// Sticky: set once the level has been clamped at `h_max`.
    pub overflow: bool,
    /// Sticky: set once the integrator tried to drive the level below 0.
    pub underflow: bool,
    /// True when the most recent step was clamped at a tank bound.
    pub saturated_last_step: bool,
    /// Volume that entered during the most recent step, m^3.
    pub step_inflow_m3: f64,
    /// Volume that left during the most recent step, m^3.
    pub step_outflow_m3: f64,
}

impl PlantState {
    pub fn at_level(h: f64) -> Self {
        PlantState {
            h,
            ..Default::default()
        }
    }
}

/// Which output of the linear model the caller wants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelOutput {
    /// `H(s)/Q_in(s) = R / (RCs + 1)`.
    Level,
    /// `Q_out(s)/Q_in(s) = 1 / (RCs + 1)`.
    Outflow,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearizedModel {
    pub gain: f64,
    pub tau: f64,
}

pub fn linearized_model(config: &TankConfig, output: ModelOutput) -> LinearizedModel {
    let gain = match output {
        ModelOutput::Level => config.resistance,
        ModelOutput::Outflow => 1.0,
    };
    LinearizedModel {
        gain,
        tau: config.time_constant(),
    }
}

/// Closed-form response `K * u0 * (1 - exp(-t/tau))` from rest.
pub fn analytic_step_response(model: &LinearizedModel, step_amplitude: f64, t: f64) -> f64 {
    model.gain * step_amplitude * -(-t / model.tau).exp_m1()
}

/// Slew-rate-limited valve travel toward the commanded opening.
pub fn actuator_step(opening: f64, command_v: f64, valve: &ValveConfig, dt: f64) -> f64 {
    let target = valve.target_opening(command_v);
    if valve.travel_time_s == 0.0 {
        return target;
    }
    let max_move = dt / valve.travel_time_s;
    let delta = (target - opening).clamp(-max_move, max_move);
    (opening + delta).clamp(0.0, 1.0)
}

/// Advance the tank by one step of `dt` seconds.
///
/// The valve moves first; the inflow is then held for the step while the
/// level is integrated with RK4. The outflow volume reported for the step is
/// the RK4-weighted quadrature of the stage outflows, so
/// `C * dh == step_inflow_m3 - step_outflow_m3` holds to rounding whenever
/// the level stays inside the tank.
pub fn plant_step(
    state: &PlantState,
    config: &TankConfig,
    valve: &ValveConfig,
    command_v: f64,
    inlet_limit: f64,
    load_fraction: f64,
    dt: f64,
) -> Result<PlantState, PlantError> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(PlantError::InvalidInput(format!("dt must be > 0, got {dt}")));
    }
    if !command_v.is_finite() {
        return Err(PlantError::InvalidInput(format!("command {command_v} V")));
    }
    for (name, v) in [("inlet_limit", inlet_limit), ("load_fraction", load_fraction)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(PlantError::InvalidInput(format!("{name} must be in [0, 1], got {v}")));
        }
    }
    if !(state.h.is_finite() && state.valve_opening.is_finite()) {
        return Err(PlantError::InvalidInput("non-finite plant state".into()));
    }

    let valve_opening = actuator_step(state.valve_opening, command_v, valve, dt);
    let q_in = valve_opening * inlet_limit * config.q_in_max;
    let c = config.capacitance;

    let mut stage_outflow = [0.0; 4];
    let mut stage = 0;
    let (h_raw, _) = rk4_autonomous(state.h, dt, |h| {
        let q_out = config.outflow_at(h, load_fraction);
        stage_outflow[stage] = q_out;
        stage += 1;
        (q_in - q_out) / c
    });

    let mut next = PlantState {
        t: state.t + dt,
        h: h_raw,
        valve_opening,
        q_in,
        q_out: 0.0,
        overflow: state.overflow,
        underflow: state.underflow,
        saturated_last_step: false,
        step_inflow_m3: q_in * dt,
        step_outflow_m3: rk4_weighted(stage_outflow, dt),
    };
    if h_raw > config.h_max {
        next.h = config.h_max;
        next.overflow = true;
        next.saturated_last_step = true;
    } else if h_raw < 0.0 {
        next.h = 0.0;
        next.underflow = true;
        next.saturated_last_step = true;
    }
    next.q_out = config.outflow_at(next.h, load_fraction);
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub pressure_pa: f64,
    pub current_ma: f64,
    pub level_pct: f64,
}

pub fn measure(state: &PlantState, sensor: &SensorConfig) -> Measurement {
    let pressure_pa = sensor.rho * sensor.g * state.h.max(0.0);
    let frac = pressure_pa / sensor.p_span_pa;
    let current_ma =
        (sensor.i_min_ma + (sensor.i_max_ma - sensor.i_min_ma) * frac).clamp(sensor.i_min_ma, sensor.i_max_ma);
    Measurement {
        pressure_pa,
        current_ma,
        level_pct: 100.0 * frac,
    }
}

/// Pure transport delay on a sampled signal.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportDelay {
    buffer: VecDeque<f64>,
}

impl TransportDelay {
    /// Delay of `round(delay_s / dt)` samples, pre-filled with `initial`.
    pub fn new(delay_s: f64, dt: f64, initial: f64) -> Self {
        let n = (delay_s / dt).round().max(0.0) as usize;
        TransportDelay {
            buffer: std::iter::repeat_n(initial, n).collect(),
        }
    }

    pub fn samples(&self) -> usize {
        self.buffer.len()
    }

    /// Push the newest sample and return the one leaving the delay line.
    pub fn push(&mut self, value: f64) -> f64 {
        if self.buffer.is_empty() {
            return value;
        }
        self.buffer.push_back(value);
        self.buffer.pop_front().unwrap_or(value)
    }
}

/// Complete training rig: tank, inlet valve, transmitter and loop dead time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rig {
    pub tank: TankConfig,
    pub valve: ValveConfig,
    pub sensor: SensorConfig,
    /// Dead time between the controller output and the valve, s.
    pub dead_time_s: f64,
}

impl Default for Rig {
    fn default() -> Self {
        Rig {
            tank: TankConfig::paper_default(),
            valve: ValveConfig::default(),
            sensor: SensorConfig::default(),
            dead_time_s: 0.0,
        }
    }
}

impl Rig {
    pub fn validate(&self) -> Result<(), PlantError> {
        self.tank.validate()?;
        self.valve.validate()?;
        self.sensor.validate()?;
        if !(self.dead_time_s.is_finite() && self.dead_time_s >= 0.0) {
            return Err(PlantError::InvalidConfig(format!(
                "dead time must be >= 0, got {}",
                self.dead_time_s
            )));
        }
        Ok(())
    }

    /// A P-controlled loop around a plain first-order tank cannot oscillate.
    pub fn has_phase_lag(&self) -> bool {
        self.valve.travel_time_s > 0.0 || self.dead_time_s > 0.0
    }

    /// Valve opening that holds the level at `level_pct`, if reachable.
    pub fn equilibrium_opening(&self, level_pct: f64, inlet_limit: f64, load_fraction: f64) -> Option<f64> {
        let h = self.sensor.pct_to_level_m(level_pct);
        if !(0.0..=self.tank.h_max).contains(&h) {
            return None;
        }
        let q_out = self.tank.outflow_at(h, load_fraction);
        let q_in_full = inlet_limit * self.tank.q_in_max;
        if q_in_full <= 0.0 {
            return (q_out == 0.0).then_some(0.0);
        }
        let opening = q_out / q_in_full;
        (opening <= 1.0).then_some(opening)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_time_constant() {
        let m = linearized_model(&TankConfig::paper_default(), ModelOutput::Level);
        assert!((m.tau - 1012.6).abs() < 1e-9);
        assert_eq!(m.gain, 2000.0);
        let q = linearized_model(&TankConfig::paper_default(), ModelOutput::Outflow);
        assert_eq!(q.gain, 1.0);
        assert!((q.tau - 1012.6).abs() < 1e-9);
    }

    #[test]
    fn unit_parameters() {
        let cfg = TankConfig {
            capacitance: 1.0,
            resistance: 1.0,
            ..TankConfig::paper_default()
        };
        let m = linearized_model(&cfg, ModelOutput::Level);
        assert_eq!((m.tau, m.gain), (1.0, 1.0));
    }

    #[test]
    fn step_response_landmarks() {
        let m = LinearizedModel { gain: 2.0, tau: 50.0 };
        let fin = 2.0 * 0.25;
        assert_eq!(analytic_step_response(&m, 0.25, 0.0), 0.0);
        let at_tau = analytic_step_response(&m, 0.25, 50.0);
        assert!((at_tau / fin - (1.0 - (-1.0f64).exp())).abs() < 1e-12);
        assert!((at_tau / fin - 0.6321).abs() < 1e-4);
        // 1 - e^-5 = 0.9932620530009145
        let at_5tau = analytic_step_response(&m, 0.25, 250.0);
        assert!((at_5tau / fin - 0.993_262_053_000_914_5).abs() < 1e-12);
    }

    #[test]
    fn actuator_slews_at_full_speed() {
        let valve = ValveConfig::default();
        assert!((actuator_step(0.0, 10.0, &valve, 1.0) - 0.04).abs() < 1e-15);
        assert_eq!(actuator_step(0.5, 5.0, &valve, 1.0), 0.5);
    }

    #[test]
    fn actuator_closes_in_travel_time() {
        let valve = ValveConfig::default();
        let mut opening = 1.0;
        for _ in 0..249 {
            opening = actuator_step(opening, 0.0, &valve, 0.1);
        }
        assert!(opening > 0.0);
        opening = actuator_step(opening, 0.0, &valve, 0.1);
        assert!(opening < 1e-9, "opening {opening}");
    }

    #[test]
    fn actuator_clamps_commands_and_jumps_without_travel() {
        let instant = ValveConfig {
            travel_time_s: 0.0,
            ..Default::default()
        };
        assert_eq!(actuator_step(0.0, 12.0, &instant, 0.1), 1.0);
        assert_eq!(actuator_step(1.0, -3.0, &instant, 0.1), 0.0);
        assert_eq!(actuator_step(0.2, 7.5, &instant, 0.1), 0.75);
    }

    #[test]
    fn no_flow_leaves_level_unchanged() {
        let cfg = TankConfig::paper_default();
        let valve = ValveConfig::default();
        let s = PlantState::at_level(0.3);
        let next = plant_step(&s, &cfg, &valve, 0.0, 1.0, 0.0, 5.0).unwrap();
        assert_eq!(next.h, 0.3);
        assert_eq!(next.q_in, 0.0);
        assert_eq!(next.q_out, 0.0);
    }

    #[test]
    fn equilibrium_level() {
        // h* = R * q_in = 2000 * 0.00025 = 0.5 m
        let cfg = TankConfig::paper_default();
        let valve = ValveConfig {
            travel_time_s: 0.0,
            ..Default::default()
        };
        let s = PlantState {
            valve_opening: 0.5,
            ..PlantState::at_level(0.5)
        };
        let next = plant_step(&s, &cfg, &valve, 5.0, 1.0, 1.0, 0.1).unwrap();
        assert!((next.q_in - 0.00025).abs() < 1e-18);
        assert!((next.h - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = TankConfig::paper_default();
        let valve = ValveConfig::default();
        let s = PlantState::default();
        assert!(plant_step(&s, &cfg, &valve, f64::NAN, 1.0, 1.0, 0.1).is_err());
        assert!(plant_step(&s, &cfg, &valve, 1.0, 1.0, 1.0, 0.0).is_err());
        assert!(plant_step(&s, &cfg, &valve, 1.0, 1.5, 1.0, 0.1).is_err());
        assert!(plant_step(&s, &cfg, &valve, 1.0, 1.0, f64::INFINITY, 0.1).is_err());
    }

    #[test]
    fn overflow_is_clamped_and_sticky() {
        let cfg = TankConfig {
            h_max: 0.1,
            ..TankConfig::paper_default()
        };
        let valve = ValveConfig {
            travel_time_s: 0.0,
            ..Default::default()
        };
        let mut s = PlantState::at_level(0.0999);
        for _ in 0..200 {
            s = plant_step(&s, &cfg, &valve, 10.0, 1.0, 0.0, 1.0).unwrap();
        }
        assert_eq!(s.h, 0.1);
        assert!(s.overflow && s.saturated_last_step);
        s = plant_step(&s, &cfg, &valve, 0.0, 1.0, 1.0, 1.0).unwrap();
        assert!(s.h < 0.1);
        assert!(s.overflow && !s.saturated_last_step);
    }

    #[test]
    fn torricelli_matches_linear_at_operating_point() {
        let lin = TankConfig::paper_default();
        let tor = TankConfig {
            outflow: OutflowModel::Torricelli,
            ..lin
        };
        let a = lin.outflow_at(0.5, 1.0);
        let b = tor.outflow_at(0.5, 1.0);
        assert!((a - b).abs() < 1e-18, "{a} vs {b}");
        assert!(tor.outflow_at(0.2, 1.0) > lin.outflow_at(0.2, 1.0));
    }

    #[test]
    fn transmitter_calibration() {
        let sensor = SensorConfig::default();
        let empty = measure(&PlantState::default(), &sensor);
        assert_eq!(empty.current_ma, 4.0);
        assert_eq!(empty.level_pct, 0.0);

        // 6600 / (998.2 * 9.8) = 0.67468 m
        let full = measure(&PlantState::at_level(sensor.span_level_m()), &sensor);
        assert!((full.pressure_pa - 6600.0).abs() < 1e-9);
        assert!((full.current_ma - 20.0).abs() < 1e-12);
        assert!((full.level_pct - 100.0).abs() < 1e-12);
        assert!((sensor.span_level_m() - 0.674_683_818_628_633_6).abs() < 1e-12);

        let half = measure(&PlantState::at_level(sensor.span_level_m() / 2.0), &sensor);
        assert!((half.current_ma - 12.0).abs() < 1e-12);
        assert!((half.level_pct - 50.0).abs() < 1e-12);

        let above = measure(&PlantState::at_level(0.9), &sensor);
        assert_eq!(above.current_ma, 20.0);
        assert!(above.level_pct > 100.0);
    }

    #[test]
    fn delay_line() {
        let mut d = TransportDelay::new(0.3, 0.1, 7.0);
        assert_eq!(d.samples(), 3);
        let out: Vec<f64> = (0..5).map(|i| d.push(i as f64)).collect();
        assert_eq!(out, vec![7.0, 7.0, 7.0, 0.0, 1.0]);
        let mut none = TransportDelay::new(0.0, 0.1, 7.0);
        assert_eq!(none.push(3.0), 3.0);
    }

    #[test]
    fn equilibrium_opening_for_setpoint() {
        let rig = Rig::default();
        let u = rig.equilibrium_opening(50.0, 1.0, 1.0).unwrap();
        // h = 0.3373 m, q_out = h/2000, opening = q_out / 0.0005 = h
        assert!((u - rig.sensor.pct_to_level_m(50.0)).abs() < 1e-12);
        assert!(rig.equilibrium_opening(50.0, 0.1, 1.0).is_none());
        assert!(!Rig {
            valve: ValveConfig {
                travel_time_s: 0.0,
                ..Default::default()
            },
            ..Rig::default()
        }
        .has_phase_lag());
    }
}
