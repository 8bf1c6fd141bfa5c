//! Closed-loop stepping: controller, dead time, valve, tank and transmitter.
//!
//! One [`LoopEngine::step`] is one sample of the AI -> controller -> AO
//! cycle. Actions are applied between steps only.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{ControlError, Controller, ControllerMode, Gains, OnOffConfig};
use crate::plant::{measure, plant_step, PlantError, PlantState, Rig, TransportDelay};
use crate::series::LogRow;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error("{field}: {message}")]
    Validation { field: &'static str, message: String },
}

impl EngineError {
    fn validation(field: &'static str, message: impl Into<String>) -> Self {
        EngineError::Validation {
            field,
            message: message.into(),
        }
    }
}

/// An operator or script action, applied at a step boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Action {
    SetSetpoint(f64),
    SetOutputLoad(f64),
    SetInputLimit(f64),
    SetMode(ControllerMode),
    SetGains(Gains),
    SetOnOff { sp_pct: f64, hyst_pct: f64 },
}

fn check_pct(field: &'static str, v: f64) -> Result<(), EngineError> {
    if (0.0..=100.0).contains(&v) {
        Ok(())
    } else {
        Err(EngineError::validation(field, format!("must be in [0, 100], got {v}")))
    }
}

fn check_fraction(field: &'static str, v: f64) -> Result<(), EngineError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(EngineError::validation(field, format!("must be in [0, 1], got {v}")))
    }
}

impl Action {
    /// Range checks shared by scenario events and runtime commands.
    pub fn validate(&self) -> Result<(), EngineError> {
        match *self {
            Action::SetSetpoint(sp) => check_pct("setpoint", sp),
            Action::SetOutputLoad(f) => check_fraction("output_load", f),
            Action::SetInputLimit(f) => check_fraction("input_limit", f),
            Action::SetMode(_) => Ok(()),
            Action::SetGains(g) => g
                .validate()
                .map_err(|e| EngineError::validation("gains", e.to_string())),
            Action::SetOnOff { sp_pct, hyst_pct } => {
                check_pct("setpoint", sp_pct)?;
                OnOffConfig::new(sp_pct, hyst_pct)
                    .map(|_| ())
                    .map_err(|e| EngineError::validation("hysteresis", e.to_string()))
            }
        }
    }
}

/// Initial controller configuration of a loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerSetup {
    pub mode: ControllerMode,
    pub gains: Gains,
    pub setpoint_pct: f64,
    pub hysteresis_pct: f64,
}

impl Default for ControllerSetup {
    fn default() -> Self {
        ControllerSetup {
            mode: ControllerMode::PID,
            gains: Gains::default(),
            setpoint_pct: 70.0,
            hysteresis_pct: 10.0,
        }
    }
}

impl ControllerSetup {
    pub fn validate(&self) -> Result<(), EngineError> {
        check_pct("setpoint", self.setpoint_pct)?;
        self.gains
            .validate()
            .map_err(|e| EngineError::validation("gains", e.to_string()))?;
        if !(self.hysteresis_pct > 0.0 && self.hysteresis_pct <= 100.0) {
            return Err(EngineError::validation(
                "hysteresis",
                format!("must be in (0, 100], got {}", self.hysteresis_pct),
            ));
        }
        if self.mode == ControllerMode::OnOff {
            OnOffConfig::new(self.setpoint_pct, self.hysteresis_pct)
                .map_err(|e| EngineError::validation("hysteresis", e.to_string()))?;
        }
        Ok(())
    }
}

/// Initial conditions of the loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialConditions {
    pub level_m: f64,
    pub valve_opening: f64,
    pub inlet_limit: f64,
    pub load_fraction: f64,
}

impl Default for InitialConditions {
    fn default() -> Self {
        InitialConditions {
            level_m: 0.0,
            valve_opening: 0.0,
            inlet_limit: 1.0,
            load_fraction: 1.0,
        }
    }
}

type NoiseHook = Box<dyn FnMut(f64) -> f64 + Send>;

pub struct LoopEngine {
    rig: Rig,
    dt: f64,
    step_index: u64,
    plant: PlantState,
    delay: TransportDelay,
    controller: Controller,
    setpoint_pct: f64,
    inlet_limit: f64,
    load_fraction: f64,
    last_output_v: f64,
    noise: Option<NoiseHook>,
}

impl std::fmt::Debug for LoopEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LoopEngine")
            .field("step_index", &self.step_index)
            .field("plant", &self.plant)
            .field("controller", &self.controller)
            .field("setpoint_pct", &self.setpoint_pct)
            .finish_non_exhaustive()
    }
}

impl LoopEngine {
    pub fn new(rig: Rig, setup: ControllerSetup, dt: f64) -> Result<Self, EngineError> {
        Self::with_initial(rig, setup, dt, InitialConditions::default())
    }

    pub fn with_initial(
        rig: Rig,
        setup: ControllerSetup,
        dt: f64,
        init: InitialConditions,
    ) -> Result<Self, EngineError> {
        rig.validate()?;
        setup.validate()?;
        if !(dt.is_finite() && dt > 0.0) {
            return Err(EngineError::validation("dt", format!("must be > 0, got {dt}")));
        }
        check_fraction("input_limit", init.inlet_limit)?;
        check_fraction("output_load", init.load_fraction)?;
        check_fraction("valve_opening", init.valve_opening)?;
        if !(0.0..=rig.tank.h_max).contains(&init.level_m) {
            return Err(EngineError::validation(
                "level",
                format!("must be in [0, h_max], got {}", init.level_m),
            ));
        }
        let initial_command = rig.valve.v_min + init.valve_opening * (rig.valve.v_max - rig.valve.v_min);
        let plant = PlantState {
            h: init.level_m,
            valve_opening: init.valve_opening,
            q_in: init.valve_opening * init.inlet_limit * rig.tank.q_in_max,
            q_out: rig.tank.outflow_at(init.level_m, init.load_fraction),
            ..Default::default()
        };
        Ok(LoopEngine {
            delay: TransportDelay::new(rig.dead_time_s, dt, initial_command),
            rig,
            dt,
            step_index: 0,
            plant,
            controller: Controller::new(setup.mode, setup.gains, setup.hysteresis_pct),
            setpoint_pct: setup.setpoint_pct,
            inlet_limit: init.inlet_limit,
            load_fraction: init.load_fraction,
            last_output_v: initial_command,
            noise: None,
        })
    }

    /// Additive measurement noise in percent of span, as a function of time.
    pub fn set_measurement_noise(&mut self, hook: Option<NoiseHook>) {
        self.noise = hook;
    }

    pub fn apply(&mut self, action: &Action) -> Result<(), EngineError> {
        action.validate()?;
        match *action {
            Action::SetSetpoint(sp) => {
                if self.controller.mode == ControllerMode::OnOff && sp < self.controller.hysteresis_pct {
                    return Err(EngineError::validation(
                        "setpoint",
                        format!("on-off setpoint {sp} is below the hysteresis band"),
                    ));
                }
                self.setpoint_pct = sp;
            }
            Action::SetOutputLoad(f) => self.load_fraction = f,
            Action::SetInputLimit(f) => self.inlet_limit = f,
            Action::SetMode(mode) => {
                if mode == ControllerMode::OnOff && self.setpoint_pct < self.controller.hysteresis_pct {
                    return Err(EngineError::validation(
                        "mode",
                        "on-off hysteresis exceeds the current setpoint",
                    ));
                }
                if mode != self.controller.mode {
                    self.controller.mode = mode;
                    self.controller.reset();
                    self.controller.state.last_output_v = self.last_output_v;
                }
            }
            Action::SetGains(g) => self.controller.gains = g,
            Action::SetOnOff { sp_pct, hyst_pct } => {
                self.setpoint_pct = sp_pct;
                self.controller.hysteresis_pct = hyst_pct;
            }
        }
        Ok(())
    }

    pub fn measurement_pct(&mut self) -> f64 {
        let pv = measure(&self.plant, &self.rig.sensor).level_pct;
        let t = self.time_s();
        match self.noise.as_mut() {
            Some(hook) => pv + hook(t),
            None => pv,
        }
    }

    /// Advance one sample and return the log row for the completed step.
    pub fn step(&mut self) -> Result<LogRow, EngineError> {
        let pv = self.measurement_pct();
        let command = self.controller.step(self.setpoint_pct, pv, self.dt)?;
        self.last_output_v = command;
        let delayed = self.delay.push(command);
        let mut next = plant_step(
            &self.plant,
            &self.rig.tank,
            &self.rig.valve,
            delayed,
            self.inlet_limit,
            self.load_fraction,
            self.dt,
        )?;
        self.step_index += 1;
        next.t = self.time_s();
        self.plant = next;
        Ok(self.row())
    }

    pub fn row(&self) -> LogRow {
        let level_pct = measure(&self.plant, &self.rig.sensor).level_pct;
        LogRow {
            t_s: self.time_s(),
            level_m: self.plant.h,
            level_pct,
            sp_pct: self.setpoint_pct,
            error_pct: self.setpoint_pct - level_pct,
            u_volts: self.last_output_v,
            valve_frac: self.plant.valve_opening,
            q_in_m3s: self.plant.q_in,
            q_out_m3s: self.plant.q_out,
            mode: self.controller.mode,
        }
    }

    /// Simulated time, computed from the step count to avoid drift.
    pub fn time_s(&self) -> f64 {
        self.step_index as f64 * self.dt
    }

    pub fn step_index(&self) -> u64 {
        self.step_index
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn rig(&self) -> &Rig {
        &self.rig
    }

    pub fn plant(&self) -> &PlantState {
        &self.plant
    }

    pub fn controller(&self) -> &Controller {
        &self.controller
    }

    pub fn setpoint_pct(&self) -> f64 {
        self.setpoint_pct
    }

    pub fn inlet_limit(&self) -> f64 {
        self.inlet_limit
    }

    pub fn load_fraction(&self) -> f64 {
        self.load_fraction
    }

    pub fn last_output_v(&self) -> f64 {
        self.last_output_v
    }
}
