//! On-off and P/PD/PI/PID level controllers.
//!
//! Both measurement and controller output are expressed in percent of span;
//! 100 % of output corresponds to 10 V on the valve command.
//!
//! The PID law is the parallel form `u = kp*e + ki*I + kd*D` with
//! - `I` accumulated by the trapezoid rule, frozen while the output is
//!   saturated in the direction the error would push it further,
//! - `D` the derivative of `-measurement` through a first-order filter with
//!   time constant `kd / N`, `N = 10`. The first sample after a reset has
//!   `D = 0`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const OUTPUT_MIN_V: f64 = 0.0;
pub const OUTPUT_MAX_V: f64 = 10.0;
/// Derivative filter divisor.
pub const DERIVATIVE_FILTER_N: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("invalid gains: {0}")]
    InvalidGains(String),
    #[error("invalid on-off configuration: {0}")]
    InvalidOnOff(String),
    #[error("non-finite controller input: {0}")]
    NonFinite(String),
    #[error("dt must be > 0, got {0}")]
    InvalidDt(f64),
    #[error("mode {0} has no PID law")]
    NotPid(ControllerMode),
    #[error("unknown controller mode `{0}`")]
    UnknownMode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerMode {
    OnOff,
    P,
    PD,
    PI,
    PID,
}

impl ControllerMode {
    pub const ALL: [ControllerMode; 5] = [
        ControllerMode::OnOff,
        ControllerMode::P,
        ControllerMode::PD,
        ControllerMode::PI,
        ControllerMode::PID,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ControllerMode::OnOff => "onoff",
            ControllerMode::P => "p",
            ControllerMode::PD => "pd",
            ControllerMode::PI => "pi",
            ControllerMode::PID => "pid",
        }
    }

    pub fn uses_integral(self) -> bool {
        matches!(self, ControllerMode::PI | ControllerMode::PID)
    }

    pub fn uses_derivative(self) -> bool {
        matches!(self, ControllerMode::PD | ControllerMode::PID)
    }
}

impl fmt::Display for ControllerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ControllerMode {
    type Err = ControlError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ControllerMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| ControlError::UnknownMode(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Gains {
    /// Output-% per error-%.
    pub kp: f64,
    /// 1/s.
    pub ki: f64,
    /// s.
    pub kd: f64,
}

impl Gains {
    pub fn new(kp: f64, ki: f64, kd: f64) -> Result<Self, ControlError> {
        let g = Gains { kp, ki, kd };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        for (name, v) in [("kp", self.kp), ("ki", self.ki), ("kd", self.kd)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ControlError::InvalidGains(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Gains with the terms the mode does not use forced to zero.
    pub fn masked(&self, mode: ControllerMode) -> Gains {
        Gains {
            kp: if mode == ControllerMode::OnOff { 0.0 } else { self.kp },
            ki: if mode.uses_integral() { self.ki } else { 0.0 },
            kd: if mode.uses_derivative() { self.kd } else { 0.0 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OnOffConfig {
    pub setpoint_pct: f64,
    pub hysteresis_pct: f64,
}

impl OnOffConfig {
    pub fn new(setpoint_pct: f64, hysteresis_pct: f64) -> Result<Self, ControlError> {
        let cfg = OnOffConfig {
            setpoint_pct,
            hysteresis_pct,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        if !(0.0..=100.0).contains(&self.setpoint_pct) {
            return Err(ControlError::InvalidOnOff(format!(
                "setpoint must be in [0, 100], got {}",
                self.setpoint_pct
            )));
        }
        if !(self.hysteresis_pct > 0.0 && self.hysteresis_pct <= self.setpoint_pct) {
            return Err(ControlError::InvalidOnOff(format!(
                "hysteresis must be in (0, setpoint], got {}",
                self.hysteresis_pct
            )));
        }
        Ok(())
    }
}

/// Two-position control with a dead band below the setpoint.
///
/// At or above the setpoint the valve is closed (0 V); at or below
/// `setpoint - hysteresis` it is fully opened (10 V); in between the
/// previous output is held.
pub fn onoff_step(cfg: &OnOffConfig, measurement_pct: f64, prev_output_v: f64) -> f64 {
    if measurement_pct >= cfg.setpoint_pct {
        OUTPUT_MIN_V
    } else if measurement_pct <= cfg.setpoint_pct - cfg.hysteresis_pct
        || prev_output_v >= 0.5 * (OUTPUT_MIN_V + OUTPUT_MAX_V)
    {
        OUTPUT_MAX_V
    } else {
        OUTPUT_MIN_V
    }
}

/// Discrete controller memory.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControllerState {
    /// Integral of error, %*s.
    pub integral: f64,
    /// Error used by the trapezoid rule; `None` right after a reset.
    pub prev_error_pct: Option<f64>,
    /// `None` right after a reset.
    pub prev_measurement_pct: Option<f64>,
    /// Filtered derivative of `-measurement`, %/s.
    pub prev_derivative: f64,
    pub last_output_v: f64,
}

impl ControllerState {
    pub fn reset(&self) -> ControllerState {
        ControllerState::default()
    }
}

pub fn reset(_state: &ControllerState) -> ControllerState {
    ControllerState::default()
}

/// The individual terms of one PID evaluation, in percent of output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PidTerms {
    pub proportional: f64,
    pub integral: f64,
    pub derivative: f64,
}

/// One PID sample. Returns the valve command in volts and the new memory.
pub fn pid_step(
    gains: &Gains,
    mode: ControllerMode,
    setpoint_pct: f64,
    measurement_pct: f64,
    state: &ControllerState,
    dt: f64,
) -> Result<(f64, ControllerState), ControlError> {
    pid_step_terms(gains, mode, setpoint_pct, measurement_pct, state, dt).map(|(v, s, _)| (v, s))
}

/// Same as [`pid_step`] but also reports the individual terms.
pub fn pid_step_terms(
    gains: &Gains,
    mode: ControllerMode,
    setpoint_pct: f64,
    measurement_pct: f64,
    state: &ControllerState,
    dt: f64,
) -> Result<(f64, ControllerState, PidTerms), ControlError> {
    if mode == ControllerMode::OnOff {
        return Err(ControlError::NotPid(mode));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(ControlError::InvalidDt(dt));
    }
    if !setpoint_pct.is_finite() || !measurement_pct.is_finite() {
        return Err(ControlError::NonFinite(format!(
            "setpoint {setpoint_pct}, measurement {measurement_pct}"
        )));
    }
    gains.validate()?;
    let g = gains.masked(mode);
    let error = setpoint_pct - measurement_pct;
    let mut next = *state;
    next.prev_measurement_pct = Some(measurement_pct);

    let derivative = if g.kd > 0.0 {
        let d = match state.prev_measurement_pct {
            None => 0.0,
            Some(prev) => {
                let raw = -(measurement_pct - prev) / dt;
                let tf = g.kd / DERIVATIVE_FILTER_N;
                (tf * state.prev_derivative + dt * raw) / (tf + dt)
            }
        };
        next.prev_derivative = d;
        d
    } else {
        next.prev_derivative = 0.0;
        0.0
    };

    let p_term = g.kp * error;
    let d_term = g.kd * derivative;
    let mut i_term = g.ki * state.integral;
    if g.ki > 0.0 {
        let prev_e = state.prev_error_pct.unwrap_or(error);
        let candidate = state.integral + 0.5 * dt * (error + prev_e);
        let raw = p_term + g.ki * candidate + d_term;
        let winding_up = (raw > 100.0 && error > 0.0) || (raw < 0.0 && error < 0.0);
        if !winding_up {
            next.integral = candidate;
            i_term = g.ki * candidate;
        }
        next.prev_error_pct = Some(error);
    }

    let output_pct = (p_term + i_term + d_term).clamp(0.0, 100.0);
    let volts = output_pct / 100.0 * (OUTPUT_MAX_V - OUTPUT_MIN_V) + OUTPUT_MIN_V;
    next.last_output_v = volts;
    Ok((
        volts,
        next,
        PidTerms {
            proportional: p_term,
            integral: i_term,
            derivative: d_term,
        },
    ))
}

/// Stateful controller that dispatches on mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Controller {
    pub mode: ControllerMode,
    pub gains: Gains,
    pub hysteresis_pct: f64,
    pub state: ControllerState,
}

impl Controller {
    pub fn new(mode: ControllerMode, gains: Gains, hysteresis_pct: f64) -> Self {
        Controller {
            mode,
            gains,
            hysteresis_pct,
            state: ControllerState::default(),
        }
    }

    pub fn reset(&mut self) {
        self.state = self.state.reset();
    }

    pub fn step(&mut self, setpoint_pct: f64, measurement_pct: f64, dt: f64) -> Result<f64, ControlError> {
        match self.mode {
            ControllerMode::OnOff => {
                if !measurement_pct.is_finite() {
                    return Err(ControlError::NonFinite(format!("measurement {measurement_pct}")));
                }
                let cfg = OnOffConfig {
                    setpoint_pct,
                    hysteresis_pct: self.hysteresis_pct,
                };
                let v = onoff_step(&cfg, measurement_pct, self.state.last_output_v);
                self.state.last_output_v = v;
                self.state.prev_measurement_pct = Some(measurement_pct);
                Ok(v)
            }
            mode => {
                let (v, s) = pid_step(&self.gains, mode, setpoint_pct, measurement_pct, &self.state, dt)?;
                self.state = s;
                Ok(v)
            }
        }
    }
}
