//! Scripted experiments: timelines of setpoint, load and controller changes.

mod metrics;
mod parse;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Action, ControllerSetup, EngineError, LoopEngine};
use crate::plant::{matched_torricelli_coeff, OutflowModel, Rig, SensorConfig, TankConfig, ValveConfig};
use crate::presets::{PresetError, PresetLibrary};
use crate::series::TimeSeries;

pub use metrics::{
    compute_metrics, compute_metrics_samples, format_metrics_table, MetricSample, MetricsError, TransientMetrics,
    DEFAULT_BAND_PCT,
};
pub use parse::{parse_preset_text, parse_scenario, ParseError};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Preset(#[from] PresetError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Inline plant parameters as written in a scenario file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InlinePlant {
    pub capacitance: f64,
    pub resistance: f64,
    pub h_max: f64,
    pub q_max: f64,
    pub outflow: OutflowModel,
    pub travel_s: f64,
    pub dead_time_s: f64,
}

impl Default for InlinePlant {
    fn default() -> Self {
        let tank = TankConfig::paper_default();
        InlinePlant {
            capacitance: tank.capacitance,
            resistance: tank.resistance,
            h_max: tank.h_max,
            q_max: tank.q_in_max,
            outflow: tank.outflow,
            travel_s: ValveConfig::default().travel_time_s,
            dead_time_s: 0.0,
        }
    }
}

impl InlinePlant {
    pub fn to_rig(&self) -> Rig {
        Rig {
            tank: TankConfig {
                capacitance: self.capacitance,
                resistance: self.resistance,
                area: self.capacitance,
                h_max: self.h_max,
                q_in_max: self.q_max,
                outflow: self.outflow,
                torricelli_coeff: matched_torricelli_coeff(self.resistance),
            },
            valve: ValveConfig {
                travel_time_s: self.travel_s,
                ..ValveConfig::default()
            },
            sensor: SensorConfig::default(),
            dead_time_s: self.dead_time_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PlantSpec {
    Preset(String),
    Inline(InlinePlant),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEvent {
    pub at_s: f64,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub plant: PlantSpec,
    pub control: ControllerSetup,
    pub duration_s: f64,
    pub dt_s: f64,
    pub events: Vec<ScenarioEvent>,
}

impl Scenario {
    pub fn step_count(&self) -> u64 {
        ((self.duration_s / self.dt_s).round() as u64).max(1)
    }

    pub fn resolve_rig(&self, presets: &PresetLibrary) -> Result<Rig, ScenarioError> {
        Ok(match &self.plant {
            PlantSpec::Preset(name) => presets.resolve(name)?.rig,
            PlantSpec::Inline(p) => p.to_rig(),
        })
    }

    /// Resolve the plant and run the scenario.
    pub fn run(&self, presets: &PresetLibrary) -> Result<TimeSeries, ScenarioError> {
        let rig = self.resolve_rig(presets)?;
        run_scenario(self, &rig, &self.control)
    }

    /// The same scenario with a different step size.
    pub fn with_dt(&self, dt_s: f64) -> Result<Scenario, ScenarioError> {
        let s = Scenario { dt_s, ..self.clone() };
        parse::validate(&s)?;
        Ok(s)
    }
}

/// Step index before which an event at `at_s` is applied.
pub fn event_step(at_s: f64, dt_s: f64) -> u64 {
    (at_s / dt_s - 1e-9).ceil().max(0.0) as u64
}

/// Run a scenario against a rig and initial controller, one log row per step.
pub fn run_scenario(scenario: &Scenario, rig: &Rig, controller: &ControllerSetup) -> Result<TimeSeries, ScenarioError> {
    let mut engine = LoopEngine::new(*rig, *controller, scenario.dt_s)?;
    let n = scenario.step_count();
    let mut rows = Vec::with_capacity(n as usize);
    let mut pending = scenario.events.iter().peekable();
    for k in 0..n {
        while let Some(ev) = pending.next_if(|ev| event_step(ev.at_s, scenario.dt_s) <= k) {
            engine.apply(&ev.action)?;
        }
        rows.push(engine.step()?);
    }
    Ok(TimeSeries { rows })
}

fn write_num(f: &mut fmt::Formatter<'_>, v: f64) -> fmt::Result {
    write!(f, "{v}")
}

impl fmt::Display for Scenario {
    /// Canonical text form; parses back to an identical scenario.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scenario \"{}\"", self.name)?;
        match &self.plant {
            PlantSpec::Preset(name) => writeln!(f, "plant {name}")?,
            PlantSpec::Inline(p) => writeln!(
                f,
                "plant {{ C={} R={} hmax={} qmax={} outflow={} travel={} deadtime={} }}",
                p.capacitance,
                p.resistance,
                p.h_max,
                p.q_max,
                p.outflow.keyword(),
                p.travel_s,
                p.dead_time_s
            )?,
        }
        let c = &self.control;
        writeln!(
            f,
            "control {} kp={} ki={} kd={} sp={} hyst={}",
            c.mode, c.gains.kp, c.gains.ki, c.gains.kd, c.setpoint_pct, c.hysteresis_pct
        )?;
        f.write_str("run duration=")?;
        write_num(f, self.duration_s)?;
        f.write_str("s dt=")?;
        write_num(f, self.dt_s)?;
        f.write_str("s\n")?;
        for ev in &self.events {
            write!(f, "at {}s set ", ev.at_s)?;
            match ev.action {
                Action::SetSetpoint(sp) => writeln!(f, "sp {sp}")?,
                Action::SetOutputLoad(x) => writeln!(f, "outload {x}")?,
                Action::SetInputLimit(x) => writeln!(f, "inlimit {x}")?,
                Action::SetMode(m) => writeln!(f, "mode {m}")?,
                Action::SetGains(g) => writeln!(f, "gains kp={} ki={} kd={}", g.kp, g.ki, g.kd)?,
                Action::SetOnOff { sp_pct, hyst_pct } => writeln!(f, "onoff sp={sp_pct} hyst={hyst_pct}")?,
            }
        }
        Ok(())
    }
}
