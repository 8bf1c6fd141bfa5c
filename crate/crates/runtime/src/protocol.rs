//! Wire messages: one JSON object per line (or per WebSocket text frame).
//!
//! Client to server: `{"cmd": "<name>", "args": {...}, "id": <int>}`.
//! Server to client: `hello`, `ack`, `error` and `snapshot` objects.

use std::fmt;

use hydrolab::control::{ControllerMode, Gains};
use hydrolab::engine::Action;
use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const PROTOCOL_VERSION: &str = "1";

/// Simulated seconds per wall second; infinite means as fast as possible.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Speed(pub f64);

impl Speed {
    pub const UNLIMITED: Speed = Speed(f64::INFINITY);

    pub fn is_unlimited(self) -> bool {
        self.0.is_infinite()
    }

    pub fn validate(self) -> Result<(), String> {
        if self.0 > 0.0 && !self.0.is_nan() {
            Ok(())
        } else {
            Err(format!("speed must be > 0, got {}", self.0))
        }
    }
}

impl fmt::Display for Speed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_unlimited() {
            f.write_str("inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl std::str::FromStr for Speed {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let speed = match s.trim() {
            "inf" | "max" | "unlimited" => Speed::UNLIMITED,
            other => Speed(other.parse().map_err(|_| format!("invalid speed `{other}`"))?),
        };
        speed.validate()?;
        Ok(speed)
    }
}

impl Serialize for Speed {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.is_unlimited() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Speed {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Speed(v)),
            Raw::Text(t) => t.parse().map_err(de::Error::custom),
        }
    }
}

/// Ultimate-gain experiment request; unset fields take the tuner defaults.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TuneParams {
    /// Operating point, % of span. Defaults to the current setpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kp_lo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kp_hi: Option<f64>,
    /// Controller to install from the Ziegler-Nichols table; defaults to PID.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<ControllerMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", content = "args", rename_all = "snake_case")]
pub enum Command {
    SetSetpoint { pct: f64 },
    SetGains { kp: f64, ki: f64, kd: f64 },
    SetMode { mode: ControllerMode },
    SetOnOff { sp: f64, hyst: f64 },
    SetOutputLoad { fraction: f64 },
    SetInputLimit { fraction: f64 },
    Start {},
    Pause {},
    Reset {},
    SetSpeed { multiplier: Speed },
    LoadScenario { name: String },
    StartTune(TuneParams),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SetSetpoint { .. } => "set_setpoint",
            Command::SetGains { .. } => "set_gains",
            Command::SetMode { .. } => "set_mode",
            Command::SetOnOff { .. } => "set_on_off",
            Command::SetOutputLoad { .. } => "set_output_load",
            Command::SetInputLimit { .. } => "set_input_limit",
            Command::Start {} => "start",
            Command::Pause {} => "pause",
            Command::Reset {} => "reset",
            Command::SetSpeed { .. } => "set_speed",
            Command::LoadScenario { .. } => "load_scenario",
            Command::StartTune(_) => "start_tune",
        }
    }

    /// The loop action this command performs, if it changes the process.
    pub fn to_action(&self) -> Option<Action> {
        Some(match *self {
            Command::SetSetpoint { pct } => Action::SetSetpoint(pct),
            Command::SetGains { kp, ki, kd } => Action::SetGains(Gains { kp, ki, kd }),
            Command::SetMode { mode } => Action::SetMode(mode),
            Command::SetOnOff { sp, hyst } => Action::SetOnOff {
                sp_pct: sp,
                hyst_pct: hyst,
            },
            Command::SetOutputLoad { fraction } => Action::SetOutputLoad(fraction),
            Command::SetInputLimit { fraction } => Action::SetInputLimit(fraction),
            _ => return None,
        })
    }

    pub fn from_action(action: &Action) -> Command {
        match *action {
            Action::SetSetpoint(pct) => Command::SetSetpoint { pct },
            Action::SetGains(g) => Command::SetGains {
                kp: g.kp,
                ki: g.ki,
                kd: g.kd,
            },
            Action::SetMode(mode) => Command::SetMode { mode },
            Action::SetOnOff { sp_pct, hyst_pct } => Command::SetOnOff {
                sp: sp_pct,
                hyst: hyst_pct,
            },
            Action::SetOutputLoad(fraction) => Command::SetOutputLoad { fraction },
            Action::SetInputLimit(fraction) => Command::SetInputLimit { fraction },
        }
    }

    /// Same range rules as scenario events.
    pub fn validate(&self) -> Result<(), String> {
        if let Some(action) = self.to_action() {
            return action.validate().map_err(|e| e.to_string());
        }
        match self {
            Command::SetSpeed { multiplier } => multiplier.validate(),
            Command::LoadScenario { name } => {
                let ok = !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
                if ok {
                    Ok(())
                } else {
                    Err(format!("invalid scenario name `{name}`"))
                }
            }
            Command::StartTune(p) => {
                if let Some(sp) = p.sp {
                    if !(0.0..=100.0).contains(&sp) {
                        return Err(format!("setpoint: must be in [0, 100], got {sp}"));
                    }
                }
                if p.mode == Some(ControllerMode::OnOff) {
                    return Err("tuning cannot install an on-off controller".into());
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// A client request; `id` is echoed back in the reply.
#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub id: Value,
    pub command: Command,
}

/// Parse and validate one request line. On failure returns the id (if it
/// could be read) and a message.
pub fn parse_request(line: &str) -> Result<Request, (Value, String)> {
    let value: Value = serde_json::from_str(line).map_err(|e| (Value::Null, format!("invalid JSON: {e}")))?;
    let Value::Object(mut obj) = value else {
        return Err((Value::Null, "request must be a JSON object".into()));
    };
    let id = obj.remove("id").unwrap_or(Value::Null);
    let fail = |m: String| Err((id.clone(), m));
    let cmd = match obj.remove("cmd") {
        Some(Value::String(c)) => c,
        Some(_) => return fail("`cmd` must be a string".into()),
        None => return fail("missing `cmd`".into()),
    };
    let args = match obj.remove("args") {
        None | Some(Value::Null) => Map::new(),
        Some(Value::Object(m)) => m,
        Some(_) => return fail("`args` must be an object".into()),
    };
    if let Some(extra) = obj.keys().next() {
        return fail(format!("unknown field `{extra}`"));
    }
    let mut envelope = Map::new();
    envelope.insert("cmd".into(), Value::String(cmd.clone()));
    envelope.insert("args".into(), Value::Object(args.clone()));
    let command: Command = match serde_json::from_value(Value::Object(envelope)) {
        Ok(c) => c,
        Err(e) => return fail(format!("{cmd}: {e}")),
    };
    // Reject argument names the command does not know.
    if let Ok(Value::Object(canonical)) = serde_json::to_value(&command) {
        let known = match canonical.get("args") {
            Some(Value::Object(m)) => m.keys().cloned().collect::<Vec<_>>(),
            _ => Vec::new(),
        };
        let allowed: &[&str] = match command {
            Command::StartTune(_) => &["sp", "tol", "kp_lo", "kp_hi", "mode"],
            _ => &[],
        };
        if let Some(bad) = args
            .keys()
            .find(|k| !known.contains(k) && !allowed.contains(&k.as_str()))
        {
            return fail(format!("{cmd}: unknown argument `{bad}`"));
        }
    }
    if let Err(m) = command.validate() {
        return fail(format!("ValidationError: {m}"));
    }
    Ok(Request { id, command })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Clock {
    pub speed: Speed,
    pub paused: bool,
}

/// One completed step as the operator console sees it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub t_s: f64,
    pub level_pct: f64,
    pub level_m: f64,
    pub setpoint_pct: f64,
    pub output_v: f64,
    pub valve_frac: f64,
    pub q_in: f64,
    pub q_out: f64,
    pub mode: ControllerMode,
    pub gains: Gains,
    pub clock: Clock,
    pub alarms: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub version: String,
    pub config: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ServerMessage {
    Hello { hello: Hello },
    Ack { ack: Value, applied_at_step: u64 },
    Error { error: Value, message: String },
    Snapshot { snapshot: Snapshot },
}

impl ServerMessage {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("server messages serialize")
    }
}
