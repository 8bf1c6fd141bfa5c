//! Line-oriented scenario grammar.
//!
//! ```text
//! scenario "<name>"
//! plant    <preset-name> | plant { C=<num> R=<num> hmax=<num> qmax=<num> outflow=linear|torricelli travel=<num> deadtime=<num> }
//! control  <onoff|p|pd|pi|pid> [kp=<num>] [ki=<num>] [kd=<num>] [sp=<num>] [hyst=<num>]
//! run      duration=<num>s dt=<num>s
//! at <num>s set sp <num>
//! at <num>s set outload <num>
//! at <num>s set inlimit <num>
//! at <num>s set mode <name> [kp=..] [ki=..] [kd=..] [sp=..] [hyst=..]
//! at <num>s set gains kp=<num> ki=<num> kd=<num>
//! at <num>s set onoff sp=<num> hyst=<num>
//! # comment
//! ```
//!
//! `set mode` with gains expands to a mode event followed by a gains event
//! (and an on-off event for `sp`/`hyst`), all at the same time.

use thiserror::Error;

use super::{InlinePlant, PlantSpec, Scenario, ScenarioEvent};
use crate::control::{ControllerMode, Gains};
use crate::engine::{Action, ControllerSetup};
use crate::plant::OutflowModel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("SyntaxError at line {line}, column {col}: {message}")]
    Syntax { line: usize, col: usize, message: String },
    #[error("ValidationError in {field}: {message}")]
    Validation { field: String, message: String },
}

#[derive(Debug, Clone, Copy)]
struct Token<'a> {
    text: &'a str,
    col: usize,
}

struct Line<'a> {
    number: usize,
    tokens: Vec<Token<'a>>,
    end_col: usize,
}

impl<'a> Line<'a> {
    fn err(&self, col: usize, message: impl Into<String>) -> ParseError {
        ParseError::Syntax {
            line: self.number,
            col,
            message: message.into(),
        }
    }

    fn tok_err(&self, tok: &Token<'_>, message: impl Into<String>) -> ParseError {
        self.err(tok.col, message)
    }

    fn get(&self, i: usize, what: &str) -> Result<Token<'a>, ParseError> {
        self.tokens
            .get(i)
            .copied()
            .ok_or_else(|| self.err(self.end_col, format!("expected {what}")))
    }
}

fn tokenize(text: &str, number: usize) -> Result<Line<'_>, ParseError> {
    let bytes = text.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c == b'#' {
            break;
        }
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if c == b'"' {
            i += 1;
            while i < bytes.len() && bytes[i] != b'"' {
                i += 1;
            }
            if i >= bytes.len() {
                return Err(ParseError::Syntax {
                    line: number,
                    col: start + 1,
                    message: "unterminated string".into(),
                });
            }
            i += 1;
        } else if c == b'{' || c == b'}' {
            i += 1;
        } else {
            while i < bytes.len() && !bytes[i].is_ascii_whitespace() && !matches!(bytes[i], b'{' | b'}' | b'#' | b'"') {
                i += 1;
            }
        }
        tokens.push(Token {
            text: &text[start..i],
            col: start + 1,
        });
    }
    Ok(Line {
        number,
        tokens,
        end_col: text.len() + 1,
    })
}

fn parse_number(line: &Line<'_>, tok: &Token<'_>, text: &str, col_offset: usize) -> Result<f64, ParseError> {
    match text.parse::<f64>() {
        Ok(v) if v.is_finite() && !text.is_empty() && !text.starts_with('+') => Ok(v),
        _ => Err(line.err(tok.col + col_offset, format!("expected a number, found `{text}`"))),
    }
}

fn parse_seconds(line: &Line<'_>, tok: &Token<'_>, text: &str, col_offset: usize) -> Result<f64, ParseError> {
    let Some(num) = text.strip_suffix('s') else {
        return Err(line.err(
            tok.col + col_offset,
            format!("expected a duration like `10s`, found `{text}`"),
        ));
    };
    parse_number(line, tok, num, col_offset)
}

/// Split `key=value`; returns the value's column offset within the token.
fn split_kv<'a>(line: &Line<'_>, tok: &Token<'a>) -> Result<(&'a str, &'a str, usize), ParseError> {
    match tok.text.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k, v, k.len() + 1)),
        _ => Err(line.tok_err(tok, format!("expected key=value, found `{}`", tok.text))),
    }
}

fn is_identifier(s: &str) -> bool {
    !s.is_empty()
        && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        && s.chars().next().is_some_and(|c| c.is_ascii_alphabetic())
}

fn parse_mode(line: &Line<'_>, tok: &Token<'_>) -> Result<ControllerMode, ParseError> {
    tok.text.parse().map_err(|_| {
        line.tok_err(
            tok,
            format!(
                "unknown controller mode `{}` (expected onoff, p, pd, pi or pid)",
                tok.text
            ),
        )
    })
}

fn expect_end(line: &Line<'_>, idx: usize) -> Result<(), ParseError> {
    match line.tokens.get(idx) {
        Some(tok) => Err(line.tok_err(tok, format!("unexpected `{}`", tok.text))),
        None => Ok(()),
    }
}

#[derive(Default)]
struct ControlParams {
    kp: Option<f64>,
    ki: Option<f64>,
    kd: Option<f64>,
    sp: Option<f64>,
    hyst: Option<f64>,
}

impl ControlParams {
    fn parse(line: &Line<'_>, from: usize) -> Result<Self, ParseError> {
        let mut p = ControlParams::default();
        for tok in &line.tokens[from..] {
            let (key, value, off) = split_kv(line, tok)?;
            let slot = match key {
                "kp" => &mut p.kp,
                "ki" => &mut p.ki,
                "kd" => &mut p.kd,
                "sp" => &mut p.sp,
                "hyst" => &mut p.hyst,
                _ => return Err(line.tok_err(tok, format!("unknown key `{key}`"))),
            };
            if slot.is_some() {
                return Err(line.tok_err(tok, format!("duplicate key `{key}`")));
            }
            *slot = Some(parse_number(line, tok, value, off)?);
        }
        Ok(p)
    }

    fn has_gains(&self) -> bool {
        self.kp.is_some() || self.ki.is_some() || self.kd.is_some()
    }

    fn gains(&self) -> Gains {
        Gains {
            kp: self.kp.unwrap_or(0.0),
            ki: self.ki.unwrap_or(0.0),
            kd: self.kd.unwrap_or(0.0),
        }
    }
}

fn parse_plant(line: &Line<'_>) -> Result<PlantSpec, ParseError> {
    let first = line.get(1, "a preset name or `{`")?;
    if first.text != "{" {
        if !is_identifier(first.text) {
            return Err(line.tok_err(&first, format!("invalid preset name `{}`", first.text)));
        }
        expect_end(line, 2)?;
        return Ok(PlantSpec::Preset(first.text.to_string()));
    }
    let mut plant = InlinePlant::default();
    let mut seen: Vec<&str> = Vec::new();
    let mut idx = 2;
    loop {
        let tok = line.get(idx, "`}`")?;
        idx += 1;
        if tok.text == "}" {
            break;
        }
        let (key, value, off) = split_kv(line, &tok)?;
        if seen.contains(&key) {
            return Err(line.tok_err(&tok, format!("duplicate key `{key}`")));
        }
        match key {
            "outflow" => {
                plant.outflow = match value {
                    "linear" => OutflowModel::LinearResistance,
                    "torricelli" => OutflowModel::Torricelli,
                    _ => {
                        return Err(line.err(
                            tok.col + off,
                            format!("outflow must be `linear` or `torricelli`, found `{value}`"),
                        ))
                    }
                }
            }
            "C" | "R" | "hmax" | "qmax" | "travel" | "deadtime" => {
                let v = parse_number(line, &tok, value, off)?;
                match key {
                    "C" => plant.capacitance = v,
                    "R" => plant.resistance = v,
                    "hmax" => plant.h_max = v,
                    "qmax" => plant.q_max = v,
                    "travel" => plant.travel_s = v,
                    _ => plant.dead_time_s = v,
                }
            }
            _ => return Err(line.tok_err(&tok, format!("unknown plant key `{key}`"))),
        }
        seen.push(key);
    }
    expect_end(line, idx)?;
    Ok(PlantSpec::Inline(plant))
}

fn parse_control(line: &Line<'_>) -> Result<ControllerSetup, ParseError> {
    let mode_tok = line.get(1, "a controller mode")?;
    let mode = parse_mode(line, &mode_tok)?;
    let params = ControlParams::parse(line, 2)?;
    let defaults = ControllerSetup::default();
    Ok(ControllerSetup {
        mode,
        gains: params.gains(),
        setpoint_pct: params.sp.unwrap_or(defaults.setpoint_pct),
        hysteresis_pct: params.hyst.unwrap_or(defaults.hysteresis_pct),
    })
}

fn parse_run(line: &Line<'_>) -> Result<(f64, f64), ParseError> {
    let (mut duration, mut dt) = (None, None);
    for tok in &line.tokens[1..] {
        let (key, value, off) = split_kv(line, tok)?;
        let slot = match key {
            "duration" => &mut duration,
            "dt" => &mut dt,
            _ => return Err(line.tok_err(tok, format!("unknown key `{key}`"))),
        };
        if slot.is_some() {
            return Err(line.tok_err(tok, format!("duplicate key `{key}`")));
        }
        *slot = Some(parse_seconds(line, tok, value, off)?);
    }
    match (duration, dt) {
        (Some(d), Some(s)) => Ok((d, s)),
        (None, _) => Err(line.err(line.end_col, "missing duration=<num>s")),
        (_, None) => Err(line.err(line.end_col, "missing dt=<num>s")),
    }
}

fn parse_event(line: &Line<'_>, out: &mut Vec<ScenarioEvent>) -> Result<(), ParseError> {
    let at_tok = line.get(1, "an event time like `30s`")?;
    let at_s = parse_seconds(line, &at_tok, at_tok.text, 0)?;
    let set = line.get(2, "`set`")?;
    if set.text != "set" {
        return Err(line.tok_err(&set, format!("expected `set`, found `{}`", set.text)));
    }
    let what = line.get(3, "sp, outload, inlimit, mode, gains or onoff")?;
    let mut push = |action| out.push(ScenarioEvent { at_s, action });
    match what.text {
        "sp" | "outload" | "inlimit" => {
            let tok = line.get(4, "a number")?;
            let v = parse_number(line, &tok, tok.text, 0)?;
            expect_end(line, 5)?;
            push(match what.text {
                "sp" => Action::SetSetpoint(v),
                "outload" => Action::SetOutputLoad(v),
                _ => Action::SetInputLimit(v),
            });
        }
        "mode" => {
            let mode_tok = line.get(4, "a controller mode")?;
            let mode = parse_mode(line, &mode_tok)?;
            let params = ControlParams::parse(line, 5)?;
            push(Action::SetMode(mode));
            if params.has_gains() {
                push(Action::SetGains(params.gains()));
            }
            match (params.sp, params.hyst) {
                (None, None) => {}
                (Some(sp), Some(hyst)) => push(Action::SetOnOff {
                    sp_pct: sp,
                    hyst_pct: hyst,
                }),
                (Some(sp), None) => push(Action::SetSetpoint(sp)),
                (None, Some(_)) => return Err(line.err(mode_tok.col, "hyst= requires sp=")),
            }
        }
        "gains" => {
            let params = ControlParams::parse(line, 4)?;
            if params.sp.is_some() || params.hyst.is_some() {
                return Err(line.err(what.col, "`set gains` accepts only kp, ki and kd"));
            }
            push(Action::SetGains(params.gains()));
        }
        "onoff" => {
            let params = ControlParams::parse(line, 4)?;
            if params.has_gains() {
                return Err(line.err(what.col, "`set onoff` accepts only sp and hyst"));
            }
            match (params.sp, params.hyst) {
                (Some(sp), Some(hyst)) => push(Action::SetOnOff {
                    sp_pct: sp,
                    hyst_pct: hyst,
                }),
                _ => return Err(line.err(line.end_col, "`set onoff` needs sp= and hyst=")),
            }
        }
        other => return Err(line.tok_err(&what, format!("unknown event target `{other}`"))),
    }
    Ok(())
}

#[derive(Default)]
struct Sections {
    name: Option<String>,
    plant: Option<PlantSpec>,
    control: Option<ControllerSetup>,
    run: Option<(f64, f64)>,
    events: Vec<ScenarioEvent>,
}

fn parse_sections(text: &str, allow_events: bool) -> Result<Sections, ParseError> {
    let mut s = Sections::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = tokenize(raw, idx + 1)?;
        let Some(head) = line.tokens.first().copied() else {
            continue;
        };
        let duplicate = |present: bool| -> Result<(), ParseError> {
            if present {
                Err(line.tok_err(&head, format!("duplicate `{}` directive", head.text)))
            } else {
                Ok(())
            }
        };
        match head.text {
            "scenario" if allow_events => {
                duplicate(s.name.is_some())?;
                let tok = line.get(1, "a quoted scenario name")?;
                if !(tok.text.len() >= 2 && tok.text.starts_with('"') && tok.text.ends_with('"')) {
                    return Err(line.tok_err(&tok, "scenario name must be quoted"));
                }
                expect_end(&line, 2)?;
                s.name = Some(tok.text[1..tok.text.len() - 1].to_string());
            }
            "plant" => {
                duplicate(s.plant.is_some())?;
                s.plant = Some(parse_plant(&line)?);
            }
            "control" => {
                duplicate(s.control.is_some())?;
                s.control = Some(parse_control(&line)?);
            }
            "run" if allow_events => {
                duplicate(s.run.is_some())?;
                s.run = Some(parse_run(&line)?);
            }
            "at" if allow_events => parse_event(&line, &mut s.events)?,
            other => return Err(line.tok_err(&head, format!("unknown directive `{other}`"))),
        }
    }
    Ok(s)
}

fn invalid(field: &str, message: impl Into<String>) -> ParseError {
    ParseError::Validation {
        field: field.to_string(),
        message: message.into(),
    }
}

fn validate_plant(plant: &PlantSpec) -> Result<(), ParseError> {
    if let PlantSpec::Inline(p) = plant {
        p.to_rig().validate().map_err(|e| invalid("plant", e.to_string()))?;
    }
    Ok(())
}

fn validate_control(c: &ControllerSetup) -> Result<(), ParseError> {
    c.validate().map_err(|e| match e {
        crate::engine::EngineError::Validation { field, message } => invalid(&format!("control.{field}"), message),
        other => invalid("control", other.to_string()),
    })
}

/// Range rules applied to a parsed or programmatically built scenario.
pub(super) fn validate(s: &Scenario) -> Result<(), ParseError> {
    if s.name.contains('"') || s.name.contains('\n') {
        return Err(invalid("scenario", "name may not contain quotes or newlines"));
    }
    validate_plant(&s.plant)?;
    validate_control(&s.control)?;
    if !(s.duration_s.is_finite() && s.duration_s > 0.0) {
        return Err(invalid("run.duration", format!("must be > 0, got {}", s.duration_s)));
    }
    if !(s.dt_s > 0.0 && s.dt_s <= 1.0) {
        return Err(invalid("run.dt", format!("must be in (0, 1] s, got {}", s.dt_s)));
    }
    let mut prev = 0.0;
    for (i, ev) in s.events.iter().enumerate() {
        let field = format!("events[{i}]");
        if ev.at_s < 0.0 || ev.at_s > s.duration_s {
            return Err(invalid(
                &field,
                format!("time {} s is outside [0, {}]", ev.at_s, s.duration_s),
            ));
        }
        if ev.at_s < prev {
            return Err(invalid(
                &field,
                format!("events must be sorted by time ({} s after {} s)", ev.at_s, prev),
            ));
        }
        prev = ev.at_s;
        ev.action.validate().map_err(|e| invalid(&field, e.to_string()))?;
    }
    Ok(())
}

pub fn parse_scenario(text: &str) -> Result<Scenario, ParseError> {
    let sections = parse_sections(text, true)?;
    let scenario = Scenario {
        name: sections
            .name
            .ok_or_else(|| invalid("scenario", "missing `scenario \"<name>\"` line"))?,
        plant: sections.plant.ok_or_else(|| invalid("plant", "missing `plant` line"))?,
        control: sections
            .control
            .ok_or_else(|| invalid("control", "missing `control` line"))?,
        duration_s: 0.0,
        dt_s: 0.0,
        events: sections.events,
    };
    let (duration_s, dt_s) = sections
        .run
        .ok_or_else(|| invalid("run", "missing `run duration=..s dt=..s` line"))?;
    let scenario = Scenario {
        duration_s,
        dt_s,
        ..scenario
    };
    validate(&scenario)?;
    Ok(scenario)
}

/// Preset files use the `plant` and optional `control` directives only.
pub fn parse_preset_text(text: &str) -> Result<(PlantSpec, Option<ControllerSetup>), ParseError> {
    let sections = parse_sections(text, false)?;
    let plant = sections.plant.ok_or_else(|| invalid("plant", "missing `plant` line"))?;
    validate_plant(&plant)?;
    if let Some(c) = &sections.control {
        validate_control(c)?;
    }
    Ok((plant, sections.control))
}

#[cfg(test)]
mod tests {
    use super::*;

    const LADDER: &str = r#"
# setpoint ladder
scenario "ladder"
plant    paper_default
control  pid kp=48 ki=2.6666666666666665 kd=216 sp=40
run      duration=3000s dt=0.1s
at 600s set sp 50
at 1200s set sp 60
at 1800s set sp 80
"#;

    #[test]
    fn parses_ladder() {
        let s = parse_scenario(LADDER).unwrap();
        assert_eq!(s.name, "ladder");
        assert_eq!(s.plant, PlantSpec::Preset("paper_default".into()));
        assert_eq!(s.control.mode, ControllerMode::PID);
        assert_eq!(s.control.setpoint_pct, 40.0);
        assert_eq!(s.events.len(), 3);
        assert_eq!(s.events[2].action, Action::SetSetpoint(80.0));
        assert_eq!((s.duration_s, s.dt_s), (3000.0, 0.1));
    }

    #[test]
    fn header_only_is_a_regulation_run() {
        let s =
            parse_scenario("scenario \"r\"\nplant paper_default\ncontrol p kp=40\nrun duration=10s dt=0.1s\n").unwrap();
        assert!(s.events.is_empty());
    }

    #[test]
    fn inline_plant() {
        let s = parse_scenario(
            "scenario \"x\"\nplant { C=1 R=2 outflow=torricelli deadtime=4 }\ncontrol onoff sp=70 hyst=10\nrun duration=10s dt=0.5s\n",
        )
        .unwrap();
        let PlantSpec::Inline(p) = s.plant else { panic!() };
        assert_eq!((p.capacitance, p.resistance, p.dead_time_s), (1.0, 2.0, 4.0));
        assert_eq!(p.outflow, OutflowModel::Torricelli);
        assert_eq!(p.travel_s, 25.0);
    }

    #[test]
    fn setpoint_out_of_range() {
        let text = LADDER.replace("set sp 80", "set sp 120");
        let err = parse_scenario(&text).unwrap_err();
        assert!(
            matches!(err, ParseError::Validation { ref field, .. } if field == "events[2]"),
            "{err}"
        );
    }

    #[test]
    fn unknown_key_reports_position() {
        let text = LADDER.replace("kd=216", "kx=216");
        match parse_scenario(&text).unwrap_err() {
            ParseError::Syntax { line, col, message } => {
                assert_eq!(line, 5);
                assert_eq!(col, 42);
                assert!(message.contains("kx"));
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn syntax_errors() {
        let cases = [
            ("scenario \"a\nplant p\n", 1),
            ("bogus\n", 1),
            ("scenario \"a\"\nplant { C=1\n", 2),
            ("scenario \"a\"\nplant { C=x }\n", 2),
            ("scenario \"a\"\nplant paper_default\ncontrol pidx\n", 3),
            (
                "scenario \"a\"\nplant paper_default\ncontrol p\nrun duration=10 dt=0.1s\n",
                4,
            ),
            (
                "scenario \"a\"\nplant paper_default\ncontrol p\nrun duration=10s dt=0.1s\nat 5 set sp 1\n",
                5,
            ),
            ("scenario \"a\"\nscenario \"b\"\n", 2),
            (
                "scenario \"a\"\nplant paper_default\ncontrol p\nrun duration=10s dt=0.1s\nat 5s set sp nan\n",
                5,
            ),
        ];
        for (text, want_line) in cases {
            match parse_scenario(text) {
                Err(ParseError::Syntax { line, .. }) => assert_eq!(line, want_line, "{text}"),
                other => panic!("{text:?} -> {other:?}"),
            }
        }
    }

    #[test]
    fn validation_errors() {
        let head = "scenario \"a\"\nplant paper_default\n";
        let cases = [
            (format!("{head}control p\nrun duration=10s dt=0s\n"), "run.dt"),
            (format!("{head}control p\nrun duration=10s dt=2s\n"), "run.dt"),
            (format!("{head}control p\nrun duration=0s dt=0.1s\n"), "run.duration"),
            (
                format!("{head}control p sp=101\nrun duration=10s dt=0.1s\n"),
                "control.setpoint",
            ),
            (
                format!("{head}control p kp=-1\nrun duration=10s dt=0.1s\n"),
                "control.gains",
            ),
            (
                format!("{head}control onoff sp=5 hyst=10\nrun duration=10s dt=0.1s\n"),
                "control.hysteresis",
            ),
            (
                format!("{head}control p\nrun duration=10s dt=0.1s\nat 5s set sp 1\nat 4s set sp 2\n"),
                "events[1]",
            ),
            (
                format!("{head}control p\nrun duration=10s dt=0.1s\nat 11s set sp 1\n"),
                "events[0]",
            ),
            (
                format!("{head}control p\nrun duration=10s dt=0.1s\nat 1s set outload 1.5\n"),
                "events[0]",
            ),
            (format!("{head}run duration=10s dt=0.1s\n"), "control"),
            (
                "scenario \"a\"\nplant { C=0 }\ncontrol p\nrun duration=10s dt=0.1s\n".to_string(),
                "plant",
            ),
        ];
        for (text, want) in cases {
            match parse_scenario(&text) {
                Err(ParseError::Validation { field, .. }) => assert_eq!(field, want, "{text}"),
                other => panic!("{text:?} -> {other:?}"),
            }
        }
    }

    #[test]
    fn set_mode_expands() {
        let s = parse_scenario(
            "scenario \"m\"\nplant paper_default\ncontrol p kp=40\nrun duration=100s dt=0.1s\nat 10s set mode pid kp=48 ki=1 kd=2\nat 20s set mode onoff sp=70 hyst=10\n",
        )
        .unwrap();
        assert_eq!(
            s.events.iter().map(|e| e.action).collect::<Vec<_>>(),
            vec![
                Action::SetMode(ControllerMode::PID),
                Action::SetGains(Gains {
                    kp: 48.0,
                    ki: 1.0,
                    kd: 2.0
                }),
                Action::SetMode(ControllerMode::OnOff),
                Action::SetOnOff {
                    sp_pct: 70.0,
                    hyst_pct: 10.0
                },
            ]
        );
    }

    #[test]
    fn canonical_text_round_trips() {
        let s = parse_scenario(LADDER).unwrap();
        let again = parse_scenario(&s.to_string()).unwrap();
        assert_eq!(again, s);
        assert_eq!(again.to_string(), s.to_string());
    }

    #[test]
    fn preset_text() {
        let (plant, control) = parse_preset_text("plant { C=0.5 }\ncontrol p kp=3\n").unwrap();
        assert!(matches!(plant, PlantSpec::Inline(p) if p.capacitance == 0.5));
        assert_eq!(control.unwrap().gains.kp, 3.0);
        assert!(parse_preset_text("plant x\nrun duration=1s dt=1s\n").is_err());
    }
}
