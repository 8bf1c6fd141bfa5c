//! Ziegler-Nichols ultimate-gain experiment and gain rules.
//!
//! The experiment closes a proportional loop with manual reset (a fixed bias
//! equal to the equilibrium output at the setpoint), starts it slightly off
//! the setpoint and measures the decay ratio of the resulting oscillation.
//! The gain is bisected until the oscillation neither grows nor decays.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{ControllerMode, Gains};
use crate::integrate::rk4_autonomous;
use crate::plant::{plant_step, PlantError, PlantState, Rig, TransportDelay};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TuneError {
    #[error("Ziegler-Nichols rules do not apply to mode {0}")]
    UnsupportedMode(ControllerMode),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("TooFewCycles: found {found} cycles, need at least {needed}")]
    TooFewCycles { found: usize, needed: usize },
    #[error("FlatSignal: oscillation amplitude {amplitude} below resolution {threshold}")]
    FlatSignal { amplitude: f64, threshold: f64 },
    #[error(
        "NoBracket: decay ratio {lo_ratio} at kp_lo, {hi_ratio} at kp_hi (need decaying at kp_lo and growing at kp_hi)"
    )]
    NoBracket { lo_ratio: f64, hi_ratio: f64 },
    #[error("NoConvergence: no sustained oscillation after {iterations} iterations (bracket [{kp_lo}, {kp_hi}])")]
    NoConvergence { iterations: usize, kp_lo: f64, kp_hi: f64 },
    #[error("PureFirstOrderPlant: the loop has no valve travel or dead time, a P loop cannot oscillate")]
    PureFirstOrderPlant,
    #[error("setpoint {0} % cannot be held at equilibrium on this plant")]
    UnreachableSetpoint(f64),
    #[error(transparent)]
    Plant(#[from] PlantError),
}

impl TuneError {
    /// Stable machine-readable error name.
    pub fn name(&self) -> &'static str {
        match self {
            TuneError::UnsupportedMode(_) => "UnsupportedMode",
            TuneError::InvalidArgument(_) => "InvalidArgument",
            TuneError::TooFewCycles { .. } => "TooFewCycles",
            TuneError::FlatSignal { .. } => "FlatSignal",
            TuneError::NoBracket { .. } => "NoBracket",
            TuneError::NoConvergence { .. } => "NoConvergence",
            TuneError::PureFirstOrderPlant => "PureFirstOrderPlant",
            TuneError::UnreachableSetpoint(_) => "UnreachableSetpoint",
            TuneError::Plant(_) => "PlantError",
        }
    }
}

/// Exact rational coefficient `num / den`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub num: u32,
    pub den: u32,
}

const fn ratio(num: u32, den: u32) -> Ratio {
    Ratio { num, den }
}

impl Ratio {
    /// `x * num / den`, multiplying first so exact products stay exact.
    fn of(self, x: f64) -> f64 {
        x * self.num as f64 / self.den as f64
    }
}

/// Gain rule for one controller mode, relative to (Ku, Pu).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZnRule {
    /// `kp = kp_of_ku * Ku`.
    pub kp_of_ku: Ratio,
    /// `Ti = ti_of_pu * Pu`, `ki = kp / Ti`.
    pub ti_of_pu: Option<Ratio>,
    /// `Td = td_of_pu * Pu`, `kd = kp * Td`.
    pub td_of_pu: Option<Ratio>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZnRuleSet {
    pub p: ZnRule,
    pub pi: ZnRule,
    pub pid: ZnRule,
    /// PD (paper variant): 0.45 Ku with Td = Pu/8, not the common 0.8 Ku rule.
    pub pd: ZnRule,
}

impl Default for ZnRuleSet {
    fn default() -> Self {
        ZnRuleSet {
            p: ZnRule {
                kp_of_ku: ratio(1, 2),
                ti_of_pu: None,
                td_of_pu: None,
            },
            pi: ZnRule {
                kp_of_ku: ratio(9, 20),
                ti_of_pu: Some(ratio(5, 6)),
                td_of_pu: None,
            },
            pid: ZnRule {
                kp_of_ku: ratio(3, 5),
                ti_of_pu: Some(ratio(1, 2)),
                td_of_pu: Some(ratio(1, 8)),
            },
            pd: ZnRule {
                kp_of_ku: ratio(9, 20),
                ti_of_pu: None,
                td_of_pu: Some(ratio(1, 8)),
            },
        }
    }
}

impl ZnRuleSet {
    pub fn rule(&self, mode: ControllerMode) -> Option<&ZnRule> {
        match mode {
            ControllerMode::P => Some(&self.p),
            ControllerMode::PD => Some(&self.pd),
            ControllerMode::PI => Some(&self.pi),
            ControllerMode::PID => Some(&self.pid),
            ControllerMode::OnOff => None,
        }
    }

    pub fn gains(&self, mode: ControllerMode, ku: f64, pu_s: f64) -> Result<Gains, TuneError> {
        let rule = self.rule(mode).ok_or(TuneError::UnsupportedMode(mode))?;
        if !(ku.is_finite() && ku > 0.0 && pu_s.is_finite() && pu_s > 0.0) {
            return Err(TuneError::InvalidArgument(format!(
                "Ku and Pu must be > 0, got Ku={ku}, Pu={pu_s}"
            )));
        }
        let kp = rule.kp_of_ku.of(ku);
        // ki = kp / (Pu * num/den) = kp * den / (num * Pu)
        let ki = rule
            .ti_of_pu
            .map_or(0.0, |ti| kp * ti.den as f64 / (ti.num as f64 * pu_s));
        let kd = rule.td_of_pu.map_or(0.0, |td| td.of(kp * pu_s));
        Ok(Gains { kp, ki, kd })
    }
}

/// Classic Ziegler-Nichols ultimate-cycle gains.
pub fn zn_gains(mode: ControllerMode, ku: f64, pu_s: f64) -> Result<Gains, TuneError> {
    ZnRuleSet::default().gains(mode, ku, pu_s)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OscillationOptions {
    /// Fraction of the horizon discarded at the start.
    pub warmup_fraction: f64,
    /// Level whose positive-going crossings delimit cycles; the window mean
    /// is used when `None`.
    pub reference: Option<f64>,
    /// Peak-to-peak amplitude below which the signal counts as flat.
    pub flat_threshold: f64,
    pub max_cycles: usize,
}

impl Default for OscillationOptions {
    fn default() -> Self {
        OscillationOptions {
            warmup_fraction: 0.3,
            reference: None,
            flat_threshold: 1e-6,
            max_cycles: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OscillationStats {
    pub period_mean_s: f64,
    pub period_std_s: f64,
    pub decay_ratio: f64,
    pub n_periods: usize,
}

const MIN_CYCLES: usize = 3;

/// Interpolated time at which the segment `(t0, d0) -> (t1, d1)` crosses zero.
fn crossing_time(t0: f64, d0: f64, t1: f64, d1: f64) -> f64 {
    t0 + (-d0) / (d1 - d0) * (t1 - t0)
}

/// Maximum of `d[lo..hi]` refined by a parabola through the neighbours.
fn refined_peak(d: &[f64], lo: usize, hi: usize) -> f64 {
    let (mut best, mut idx) = (f64::NEG_INFINITY, lo);
    for (i, &v) in d.iter().enumerate().take(hi).skip(lo) {
        if v > best {
            best = v;
            idx = i;
        }
    }
    if idx == 0 || idx + 1 >= d.len() {
        return best;
    }
    let (y0, y1, y2) = (d[idx - 1], d[idx], d[idx + 1]);
    let denom = y0 - 2.0 * y1 + y2;
    if denom >= 0.0 {
        return best;
    }
    let p = 0.5 * (y0 - y2) / denom;
    if p.abs() > 1.0 {
        return best;
    }
    y1 - 0.25 * (y0 - y2) * p
}

fn stats_from(periods: &[f64], amplitudes: &[f64]) -> OscillationStats {
    let n = periods.len();
    let mean = periods.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        periods.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    let ratios: Vec<f64> = amplitudes.windows(2).map(|w| w[1] / w[0]).collect();
    let decay_ratio = if ratios.is_empty() {
        f64::NAN
    } else {
        ratios.iter().sum::<f64>() / ratios.len() as f64
    };
    OscillationStats {
        period_mean_s: mean,
        period_std_s: var.sqrt(),
        decay_ratio,
        n_periods: n,
    }
}

/// Period and decay statistics of an oscillating `(t, value)` series.
///
/// Cycles are delimited by positive-going crossings of the reference level.
/// When fewer than three crossing-delimited cycles exist, successive local
/// maxima are used instead.
pub fn measure_oscillation(series: &[(f64, f64)], opts: &OscillationOptions) -> Result<OscillationStats, TuneError> {
    if !(0.0..1.0).contains(&opts.warmup_fraction) {
        return Err(TuneError::InvalidArgument("warmup fraction must be in [0, 1)".into()));
    }
    if series.len() < 4 {
        return Err(TuneError::TooFewCycles {
            found: 0,
            needed: MIN_CYCLES,
        });
    }
    let t_start = series[0].0;
    let t_end = series[series.len() - 1].0;
    let cutoff = t_start + opts.warmup_fraction * (t_end - t_start);
    let window: Vec<(f64, f64)> = series.iter().copied().filter(|&(t, _)| t >= cutoff).collect();

    let (lo, hi) = window
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, v)| {
            (lo.min(v), hi.max(v))
        });
    let amplitude = hi - lo;
    if amplitude.is_nan() || amplitude < opts.flat_threshold {
        return Err(TuneError::FlatSignal {
            amplitude,
            threshold: opts.flat_threshold,
        });
    }
    let reference = opts
        .reference
        .unwrap_or_else(|| window.iter().map(|&(_, v)| v).sum::<f64>() / window.len() as f64);
    let dev: Vec<f64> = window.iter().map(|&(_, v)| v - reference).collect();

    let mut crossings: Vec<(usize, f64)> = Vec::new();
    for i in 1..dev.len() {
        if dev[i - 1] < 0.0 && dev[i] >= 0.0 {
            crossings.push((i, crossing_time(window[i - 1].0, dev[i - 1], window[i].0, dev[i])));
        }
    }
    crossings.truncate(opts.max_cycles + 1);

    if crossings.len() > MIN_CYCLES {
        let periods: Vec<f64> = crossings.windows(2).map(|w| w[1].1 - w[0].1).collect();
        let amplitudes: Vec<f64> = crossings
            .windows(2)
            .map(|w| refined_peak(&dev, w[0].0, w[1].0))
            .collect();
        return Ok(stats_from(&periods, &amplitudes));
    }

    // Peak-to-peak fallback: a Schmitt trigger around the window midrange
    // splits the signal into humps; each complete hump contributes its peak.
    let mid = 0.5 * (lo + hi) - reference;
    let band = 0.1 * amplitude;
    let mut peaks: Vec<(f64, f64)> = Vec::new();
    let mut in_hump = false;
    let mut seen_low = false;
    let mut hump_start = 0usize;
    for (i, &d) in dev.iter().enumerate() {
        if !in_hump && d > mid + band {
            in_hump = true;
            hump_start = i;
        } else if in_hump && d < mid - band {
            in_hump = false;
            if seen_low {
                let (j, _) = dev[hump_start..i]
                    .iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc },
                    );
                let j = hump_start + j;
                peaks.push((window[j].0, refined_peak(&dev, j, j + 1)));
            }
            seen_low = true;
        } else if !in_hump && d < mid - band {
            seen_low = true;
        }
    }
    peaks.truncate(opts.max_cycles + 1);
    if peaks.len() > MIN_CYCLES {
        let periods: Vec<f64> = peaks.windows(2).map(|w| w[1].0 - w[0].0).collect();
        let amplitudes: Vec<f64> = peaks.iter().map(|&(_, a)| a).collect();
        return Ok(stats_from(&periods, &amplitudes));
    }
    Err(TuneError::TooFewCycles {
        found: crossings.len().saturating_sub(1).max(peaks.len().saturating_sub(1)),
        needed: MIN_CYCLES,
    })
}

/// A plant that can host the proportional oscillation experiment.
///
/// Process value and controller output are both in percent.
pub trait OscillationPlant {
    type Run: PlantRun;

    fn has_phase_lag(&self) -> bool;
    /// Controller output holding the process value at `pv_pct`.
    fn equilibrium_output(&self, pv_pct: f64) -> Result<f64, TuneError>;
    fn output_limits(&self) -> (f64, f64);
    /// Start a run at process value `pv_pct` with the actuator (and any dead
    /// time) settled at `output_pct`.
    fn start(&self, pv_pct: f64, output_pct: f64, dt: f64) -> Result<Self::Run, TuneError>;
    fn default_dt(&self) -> f64;
    fn default_horizon_s(&self) -> f64;
}

pub trait PlantRun {
    /// Apply `output_pct` for one step and return the new process value.
    fn step(&mut self, output_pct: f64) -> Result<f64, TuneError>;
}

/// Training rig with fixed vane positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigPlant {
    pub rig: Rig,
    pub inlet_limit: f64,
    pub load_fraction: f64,
}

impl RigPlant {
    pub fn new(rig: Rig) -> Self {
        RigPlant {
            rig,
            inlet_limit: 1.0,
            load_fraction: 1.0,
        }
    }
}

pub struct RigRun {
    plant: RigPlant,
    state: PlantState,
    delay: TransportDelay,
    dt: f64,
}

fn pct_to_volts(pct: f64) -> f64 {
    pct / 10.0
}

impl OscillationPlant for RigPlant {
    type Run = RigRun;

    fn has_phase_lag(&self) -> bool {
        self.rig.has_phase_lag()
    }

    fn equilibrium_output(&self, pv_pct: f64) -> Result<f64, TuneError> {
        self.rig
            .equilibrium_opening(pv_pct, self.inlet_limit, self.load_fraction)
            .map(|u| 100.0 * u)
            .ok_or(TuneError::UnreachableSetpoint(pv_pct))
    }

    fn output_limits(&self) -> (f64, f64) {
        (0.0, 100.0)
    }

    fn start(&self, pv_pct: f64, output_pct: f64, dt: f64) -> Result<RigRun, TuneError> {
        self.rig.validate()?;
        let h = self.rig.sensor.pct_to_level_m(pv_pct).clamp(0.0, self.rig.tank.h_max);
        let opening = self.rig.valve.target_opening(pct_to_volts(output_pct));
        Ok(RigRun {
            plant: *self,
            state: PlantState {
                valve_opening: opening,
                ..PlantState::at_level(h)
            },
            delay: TransportDelay::new(self.rig.dead_time_s, dt, pct_to_volts(output_pct)),
            dt,
        })
    }

    fn default_dt(&self) -> f64 {
        let mut dt: f64 = 0.1;
        if self.rig.dead_time_s > 0.0 {
            dt = dt.min(self.rig.dead_time_s / 100.0);
        }
        if self.rig.valve.travel_time_s > 0.0 {
            dt = dt.min(self.rig.valve.travel_time_s / 250.0);
        }
        dt
    }

    fn default_horizon_s(&self) -> f64 {
        400.0 * (self.rig.dead_time_s + self.rig.valve.travel_time_s)
    }
}

impl PlantRun for RigRun {
    fn step(&mut self, output_pct: f64) -> Result<f64, TuneError> {
        let command = self.delay.push(pct_to_volts(output_pct));
        let p = &self.plant;
        self.state = plant_step(
            &self.state,
            &p.rig.tank,
            &p.rig.valve,
            command,
            p.inlet_limit,
            p.load_fraction,
            self.dt,
        )?;
        Ok(p.rig.sensor.level_m_to_pct(self.state.h))
    }
}

/// Textbook loops used to validate the experiment against known answers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TestPlant {
    /// `gain * exp(-dead_time * s) / (tau * s + 1)`.
    Fopdt { gain: f64, tau_s: f64, dead_time_s: f64 },
    /// `gain * exp(-dead_time * s) / s`.
    IntegratorDelay { gain: f64, dead_time_s: f64 },
}

impl TestPlant {
    fn dead_time(&self) -> f64 {
        match *self {
            TestPlant::Fopdt { dead_time_s, .. } | TestPlant::IntegratorDelay { dead_time_s, .. } => dead_time_s,
        }
    }
}

pub struct TestPlantRun {
    plant: TestPlant,
    pv: f64,
    delay: TransportDelay,
    dt: f64,
}

impl OscillationPlant for TestPlant {
    type Run = TestPlantRun;

    fn has_phase_lag(&self) -> bool {
        self.dead_time() > 0.0
    }

    fn equilibrium_output(&self, pv_pct: f64) -> Result<f64, TuneError> {
        match *self {
            TestPlant::Fopdt { gain, .. } => Ok(pv_pct / gain),
            TestPlant::IntegratorDelay { .. } => Ok(0.0),
        }
    }

    fn output_limits(&self) -> (f64, f64) {
        (f64::NEG_INFINITY, f64::INFINITY)
    }

    fn start(&self, pv_pct: f64, output_pct: f64, dt: f64) -> Result<TestPlantRun, TuneError> {
        Ok(TestPlantRun {
            plant: *self,
            pv: pv_pct,
            delay: TransportDelay::new(self.dead_time(), dt, output_pct),
            dt,
        })
    }

    fn default_dt(&self) -> f64 {
        let dead = self.dead_time();
        if dead > 0.0 {
            (dead / 100.0).min(0.1)
        } else {
            0.1
        }
    }

    fn default_horizon_s(&self) -> f64 {
        let tau = match *self {
            TestPlant::Fopdt { tau_s, .. } => tau_s,
            TestPlant::IntegratorDelay { .. } => 0.0,
        };
        400.0 * self.dead_time() + 10.0 * tau
    }
}

impl PlantRun for TestPlantRun {
    fn step(&mut self, output_pct: f64) -> Result<f64, TuneError> {
        let u = self.delay.push(output_pct);
        self.pv = match self.plant {
            TestPlant::Fopdt { gain, tau_s, .. } => rk4_autonomous(self.pv, self.dt, |x| (gain * u - x) / tau_s).0,
            TestPlant::IntegratorDelay { gain, .. } => self.pv + gain * u * self.dt,
        };
        Ok(self.pv)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UltimateGainSearch {
    pub setpoint_pct: f64,
    pub kp_lo: f64,
    pub kp_hi: f64,
    /// Accepted band around a decay ratio of 1.
    pub tol: f64,
    pub max_iterations: usize,
    /// Initial offset below the setpoint, percent.
    pub kick_pct: f64,
    pub min_cycles: usize,
    pub max_cycles: usize,
    pub warmup_fraction: f64,
    pub dt: Option<f64>,
    pub horizon_s: Option<f64>,
}

impl UltimateGainSearch {
    pub fn new(setpoint_pct: f64, kp_lo: f64, kp_hi: f64) -> Self {
        UltimateGainSearch {
            setpoint_pct,
            kp_lo,
            kp_hi,
            tol: 0.05,
            max_iterations: 40,
            kick_pct: 0.01,
            min_cycles: 5,
            max_cycles: 50,
            warmup_fraction: 0.3,
            dt: None,
            horizon_s: None,
        }
    }

    fn validate(&self) -> Result<(), TuneError> {
        let bad = |m: &str| Err(TuneError::InvalidArgument(m.to_string()));
        if !(self.kp_lo.is_finite() && self.kp_hi.is_finite() && self.kp_lo >= 0.0 && self.kp_lo < self.kp_hi) {
            return bad("need 0 <= kp_lo < kp_hi");
        }
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return bad("tol must be in (0, 1)");
        }
        if !(self.kick_pct.is_finite() && self.kick_pct > 0.0) {
            return bad("kick must be > 0");
        }
        if self.min_cycles < MIN_CYCLES || self.max_cycles < self.min_cycles {
            return bad("need 3 <= min_cycles <= max_cycles");
        }
        if let Some(dt) = self.dt {
            if !(dt.is_finite() && dt > 0.0) {
                return bad("dt must be > 0");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UltimateGainResult {
    pub ku: f64,
    pub pu_s: f64,
    pub periods_used: usize,
    pub period_std_s: f64,
    pub decay_ratio: f64,
    pub iterations: usize,
}

/// Outcome of one proportional experiment.
#[derive(Debug, Clone, PartialEq)]
pub enum Experiment {
    Decaying {
        decay_ratio: f64,
    },
    Oscillating(OscillationStats),
    /// Growing until the actuator saturated or the run blew up.
    Divergent,
}

impl Experiment {
    fn ratio(&self) -> f64 {
        match self {
            Experiment::Decaying { decay_ratio } => *decay_ratio,
            Experiment::Oscillating(s) => s.decay_ratio,
            Experiment::Divergent => f64::INFINITY,
        }
    }
}

/// Process-value trajectory of the proportional experiment at gain `kp`.
///
/// Returns the series and whether the actuator hit its limits (which ends
/// the run early).
pub fn proportional_trajectory<P: OscillationPlant>(
    plant: &P,
    kp: f64,
    search: &UltimateGainSearch,
) -> Result<(Vec<(f64, f64)>, bool), TuneError> {
    let sp = search.setpoint_pct;
    let dt = search.dt.unwrap_or_else(|| plant.default_dt());
    let horizon = search.horizon_s.unwrap_or_else(|| plant.default_horizon_s());
    let steps = (horizon / dt).ceil() as usize;
    let bias = plant.equilibrium_output(sp)?;
    let (u_min, u_max) = plant.output_limits();
    let mut pv = sp - search.kick_pct;
    let mut run = plant.start(pv, bias, dt)?;

    let wanted_crossings = (search.max_cycles as f64 / (1.0 - search.warmup_fraction)).ceil() as usize + 2;
    let mut crossings = 0usize;
    let mut series = Vec::with_capacity(steps.min(1 << 20) + 1);
    series.push((0.0, pv));
    for k in 1..=steps {
        let u = bias + kp * (sp - pv);
        if u < u_min || u > u_max {
            return Ok((series, true));
        }
        let next = run.step(u)?;
        if !next.is_finite() || (next - sp).abs() > 1e9 {
            return Ok((series, true));
        }
        if pv < sp && next >= sp {
            crossings += 1;
        }
        pv = next;
        series.push((k as f64 * dt, pv));
        if crossings >= wanted_crossings {
            break;
        }
    }
    Ok((series, false))
}

/// Run and classify the proportional experiment at `kp`.
pub fn run_experiment<P: OscillationPlant>(
    plant: &P,
    kp: f64,
    search: &UltimateGainSearch,
) -> Result<Experiment, TuneError> {
    let (series, saturated) = proportional_trajectory(plant, kp, search)?;
    if saturated {
        return Ok(Experiment::Divergent);
    }
    let opts = OscillationOptions {
        warmup_fraction: search.warmup_fraction,
        reference: Some(search.setpoint_pct),
        flat_threshold: 1e-6 * search.kick_pct,
        max_cycles: search.max_cycles,
    };
    match measure_oscillation(&series, &opts) {
        Ok(stats) if stats.decay_ratio < 1.0 - search.tol => Ok(Experiment::Decaying {
            decay_ratio: stats.decay_ratio,
        }),
        Ok(stats) => Ok(Experiment::Oscillating(stats)),
        Err(TuneError::FlatSignal { .. } | TuneError::TooFewCycles { .. }) => {
            Ok(Experiment::Decaying { decay_ratio: 0.0 })
        }
        Err(e) => Err(e),
    }
}

/// Bisect the proportional gain until the loop sustains a constant-amplitude
/// oscillation; returns (Ku, Pu) and the measurement statistics.
pub fn find_ultimate_gain<P: OscillationPlant>(
    plant: &P,
    search: &UltimateGainSearch,
) -> Result<UltimateGainResult, TuneError> {
    search.validate()?;
    if !plant.has_phase_lag() {
        return Err(TuneError::PureFirstOrderPlant);
    }
    plant.equilibrium_output(search.setpoint_pct)?;

    let converged = |e: &Experiment| match e {
        Experiment::Oscillating(s) => (s.decay_ratio - 1.0).abs() <= search.tol && s.n_periods >= search.min_cycles,
        _ => false,
    };

    let at_lo = run_experiment(plant, search.kp_lo, search)?;
    let at_hi = run_experiment(plant, search.kp_hi, search)?;
    if !(at_lo.ratio() < 1.0 - search.tol && at_hi.ratio() > 1.0 + search.tol) {
        return Err(TuneError::NoBracket {
            lo_ratio: at_lo.ratio(),
            hi_ratio: at_hi.ratio(),
        });
    }

    let (mut lo, mut hi) = (search.kp_lo, search.kp_hi);
    for iteration in 1..=search.max_iterations {
        let mid = if lo > 0.0 { (lo * hi).sqrt() } else { 0.5 * (lo + hi) };
        let outcome = run_experiment(plant, mid, search)?;
        if converged(&outcome) {
            if let Experiment::Oscillating(s) = outcome {
                return Ok(UltimateGainResult {
                    ku: mid,
                    pu_s: s.period_mean_s,
                    periods_used: s.n_periods,
                    period_std_s: s.period_std_s,
                    decay_ratio: s.decay_ratio,
                    iterations: iteration,
                });
            }
        }
        if outcome.ratio() < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(TuneError::NoConvergence {
        iterations: search.max_iterations,
        kp_lo: lo,
        kp_hi: hi,
    })
}
