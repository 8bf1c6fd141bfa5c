//! Transient-response metrics per setpoint segment.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::series::TimeSeries;

/// Settling band in percent of span.
pub const DEFAULT_BAND_PCT: f64 = 2.0;

const MIN_SEGMENT_SAMPLES: usize = 10;
const FINAL_VALUE_FRACTION: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("series is empty")]
    Empty,
    #[error("band must be > 0, got {0}")]
    InvalidBand(f64),
    #[error("SegmentTooShort: segment starting at {start_s} s has {samples} samples, need {MIN_SEGMENT_SAMPLES}")]
    SegmentTooShort { start_s: f64, samples: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSample {
    pub t: f64,
    pub pv: f64,
    pub sp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransientMetrics {
    pub segment_start_s: f64,
    pub segment_end_s: f64,
    pub setpoint_pct: f64,
    /// `None` when the last sample is still outside the band.
    pub settling_time_s: Option<f64>,
    pub steady_state_error_pct: f64,
    pub max_deviation_pct: f64,
    pub overshoot_pct: f64,
}

pub fn compute_metrics(series: &TimeSeries, band_pct: f64) -> Result<Vec<TransientMetrics>, MetricsError> {
    let samples: Vec<MetricSample> = series
        .rows
        .iter()
        .map(|r| MetricSample {
            t: r.t_s,
            pv: r.level_pct,
            sp: r.sp_pct,
        })
        .collect();
    compute_metrics_samples(&samples, band_pct)
}

pub fn compute_metrics_samples(samples: &[MetricSample], band_pct: f64) -> Result<Vec<TransientMetrics>, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::Empty);
    }
    if !(band_pct > 0.0 && band_pct.is_finite()) {
        return Err(MetricsError::InvalidBand(band_pct));
    }
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=samples.len() {
        if i == samples.len() || samples[i].sp != samples[start].sp {
            // The PV just before the change is where the step starts from.
            let initial_pv = if start == 0 {
                samples[0].pv
            } else {
                samples[start - 1].pv
            };
            out.push(segment_metrics(&samples[start..i], initial_pv, band_pct)?);
            start = i;
        }
    }
    Ok(out)
}

fn segment_metrics(seg: &[MetricSample], initial_pv: f64, band: f64) -> Result<TransientMetrics, MetricsError> {
    let start_s = seg[0].t;
    if seg.len() < MIN_SEGMENT_SAMPLES {
        return Err(MetricsError::SegmentTooShort {
            start_s,
            samples: seg.len(),
        });
    }
    let sp = seg[0].sp;
    let tail = ((seg.len() as f64 * FINAL_VALUE_FRACTION).ceil() as usize).max(1);
    let final_value = seg[seg.len() - tail..].iter().map(|s| s.pv).sum::<f64>() / tail as f64;

    let settling_time_s = match seg.iter().rposition(|s| (s.pv - final_value).abs() > band) {
        None => Some(0.0),
        Some(last) if last + 1 < seg.len() => Some(seg[last + 1].t - start_s),
        Some(_) => None,
    };

    let max_deviation_pct = seg
        .iter()
        .map(|s| s.pv - sp)
        .fold(0.0_f64, |acc, d| if d.abs() > acc.abs() { d } else { acc });

    let step = sp - initial_pv;
    let overshoot_pct = if step.abs() <= band {
        0.0
    } else {
        let beyond = seg.iter().map(|s| (s.pv - sp) * step.signum()).fold(0.0_f64, f64::max);
        100.0 * beyond / step.abs()
    };

    Ok(TransientMetrics {
        segment_start_s: start_s,
        segment_end_s: seg[seg.len() - 1].t,
        setpoint_pct: sp,
        settling_time_s,
        steady_state_error_pct: sp - final_value,
        max_deviation_pct,
        overshoot_pct,
    })
}

/// Fixed-width text table, one line per segment.
pub fn format_metrics_table(metrics: &[TransientMetrics]) -> String {
    let mut out = format!(
        "{:>3} {:>10} {:>10} {:>8} {:>12} {:>10} {:>10} {:>10}\n",
        "seg", "start_s", "end_s", "sp_pct", "settling_s", "ess_pct", "maxdev_pct", "ovs_pct"
    );
    for (i, m) in metrics.iter().enumerate() {
        let settling = match m.settling_time_s {
            Some(t) => format!("{t:.1}"),
            None => "not settled".to_string(),
        };
        let _ = writeln!(
            out,
            "{:>3} {:>10.1} {:>10.1} {:>8.2} {:>12} {:>10.3} {:>10.3} {:>10.2}",
            i,
            m.segment_start_s,
            m.segment_end_s,
            m.setpoint_pct,
            settling,
            m.steady_state_error_pct,
            m.max_deviation_pct,
            m.overshoot_pct
        );
    }
    out
}
