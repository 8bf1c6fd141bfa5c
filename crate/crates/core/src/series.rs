//! Run logs and their CSV form.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::ControllerMode;

pub const CSV_HEADER: &str = "t_s,level_m,level_pct,sp_pct,error_pct,u_volts,valve_frac,q_in_m3s,q_out_m3s,mode";

#[derive(Debug, Error)]
pub enum CsvError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub t_s: f64,
    pub level_m: f64,
    pub level_pct: f64,
    pub sp_pct: f64,
    pub error_pct: f64,
    pub u_volts: f64,
    pub valve_frac: f64,
    pub q_in_m3s: f64,
    pub q_out_m3s: f64,
    pub mode: ControllerMode,
}

impl LogRow {
    pub fn to_csv_line(&self) -> String {
        let nums = [
            self.t_s,
            self.level_m,
            self.level_pct,
            self.sp_pct,
            self.error_pct,
            self.u_volts,
            self.valve_frac,
            self.q_in_m3s,
            self.q_out_m3s,
        ];
        let mut line = String::with_capacity(128);
        for v in nums {
            line.push_str(&format_sig9(v));
            line.push(',');
        }
        line.push_str(self.mode.name());
        line
    }

    fn parse_csv_line(text: &str, line: usize) -> Result<LogRow, CsvError> {
        let fields: Vec<&str> = text.split(',').collect();
        if fields.len() != 10 {
            return Err(CsvError::Format {
                line,
                message: format!("expected 10 columns, found {}", fields.len()),
            });
        }
        let mut nums = [0.0; 9];
        for (slot, field) in nums.iter_mut().zip(&fields) {
            *slot = field.trim().parse().map_err(|_| CsvError::Format {
                line,
                message: format!("not a number: `{field}`"),
            })?;
        }
        let mode = fields[9].trim().parse().map_err(|_| CsvError::Format {
            line,
            message: format!("unknown mode `{}`", fields[9]),
        })?;
        Ok(LogRow {
            t_s: nums[0],
            level_m: nums[1],
            level_pct: nums[2],
            sp_pct: nums[3],
            error_pct: nums[4],
            u_volts: nums[5],
            valve_frac: nums[6],
            q_in_m3s: nums[7],
            q_out_m3s: nums[8],
            mode,
        })
    }
}

/// Plain decimal with at most nine significant digits, no exponent.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v.is_nan() {
            "NaN".into()
        } else if v.is_infinite() {
            if v > 0.0 {
                "inf".into()
            } else {
                "-inf".into()
            }
        } else {
            "0".into()
        };
    }
    let sci = format!("{:.8e}", v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let negative = mantissa.starts_with('-');
    let digits: String = mantissa.chars().filter(|c| c.is_ascii_digit()).collect();
    let digits = digits.trim_end_matches('0');
    let digits = if digits.is_empty() { "0" } else { digits };

    let mut out = String::new();
    if negative {
        out.push('-');
    }
    if exp < 0 {
        out.push_str("0.");
        for _ in 0..(-exp - 1) {
            out.push('0');
        }
        out.push_str(digits);
    } else {
        let int_len = exp as usize + 1;
        if digits.len() <= int_len {
            out.push_str(digits);
            for _ in digits.len()..int_len {
                out.push('0');
            }
        } else {
            out.push_str(&digits[..int_len]);
            out.push('.');
            out.push_str(&digits[int_len..]);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TimeSeries {
    pub rows: Vec<LogRow>,
}

impl TimeSeries {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn last(&self) -> Option<&LogRow> {
        self.rows.last()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "{CSV_HEADER}")?;
        for row in &self.rows {
            writeln!(out, "{}", row.to_csv_line())?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("CSV is ASCII")
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<TimeSeries, CsvError> {
        let mut rows = Vec::new();
        let mut saw_header = false;
        for (idx, line) in input.lines().enumerate() {
            let line = line?;
            let lineno = idx + 1;
            if !saw_header {
                if line.trim() != CSV_HEADER {
                    return Err(CsvError::Format {
                        line: lineno,
                        message: "missing or unexpected header".into(),
                    });
                }
                saw_header = true;
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            rows.push(LogRow::parse_csv_line(&line, lineno)?);
        }
        if !saw_header {
            return Err(CsvError::Format {
                line: 1,
                message: "empty file".into(),
            });
        }
        Ok(TimeSeries { rows })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(0.0), "0");
        assert_eq!(format_sig9(-0.0), "0");
        assert_eq!(format_sig9(0.1), "0.1");
        assert_eq!(format_sig9(100.0), "100");
        assert_eq!(format_sig9(12.5), "12.5");
        assert_eq!(format_sig9(0.000236), "0.000236");
        assert_eq!(format_sig9(2.0 / 3.0), "0.666666667");
        assert_eq!(format_sig9(-1234567890.0), "-1234567890");
        assert_eq!(format_sig9(123456.7891), "123456.789");
        assert_eq!(format_sig9(1e-12), "0.000000000001");
    }

    #[test]
    fn rejects_wrong_header() {
        let err = TimeSeries::read_csv("a,b\n1,2\n".as_bytes()).unwrap_err();
        assert!(matches!(err, CsvError::Format { line: 1, .. }));
    }

    proptest! {
        #[test]
        fn sig9_stays_within_nine_digits(v in -1e9..1e9f64) {
            let s = format_sig9(v);
            prop_assert!(!s.contains('e'));
            let digits = s.trim_start_matches('-').replace('.', "");
            let significant = digits.trim_start_matches('0');
            prop_assert!(significant.len() <= 10, "{} -> {}", v, s);
            let back: f64 = s.parse().unwrap();
            prop_assert!((back - v).abs() <= v.abs() * 1e-8 + 1e-300);
        }

        #[test]
        fn csv_round_trip_is_stable(level in 0.0..1.0f64, sp in 0.0..100.0f64, t in 0.0..1e5f64) {
            let row = LogRow {
                t_s: t, level_m: level, level_pct: level * 148.2, sp_pct: sp, error_pct: sp - level * 148.2,
                u_volts: 5.0, valve_frac: 0.5, q_in_m3s: 0.00025, q_out_m3s: level / 2000.0,
                mode: ControllerMode::PID,
            };
            let once = TimeSeries { rows: vec![row] }.to_csv_string();
            let parsed = TimeSeries::read_csv(once.as_bytes()).unwrap();
            prop_assert_eq!(parsed.to_csv_string(), once);
        }
    }
}
