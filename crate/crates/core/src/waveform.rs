//! Uniformly sampled time series and edge smoothing.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WaveformError {
    #[error("waveform needs at least 2 samples, got {0}")]
    TooShort(usize),
    #[error("sample interval must be positive and finite, got {0}")]
    BadInterval(f64),
    #[error("sample {0} is not finite")]
    NonFinite(usize),
    #[error("rise time {rise_time} s is shorter than two samples ({min} s)")]
    RiseTooShort { rise_time: f64, min: f64 },
    #[error("expected a {expected} waveform, got {found}")]
    UnitMismatch { expected: Unit, found: Unit },
    #[error("waveform CSV line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Unit {
    /// Magnetic field, milligauss.
    #[serde(rename = "mG")]
    Milligauss,
    /// Noise level, dB relative to shot noise.
    #[serde(rename = "dB")]
    Decibel,
    /// Noise power relative to shot noise.
    #[serde(rename = "linear")]
    Linear,
}

impl Unit {
    pub fn label(self) -> &'static str {
        match self {
            Unit::Milligauss => "mG",
            Unit::Decibel => "dB",
            Unit::Linear => "linear",
        }
    }

    fn from_label(s: &str) -> Option<Self> {
        match s {
            "mG" => Some(Unit::Milligauss),
            "dB" => Some(Unit::Decibel),
            "linear" => Some(Unit::Linear),
            _ => None,
        }
    }
}

impl std::fmt::Display for Unit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Samples at `t = i * dt`, `i = 0..len`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    samples: Vec<f64>,
    dt: f64,
    unit: Unit,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, dt: f64, unit: Unit) -> Result<Self, WaveformError> {
        if samples.len() < 2 {
            return Err(WaveformError::TooShort(samples.len()));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(WaveformError::BadInterval(dt));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(WaveformError::NonFinite(i));
        }
        Ok(Self { samples, dt, unit })
    }

    pub fn constant(value: f64, len: usize, dt: f64, unit: Unit) -> Result<Self, WaveformError> {
        Self::new(vec![value; len], dt, unit)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn unit(&self) -> Unit {
        self.unit
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.dt * (self.samples.len() - 1) as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.dt
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.samples.len()).map(move |i| self.time(i))
    }

    pub fn min(&self) -> f64 {
        self.samples.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn span(&self) -> f64 {
        self.max() - self.min()
    }

    pub fn expect_unit(&self, expected: Unit) -> Result<(), WaveformError> {
        if self.unit == expected {
            Ok(())
        } else {
            Err(WaveformError::UnitMismatch {
                expected,
                found: self.unit,
            })
        }
    }

    /// Same grid, samples mapped through `f`, new unit.
    pub fn map(&self, unit: Unit, f: impl FnMut(f64) -> f64) -> Result<Self, WaveformError> {
        Self::new(self.samples.iter().cloned().map(f).collect(), self.dt, unit)
    }

    pub fn with_samples(&self, samples: Vec<f64>) -> Result<Self, WaveformError> {
        Self::new(samples, self.dt, self.unit)
    }

    /// Repeats the waveform `times` times back to back.
    pub fn tiled(&self, times: usize) -> Self {
        let mut samples = Vec::with_capacity(self.samples.len() * times.max(1));
        for _ in 0..times.max(1) {
            samples.extend_from_slice(&self.samples);
        }
        Self {
            samples,
            dt: self.dt,
            unit: self.unit,
        }
    }

    /// Two-column `t_s,value` text with a unit header comment.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# unit = {}\n# dt_s = {}\nt_s,value\n", self.unit, self.dt);
        for (t, v) in self.times().zip(&self.samples) {
            out.push_str(&format!("{t},{v}\n"));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, WaveformError> {
        let mut unit = None;
        let mut dt = None;
        let mut times = Vec::new();
        let mut values = Vec::new();
        let mut header_seen = false;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some((k, v)) = comment.split_once('=') {
                    match k.trim() {
                        "unit" => unit = Unit::from_label(v.trim()),
                        "dt_s" => dt = v.trim().parse::<f64>().ok(),
                        _ => {}
                    }
                }
                continue;
            }
            if !header_seen {
                header_seen = true;
                if line != "t_s,value" {
                    return Err(WaveformError::Parse {
                        line: n + 1,
                        message: format!("expected header `t_s,value`, found `{line}`"),
                    });
                }
                continue;
            }
            let parse = |s: &str| {
                s.trim().parse::<f64>().map_err(|e| WaveformError::Parse {
                    line: n + 1,
                    message: e.to_string(),
                })
            };
            let (t, v) = line.split_once(',').ok_or_else(|| WaveformError::Parse {
                line: n + 1,
                message: "expected two columns".into(),
            })?;
            times.push(parse(t)?);
            values.push(parse(v)?);
        }
        let unit = unit.ok_or(WaveformError::Parse {
            line: 0,
            message: "missing `# unit = ...` header".into(),
        })?;
        let dt = match dt {
            Some(dt) => dt,
            None if times.len() >= 2 => times[1] - times[0],
            None => return Err(WaveformError::TooShort(times.len())),
        };
        Self::new(values, dt, unit)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Smoothed {
    pub waveform: Waveform,
    /// Number of step discontinuities that were replaced.
    pub steps: usize,
    pub warnings: Vec<String>,
}

/// Relative size below which a sample-to-sample change next to a jump counts
/// as flat.
const FLAT_FRACTION: f64 = 1e-6;
/// Smallest jump, as a fraction of the waveform span, treated as a step.
const STEP_FRACTION: f64 = 1e-2;

/// Indices `i` such that the jump between samples `i` and `i + 1` is a step:
/// large, and flanked by flat samples on both sides.
pub fn find_steps(samples: &[f64]) -> Vec<usize> {
    let n = samples.len();
    if n < 2 {
        return Vec::new();
    }
    let span = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - samples.iter().cloned().fold(f64::INFINITY, f64::min);
    if span <= 0.0 {
        return Vec::new();
    }
    (0..n - 1)
        .filter(|&i| {
            let jump = (samples[i + 1] - samples[i]).abs();
            if jump <= STEP_FRACTION * span {
                return false;
            }
            let flat = FLAT_FRACTION * jump;
            let left_flat = i == 0 || (samples[i] - samples[i - 1]).abs() <= flat;
            let right_flat = i + 2 >= n || (samples[i + 2] - samples[i + 1]).abs() <= flat;
            left_flat && right_flat
        })
        .collect()
}

/// Replaces each step discontinuity with a raised-cosine ramp of length
/// `rise_time` centred on the jump. Samples farther than `rise_time / 2`
/// from every step are untouched.
pub fn smooth_edges(w: &Waveform, rise_time: f64) -> Result<Smoothed, WaveformError> {
    let dt = w.dt();
    if !(rise_time >= 2.0 * dt * (1.0 - 1e-12)) {
        return Err(WaveformError::RiseTooShort {
            rise_time,
            min: 2.0 * dt,
        });
    }
    let x = w.samples();
    let steps = find_steps(x);
    let mut out = x.to_vec();
    let mut warnings = Vec::new();
    let half = 0.5 * rise_time;

    for (k, &i) in steps.iter().enumerate() {
        let jump = x[i + 1] - x[i];
        let t_step = (i as f64 + 0.5) * dt;
        if let Some(&next) = steps.get(k + 1) {
            if (next - i) as f64 * dt < rise_time {
                warnings.push(format!(
                    "plateau of {:.3e} s between steps at {:.3e} s and {:.3e} s is shorter than the {:.3e} s rise time; \
                     the pulse shape is degraded",
                    (next - i) as f64 * dt,
                    t_step,
                    (next as f64 + 0.5) * dt,
                    rise_time
                ));
            }
        }
        if t_step - half < 0.0 || t_step + half > w.duration() {
            warnings.push(format!("ramp at {t_step:.3e} s is truncated by the waveform boundary"));
        }
        // superpose (ramp - step) so overlapping ramps compose linearly
        let first = ((t_step - half) / dt).ceil().max(0.0) as usize;
        let last = (((t_step + half) / dt).floor() as usize).min(x.len() - 1);
        for (n, v) in out.iter_mut().enumerate().take(last + 1).skip(first) {
            let t = n as f64 * dt;
            let phase = ((t - (t_step - half)) / rise_time).clamp(0.0, 1.0);
            let ramp = 0.5 * (1.0 - (PI * phase).cos());
            let heaviside = if n > i { 1.0 } else { 0.0 };
            *v += jump * (ramp - heaviside);
        }
    }

    Ok(Smoothed {
        waveform: w.with_samples(out)?,
        steps: steps.len(),
        warnings,
    })
}
