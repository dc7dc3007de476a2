//! Pulse rendering and drive compilation.
//!
//! A [`PulseSpec`] describes a noise pulse in dB. [`compile`] renders it,
//! smooths square fronts in the noise domain, inverts the fitted transfer
//! function sample by sample to get the field the atoms must see, and, given
//! an actuator, pre-compensates that field and predicts what the actuator
//! actually delivers.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actuator::{
    precompensate, ring_down, simulate_response, ActuatorError, ActuatorModel, CompensationOptions,
};
use crate::calibration::{Branch, CalibrationError, Quadrature, TransferFunction};
use crate::noise::NoiseLevel;
use crate::waveform::{smooth_edges, Unit, Waveform, WaveformError};

#[derive(Debug, Error)]
pub enum CompileError {
    #[error("invalid pulse spec: {0}")]
    Spec(String),
    #[error(
        "target {target_db:.4} dB at t = {time_s:.3e} s is outside the reachable interval \
         [{lo_db:.4}, {hi_db:.4}] dB on the {branch} branch by more than {tolerance_db} dB"
    )]
    Unreachable {
        time_s: f64,
        target_db: f64,
        lo_db: f64,
        hi_db: f64,
        branch: Branch,
        tolerance_db: f64,
    },
    #[error(transparent)]
    Waveform(#[from] WaveformError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Actuator(#[from] ActuatorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PulseShape {
    Gaussian,
    Triangular,
    Square,
}

impl PulseShape {
    /// Normalized profile in `[0, 1]` at offset `t` from the pulse centre.
    pub fn profile(self, t: f64, duration: f64) -> f64 {
        match self {
            // duration is the full width at half maximum
            PulseShape::Gaussian => (-4.0 * 2f64.ln() * (t / duration).powi(2)).exp(),
            PulseShape::Triangular => (1.0 - t.abs() / (0.5 * duration)).max(0.0),
            PulseShape::Square => {
                if t.abs() <= 0.5 * duration * (1.0 + 1e-12) {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Positive pulses rise from maximum squeezing toward shot noise; negative
/// pulses drop from shot noise toward maximum squeezing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn flipped(self) -> Self {
        match self {
            Polarity::Positive => Polarity::Negative,
            Polarity::Negative => Polarity::Positive,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseSpec {
    pub shape: PulseShape,
    pub polarity: Polarity,
    pub duration_s: f64,
    pub dt_s: f64,
    pub baseline_db: f64,
    pub peak_db: f64,
    /// Settled lead-in and lead-out on each side of a single pulse.
    /// Defaults to `max(2 * duration, 0.5 ms)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repetition_period_s: Option<f64>,
    #[serde(default = "one")]
    pub repetitions: usize,
}

fn one() -> usize {
    1
}

impl PulseSpec {
    /// Spec with the level convention implied by `polarity`.
    pub fn new(
        shape: PulseShape,
        polarity: Polarity,
        duration_s: f64,
        dt_s: f64,
        max_squeezing_db: f64,
        shot_db: f64,
    ) -> Result<Self, CompileError> {
        let (baseline_db, peak_db) = match polarity {
            Polarity::Positive => (max_squeezing_db, shot_db),
            Polarity::Negative => (shot_db, max_squeezing_db),
        };
        let spec = Self {
            shape,
            polarity,
            duration_s,
            dt_s,
            baseline_db,
            peak_db,
            padding_s: None,
            repetition_period_s: None,
            repetitions: 1,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Spec spanning the transfer function's floor and the shot-noise level.
    pub fn spanning(
        shape: PulseShape,
        polarity: Polarity,
        duration_s: f64,
        dt_s: f64,
        tf: &TransferFunction,
    ) -> Result<Self, CompileError> {
        Self::new(shape, polarity, duration_s, dt_s, tf.n_min_db(), NoiseLevel::SHOT.db())
    }

    pub fn validate(&self) -> Result<(), CompileError> {
        let bad = |m: String| Err(CompileError::Spec(m));
        if !(self.dt_s.is_finite() && self.dt_s > 0.0) {
            return bad(format!("dt must be > 0, got {}", self.dt_s));
        }
        if !(self.duration_s.is_finite() && self.duration_s >= 10.0 * self.dt_s * (1.0 - 1e-9)) {
            return bad(format!(
                "duration {} s must be at least 10 samples of {} s",
                self.duration_s, self.dt_s
            ));
        }
        if !(self.baseline_db.is_finite() && self.peak_db.is_finite()) {
            return bad("levels must be finite".into());
        }
        match self.polarity {
            Polarity::Positive if self.peak_db < self.baseline_db => {
                return bad(format!(
                    "positive pulse must rise from {} dB, got peak {} dB",
                    self.baseline_db, self.peak_db
                ))
            }
            Polarity::Negative if self.peak_db > self.baseline_db => {
                return bad(format!(
                    "negative pulse must drop from {} dB, got peak {} dB",
                    self.baseline_db, self.peak_db
                ))
            }
            _ => {}
        }
        if let Some(p) = self.padding_s {
            if !(p.is_finite() && p >= 0.0) {
                return bad(format!("padding must be >= 0, got {p}"));
            }
        }
        if let Some(period) = self.repetition_period_s {
            if !(period.is_finite() && period > self.duration_s) {
                return bad(format!(
                    "repetition period {period} s must exceed the pulse duration {} s",
                    self.duration_s
                ));
            }
        }
        if self.repetitions == 0 {
            return bad("repetitions must be >= 1".into());
        }
        Ok(())
    }

    pub fn padding(&self) -> f64 {
        self.padding_s.unwrap_or((2.0 * self.duration_s).max(0.5e-3))
    }

    /// Same shape and timing with polarity and levels swapped.
    pub fn mirrored(&self) -> Self {
        Self {
            polarity: self.polarity.flipped(),
            baseline_db: self.peak_db,
            peak_db: self.baseline_db,
            ..self.clone()
        }
    }

    /// Sample count and centre index of one period.
    fn layout(&self) -> (usize, f64) {
        let n = match self.repetition_period_s {
            Some(period) => (period / self.dt_s).round() as usize,
            None => {
                let pad = (self.padding() / self.dt_s).round() as usize;
                let dur = (self.duration_s / self.dt_s).round() as usize;
                2 * pad + dur + 1
            }
        };
        (n, 0.5 * (n as f64 - 1.0))
    }

    /// Samples of one period lying within one duration of the pulse centre.
    pub fn window(&self) -> Range<usize> {
        let (n, centre) = self.layout();
        let half = self.duration_s / self.dt_s;
        let lo = (centre - half).ceil().max(0.0) as usize;
        let hi = ((centre + half).floor() as usize).min(n - 1);
        lo..hi + 1
    }
}

/// One period of the requested noise pulse, in dB.
pub fn render_period(spec: &PulseSpec) -> Result<Waveform, CompileError> {
    spec.validate()?;
    let (n, centre) = spec.layout();
    let dt = spec.dt_s;
    let amp = spec.peak_db - spec.baseline_db;
    let samples = (0..n)
        .map(|i| spec.baseline_db + amp * spec.shape.profile((i as f64 - centre) * dt, spec.duration_s))
        .collect();
    Ok(Waveform::new(samples, dt, Unit::Decibel)?)
}

/// The full requested noise waveform, including repetitions.
pub fn render_target(spec: &PulseSpec) -> Result<Waveform, CompileError> {
    Ok(render_period(spec)?.tiled(spec.repetitions))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompileOptions {
    pub branch: Branch,
    /// Smooth square fronts before inversion.
    pub smoothing: bool,
    /// Raised-cosine front length; defaults to 20% of the pulse duration.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rise_time_s: Option<f64>,
    /// Pre-compensate against the actuator when one is supplied.
    pub compensation: bool,
    pub compensation_options: CompensationOptions,
    pub clamp_tolerance_db: f64,
}

/// Keeps the inverse filter gain near Nyquist bounded (about 16x), where
/// clamped plateaus in the ideal field otherwise excite huge drive swings.
pub const DEFAULT_REGULARIZATION: f64 = 1e-3;

impl Default for CompileOptions {
    fn default() -> Self {
        Self {
            branch: Branch::Positive,
            smoothing: true,
            rise_time_s: None,
            compensation: true,
            compensation_options: CompensationOptions {
                regularization: DEFAULT_REGULARIZATION,
                ..CompensationOptions::default()
            },
            clamp_tolerance_db: 0.05,
        }
    }
}

impl CompileOptions {
    pub fn rise_time(&self, spec: &PulseSpec) -> f64 {
        self.rise_time_s.unwrap_or(0.2 * spec.duration_s)
    }
}

/// Noise ripple above which ring-down is flagged.
pub const RING_DOWN_THRESHOLD_DB: f64 = 0.1;
/// Drive excursion beyond the ideal field range, as a fraction of its span,
/// above which compensation is considered excessive.
pub const EXCESSIVE_DRIVE_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RingDownReport {
    /// Post-pulse deviation of the delivered field from the ideal field, mG.
    pub field_amplitude_mg: f64,
    pub field_frequency_hz: Option<f64>,
    /// Post-pulse deviation of the predicted noise from the target, dB.
    pub noise_ripple_db: f64,
    /// Same, for the uncompensated response to the ideal field.
    pub uncompensated_noise_ripple_db: f64,
    pub damped_frequency_hz: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub clamp_count: usize,
    pub max_clamp_db: f64,
    pub smoothed_steps: usize,
    pub rise_time_s: Option<f64>,
    pub compensated: bool,
    pub compensation_residual: Option<f64>,
    pub compensation_projected: bool,
    /// Largest drive excursion outside the ideal field range, as a
    /// fraction of the ideal field span.
    pub drive_excursion: f64,
    pub ring_down: Option<RingDownReport>,
    pub ring_down_flag: bool,
    pub roundtrip_rms_db: f64,
    pub roundtrip_max_db: f64,
    pub warnings: Vec<String>,
}

impl Diagnostics {
    pub fn has_warnings(&self) -> bool {
        self.ring_down_flag || !self.warnings.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompiledDrive {
    pub target_noise: Waveform,
    pub drive_field: Waveform,
    pub predicted_field: Waveform,
    pub predicted_noise: Waveform,
    /// Samples over which fidelity is scored.
    pub window: Range<usize>,
    pub diagnostics: Diagnostics,
}

impl CompiledDrive {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t_s,target_dB,drive_mG,field_mG,predicted_dB\n");
        for i in 0..self.target_noise.len() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                self.target_noise.time(i),
                self.target_noise.samples()[i],
                self.drive_field.samples()[i],
                self.predicted_field.samples()[i],
                self.predicted_noise.samples()[i]
            ));
        }
        out
    }
}

/// RMS and maximum of `|predicted_noise - target_noise|` over the pulse
/// window.
pub fn roundtrip_error(compiled: &CompiledDrive) -> (f64, f64) {
    let t = &compiled.target_noise.samples()[compiled.window.clone()];
    let p = &compiled.predicted_noise.samples()[compiled.window.clone()];
    let (sum, max) = t.iter().zip(p).fold((0.0, 0.0f64), |(s, m), (a, b)| {
        let d = (a - b).abs();
        (s + d * d, m.max(d))
    });
    ((sum / t.len() as f64).sqrt(), max)
}

fn noise_of(tf: &TransferFunction, field: &Waveform) -> Result<Waveform, WaveformError> {
    field.map(Unit::Decibel, |b| tf.noise_at_field(b, Quadrature::Squeezed).level.db())
}

/// First sample after the last one that differs from the final target level.
fn settled_from(target: &[f64]) -> usize {
    let last = *target.last().unwrap();
    let span = target.iter().fold(0.0f64, |m, v| m.max((v - last).abs()));
    if span == 0.0 {
        return target.len();
    }
    target
        .iter()
        .rposition(|v| (v - last).abs() > 1e-3 * span)
        .map_or(0, |i| i + 1)
}

fn max_dev_from(a: &[f64], b: &[f64], start: usize) -> f64 {
    a.iter()
        .zip(b)
        .skip(start)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

pub fn compile(
    spec: &PulseSpec,
    tf: &TransferFunction,
    actuator: Option<&ActuatorModel>,
    options: &CompileOptions,
) -> Result<CompiledDrive, CompileError> {
    spec.validate()?;
    if !(options.clamp_tolerance_db.is_finite() && options.clamp_tolerance_db >= 0.0) {
        return Err(CompileError::Spec(format!(
            "clamp tolerance must be >= 0, got {}",
            options.clamp_tolerance_db
        )));
    }
    let mut warnings = Vec::new();

    let mut target = render_period(spec)?;
    let mut smoothed_steps = 0;
    let mut rise_time_s = None;
    if spec.shape == PulseShape::Square && options.smoothing {
        let rise = options.rise_time(spec);
        let smoothed = smooth_edges(&target, rise)?;
        smoothed_steps = smoothed.steps;
        rise_time_s = Some(rise);
        warnings.extend(smoothed.warnings);
        target = smoothed.waveform;
    }
    let target = target.tiled(spec.repetitions);

    let (lo, hi) = tf.reachable(options.branch);
    let tol = options.clamp_tolerance_db;
    let mut clamp_count = 0;
    let mut max_clamp_db = 0.0f64;
    let mut ideal = Vec::with_capacity(target.len());
    for (i, &level) in target.samples().iter().enumerate() {
        let clamped = level.clamp(lo, hi);
        let excess = (level - clamped).abs();
        if excess > tol {
            return Err(CompileError::Unreachable {
                time_s: target.time(i),
                target_db: level,
                lo_db: lo,
                hi_db: hi,
                branch: options.branch,
                tolerance_db: tol,
            });
        }
        if excess > 0.0 {
            clamp_count += 1;
            max_clamp_db = max_clamp_db.max(excess);
        }
        let level = NoiseLevel::new(clamped).map_err(CalibrationError::from)?;
        ideal.push(tf.field_for_noise(level, options.branch)?);
    }
    let ideal = Waveform::new(ideal, target.dt(), Unit::Milligauss)?;

    let mut compensated = false;
    let mut compensation_residual = None;
    let mut compensation_projected = false;
    let (drive, predicted_field) = match actuator {
        None => (ideal.clone(), ideal.clone()),
        Some(model) if options.compensation => {
            let comp = precompensate(model, &ideal, &options.compensation_options)?;
            compensated = true;
            compensation_residual = Some(comp.residual);
            compensation_projected = comp.projected;
            if comp.projected {
                warnings.push(format!(
                    "actuator limits clipped the compensated drive; residual {:.3e} of span",
                    comp.residual
                ));
            }
            let realized = simulate_response(model, &comp.drive)?;
            (comp.drive, realized)
        }
        Some(model) => {
            let realized = simulate_response(model, &ideal)?;
            (ideal.clone(), realized)
        }
    };
    let predicted_noise = noise_of(tf, &predicted_field)?;

    let span = ideal.span();
    let drive_excursion = if span > 0.0 {
        ((drive.max() - ideal.max()).max(ideal.min() - drive.min()) / span).max(0.0)
    } else {
        0.0
    };

    let mut ring_down_flag = false;
    let ring = match actuator {
        None => None,
        Some(model) => {
            let start = settled_from(target.samples());
            let rd = ring_down(&predicted_field, &ideal, start);
            let noise_ripple_db = rd
                .onset
                .map_or(0.0, |k| max_dev_from(predicted_noise.samples(), target.samples(), k));
            let uncompensated_noise_ripple_db = if compensated {
                let raw_field = simulate_response(model, &ideal)?;
                let raw = noise_of(tf, &raw_field)?;
                ring_down(&raw_field, &ideal, start)
                    .onset
                    .map_or(0.0, |k| max_dev_from(raw.samples(), target.samples(), k))
            } else {
                noise_ripple_db
            };
            let excessive = drive_excursion > EXCESSIVE_DRIVE_FRACTION;
            if excessive {
                warnings.push(format!(
                    "compensated drive leaves the ideal field range by {:.1}% of its span",
                    100.0 * drive_excursion
                ));
            }
            if noise_ripple_db > RING_DOWN_THRESHOLD_DB {
                ring_down_flag = true;
                warnings.push(format!(
                    "actuator ring-down: {noise_ripple_db:.3} dB post-pulse noise ripple"
                ));
            } else if excessive && uncompensated_noise_ripple_db > RING_DOWN_THRESHOLD_DB {
                ring_down_flag = true;
                warnings.push(format!(
                    "actuator ring-down ({uncompensated_noise_ripple_db:.3} dB uncompensated) is only \
                     suppressed by excessive drive"
                ));
            }
            Some(RingDownReport {
                field_amplitude_mg: rd.amplitude,
                field_frequency_hz: rd.frequency_hz,
                noise_ripple_db,
                uncompensated_noise_ripple_db,
                damped_frequency_hz: model.damped_frequency_hz(),
            })
        }
    };

    let window = if spec.repetitions == 1 {
        spec.window()
    } else {
        0..target.len()
    };
    let mut compiled = CompiledDrive {
        target_noise: target,
        drive_field: drive,
        predicted_field,
        predicted_noise,
        window,
        diagnostics: Diagnostics {
            clamp_count,
            max_clamp_db,
            smoothed_steps,
            rise_time_s,
            compensated,
            compensation_residual,
            compensation_projected,
            drive_excursion,
            ring_down: ring,
            ring_down_flag,
            roundtrip_rms_db: 0.0,
            roundtrip_max_db: 0.0,
            warnings,
        },
    };
    let (rms, max) = roundtrip_error(&compiled);
    compiled.diagnostics.roundtrip_rms_db = rms;
    compiled.diagnostics.roundtrip_max_db = max;
    Ok(compiled)
}
