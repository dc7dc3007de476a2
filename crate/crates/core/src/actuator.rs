//! Bandwidth-limited solenoid current source.
//!
//! The source is a second-order low-pass
//! `H(s) = K ωn² / (s² + 2ζωn s + ωn²)`, discretized with the bilinear
//! transform prewarped at `ωn`. The recursion starts at rest at the first
//! drive sample, so a constant drive produces a constant output.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::waveform::{Unit, Waveform, WaveformError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ActuatorError {
    #[error("natural frequency must be > 0 Hz, got {0}")]
    NaturalFrequency(f64),
    #[error("bandwidth must be > 0 Hz, got {0}")]
    Bandwidth(f64),
    #[error("damping ratio must be > 0, got {0}")]
    Damping(f64),
    #[error("DC gain must be > 0, got {0}")]
    DcGain(f64),
    #[error("{name} limit must be > 0, got {value}")]
    Limit { name: &'static str, value: f64 },
    #[error("regularization must be >= 0, got {0}")]
    Regularization(f64),
    #[error(
        "sample interval {dt} s is too coarse for a {natural_frequency} Hz actuator; need dt <= {max_dt} s"
    )]
    Discretization { dt: f64, natural_frequency: f64, max_dt: f64 },
    #[error(
        "pre-compensated drive cannot meet the actuator limits: residual {residual:.4} of target span exceeds {bound}"
    )]
    CompensationInfeasible { residual: f64, bound: f64 },
    #[error(transparent)]
    Waveform(#[from] WaveformError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActuatorModel {
    natural_frequency_hz: f64,
    damping_ratio: f64,
    dc_gain: f64,
    slew_limit_mg_per_s: Option<f64>,
    amplitude_limit_mg: Option<f64>,
}

/// `ωb / ωn` for the −3 dB point of the second-order low-pass.
pub fn bandwidth_ratio(damping_ratio: f64) -> f64 {
    let a = 1.0 - 2.0 * damping_ratio * damping_ratio;
    (a + (a * a + 1.0).sqrt()).sqrt()
}

impl ActuatorModel {
    pub fn new(natural_frequency_hz: f64, damping_ratio: f64, dc_gain: f64) -> Result<Self, ActuatorError> {
        if !(natural_frequency_hz.is_finite() && natural_frequency_hz > 0.0) {
            return Err(ActuatorError::NaturalFrequency(natural_frequency_hz));
        }
        if !(damping_ratio.is_finite() && damping_ratio > 0.0) {
            return Err(ActuatorError::Damping(damping_ratio));
        }
        if !(dc_gain.is_finite() && dc_gain > 0.0) {
            return Err(ActuatorError::DcGain(dc_gain));
        }
        Ok(Self {
            natural_frequency_hz,
            damping_ratio,
            dc_gain,
            slew_limit_mg_per_s: None,
            amplitude_limit_mg: None,
        })
    }

    /// Model whose −3 dB bandwidth is `bandwidth_hz`.
    pub fn from_bandwidth(bandwidth_hz: f64, damping_ratio: f64, dc_gain: f64) -> Result<Self, ActuatorError> {
        if !(bandwidth_hz.is_finite() && bandwidth_hz > 0.0) {
            return Err(ActuatorError::Bandwidth(bandwidth_hz));
        }
        if !(damping_ratio.is_finite() && damping_ratio > 0.0) {
            return Err(ActuatorError::Damping(damping_ratio));
        }
        Self::new(bandwidth_hz / bandwidth_ratio(damping_ratio), damping_ratio, dc_gain)
    }

    pub fn with_slew_limit(mut self, mg_per_s: f64) -> Result<Self, ActuatorError> {
        if !(mg_per_s.is_finite() && mg_per_s > 0.0) {
            return Err(ActuatorError::Limit {
                name: "slew",
                value: mg_per_s,
            });
        }
        self.slew_limit_mg_per_s = Some(mg_per_s);
        Ok(self)
    }

    pub fn with_amplitude_limit(mut self, mg: f64) -> Result<Self, ActuatorError> {
        if !(mg.is_finite() && mg > 0.0) {
            return Err(ActuatorError::Limit {
                name: "amplitude",
                value: mg,
            });
        }
        self.amplitude_limit_mg = Some(mg);
        Ok(self)
    }

    pub fn natural_frequency_hz(&self) -> f64 {
        self.natural_frequency_hz
    }

    pub fn damping_ratio(&self) -> f64 {
        self.damping_ratio
    }

    pub fn dc_gain(&self) -> f64 {
        self.dc_gain
    }

    pub fn slew_limit(&self) -> Option<f64> {
        self.slew_limit_mg_per_s
    }

    pub fn amplitude_limit(&self) -> Option<f64> {
        self.amplitude_limit_mg
    }

    pub fn bandwidth_hz(&self) -> f64 {
        self.natural_frequency_hz * bandwidth_ratio(self.damping_ratio)
    }

    /// Ring-down frequency; `None` when not underdamped.
    pub fn damped_frequency_hz(&self) -> Option<f64> {
        (self.damping_ratio < 1.0).then(|| self.natural_frequency_hz * (1.0 - self.damping_ratio.powi(2)).sqrt())
    }

    /// Exponential decay rate of the slowest mode, 1/s.
    pub fn decay_rate(&self) -> f64 {
        let wn = 2.0 * PI * self.natural_frequency_hz;
        let z = self.damping_ratio;
        if z < 1.0 {
            z * wn
        } else {
            wn * (z - (z * z - 1.0).sqrt())
        }
    }

    pub fn max_dt(&self) -> f64 {
        1.0 / (20.0 * self.natural_frequency_hz)
    }

    /// Continuous-time frequency response.
    pub fn continuous_response(&self, f_hz: f64) -> Complex<f64> {
        let wn = 2.0 * PI * self.natural_frequency_hz;
        let s = Complex::new(0.0, 2.0 * PI * f_hz);
        Complex::new(self.dc_gain * wn * wn, 0.0) / (s * s + 2.0 * self.damping_ratio * wn * s + wn * wn)
    }

    pub fn discretize(&self, dt: f64) -> Result<Biquad, ActuatorError> {
        let max_dt = self.max_dt();
        if !(dt > 0.0 && dt <= max_dt * (1.0 + 1e-12)) {
            return Err(ActuatorError::Discretization {
                dt,
                natural_frequency: self.natural_frequency_hz,
                max_dt,
            });
        }
        let wn = 2.0 * PI * self.natural_frequency_hz;
        let z = self.damping_ratio;
        let c = wn / (wn * dt / 2.0).tan();
        let a0 = c * c + 2.0 * z * wn * c + wn * wn;
        let a1 = 2.0 * (wn * wn - c * c);
        let a2 = c * c - 2.0 * z * wn * c + wn * wn;
        let g = self.dc_gain * wn * wn / a0;
        Ok(Biquad {
            b: [g, 2.0 * g, g],
            a: [a1 / a0, a2 / a0],
            dc_gain: self.dc_gain,
        })
    }
}

/// Direct-form-II-transposed second-order section.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
    dc_gain: f64,
}

impl Biquad {
    pub fn response(&self, omega: f64) -> Complex<f64> {
        let z1 = Complex::from_polar(1.0, -omega);
        let z2 = z1 * z1;
        (self.b[0] + self.b[1] * z1 + self.b[2] * z2) / (1.0 + self.a[0] * z1 + self.a[1] * z2)
    }

    pub fn filter(&self, input: &[f64]) -> Vec<f64> {
        let Some(&x0) = input.first() else {
            return Vec::new();
        };
        let [b0, b1, b2] = self.b;
        let [a1, a2] = self.a;
        // at rest at (x0, K x0)
        let y0 = self.dc_gain * x0;
        let mut s2 = b2 * x0 - a2 * y0;
        let mut s1 = b1 * x0 - a1 * y0 + s2;
        input
            .iter()
            .map(|&x| {
                let y = b0 * x + s1;
                s1 = b1 * x - a1 * y + s2;
                s2 = b2 * x - a2 * y;
                y
            })
            .collect()
    }
}

/// Field produced at the atoms by `drive`.
pub fn simulate_response(model: &ActuatorModel, drive: &Waveform) -> Result<Waveform, ActuatorError> {
    drive.expect_unit(Unit::Milligauss)?;
    let biquad = model.discretize(drive.dt())?;
    Ok(drive.with_samples(biquad.filter(drive.samples()))?)
}

/// Peak fractional overshoot of the unit-step response.
pub fn step_overshoot(model: &ActuatorModel) -> f64 {
    let z = model.damping_ratio;
    if z < 1.0 {
        (-z * PI / (1.0 - z * z).sqrt()).exp()
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Compensation {
    pub drive: Waveform,
    /// RMS of `simulate_response(drive) - target`, as a fraction of the
    /// target span.
    pub residual: f64,
    /// Whether slew or amplitude limits modified the drive.
    pub projected: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompensationOptions {
    /// Tikhonov weight on drive energy, in units of `dc_gain²`.
    pub regularization: f64,
    /// Largest tolerated residual (fraction of target span) once limits
    /// have been applied.
    pub max_residual: f64,
}

impl Default for CompensationOptions {
    fn default() -> Self {
        Self {
            regularization: 0.0,
            max_residual: 0.05,
        }
    }
}

/// Denominator floor for the inverse filter, relative to `dc_gain²`. The
/// bilinear section has a double zero at Nyquist.
const INVERSE_FLOOR: f64 = 1e-12;

fn rms_fraction(a: &[f64], b: &[f64], span: f64) -> f64 {
    let n = a.len() as f64;
    let rms = (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n).sqrt();
    if span > 0.0 {
        rms / span
    } else {
        rms / b.iter().fold(1.0f64, |m, v| m.max(v.abs()))
    }
}

fn project_limits(drive: &mut [f64], dt: f64, model: &ActuatorModel) -> bool {
    let mut changed = false;
    if let Some(limit) = model.amplitude_limit_mg {
        for v in drive.iter_mut() {
            let c = v.clamp(-limit, limit);
            changed |= c != *v;
            *v = c;
        }
    }
    if let Some(slew) = model.slew_limit_mg_per_s {
        let step = slew * dt;
        for i in 1..drive.len() {
            let lo = drive[i - 1] - step;
            let hi = drive[i - 1] + step;
            let c = drive[i].clamp(lo, hi);
            changed |= c != drive[i];
            drive[i] = c;
        }
    }
    changed
}

/// Drive minimizing `‖simulate_response(drive) − target‖² + λ‖drive‖²`,
/// solved in the frequency domain against the discrete actuator response.
///
/// The target is extended with settled lead-in and lead-out segments and a
/// smooth return to its initial value so the circular solve matches the
/// causal recursion inside the window. Slew and amplitude limits are applied
/// afterwards; the achieved residual is reported and checked against
/// `max_residual` only when a limit was active.
pub fn precompensate(
    model: &ActuatorModel,
    target: &Waveform,
    opts: &CompensationOptions,
) -> Result<Compensation, ActuatorError> {
    target.expect_unit(Unit::Milligauss)?;
    if !(opts.regularization.is_finite() && opts.regularization >= 0.0) {
        return Err(ActuatorError::Regularization(opts.regularization));
    }
    let dt = target.dt();
    let biquad = model.discretize(dt)?;
    let x = target.samples();
    let n = x.len();
    let (x0, xe) = (x[0], x[n - 1]);

    // ln(1e12) decay lengths
    let settle = ((27.6 / model.decay_rate()) / dt).ceil() as usize;
    let pad = settle.max(n / 2).max(16);
    let len = (n + 3 * pad).next_power_of_two();
    let tail = len - n - pad;

    let mut buf: Vec<Complex<f64>> = Vec::with_capacity(len);
    buf.extend(std::iter::repeat_n(Complex::new(x0, 0.0), pad));
    buf.extend(x.iter().map(|&v| Complex::new(v, 0.0)));
    // hold, then raised-cosine back to x0
    let hold = tail / 2;
    let ramp = tail - hold;
    buf.extend(std::iter::repeat_n(Complex::new(xe, 0.0), hold));
    for k in 0..ramp {
        let p = (k as f64 + 1.0) / (ramp as f64 + 1.0);
        let w = 0.5 * (1.0 - (PI * p).cos());
        buf.push(Complex::new(xe + (x0 - xe) * w, 0.0));
    }

    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(len).process(&mut buf);
    let k2 = model.dc_gain * model.dc_gain;
    let lambda = opts.regularization * k2;
    let floor = INVERSE_FLOOR * k2;
    for (k, c) in buf.iter_mut().enumerate() {
        let omega = 2.0 * PI * k as f64 / len as f64;
        let h = biquad.response(omega);
        let denom = (h.norm_sqr() + lambda).max(floor);
        *c = *c * h.conj() / denom;
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    let scale = 1.0 / len as f64;
    let mut drive: Vec<f64> = buf[pad..pad + n].iter().map(|c| c.re * scale).collect();

    let projected = project_limits(&mut drive, dt, model);
    let drive = target.with_samples(drive)?;
    let realized = biquad.filter(drive.samples());
    let residual = rms_fraction(&realized, x, target.span());
    if projected && residual > opts.max_residual {
        return Err(ActuatorError::CompensationInfeasible {
            residual,
            bound: opts.max_residual,
        });
    }
    Ok(Compensation {
        drive,
        residual,
        projected,
    })
}

/// Post-transient oscillation of a realized field against its ideal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RingDown {
    /// First sample at or after the scan start where the deviation changes
    /// sign; the oscillation is measured from here on.
    pub onset: Option<usize>,
    /// Largest |realized − ideal| from the onset on, mG.
    pub amplitude: f64,
    /// Oscillation frequency from zero crossings of the deviation, if at
    /// least three crossings exist.
    pub frequency_hz: Option<f64>,
}

/// Ring-down after `start`. Deviation before the first sign change is
/// tracking lag and is excluded.
pub fn ring_down(realized: &Waveform, ideal: &Waveform, start: usize) -> RingDown {
    let dev: Vec<f64> = realized
        .samples()
        .iter()
        .zip(ideal.samples())
        .skip(start)
        .map(|(a, b)| a - b)
        .collect();
    let peak = dev.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    // ignore crossings once the oscillation has decayed into round-off
    let floor = 1e-3 * peak;
    let mut crossings = Vec::new();
    let mut onset = None;
    for (i, w) in dev.windows(2).enumerate() {
        if w[0].abs().max(w[1].abs()) < floor {
            continue;
        }
        if (w[0] < 0.0) != (w[1] < 0.0) {
            onset.get_or_insert(i + 1);
            let frac = w[0] / (w[0] - w[1]);
            crossings.push((i as f64 + frac) * realized.dt());
        }
    }
    let amplitude = onset.map_or(0.0, |k| dev[k..].iter().fold(0.0f64, |m, v| m.max(v.abs())));
    let frequency_hz = (crossings.len() >= 3).then(|| {
        let span = crossings.last().unwrap() - crossings[0];
        (crossings.len() - 1) as f64 / (2.0 * span)
    });
    RingDown {
        onset: onset.map(|k| k + start),
        amplitude,
        frequency_hz,
    }
}
