//! Balanced homodyne detection followed by a zero-span spectrum analyzer.
//!
//! Input noise waveforms are source-referred variances in dB. Both trace
//! modes pass them through the loss budget, the Gaussian resolution filter
//! and the single-pole video filter, and report dB against the shot
//! reference selected by the configured convention.
//!
//! The resolution filter has amplitude response
//! `exp(-2 ln2 (f / rbw)^2)`, so its power response is down 3 dB at
//! `±rbw / 2` and its power impulse response is a Gaussian in time with
//! standard deviation `sqrt(ln2 / 2) / (π rbw)`.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::noise::{
    apply_loss, infer_source_variance, shot_reference, LossBudget, NoiseError, NoiseLevel, QuadraturePair,
    ShotConvention, Variance,
};
use crate::waveform::{Unit, Waveform, WaveformError};

#[derive(Debug, Error)]
pub enum DetectionError {
    #[error("detection config: {0}")]
    Config(String),
    #[error("spectrum model: {0}")]
    Spectrum(String),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Waveform(#[from] WaveformError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionMode {
    #[serde(alias = "quasi")]
    QuasiStatic,
    #[serde(alias = "mc")]
    MonteCarlo,
}

impl std::fmt::Display for DetectionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DetectionMode::QuasiStatic => "quasi_static",
            DetectionMode::MonteCarlo => "monte_carlo",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionConfig {
    pub center_frequency_hz: f64,
    pub rbw_hz: f64,
    pub vbw_hz: f64,
    /// Full-rate photocurrent sampling for Monte-Carlo traces.
    pub sample_rate_hz: f64,
    pub n_averages: usize,
    pub seed: u64,
    pub mode: DetectionMode,
    pub shot_convention: ShotConvention,
    pub budget: LossBudget,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            center_frequency_hz: 1e6,
            rbw_hz: 100e3,
            vbw_hz: 3e6,
            sample_rate_hz: 20e6,
            n_averages: 50,
            seed: 0,
            mode: DetectionMode::QuasiStatic,
            shot_convention: ShotConvention::Raw,
            budget: LossBudget::default(),
        }
    }
}

impl DetectionConfig {
    /// Checks the configuration; returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>, DetectionError> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(DetectionError::Config(format!("{name} must be > 0, got {v}")))
            }
        };
        positive("center frequency", self.center_frequency_hz)?;
        positive("RBW", self.rbw_hz)?;
        positive("VBW", self.vbw_hz)?;
        positive("sample rate", self.sample_rate_hz)?;
        let nyquist = 2.0 * (self.center_frequency_hz + 3.0 * self.rbw_hz);
        if self.sample_rate_hz <= nyquist {
            return Err(DetectionError::Config(format!(
                "sample rate {} Hz must exceed {nyquist} Hz (twice center + 3 RBW)",
                self.sample_rate_hz
            )));
        }
        if self.n_averages == 0 {
            return Err(DetectionError::Config("n_averages must be >= 1".into()));
        }
        self.budget.validate()?;
        let mut warnings = Vec::new();
        if self.rbw_hz > self.vbw_hz {
            warnings.push(format!(
                "VBW {} Hz is below RBW {} Hz; the video filter will slow the trace",
                self.vbw_hz, self.rbw_hz
            ));
        }
        Ok(warnings)
    }

    fn shot_offset_db(&self) -> f64 {
        shot_reference(&self.budget, self.shot_convention).db()
    }
}

/// Standard deviation in seconds of the resolution filter's power impulse
/// response.
pub fn rbw_power_sigma(rbw_hz: f64) -> f64 {
    (2f64.ln() / 2.0).sqrt() / (PI * rbw_hz)
}

/// Full width at half maximum of the resolution filter's power impulse
/// response.
pub fn rbw_response_width(rbw_hz: f64) -> f64 {
    2.0 * 2f64.ln() / (PI * rbw_hz)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseTrace {
    /// Detected level in dB.
    pub trace: Waveform,
    pub mode: DetectionMode,
    pub seed: Option<u64>,
    pub n_averages: usize,
    /// Level of the matching shot-noise trace in dB.
    pub shot_reference_db: f64,
}

impl NoiseTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t_s,level_dB,shot_dB\n");
        for (t, v) in self.trace.times().zip(self.trace.samples()) {
            out.push_str(&format!("{t},{v},{}\n", self.shot_reference_db));
        }
        out
    }
}

fn detected_variances(noise_db: &Waveform, budget: &LossBudget) -> Result<Vec<f64>, DetectionError> {
    noise_db.expect_unit(Unit::Decibel)?;
    let eff = budget.total_efficiency();
    noise_db
        .samples()
        .iter()
        .map(|&db| Ok(apply_loss(NoiseLevel::new(db)?.to_variance(), eff)?.value()))
        .collect()
}

fn gaussian_kernel(sigma_samples: f64) -> Vec<f64> {
    let half = (6.0 * sigma_samples).ceil() as isize;
    let mut k: Vec<f64> = (-half..=half)
        .map(|j| (-0.5 * (j as f64 / sigma_samples).powi(2)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Convolution with edge samples replicated beyond the record.
fn convolve_replicate(x: &[f64], kernel: &[f64]) -> Vec<f64> {
    let half = (kernel.len() / 2) as isize;
    let n = x.len() as isize;
    (0..n)
        .map(|i| {
            kernel
                .iter()
                .enumerate()
                .map(|(j, w)| w * x[(i + j as isize - half).clamp(0, n - 1) as usize])
                .sum()
        })
        .collect()
}

/// Single-pole low-pass starting in steady state at the first sample.
fn video_filter(x: &mut [f64], dt: f64, vbw_hz: f64) {
    let tau = 1.0 / (2.0 * PI * vbw_hz);
    let alpha = 1.0 - (-dt / tau).exp();
    let Some(&first) = x.first() else { return };
    let mut y = first;
    for v in x.iter_mut() {
        y += alpha * (*v - y);
        *v = y;
    }
}

fn to_trace(power: Vec<f64>, template: &Waveform, cfg: &DetectionConfig, seed: Option<u64>) -> Result<NoiseTrace, DetectionError> {
    let mode = if seed.is_some() { DetectionMode::MonteCarlo } else { DetectionMode::QuasiStatic };
    let offset = cfg.shot_offset_db();
    let db = power.into_iter().map(|p| 10.0 * p.log10() + offset).collect();
    Ok(NoiseTrace {
        trace: Waveform::new(db, template.dt(), Unit::Decibel)?,
        mode,
        seed,
        n_averages: if seed.is_some() { cfg.n_averages } else { 1 },
        shot_reference_db: offset,
    })
}

fn quasi_static_power(v: &[f64], dt: f64, cfg: &DetectionConfig, video: bool) -> Vec<f64> {
    let kernel = gaussian_kernel(rbw_power_sigma(cfg.rbw_hz) / dt);
    let mut p = convolve_replicate(v, &kernel);
    if video {
        video_filter(&mut p, dt, cfg.vbw_hz);
    }
    p
}

/// Expectation-value trace.
pub fn quasi_static_trace(noise_db: &Waveform, cfg: &DetectionConfig) -> Result<NoiseTrace, DetectionError> {
    cfg.validate()?;
    let v = detected_variances(noise_db, &cfg.budget)?;
    to_trace(quasi_static_power(&v, noise_db.dt(), cfg, true), noise_db, cfg, None)
}

/// Expectation-value trace with the video filter bypassed.
pub fn quasi_static_trace_without_video(noise_db: &Waveform, cfg: &DetectionConfig) -> Result<NoiseTrace, DetectionError> {
    cfg.validate()?;
    let v = detected_variances(noise_db, &cfg.budget)?;
    to_trace(quasi_static_power(&v, noise_db.dt(), cfg, false), noise_db, cfg, None)
}

/// Streams at or above this index are reserved for shot-reference records.
const SHOT_STREAM_BASE: u64 = 1 << 40;

struct McChain {
    /// Full-rate samples per trace sample.
    ratio: usize,
    /// Trace samples added on each side before filtering.
    pad: usize,
    len: usize,
    fs: f64,
    gain: Vec<f64>,
    norm: f64,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl McChain {
    fn new(n: usize, dt: f64, cfg: &DetectionConfig) -> Result<Self, DetectionError> {
        let exact = dt * cfg.sample_rate_hz;
        let ratio = exact.round().max(1.0) as usize;
        if (exact - ratio as f64).abs() > 1e-6 * ratio as f64 {
            return Err(DetectionError::Config(format!(
                "trace interval {dt} s is not a whole number of {} Hz samples",
                cfg.sample_rate_hz
            )));
        }
        let fs = ratio as f64 / dt;
        // amplitude response support plus video settling
        let amp_sigma = (2f64.ln()).sqrt() / (PI * cfg.rbw_hz);
        let settle = 8.0 * amp_sigma + 10.0 / (2.0 * PI * cfg.vbw_hz);
        let pad = (settle / dt).ceil() as usize + 1;
        let len = ((n + 2 * pad) * ratio).next_power_of_two();
        let gain: Vec<f64> = (0..len)
            .map(|k| {
                let f = if k <= len / 2 { k as f64 } else { k as f64 - len as f64 } * fs / len as f64;
                (-2.0 * 2f64.ln() * (f / cfg.rbw_hz).powi(2)).exp()
            })
            .collect();
        let norm = gain.iter().map(|g| g * g).sum::<f64>() / len as f64;
        let mut planner = FftPlanner::new();
        Ok(Self {
            ratio,
            pad,
            len,
            fs,
            gain,
            norm,
            forward: planner.plan_fft_forward(len),
            inverse: planner.plan_fft_inverse(len),
        })
    }

    /// One detected record on the trace grid, linear power.
    fn record(&self, v: &[f64], cfg: &DetectionConfig, seed: u64, stream: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let n = v.len();
        let step = cfg.center_frequency_hz / self.fs;
        let mut buf: Vec<Complex<f64>> = (0..self.len)
            .map(|k| {
                let i = (k / self.ratio).saturating_sub(self.pad).min(n - 1);
                let x: f64 = StandardNormal.sample(&mut rng);
                let phase = -2.0 * PI * (k as f64 * step).fract();
                Complex::from_polar(v[i].sqrt() * x, phase)
            })
            .collect();
        self.forward.process(&mut buf);
        for (c, g) in buf.iter_mut().zip(&self.gain) {
            *c *= *g;
        }
        self.inverse.process(&mut buf);
        let scale = 1.0 / (self.len as f64).powi(2) / self.norm;
        let mut p: Vec<f64> = buf.iter().map(|c| c.norm_sqr() * scale).collect();
        video_filter(&mut p, 1.0 / self.fs, cfg.vbw_hz);
        (0..n)
            .map(|i| {
                let start = (i + self.pad) * self.ratio;
                p[start..start + self.ratio].iter().sum::<f64>() / self.ratio as f64
            })
            .collect()
    }
}

/// Elementwise sum with a fixed binary reduction tree.
fn pairwise_sum(records: &[Vec<f64>]) -> Vec<f64> {
    match records {
        [] => Vec::new(),
        [only] => only.clone(),
        _ => {
            let (a, b) = records.split_at(records.len() / 2);
            let mut left = pairwise_sum(a);
            left.iter_mut().zip(pairwise_sum(b)).for_each(|(x, y)| *x += y);
            left
        }
    }
}

fn monte_carlo_power(v: &[f64], dt: f64, cfg: &DetectionConfig, stream_base: u64) -> Result<Vec<f64>, DetectionError> {
    let chain = McChain::new(v.len(), dt, cfg)?;
    let records: Vec<Vec<f64>> = (0..cfg.n_averages as u64)
        .into_par_iter()
        .map(|j| chain.record(v, cfg, cfg.seed, stream_base + j))
        .collect();
    let n = cfg.n_averages as f64;
    Ok(pairwise_sum(&records).into_iter().map(|s| s / n).collect())
}

/// Averaged trace from seeded photocurrent records.
///
/// Each record is white Gaussian photocurrent at the full sample rate whose
/// variance follows the detected noise, mixed down from the center
/// frequency, resolution-filtered, square-law detected, video-filtered and
/// averaged onto the input grid. Record `j` draws from stream `j` of a
/// ChaCha generator keyed by the seed, so traces do not depend on thread
/// scheduling.
pub fn monte_carlo_trace(noise_db: &Waveform, cfg: &DetectionConfig) -> Result<NoiseTrace, DetectionError> {
    cfg.validate()?;
    let v = detected_variances(noise_db, &cfg.budget)?;
    let p = monte_carlo_power(&v, noise_db.dt(), cfg, 0)?;
    to_trace(p, noise_db, cfg, Some(cfg.seed))
}

/// Trace in the configured mode.
pub fn detect(noise_db: &Waveform, cfg: &DetectionConfig) -> Result<NoiseTrace, DetectionError> {
    match cfg.mode {
        DetectionMode::QuasiStatic => quasi_static_trace(noise_db, cfg),
        DetectionMode::MonteCarlo => monte_carlo_trace(noise_db, cfg),
    }
}

/// Unit-variance input through the same chain.
pub fn shot_reference_trace(cfg: &DetectionConfig, dt: f64, len: usize) -> Result<NoiseTrace, DetectionError> {
    cfg.validate()?;
    let shot = Waveform::constant(0.0, len, dt, Unit::Decibel)?;
    let v = detected_variances(&shot, &cfg.budget)?;
    match cfg.mode {
        DetectionMode::QuasiStatic => to_trace(quasi_static_power(&v, dt, cfg, true), &shot, cfg, None),
        DetectionMode::MonteCarlo => {
            let p = monte_carlo_power(&v, dt, cfg, SHOT_STREAM_BASE)?;
            to_trace(p, &shot, cfg, Some(cfg.seed))
        }
    }
}

/// Source-referred noise waveform whose detected level is `detected_db`.
pub fn source_referred(detected_db: &Waveform, budget: &LossBudget) -> Result<Waveform, DetectionError> {
    detected_db.expect_unit(Unit::Decibel)?;
    let samples = detected_db
        .samples()
        .iter()
        .map(|&db| Ok(infer_source_variance(NoiseLevel::new(db)?.to_variance(), budget)?.to_level().db()))
        .collect::<Result<Vec<f64>, DetectionError>>()?;
    Ok(detected_db.with_samples(samples)?)
}

/// Parametric source spectrum: squeezing is flat in a band, rolls off
/// below `low_corner_hz` with order `low_order`, and above
/// `high_corner_hz` with order `high_order`. The antisqueezed quadrature is
/// the minimum-uncertainty partner scaled by `excess_antisqueezing`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrumProfile {
    pub source_squeezing_db: f64,
    pub low_corner_hz: f64,
    pub low_order: f64,
    pub high_corner_hz: f64,
    pub high_order: f64,
    /// Linear factor ≥ 1 on the antisqueezed variance.
    pub excess_antisqueezing: f64,
}

impl Default for SpectrumProfile {
    fn default() -> Self {
        // source level that detects at -2.3 dB through the default budget
        let detected = NoiseLevel::new(-2.3).unwrap().to_variance();
        let source = infer_source_variance(detected, &LossBudget::default()).unwrap();
        Self {
            source_squeezing_db: source.to_level().db(),
            low_corner_hz: 20e3,
            low_order: 2.0,
            high_corner_hz: 10e6,
            high_order: 2.0,
            excess_antisqueezing: 1.0,
        }
    }
}

impl SpectrumProfile {
    pub fn validate(&self) -> Result<(), DetectionError> {
        let bad = |m: String| Err(DetectionError::Spectrum(m));
        if !(self.source_squeezing_db.is_finite() && self.source_squeezing_db <= 0.0) {
            return bad(format!("source squeezing must be <= 0 dB, got {}", self.source_squeezing_db));
        }
        for (name, v) in [
            ("low corner", self.low_corner_hz),
            ("low order", self.low_order),
            ("high corner", self.high_corner_hz),
            ("high order", self.high_order),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be > 0, got {v}"));
            }
        }
        if self.high_corner_hz <= self.low_corner_hz {
            return bad("high corner must exceed low corner".into());
        }
        if !(self.excess_antisqueezing.is_finite() && self.excess_antisqueezing >= 1.0) {
            return bad(format!("excess antisqueezing must be >= 1, got {}", self.excess_antisqueezing));
        }
        Ok(())
    }

    /// Fraction of the full squeezing depth present at `f_hz`.
    pub fn band_shape(&self, f_hz: f64) -> f64 {
        let lo = (f_hz / self.low_corner_hz).powf(self.low_order);
        let hi = (f_hz / self.high_corner_hz).powf(self.high_order);
        lo / (1.0 + lo) / (1.0 + hi)
    }

    /// Source quadrature variances at `f_hz`.
    pub fn source_pair(&self, f_hz: f64) -> Result<QuadraturePair, NoiseError> {
        let v0 = NoiseLevel::new(self.source_squeezing_db)?.to_variance().value();
        let v_min = 1.0 - (1.0 - v0) * self.band_shape(f_hz);
        QuadraturePair::new(Variance::new(v_min)?, Variance::new(self.excess_antisqueezing / v_min)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqueezingSpectrum {
    pub frequency_hz: Vec<f64>,
    pub squeezed_db: Vec<f64>,
    pub antisqueezed_db: Vec<f64>,
}

impl SqueezingSpectrum {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frequency_hz,squeezed_dB,antisqueezed_dB\n");
        for i in 0..self.frequency_hz.len() {
            out.push_str(&format!(
                "{},{},{}\n",
                self.frequency_hz[i], self.squeezed_db[i], self.antisqueezed_db[i]
            ));
        }
        out
    }
}

/// `points` frequencies from `start_hz` to `stop_hz`, log-spaced if `log`.
pub fn frequency_grid(start_hz: f64, stop_hz: f64, points: usize, log: bool) -> Result<Vec<f64>, DetectionError> {
    if !(start_hz.is_finite() && stop_hz.is_finite() && start_hz > 0.0 && stop_hz >= start_hz) {
        return Err(DetectionError::Spectrum(format!(
            "frequency range [{start_hz}, {stop_hz}] Hz is invalid"
        )));
    }
    if points == 0 {
        return Err(DetectionError::Spectrum("frequency grid needs at least one point".into()));
    }
    if points == 1 {
        return Ok(vec![start_hz]);
    }
    let last = (points - 1) as f64;
    Ok((0..points)
        .map(|i| {
            let u = i as f64 / last;
            if log {
                start_hz * (stop_hz / start_hz).powf(u)
            } else {
                start_hz + (stop_hz - start_hz) * u
            }
        })
        .collect())
}

/// Detected squeezed and antisqueezed spectra through the loss budget.
pub fn spectrum(
    profile: &SpectrumProfile,
    budget: &LossBudget,
    frequencies_hz: &[f64],
) -> Result<SqueezingSpectrum, DetectionError> {
    profile.validate()?;
    budget.validate()?;
    if frequencies_hz.is_empty() {
        return Err(DetectionError::Spectrum("empty frequency grid".into()));
    }
    let eff = budget.total_efficiency();
    let mut squeezed_db = Vec::with_capacity(frequencies_hz.len());
    let mut antisqueezed_db = Vec::with_capacity(frequencies_hz.len());
    for &f in frequencies_hz {
        if !(f.is_finite() && f > 0.0) {
            return Err(DetectionError::Spectrum(format!("frequency {f} Hz is not positive")));
        }
        let pair = profile.source_pair(f)?.with_loss(eff)?;
        squeezed_db.push(pair.v_min().to_level().db());
        antisqueezed_db.push(pair.v_max().to_level().db());
    }
    Ok(SqueezingSpectrum {
        frequency_hz: frequencies_hz.to_vec(),
        squeezed_db,
        antisqueezed_db,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn ideal_cfg() -> DetectionConfig {
        DetectionConfig {
            budget: LossBudget::ideal(),
            ..Default::default()
        }
    }

    fn db_wave(samples: Vec<f64>, dt: f64) -> Waveform {
        Waveform::new(samples, dt, Unit::Decibel).unwrap()
    }

    fn gaussian_db(n: usize, dt: f64, fwhm: f64, base: f64, peak: f64) -> Waveform {
        let c = (n as f64 - 1.0) / 2.0;
        db_wave(
            (0..n)
                .map(|i| base + (peak - base) * (-4.0 * 2f64.ln() * ((i as f64 - c) * dt / fwhm).powi(2)).exp())
                .collect(),
            dt,
        )
    }

    fn half_width(x: &[f64], dt: f64) -> f64 {
        let base = x[0];
        let (ipk, pk) = x
            .iter()
            .enumerate()
            .fold((0, base), |(bi, bv), (i, &v)| if (v - base).abs() > (bv - base).abs() { (i, v) } else { (bi, bv) });
        let half = base + 0.5 * (pk - base);
        let above = |v: f64| (v - half) * (pk - base) > 0.0;
        let (mut l, mut r) = (ipk, ipk);
        while above(x[l - 1]) {
            l -= 1;
        }
        while above(x[r + 1]) {
            r += 1;
        }
        let lx = (l - 1) as f64 + (half - x[l - 1]) / (x[l] - x[l - 1]);
        let rx = r as f64 + (half - x[r]) / (x[r + 1] - x[r]);
        (rx - lx) * dt
    }

    fn rms_diff(a: &[f64], b: &[f64]) -> f64 {
        (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
    }

    #[test]
    fn response_widths() {
        assert_abs_diff_eq!(rbw_power_sigma(100e3), 1.873_906_251_292_776e-6, epsilon = 1e-15);
        assert_abs_diff_eq!(rbw_response_width(100e3), 4.412_712_003_053_032e-6, epsilon = 1e-15);
    }

    #[test]
    fn constant_input_passes_unchanged() {
        let w = Waveform::constant(-2.3, 400, 1e-6, Unit::Decibel).unwrap();
        let t = quasi_static_trace(&w, &ideal_cfg()).unwrap();
        assert!(t.trace.samples().iter().all(|v| (v + 2.3).abs() < 1e-9));
        // with loss the trace sits at the attenuated level
        let t = quasi_static_trace(&w, &DetectionConfig::default()).unwrap();
        let expect = apply_loss(NoiseLevel::new(-2.3).unwrap().to_variance(), 0.855).unwrap().to_level().db();
        assert!(t.trace.samples().iter().all(|v| (v - expect).abs() < 1e-9));
    }

    #[test]
    fn gaussian_pulse_broadens_in_quadrature() {
        // linear excess power with a 30 us FWHM
        let dt = 0.1e-6;
        let n = 2001;
        let c = (n as f64 - 1.0) / 2.0;
        let fwhm = 30e-6;
        let excess: Vec<f64> = (0..n)
            .map(|i| (-4.0 * 2f64.ln() * ((i as f64 - c) * dt / fwhm).powi(2)).exp())
            .collect();
        let w = db_wave(excess.iter().map(|e| 10.0 * (1.0 + e).log10()).collect(), dt);
        let cfg = DetectionConfig {
            vbw_hz: 1e12,
            ..ideal_cfg()
        };
        let t = quasi_static_trace(&w, &cfg).unwrap();
        let out: Vec<f64> = t.trace.samples().iter().map(|d| 10f64.powf(d / 10.0) - 1.0).collect();
        let expected = (fwhm * fwhm + rbw_response_width(100e3).powi(2)).sqrt();
        assert_abs_diff_eq!(expected, 30.322_7e-6, epsilon = 1e-10);
        assert_abs_diff_eq!(half_width(&out, dt), expected, epsilon = 0.02e-6);

        // dB-shaped pulse on the default grid
        let w = gaussian_db(1001, 1e-6, 30e-6, -2.3, 0.0);
        let t = quasi_static_trace(&w, &ideal_cfg()).unwrap();
        let din = half_width(w.samples(), 1e-6);
        let dout = half_width(t.trace.samples(), 1e-6);
        assert!(dout >= din && dout - din < 10e-6, "{din} {dout}");
    }

    #[test]
    fn step_rise_time() {
        let dt = 0.05e-6;
        let n = 2000;
        let w = db_wave((0..n).map(|i| if i < n / 2 { 0.0 } else { 10.0 * 2f64.log10() }).collect(), dt);
        let cfg = DetectionConfig {
            vbw_hz: 1e12,
            ..ideal_cfg()
        };
        let p: Vec<f64> = quasi_static_trace(&w, &cfg)
            .unwrap()
            .trace
            .samples()
            .iter()
            .map(|d| 10f64.powf(d / 10.0) - 1.0)
            .collect();
        let cross = |level: f64| {
            let i = p.iter().position(|&v| v >= level).unwrap();
            (i - 1) as f64 + (level - p[i - 1]) / (p[i] - p[i - 1])
        };
        let rise = (cross(0.9) - cross(0.1)) * dt;
        // 2 * probit(0.9) standard deviations of the power response
        let oracle = 2.0 * 1.281_551_565_544_600_4 * (2f64.ln() / 2.0).sqrt() / (PI * 100e3);
        assert_abs_diff_eq!(oracle * 100e3, 0.480_3, epsilon = 1e-4);
        assert!((rise - oracle).abs() / oracle < 0.01, "{rise} vs {oracle}");
    }

    #[test]
    fn video_filter_is_transparent_at_default_settings() {
        let w = gaussian_db(1001, 1e-6, 30e-6, -2.3, 0.0);
        let cfg = DetectionConfig::default();
        let with = quasi_static_trace(&w, &cfg).unwrap();
        let without = quasi_static_trace_without_video(&w, &cfg).unwrap();
        let max = with
            .trace
            .samples()
            .iter()
            .zip(without.trace.samples())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(max < 0.01, "{max}");
    }

    #[test]
    fn config_checks() {
        let slow = DetectionConfig {
            vbw_hz: 10e3,
            ..Default::default()
        };
        assert_eq!(slow.validate().unwrap().len(), 1);
        let aliased = DetectionConfig {
            sample_rate_hz: 2e6,
            ..Default::default()
        };
        assert!(matches!(aliased.validate(), Err(DetectionError::Config(_))));
        let w = Waveform::constant(0.0, 100, 1e-6, Unit::Decibel).unwrap();
        assert!(monte_carlo_trace(&w, &aliased).is_err());
        let zero = DetectionConfig {
            n_averages: 0,
            ..Default::default()
        };
        assert!(zero.validate().is_err());
        let field = Waveform::constant(0.0, 100, 1e-6, Unit::Milligauss).unwrap();
        assert!(quasi_static_trace(&field, &DetectionConfig::default()).is_err());
    }

    #[test]
    fn shot_reference_conventions() {
        let mut cfg = DetectionConfig::default();
        let raw = shot_reference_trace(&cfg, 1e-6, 200).unwrap();
        assert!(raw.trace.samples().iter().all(|v| v.abs() < 1e-12));
        cfg.shot_convention = ShotConvention::Corrected;
        let corr = shot_reference_trace(&cfg, 1e-6, 200).unwrap();
        assert!(corr.trace.samples().iter().all(|v| (v + 0.2).abs() < 1e-12));
    }

    #[test]
    fn monte_carlo_shot_noise_mean() {
        let cfg = DetectionConfig {
            mode: DetectionMode::MonteCarlo,
            n_averages: 100,
            seed: 7,
            ..Default::default()
        };
        let w = Waveform::constant(0.0, 300, 1e-6, Unit::Decibel).unwrap();
        let t = monte_carlo_trace(&w, &cfg).unwrap();
        let mean = t.trace.samples().iter().sum::<f64>() / 300.0;
        assert!(mean.abs() < 0.1, "{mean}");
        let s = shot_reference_trace(&cfg, 1e-6, 300).unwrap();
        let mean = s.trace.samples().iter().sum::<f64>() / 300.0;
        assert!(mean.abs() < 0.1, "{mean}");
        assert_ne!(s.trace, t.trace);
    }

    #[test]
    fn monte_carlo_is_deterministic() {
        let cfg = DetectionConfig {
            mode: DetectionMode::MonteCarlo,
            n_averages: 8,
            seed: 42,
            ..Default::default()
        };
        let w = gaussian_db(200, 1e-6, 30e-6, -2.3, 0.0);
        let a = monte_carlo_trace(&w, &cfg).unwrap();
        let b = monte_carlo_trace(&w, &cfg).unwrap();
        assert_eq!(a, b);
        let c = monte_carlo_trace(&w, &DetectionConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(a.trace, c.trace);
    }

    #[test]
    fn monte_carlo_tracks_expectation_with_envelope_statistics() {
        // square-law detection of a Gaussian process leaves an exponential
        // spread per record: the averaged trace scatters by ~4.34/sqrt(N) dB
        let w = gaussian_db(3001, 1e-6, 1e-3, 0.0, -2.3);
        let cfg = DetectionConfig {
            mode: DetectionMode::MonteCarlo,
            n_averages: 50,
            seed: 11,
            ..Default::default()
        };
        let mc = monte_carlo_trace(&w, &cfg).unwrap();
        let qs = quasi_static_trace(&w, &cfg).unwrap();
        let rms = rms_diff(mc.trace.samples(), qs.trace.samples());
        let predicted = 10.0 / 10f64.ln() / 50f64.sqrt();
        assert!(rms > 0.6 * predicted && rms < 1.2 * predicted, "{rms} vs {predicted}");
        let bias = mc.trace.samples().iter().zip(qs.trace.samples()).map(|(a, b)| a - b).sum::<f64>() / 3001.0;
        // log of an average of exponentials is biased low by ~4.34/(2N) dB
        assert!((bias + 10.0 / 10f64.ln() / 100.0).abs() < 0.04, "{bias}");
    }

    #[test]
    fn pairwise_sum_matches_direct() {
        let recs: Vec<Vec<f64>> = (0..7).map(|j| vec![j as f64, 1.0]).collect();
        assert_eq!(pairwise_sum(&recs), vec![21.0, 7.0]);
    }

    #[test]
    fn source_referral_inverts_loss() {
        let w = gaussian_db(300, 1e-6, 30e-6, -2.3, 0.0);
        let src = source_referred(&w, &LossBudget::default()).unwrap();
        let t = quasi_static_trace_without_video(&src, &DetectionConfig { rbw_hz: 1e9, sample_rate_hz: 1e10, ..Default::default() }).unwrap();
        for (a, b) in t.trace.samples().iter().zip(w.samples()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn default_spectrum_envelope() {
        let grid = frequency_grid(100e3, 1e6, 50, true).unwrap();
        let s = spectrum(&SpectrumProfile::default(), &LossBudget::default(), &grid).unwrap();
        assert!(s.squeezed_db.iter().all(|&v| v <= -2.0), "{:?}", s.squeezed_db);
        for (a, b) in s.squeezed_db.iter().zip(&s.antisqueezed_db) {
            assert!(a <= b);
            assert!(10f64.powf((a + b) / 10.0) >= 1.0 - 1e-12);
        }
        let one = spectrum(&SpectrumProfile::default(), &LossBudget::default(), &[1e6]).unwrap();
        assert!(one.squeezed_db[0] <= -2.0);
    }

    #[test]
    fn pure_lossless_spectrum_is_minimum_uncertainty() {
        let grid = frequency_grid(1e3, 50e6, 200, true).unwrap();
        let s = spectrum(&SpectrumProfile::default(), &LossBudget::ideal(), &grid).unwrap();
        for (a, b) in s.squeezed_db.iter().zip(&s.antisqueezed_db) {
            assert_abs_diff_eq!(10f64.powf(a / 10.0) * 10f64.powf(b / 10.0), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn bad_grids() {
        assert!(frequency_grid(0.0, 1e6, 10, true).is_err());
        assert!(frequency_grid(1e6, 1e5, 10, false).is_err());
        assert!(frequency_grid(1e5, 1e6, 0, false).is_err());
        assert_eq!(frequency_grid(1e5, 1e6, 1, true).unwrap(), vec![1e5]);
        assert!(spectrum(&SpectrumProfile::default(), &LossBudget::default(), &[-1.0]).is_err());
    }

    proptest! {
        #[test]
        fn shot_noise_is_invariant_under_loss(t in 0.05f64..=1.0, qe in 0.05f64..=1.0) {
            let cfg = DetectionConfig { budget: LossBudget::new(t, qe, 0.2).unwrap(), ..Default::default() };
            let w = Waveform::constant(0.0, 100, 1e-6, Unit::Decibel).unwrap();
            let trace = quasi_static_trace(&w, &cfg).unwrap();
            prop_assert!(trace.trace.samples().iter().all(|v| v.abs() < 1e-9));
        }

        #[test]
        fn ordering_is_preserved(levels in proptest::collection::vec(-3.0f64..3.0, 60), lift in proptest::collection::vec(0.0f64..1.0, 60)) {
            let a = db_wave(levels.clone(), 1e-6);
            let b = db_wave(levels.iter().zip(&lift).map(|(l, d)| l + d).collect(), 1e-6);
            let cfg = DetectionConfig::default();
            let ta = quasi_static_trace(&a, &cfg).unwrap();
            let tb = quasi_static_trace(&b, &cfg).unwrap();
            for (x, y) in ta.trace.samples().iter().zip(tb.trace.samples()) {
                prop_assert!(x <= &(y + 1e-12));
            }
        }

        #[test]
        fn detection_never_narrows_pulses(fwhm_us in 5.0f64..200.0, depth in 0.5f64..3.0, rbw in 20e3f64..1e6) {
            let w = gaussian_db(1501, 1e-6, fwhm_us * 1e-6, 0.0, -depth);
            let cfg = DetectionConfig { rbw_hz: rbw, sample_rate_hz: 20e6, ..Default::default() };
            let t = quasi_static_trace(&w, &cfg).unwrap();
            prop_assert!(half_width(t.trace.samples(), 1e-6) >= half_width(w.samples(), 1e-6) - 1e-12);
        }
    }
}
