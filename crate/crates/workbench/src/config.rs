//! Job configuration, one TOML document per job.
//!
//! Every section is optional; omitted keys take the defaults below.
//!
//! ```toml
//! [paths]
//! calibration = "sweep.csv"        # bundled synthetic sweep when omitted
//! transfer_function = "tf.json"    # persisted fit for compile/simulate
//! output_dir = "out"
//!
//! [pulse]
//! shape = "gaussian"               # gaussian | triangular | square
//! polarity = "positive"            # positive | negative
//! duration_s = 1e-3                # FWHM for gaussian, base for triangular
//! dt_s = 1e-6
//! # baseline_db / peak_db default to the fitted floor and shot noise
//!
//! [actuator]
//! bandwidth_hz = 10e3              # -3 dB point; natural frequency is derived
//! damping_ratio = 0.3
//!
//! [detection]
//! mode = "quasi_static"            # quasi_static | monte_carlo | both
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use squeezeshape::actuator::{ActuatorModel, CompensationOptions};
use squeezeshape::calibration::{Branch, SynthParams, TransferFunction};
use squeezeshape::compiler::{CompileOptions, Polarity, PulseShape, PulseSpec};
use squeezeshape::detection::{frequency_grid, DetectionConfig, DetectionMode, SpectrumProfile};
use squeezeshape::noise::{LossBudget, NoiseLevel, ShotConvention};

use crate::WorkbenchError;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JobConfig {
    pub paths: PathsConfig,
    pub pulse: PulseConfig,
    pub compile: CompileConfig,
    pub actuator: ActuatorConfig,
    pub detection: DetectionSection,
    pub loss: LossConfig,
    pub spectrum: SpectrumConfig,
    pub synth: SynthParams,
    pub report: ReportConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transfer_function: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            calibration: None,
            transfer_function: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PulseConfig {
    pub shape: PulseShape,
    pub polarity: Polarity,
    pub duration_s: f64,
    pub dt_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub peak_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub padding_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub repetition_period_s: Option<f64>,
    pub repetitions: usize,
}

impl Default for PulseConfig {
    fn default() -> Self {
        Self {
            shape: PulseShape::Gaussian,
            polarity: Polarity::Positive,
            duration_s: 1e-3,
            dt_s: 1e-6,
            baseline_db: None,
            peak_db: None,
            padding_s: None,
            repetition_period_s: None,
            repetitions: 1,
        }
    }
}

impl PulseConfig {
    /// Spec with unset levels taken from the fitted floor and shot noise.
    pub fn to_spec(&self, tf: &TransferFunction) -> Result<PulseSpec, WorkbenchError> {
        let (floor, shot) = (tf.n_min_db(), NoiseLevel::SHOT.db());
        let (default_base, default_peak) = match self.polarity {
            Polarity::Positive => (floor, shot),
            Polarity::Negative => (shot, floor),
        };
        let spec = PulseSpec {
            shape: self.shape,
            polarity: self.polarity,
            duration_s: self.duration_s,
            dt_s: self.dt_s,
            baseline_db: self.baseline_db.unwrap_or(default_base),
            peak_db: self.peak_db.unwrap_or(default_peak),
            padding_s: self.padding_s,
            repetition_period_s: self.repetition_period_s,
            repetitions: self.repetitions,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompileConfig {
    pub branch: Branch,
    pub smoothing: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rise_time_s: Option<f64>,
    pub compensation: bool,
    pub regularization: f64,
    pub max_residual: f64,
    pub clamp_tolerance_db: f64,
}

impl Default for CompileConfig {
    fn default() -> Self {
        let o = CompileOptions::default();
        Self {
            branch: o.branch,
            smoothing: o.smoothing,
            rise_time_s: o.rise_time_s,
            compensation: o.compensation,
            regularization: o.compensation_options.regularization,
            max_residual: o.compensation_options.max_residual,
            clamp_tolerance_db: o.clamp_tolerance_db,
        }
    }
}

impl CompileConfig {
    pub fn options(&self) -> CompileOptions {
        CompileOptions {
            branch: self.branch,
            smoothing: self.smoothing,
            rise_time_s: self.rise_time_s,
            compensation: self.compensation,
            compensation_options: CompensationOptions {
                regularization: self.regularization,
                max_residual: self.max_residual,
            },
            clamp_tolerance_db: self.clamp_tolerance_db,
        }
    }
}

/// `bandwidth_hz` is the -3 dB point of the second-order response; the
/// natural frequency follows from it and `damping_ratio`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActuatorConfig {
    pub enabled: bool,
    pub bandwidth_hz: f64,
    pub damping_ratio: f64,
    pub dc_gain: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slew_limit_mg_per_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub amplitude_limit_mg: Option<f64>,
}

impl Default for ActuatorConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            bandwidth_hz: 10e3,
            damping_ratio: 0.3,
            dc_gain: 1.0,
            slew_limit_mg_per_s: None,
            amplitude_limit_mg: None,
        }
    }
}

impl ActuatorConfig {
    pub fn model(&self) -> Result<Option<ActuatorModel>, WorkbenchError> {
        if !self.enabled {
            return Ok(None);
        }
        let mut m = ActuatorModel::from_bandwidth(self.bandwidth_hz, self.damping_ratio, self.dc_gain)?;
        if let Some(s) = self.slew_limit_mg_per_s {
            m = m.with_slew_limit(s)?;
        }
        if let Some(a) = self.amplitude_limit_mg {
            m = m.with_amplitude_limit(a)?;
        }
        Ok(Some(m))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeSelection {
    #[serde(alias = "quasi")]
    QuasiStatic,
    #[serde(alias = "mc")]
    MonteCarlo,
    Both,
}

impl ModeSelection {
    pub fn modes(self) -> Vec<DetectionMode> {
        match self {
            ModeSelection::QuasiStatic => vec![DetectionMode::QuasiStatic],
            ModeSelection::MonteCarlo => vec![DetectionMode::MonteCarlo],
            ModeSelection::Both => vec![DetectionMode::QuasiStatic, DetectionMode::MonteCarlo],
        }
    }
}

impl std::str::FromStr for ModeSelection {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "quasi" | "quasi_static" => Ok(ModeSelection::QuasiStatic),
            "mc" | "monte_carlo" => Ok(ModeSelection::MonteCarlo),
            "both" => Ok(ModeSelection::Both),
            _ => Err(format!("unknown mode `{s}`; expected quasi, mc or both")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionSection {
    pub center_frequency_hz: f64,
    pub rbw_hz: f64,
    pub vbw_hz: f64,
    pub sample_rate_hz: f64,
    pub n_averages: usize,
    pub seed: u64,
    pub mode: ModeSelection,
    pub shot_convention: ShotConvention,
}

impl Default for DetectionSection {
    fn default() -> Self {
        let d = DetectionConfig::default();
        Self {
            center_frequency_hz: d.center_frequency_hz,
            rbw_hz: d.rbw_hz,
            vbw_hz: d.vbw_hz,
            sample_rate_hz: d.sample_rate_hz,
            n_averages: d.n_averages,
            seed: d.seed,
            mode: ModeSelection::QuasiStatic,
            shot_convention: d.shot_convention,
        }
    }
}

impl DetectionSection {
    pub fn config(&self, mode: DetectionMode, budget: LossBudget) -> DetectionConfig {
        DetectionConfig {
            center_frequency_hz: self.center_frequency_hz,
            rbw_hz: self.rbw_hz,
            vbw_hz: self.vbw_hz,
            sample_rate_hz: self.sample_rate_hz,
            n_averages: self.n_averages,
            seed: self.seed,
            mode,
            shot_convention: self.shot_convention,
            budget,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub optical_transmission: f64,
    pub detector_qe: f64,
    pub shot_cal_offset_db: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        let b = LossBudget::default();
        Self {
            optical_transmission: b.optical_transmission,
            detector_qe: b.detector_qe,
            shot_cal_offset_db: b.shot_cal_offset_db,
        }
    }
}

impl LossConfig {
    pub fn budget(&self) -> Result<LossBudget, WorkbenchError> {
        Ok(LossBudget::new(
            self.optical_transmission,
            self.detector_qe,
            self.shot_cal_offset_db,
        )?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrumConfig {
    pub start_hz: f64,
    pub stop_hz: f64,
    pub points: usize,
    pub log_spacing: bool,
    /// Defaults to the source level that detects at -2.3 dB through the
    /// default loss budget.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_squeezing_db: Option<f64>,
    pub low_corner_hz: f64,
    pub low_order: f64,
    pub high_corner_hz: f64,
    pub high_order: f64,
    pub excess_antisqueezing: f64,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        let p = SpectrumProfile::default();
        Self {
            start_hz: 10e3,
            stop_hz: 10e6,
            points: 301,
            log_spacing: true,
            source_squeezing_db: None,
            low_corner_hz: p.low_corner_hz,
            low_order: p.low_order,
            high_corner_hz: p.high_corner_hz,
            high_order: p.high_order,
            excess_antisqueezing: p.excess_antisqueezing,
        }
    }
}

impl SpectrumConfig {
    pub fn profile(&self) -> SpectrumProfile {
        let d = SpectrumProfile::default();
        SpectrumProfile {
            source_squeezing_db: self.source_squeezing_db.unwrap_or(d.source_squeezing_db),
            low_corner_hz: self.low_corner_hz,
            low_order: self.low_order,
            high_corner_hz: self.high_corner_hz,
            high_order: self.high_order,
            excess_antisqueezing: self.excess_antisqueezing,
        }
    }

    pub fn grid(&self) -> Result<Vec<f64>, WorkbenchError> {
        Ok(frequency_grid(self.start_hz, self.stop_hz, self.points, self.log_spacing)?)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Also write per-figure column bundles.
    pub plot_data: bool,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub mode: Option<ModeSelection>,
    pub plot_data: bool,
}

/// A loaded configuration with paths resolved.
#[derive(Debug, Clone)]
pub struct Job {
    pub config: JobConfig,
    pub calibration: Option<PathBuf>,
    pub transfer_function: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl JobConfig {
    pub fn parse(text: &str) -> Result<Self, WorkbenchError> {
        toml::from_str(text).map_err(|e| WorkbenchError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("job config serializes")
    }

    /// Checks every physical parameter that does not need the fitted
    /// transfer function.
    pub fn validate(&self) -> Result<Vec<String>, WorkbenchError> {
        let budget = self.loss.budget()?;
        self.actuator.model()?;
        let mut warnings = Vec::new();
        for mode in self.detection.mode.modes() {
            for w in self.detection.config(mode, budget).validate()? {
                if !warnings.contains(&w) {
                    warnings.push(w);
                }
            }
        }
        self.spectrum.profile().validate()?;
        self.spectrum.grid()?;
        let p = &self.pulse;
        // levels are checked once the floor is known
        PulseSpec::new(p.shape, p.polarity, p.duration_s, p.dt_s, -1.0, 0.0).map(|_| ())?;
        Ok(warnings)
    }
}

impl Job {
    /// Loads `path` (or defaults), applies overrides, resolves relative
    /// paths against the config file's directory and checks that inputs
    /// exist.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, WorkbenchError> {
        let (mut config, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| WorkbenchError::Io {
                    path: p.to_path_buf(),
                    source,
                })?;
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                (JobConfig::parse(&text)?, base)
            }
            None => (JobConfig::default(), PathBuf::new()),
        };
        if let Some(seed) = overrides.seed {
            config.detection.seed = seed;
        }
        if let Some(mode) = overrides.mode {
            config.detection.mode = mode;
        }
        config.report.plot_data |= overrides.plot_data;

        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let calibration = config.paths.calibration.as_deref().map(resolve);
        let transfer_function = config.paths.transfer_function.as_deref().map(resolve);
        for p in calibration.iter().chain(&transfer_function) {
            if !p.is_file() {
                return Err(WorkbenchError::MissingInput(p.clone()));
            }
        }
        let output_dir = match &overrides.output_dir {
            Some(out) => out.clone(),
            None => resolve(&config.paths.output_dir),
        };
        Ok(Self {
            config,
            calibration,
            transfer_function,
            output_dir,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = JobConfig::parse("").unwrap();
        assert_eq!(c, JobConfig::default());
        assert!(c.validate().unwrap().is_empty());
    }

    #[test]
    fn echo_round_trips() {
        let text = r#"
            [pulse]
            shape = "square"
            polarity = "negative"
            duration_s = 2e-4

            [detection]
            mode = "mc"
            seed = 9

            [loss]
            detector_qe = 0.9
        "#;
        let c = JobConfig::parse(text).unwrap();
        assert_eq!(c.detection.mode, ModeSelection::MonteCarlo);
        assert_eq!(c.loss.optical_transmission, 0.9);
        assert_eq!(JobConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(JobConfig::parse("[pulse]\nwidth = 3").is_err());
    }

    #[test]
    fn invalid_physics_is_caught_up_front() {
        let mut c = JobConfig::default();
        c.detection.sample_rate_hz = 1e6;
        assert!(c.validate().is_err());
        let mut c = JobConfig::default();
        c.loss.detector_qe = 1.5;
        assert!(c.validate().is_err());
        let mut c = JobConfig::default();
        c.pulse.duration_s = 5e-6;
        assert!(c.validate().is_err());
        let mut c = JobConfig::default();
        c.detection.vbw_hz = 1e3;
        assert_eq!(c.validate().unwrap().len(), 1);
    }
}
