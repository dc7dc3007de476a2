//! Shot-noise-relative quadrature variances.
//!
//! All noise powers are expressed relative to the shot-noise (vacuum) level,
//! so a variance of `1.0` is the standard quantum limit and anything below it
//! is squeezed. [`Variance`] is the working representation; [`NoiseLevel`]
//! (dB) only appears when reading or writing data.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NoiseError {
    #[error("variance must be positive and finite, got {0}")]
    NonPositiveVariance(f64),
    #[error("noise level must be finite, got {0} dB")]
    NonFiniteLevel(f64),
    #[error("efficiency must lie in (0, 1], got {0}")]
    EfficiencyOutOfRange(f64),
    #[error("shot-noise calibration offset must be >= 0 dB, got {0}")]
    NegativeShotOffset(f64),
    #[error("quadrature pair violates ordering: v_min = {v_min} > v_max = {v_max}")]
    UnorderedPair { v_min: f64, v_max: f64 },
    #[error("quadrature pair violates the uncertainty bound: v_min * v_max = {product} < 1")]
    UncertaintyViolation { product: f64 },
    #[error(
        "detected variance {detected} is not above the vacuum admixture {floor}; \
         the loss budget is inconsistent with this measurement"
    )]
    InfeasibleDetection { detected: f64, floor: f64 },
}

/// Linear noise power relative to shot noise.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Variance(f64);

impl Variance {
    pub const SHOT: Variance = Variance(1.0);

    pub fn new(value: f64) -> Result<Self, NoiseError> {
        if value.is_finite() && value > 0.0 {
            Ok(Self(value))
        } else {
            Err(NoiseError::NonPositiveVariance(value))
        }
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_squeezed(self) -> bool {
        self.0 < 1.0
    }

    pub fn to_level(self) -> NoiseLevel {
        NoiseLevel(10.0 * self.0.log10())
    }
}

impl TryFrom<f64> for Variance {
    type Error = NoiseError;
    fn try_from(value: f64) -> Result<Self, Self::Error> {
        Variance::new(value)
    }
}

impl From<Variance> for f64 {
    fn from(v: Variance) -> f64 {
        v.0
    }
}

/// Noise power in dB relative to shot noise.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct NoiseLevel(f64);

impl NoiseLevel {
    pub const SHOT: NoiseLevel = NoiseLevel(0.0);

    pub fn new(db: f64) -> Result<Self, NoiseError> {
        if db.is_finite() {
            Ok(Self(db))
        } else {
            Err(NoiseError::NonFiniteLevel(db))
        }
    }

    #[inline]
    pub fn db(self) -> f64 {
        self.0
    }

    pub fn to_variance(self) -> Variance {
        db_to_variance(self)
    }
}

impl TryFrom<f64> for NoiseLevel {
    type Error = NoiseError;
    fn try_from(db: f64) -> Result<Self, Self::Error> {
        NoiseLevel::new(db)
    }
}

impl From<NoiseLevel> for f64 {
    fn from(l: NoiseLevel) -> f64 {
        l.0
    }
}

pub fn db_to_variance(level: NoiseLevel) -> Variance {
    Variance(10f64.powf(level.0 / 10.0))
}

pub fn variance_to_db(v: Variance) -> NoiseLevel {
    v.to_level()
}

/// Squeezed and anti-squeezed variances of one sideband.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadraturePair {
    v_min: Variance,
    v_max: Variance,
}

impl QuadraturePair {
    /// Relative slack on the uncertainty product, to absorb rounding in
    /// pairs built as `(v, 1/v)`.
    const PRODUCT_SLACK: f64 = 1e-12;

    pub fn new(v_min: Variance, v_max: Variance) -> Result<Self, NoiseError> {
        if v_min.0 > v_max.0 {
            return Err(NoiseError::UnorderedPair {
                v_min: v_min.0,
                v_max: v_max.0,
            });
        }
        let product = v_min.0 * v_max.0;
        if product < 1.0 - Self::PRODUCT_SLACK {
            return Err(NoiseError::UncertaintyViolation { product });
        }
        Ok(Self { v_min, v_max })
    }

    /// Minimum-uncertainty pair with the given squeezed variance.
    pub fn pure(v_min: Variance) -> Result<Self, NoiseError> {
        let v_max = Variance::new(1.0 / v_min.0)?;
        if v_min.0 <= v_max.0 {
            Self::new(v_min, v_max)
        } else {
            Self::new(v_max, v_min)
        }
    }

    pub fn v_min(&self) -> Variance {
        self.v_min
    }

    pub fn v_max(&self) -> Variance {
        self.v_max
    }

    pub fn uncertainty_product(&self) -> f64 {
        self.v_min.0 * self.v_max.0
    }

    /// Both quadratures through the same loss channel. The result still
    /// satisfies the uncertainty bound.
    pub fn with_loss(&self, efficiency: f64) -> Result<Self, NoiseError> {
        let lo = apply_loss(self.v_min, efficiency)?;
        let hi = apply_loss(self.v_max, efficiency)?;
        Ok(Self { v_min: lo, v_max: hi })
    }
}

fn check_efficiency(efficiency: f64) -> Result<(), NoiseError> {
    if efficiency.is_finite() && efficiency > 0.0 && efficiency <= 1.0 {
        Ok(())
    } else {
        Err(NoiseError::EfficiencyOutOfRange(efficiency))
    }
}

/// Beam-splitter loss: the transmitted fraction `efficiency` of the field is
/// mixed with vacuum at shot noise.
pub fn apply_loss(v: Variance, efficiency: f64) -> Result<Variance, NoiseError> {
    check_efficiency(efficiency)?;
    if efficiency == 1.0 {
        return Ok(v);
    }
    Ok(Variance(efficiency * v.0 + (1.0 - efficiency)))
}

/// Inverse of [`apply_loss`] with the budget's total efficiency.
pub fn infer_source_variance(detected: Variance, budget: &LossBudget) -> Result<Variance, NoiseError> {
    let eta = budget.total_efficiency();
    check_efficiency(eta)?;
    if eta == 1.0 {
        return Ok(detected);
    }
    let floor = 1.0 - eta;
    if detected.0 <= floor {
        return Err(NoiseError::InfeasibleDetection {
            detected: detected.0,
            floor,
        });
    }
    Ok(Variance((detected.0 - floor) / eta))
}

/// Variance seen at homodyne angle `theta` from the squeezed axis.
pub fn rotate_quadrature(pair: &QuadraturePair, theta: f64) -> Variance {
    let (s, c) = theta.sin_cos();
    let v = pair.v_min.0 * c * c + pair.v_max.0 * s * s;
    // Convex combination; clamp away last-ulp excursions.
    Variance(v.clamp(pair.v_min.0, pair.v_max.0))
}

/// Optical and detector losses plus the shot-noise calibration offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossBudget {
    pub optical_transmission: f64,
    pub detector_qe: f64,
    pub shot_cal_offset_db: f64,
}

impl Default for LossBudget {
    fn default() -> Self {
        Self {
            optical_transmission: 0.90,
            detector_qe: 0.95,
            shot_cal_offset_db: 0.2,
        }
    }
}

impl LossBudget {
    pub fn new(optical_transmission: f64, detector_qe: f64, shot_cal_offset_db: f64) -> Result<Self, NoiseError> {
        let budget = Self {
            optical_transmission,
            detector_qe,
            shot_cal_offset_db,
        };
        budget.validate()?;
        Ok(budget)
    }

    /// Lossless, no calibration offset.
    pub fn ideal() -> Self {
        Self {
            optical_transmission: 1.0,
            detector_qe: 1.0,
            shot_cal_offset_db: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), NoiseError> {
        check_efficiency(self.optical_transmission)?;
        check_efficiency(self.detector_qe)?;
        if !(self.shot_cal_offset_db.is_finite() && self.shot_cal_offset_db >= 0.0) {
            return Err(NoiseError::NegativeShotOffset(self.shot_cal_offset_db));
        }
        Ok(())
    }

    pub fn total_efficiency(&self) -> f64 {
        self.optical_transmission * self.detector_qe
    }
}

/// Which shot-noise reference reported levels are relative to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShotConvention {
    /// Levels relative to the measured (polarizer) shot reference, uncorrected.
    #[default]
    Raw,
    /// Levels relative to the true vacuum level; the measured reference sits
    /// `shot_cal_offset_db` below it.
    Corrected,
}

/// Offset of the measured shot-noise reference in the chosen convention.
/// Every reported level is shifted by this amount.
pub fn shot_reference(budget: &LossBudget, convention: ShotConvention) -> NoiseLevel {
    match convention {
        ShotConvention::Raw => NoiseLevel(0.0),
        ShotConvention::Corrected => NoiseLevel(-budget.shot_cal_offset_db),
    }
}

/// Source-level squeezing inferred from a detected level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceInference {
    pub detected_db: f64,
    pub total_efficiency: f64,
    pub inferred_source_db: f64,
    /// Same inversion after lowering the detected level by the shot-noise
    /// calibration offset.
    pub inferred_source_shot_corrected_db: f64,
    pub discrepancy_note: String,
}

/// Source-level squeezing figure that accompanies the default loss budget
/// in the experiment this tool models. The plain beam-splitter inversion
/// does not reproduce it; [`infer_source_report`] states the gap.
pub const REPORTED_SOURCE_SQUEEZING_DB: f64 = -3.6;

pub fn infer_source_report(detected: NoiseLevel, budget: &LossBudget) -> Result<SourceInference, NoiseError> {
    let inferred = infer_source_variance(detected.to_variance(), budget)?.to_level();
    let corrected_detected = NoiseLevel::new(detected.db() - budget.shot_cal_offset_db)?;
    let corrected = infer_source_variance(corrected_detected.to_variance(), budget)?.to_level();
    let discrepancy_note = format!(
        "beam-splitter inversion with total efficiency {:.4} maps {:.3} dB detected to {:.3} dB at the source \
         ({:.3} dB with the {:.2} dB shot-reference correction); the commonly quoted source level of {:.1} dB \
         is not reproduced by this loss model and is not reconciled here",
        budget.total_efficiency(),
        detected.db(),
        inferred.db(),
        corrected.db(),
        budget.shot_cal_offset_db,
        REPORTED_SOURCE_SQUEEZING_DB,
    );
    Ok(SourceInference {
        detected_db: detected.db(),
        total_efficiency: budget.total_efficiency(),
        inferred_source_db: inferred.db(),
        inferred_source_shot_corrected_db: corrected.db(),
        discrepancy_note,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn var(v: f64) -> Variance {
        Variance::new(v).unwrap()
    }

    fn db(x: f64) -> NoiseLevel {
        NoiseLevel::new(x).unwrap()
    }

    const ETA: f64 = 0.90 * 0.95;

    #[test]
    fn db_conversion_points() {
        assert_eq!(db_to_variance(db(0.0)).value(), 1.0);
        assert_abs_diff_eq!(db_to_variance(db(-2.3)).value(), 0.588_843_655_355_588_9, epsilon = 1e-12);
        assert_abs_diff_eq!(db_to_variance(db(3.0)).value(), 1.995_262_314_968_879_5, epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(Variance::new(0.0).is_err());
        assert!(Variance::new(-1.0).is_err());
        assert!(Variance::new(f64::NAN).is_err());
        assert!(NoiseLevel::new(f64::INFINITY).is_err());
        assert!(apply_loss(var(1.0), 0.0).is_err());
        assert!(apply_loss(var(1.0), 1.1).is_err());
        assert!(LossBudget::new(0.9, 0.95, -0.1).is_err());
    }

    #[test]
    fn loss_points() {
        assert_eq!(apply_loss(var(1.0), 0.5).unwrap().value(), 1.0);
        let v = 10f64.powf(-0.36);
        let out = apply_loss(var(v), ETA).unwrap();
        assert_abs_diff_eq!(out.value(), 0.518_221_036_565_341_9, epsilon = 1e-12);
        assert_abs_diff_eq!(out.to_level().db(), -2.854_849_613_254_741, epsilon = 1e-9);
        assert_eq!(apply_loss(var(0.37), 1.0).unwrap().value(), 0.37);
    }

    #[test]
    fn inference_points() {
        let budget = LossBudget::default();
        assert_abs_diff_eq!(budget.total_efficiency(), 0.855, epsilon = 1e-15);
        assert_abs_diff_eq!(infer_source_variance(var(1.0), &budget).unwrap().value(), 1.0, epsilon = 1e-15);
        let s = infer_source_variance(db(-2.3).to_variance(), &budget).unwrap();
        assert_abs_diff_eq!(s.value(), 0.519_115_386_380_805_8, epsilon = 1e-12);
        assert_abs_diff_eq!(s.to_level().db(), -2.847_360_986_086_286_5, epsilon = 1e-9);
        let back = infer_source_variance(var(0.518_221_036_565_341_9), &budget).unwrap();
        assert_abs_diff_eq!(back.value(), 10f64.powf(-0.36), epsilon = 1e-12);
    }

    #[test]
    fn inference_rejects_impossible_detection() {
        let budget = LossBudget::default();
        let err = infer_source_variance(var(0.1), &budget).unwrap_err();
        assert!(matches!(err, NoiseError::InfeasibleDetection { .. }));
    }

    #[test]
    fn source_report_documents_gap() {
        let r = infer_source_report(db(-2.3), &LossBudget::default()).unwrap();
        assert_abs_diff_eq!(r.inferred_source_db, -2.8474, epsilon = 1e-3);
        assert_abs_diff_eq!(r.inferred_source_shot_corrected_db, -3.1147, epsilon = 1e-3);
        assert!(r.discrepancy_note.contains("-3.6 dB"));
        assert!(r.discrepancy_note.contains("not reproduced"));
    }

    #[test]
    fn rotation_points() {
        let pair = QuadraturePair::new(var(0.5), var(2.5)).unwrap();
        assert_abs_diff_eq!(rotate_quadrature(&pair, 0.0).value(), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(rotate_quadrature(&pair, PI / 2.0).value(), 2.5, epsilon = 1e-15);
        assert_abs_diff_eq!(rotate_quadrature(&pair, PI / 4.0).value(), 1.5, epsilon = 1e-12);
    }

    #[test]
    fn pair_invariants() {
        assert!(QuadraturePair::new(var(2.0), var(1.0)).is_err());
        assert!(QuadraturePair::new(var(0.5), var(1.5)).is_err());
        let p = QuadraturePair::pure(var(0.4)).unwrap();
        assert_abs_diff_eq!(p.uncertainty_product(), 1.0, epsilon = 1e-12);
        assert!(p.with_loss(ETA).unwrap().uncertainty_product() >= 1.0);
    }

    #[test]
    fn shot_reference_conventions() {
        let b = LossBudget::default();
        assert_eq!(shot_reference(&b, ShotConvention::Raw).db(), 0.0);
        assert_abs_diff_eq!(shot_reference(&b, ShotConvention::Corrected).db(), -0.2, epsilon = 1e-15);
        let zero = LossBudget::new(0.9, 0.95, 0.0).unwrap();
        assert_eq!(shot_reference(&zero, ShotConvention::Corrected).db(), 0.0);
    }

    proptest! {
        #[test]
        fn shot_noise_survives_any_loss(eta in 1e-6f64..=1.0) {
            prop_assert_eq!(apply_loss(Variance::SHOT, eta).unwrap().value(), 1.0);
        }

        #[test]
        fn loss_contracts_toward_shot(v in 1e-3f64..100.0, w in 1e-3f64..100.0, eta in 1e-3f64..=1.0) {
            let a = apply_loss(var(v), eta).unwrap().value();
            prop_assert!((a - 1.0).abs() <= (v - 1.0).abs() + 1e-15);
            let b = apply_loss(var(w), eta).unwrap().value();
            if v <= w {
                prop_assert!(a <= b);
            }
        }

        #[test]
        fn inference_inverts_loss(v in 0.1f64..10.0, eta in 0.1f64..=1.0) {
            let budget = LossBudget::new(eta, 1.0, 0.0).unwrap();
            let detected = apply_loss(var(v), eta).unwrap();
            let back = infer_source_variance(detected, &budget).unwrap().value();
            prop_assert!(((back - v) / v).abs() < 1e-12);
        }

        #[test]
        fn rotation_bounded_and_periodic(lo in 0.05f64..1.0, stretch in 1.0f64..5.0, theta in -10.0f64..10.0) {
            let pair = QuadraturePair::new(var(lo), var(stretch / lo)).unwrap();
            let v = rotate_quadrature(&pair, theta).value();
            prop_assert!(v >= pair.v_min().value() && v <= pair.v_max().value());
            let w = rotate_quadrature(&pair, theta + PI).value();
            prop_assert!((v - w).abs() < 1e-12 * pair.v_max().value());
        }

        #[test]
        fn db_round_trip(x in -20.0f64..20.0) {
            let back = db(x).to_variance().to_level().db();
            prop_assert!((back - x).abs() < 1e-12);
        }
    }
}
