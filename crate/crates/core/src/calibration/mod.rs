//! Magnetic-field to quadrature-noise calibration.
//!
//! A [`CalibrationSet`] holds measured `(B, squeezed dB, anti-squeezed dB)`
//! rows. [`fit_transfer`] turns it into a [`TransferFunction`]: one monotone
//! cubic per field sign and quadrature, parameterized by `|B|`, with the
//! squeezed-quadrature minimum pinned at zero field. The squeezed map is
//! invertible on each branch, which is what drive compilation needs.

pub mod interp;
pub mod isotonic;

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::noise::{NoiseError, NoiseLevel};
use interp::{InterpError, MonotoneCubic};
use isotonic::isotonic_non_decreasing;

pub const CSV_HEADER: [&str; 3] = ["b_mG", "squeezed_dB", "antisqueezed_dB"];
pub const MIN_BRANCH_POINTS: usize = 4;
pub const TRANSFER_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("cannot read calibration file {path}: {message}")]
    Io { path: String, message: String },
    #[error("calibration data is empty")]
    Empty,
    #[error("calibration header must be `b_mG,squeezed_dB,antisqueezed_dB`, found `{0}`")]
    BadHeader(String),
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("line {line}: squeezed level {squeezed} dB exceeds anti-squeezed level {antisqueezed} dB at B = {b_mg} mG")]
    Unordered {
        line: u64,
        b_mg: f64,
        squeezed: f64,
        antisqueezed: f64,
    },
    #[error("line {line}: duplicate field value B = {b_mg} mG (first seen on line {first_line})")]
    Duplicate { line: u64, first_line: u64, b_mg: f64 },
    #[error("{branch} branch has {count} points; at least {MIN_BRANCH_POINTS} are needed")]
    TooFewBranchPoints { branch: Branch, count: usize },
    #[error("calibration needs a point at B = 0 to anchor the minimum")]
    MissingZeroField,
    #[error(
        "{branch} branch of the squeezed quadrature is not monotone in |B|: isotonic residual \
         {rms_db:.4} dB RMS ({max_db:.4} dB max) exceeds {threshold_db} dB"
    )]
    NonMonotone {
        branch: Branch,
        rms_db: f64,
        max_db: f64,
        threshold_db: f64,
    },
    #[error("target {target_db} dB is unreachable on the {branch} branch; reachable interval is [{lo_db}, {hi_db}] dB")]
    Unreachable {
        target_db: f64,
        branch: Branch,
        lo_db: f64,
        hi_db: f64,
    },
    #[error("invalid synthetic calibration parameters: {0}")]
    BadSynthParams(String),
    #[error("unsupported transfer-function format version {found} (expected {TRANSFER_FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("transfer-function document: {0}")]
    Document(String),
    #[error(transparent)]
    Interp(#[from] InterpError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Positive,
    Negative,
}

impl Branch {
    pub fn sign(self) -> f64 {
        match self {
            Branch::Positive => 1.0,
            Branch::Negative => -1.0,
        }
    }

    fn contains(self, b_mg: f64) -> bool {
        match self {
            Branch::Positive => b_mg >= 0.0,
            Branch::Negative => b_mg <= 0.0,
        }
    }
}

impl std::fmt::Display for Branch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Branch::Positive => "positive",
            Branch::Negative => "negative",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quadrature {
    Squeezed,
    Antisqueezed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub b_mg: f64,
    pub squeezed: NoiseLevel,
    pub antisqueezed: NoiseLevel,
}

/// Descriptive acquisition settings; never used in computation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMetadata {
    pub center_frequency_hz: Option<f64>,
    pub rbw_hz: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSet {
    points: Vec<CalibrationPoint>,
    pub metadata: CalibrationMetadata,
}

fn branch_count(points: &[CalibrationPoint], branch: Branch) -> (usize, bool) {
    let count = points.iter().filter(|p| branch.contains(p.b_mg)).count();
    let present = points.iter().any(|p| p.b_mg != 0.0 && branch.contains(p.b_mg));
    (count, present)
}

impl CalibrationSet {
    /// Sorts by field and validates ordering, uniqueness and branch sizes.
    pub fn new(mut points: Vec<CalibrationPoint>, metadata: CalibrationMetadata) -> Result<Self, CalibrationError> {
        if points.is_empty() {
            return Err(CalibrationError::Empty);
        }
        for (i, p) in points.iter().enumerate() {
            if !p.b_mg.is_finite() {
                return Err(CalibrationError::Malformed {
                    line: i as u64 + 1,
                    message: format!("non-finite field value {}", p.b_mg),
                });
            }
            if p.squeezed.db() > p.antisqueezed.db() {
                return Err(CalibrationError::Unordered {
                    line: i as u64 + 1,
                    b_mg: p.b_mg,
                    squeezed: p.squeezed.db(),
                    antisqueezed: p.antisqueezed.db(),
                });
            }
        }
        points.sort_by(|a, b| a.b_mg.total_cmp(&b.b_mg));
        if let Some(w) = points.windows(2).find(|w| w[0].b_mg == w[1].b_mg) {
            return Err(CalibrationError::Duplicate {
                line: 0,
                first_line: 0,
                b_mg: w[0].b_mg,
            });
        }
        let mut any_branch = false;
        for branch in [Branch::Positive, Branch::Negative] {
            let (count, present) = branch_count(&points, branch);
            if present {
                any_branch = true;
                if count < MIN_BRANCH_POINTS {
                    return Err(CalibrationError::TooFewBranchPoints { branch, count });
                }
            }
        }
        if !any_branch {
            return Err(CalibrationError::TooFewBranchPoints {
                branch: Branch::Positive,
                count: points.len(),
            });
        }
        Ok(Self { points, metadata })
    }

    pub fn points(&self) -> &[CalibrationPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Comma-separated form accepted by [`load_calibration`].
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        if let Some(f) = self.metadata.center_frequency_hz {
            out.push_str(&format!("# center_frequency_hz = {f}\n"));
        }
        if let Some(r) = self.metadata.rbw_hz {
            out.push_str(&format!("# rbw_hz = {r}\n"));
        }
        for (k, v) in &self.metadata.extra {
            out.push_str(&format!("# {k} = {v}\n"));
        }
        out.push_str(&CSV_HEADER.join(","));
        out.push('\n');
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p.b_mg, p.squeezed.db(), p.antisqueezed.db()));
        }
        out
    }
}

fn parse_metadata(text: &str) -> CalibrationMetadata {
    let mut meta = CalibrationMetadata::default();
    for line in text.lines() {
        let Some(body) = line.trim_start().strip_prefix('#') else {
            continue;
        };
        let Some((key, value)) = body.split_once(['=', ':']) else {
            continue;
        };
        let (key, value) = (key.trim(), value.trim());
        match key {
            "center_frequency_hz" => meta.center_frequency_hz = value.parse().ok(),
            "rbw_hz" => meta.rbw_hz = value.parse().ok(),
            "" => {}
            _ => {
                meta.extra.insert(key.to_string(), value.to_string());
            }
        }
    }
    meta
}

/// Parses the `b_mG,squeezed_dB,antisqueezed_dB` table. `#` lines are
/// comments; `# key = value` comments before the header become metadata.
pub fn load_calibration(text: &str) -> Result<CalibrationSet, CalibrationError> {
    if text.lines().all(|l| l.trim().is_empty() || l.trim_start().starts_with('#')) {
        return Err(CalibrationError::Empty);
    }
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());

    let header = reader
        .headers()
        .map_err(|e| CalibrationError::Malformed {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(CalibrationError::BadHeader(header.iter().collect::<Vec<_>>().join(",")));
    }

    let mut points = Vec::new();
    let mut seen: BTreeMap<u64, u64> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| CalibrationError::Malformed {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 3 {
            return Err(CalibrationError::Malformed {
                line,
                message: format!("expected 3 fields, found {}", record.len()),
            });
        }
        let mut vals = [0.0f64; 3];
        for (slot, (field, name)) in vals.iter_mut().zip(record.iter().zip(CSV_HEADER)) {
            *slot = field
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| CalibrationError::Malformed {
                    line,
                    message: format!("{name} is not a finite number: `{field}`"),
                })?;
        }
        let [b_mg, sq, anti] = vals;
        if sq > anti {
            return Err(CalibrationError::Unordered {
                line,
                b_mg,
                squeezed: sq,
                antisqueezed: anti,
            });
        }
        // -0.0 and 0.0 are the same field
        let key = (b_mg + 0.0).to_bits();
        if let Some(&first_line) = seen.get(&key) {
            return Err(CalibrationError::Duplicate { line, first_line, b_mg });
        }
        seen.insert(key, line);
        points.push(CalibrationPoint {
            b_mg: b_mg + 0.0,
            squeezed: NoiseLevel::new(sq)?,
            antisqueezed: NoiseLevel::new(anti)?,
        });
    }
    if points.is_empty() {
        return Err(CalibrationError::Empty);
    }
    CalibrationSet::new(points, parse_metadata(text))
}

pub fn load_calibration_file(path: &Path) -> Result<CalibrationSet, CalibrationError> {
    let text = std::fs::read_to_string(path).map_err(|e| CalibrationError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    load_calibration(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitOptions {
    /// Largest tolerated RMS distance between the squeezed data and its
    /// isotonic regression before a branch is declared non-monotone.
    pub max_isotonic_rms_db: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { max_isotonic_rms_db: 0.25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchReport {
    pub branch: Branch,
    /// Signed field interval covered by the data, mG.
    pub b_range_mg: [f64; 2],
    pub points: usize,
    pub mirrored: bool,
    pub isotonic_rms_db: f64,
    pub isotonic_max_db: f64,
    pub pooled_points: usize,
    pub n_sat_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub n_min_db: f64,
    pub data_min_db: f64,
    pub symmetry_assumed: bool,
    pub branches: Vec<BranchReport>,
    pub metadata: CalibrationMetadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct QuadratureCurves {
    positive: MonotoneCubic,
    negative: MonotoneCubic,
}

impl QuadratureCurves {
    fn branch(&self, branch: Branch) -> &MonotoneCubic {
        match branch {
            Branch::Positive => &self.positive,
            Branch::Negative => &self.negative,
        }
    }
}

/// Fitted, immutable map from field to noise level for both quadratures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferFunction {
    format_version: u32,
    squeezed: QuadratureCurves,
    antisqueezed: QuadratureCurves,
    summary: FitSummary,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub level: NoiseLevel,
    /// The field lay outside the fitted range and the endpoint value was used.
    pub clamped: bool,
}

struct BranchData {
    abs_b: Vec<f64>,
    squeezed: Vec<f64>,
    antisqueezed: Vec<f64>,
    b_range: [f64; 2],
}

fn branch_data(set: &CalibrationSet, branch: Branch) -> Option<BranchData> {
    let mut pts: Vec<&CalibrationPoint> = set.points.iter().filter(|p| branch.contains(p.b_mg)).collect();
    if !pts.iter().any(|p| p.b_mg != 0.0) {
        return None;
    }
    pts.sort_by(|a, b| a.b_mg.abs().total_cmp(&b.b_mg.abs()));
    let signed: Vec<f64> = pts.iter().map(|p| p.b_mg).collect();
    let lo = signed.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = signed.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Some(BranchData {
        abs_b: pts.iter().map(|p| p.b_mg.abs()).collect(),
        squeezed: pts.iter().map(|p| p.squeezed.db()).collect(),
        antisqueezed: pts.iter().map(|p| p.antisqueezed.db()).collect(),
        b_range: [lo, hi],
    })
}

struct FittedBranch {
    squeezed: MonotoneCubic,
    antisqueezed: MonotoneCubic,
    report: BranchReport,
}

fn fit_branch(data: &BranchData, branch: Branch, opts: &FitOptions) -> Result<(Vec<f64>, BranchReport), CalibrationError> {
    let iso = isotonic_non_decreasing(&data.squeezed);
    let n = iso.len() as f64;
    let residuals: Vec<f64> = iso.iter().zip(&data.squeezed).map(|(a, b)| a - b).collect();
    let rms = (residuals.iter().map(|r| r * r).sum::<f64>() / n).sqrt();
    let max = residuals.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    if rms > opts.max_isotonic_rms_db {
        return Err(CalibrationError::NonMonotone {
            branch,
            rms_db: rms,
            max_db: max,
            threshold_db: opts.max_isotonic_rms_db,
        });
    }
    let pooled = residuals.iter().filter(|r| r.abs() > 0.0).count();
    let report = BranchReport {
        branch,
        b_range_mg: data.b_range,
        points: data.abs_b.len(),
        mirrored: false,
        isotonic_rms_db: rms,
        isotonic_max_db: max,
        pooled_points: pooled,
        n_sat_db: *iso.last().unwrap(),
    };
    Ok((iso, report))
}

/// Fits the transfer function. Branches with data on only one field sign are
/// mirrored and `symmetry_assumed` is set.
pub fn fit_transfer(set: &CalibrationSet, opts: &FitOptions) -> Result<TransferFunction, CalibrationError> {
    let zero = set
        .points
        .iter()
        .find(|p| p.b_mg == 0.0)
        .ok_or(CalibrationError::MissingZeroField)?;
    let data_min_db = set.points.iter().map(|p| p.squeezed.db()).fold(f64::INFINITY, f64::min);

    let pos = branch_data(set, Branch::Positive);
    let neg = branch_data(set, Branch::Negative);

    let mut fitted: Vec<(Branch, Vec<f64>, BranchReport, &BranchData)> = Vec::new();
    for (branch, data) in [(Branch::Positive, &pos), (Branch::Negative, &neg)] {
        if let Some(d) = data {
            let (iso, report) = fit_branch(d, branch, opts)?;
            fitted.push((branch, iso, report, d));
        }
    }
    if fitted.is_empty() {
        return Err(CalibrationError::TooFewBranchPoints {
            branch: Branch::Positive,
            count: set.len(),
        });
    }

    // Shared zero-field value: lowering the first knot keeps each branch
    // non-decreasing and makes the map continuous at B = 0.
    let n_min_db = fitted.iter().map(|(_, iso, _, _)| iso[0]).fold(f64::INFINITY, f64::min);
    let mut built = Vec::new();
    for (branch, mut iso, mut report, data) in fitted {
        iso[0] = n_min_db;
        let mut anti = data.antisqueezed.clone();
        anti[0] = zero.antisqueezed.db();
        let squeezed = MonotoneCubic::new(data.abs_b.clone(), iso)?;
        let antisqueezed = MonotoneCubic::new(data.abs_b.clone(), anti)?;
        report.n_sat_db = squeezed.y_last();
        built.push((branch, FittedBranch { squeezed, antisqueezed, report }));
    }

    let symmetry_assumed = built.len() == 1;
    if symmetry_assumed {
        let (branch, fb) = &built[0];
        let other = match branch {
            Branch::Positive => Branch::Negative,
            Branch::Negative => Branch::Positive,
        };
        let mut report = fb.report.clone();
        report.branch = other;
        report.mirrored = true;
        report.b_range_mg = [-fb.report.b_range_mg[1], -fb.report.b_range_mg[0]];
        let mirrored = FittedBranch {
            squeezed: fb.squeezed.clone(),
            antisqueezed: fb.antisqueezed.clone(),
            report,
        };
        built.push((other, mirrored));
    }
    built.sort_by_key(|(b, _)| *b != Branch::Positive);
    let mut it = built.into_iter();
    let (_, p) = it.next().unwrap();
    let (_, n) = it.next().unwrap();

    Ok(TransferFunction {
        format_version: TRANSFER_FORMAT_VERSION,
        squeezed: QuadratureCurves {
            positive: p.squeezed,
            negative: n.squeezed,
        },
        antisqueezed: QuadratureCurves {
            positive: p.antisqueezed,
            negative: n.antisqueezed,
        },
        summary: FitSummary {
            n_min_db,
            data_min_db,
            symmetry_assumed,
            branches: vec![p.report, n.report],
            metadata: set.metadata.clone(),
        },
    })
}

impl TransferFunction {
    pub fn n_min_db(&self) -> f64 {
        self.summary.n_min_db
    }

    pub fn n_sat_db(&self, branch: Branch) -> f64 {
        self.squeezed.branch(branch).y_last()
    }

    /// Squeezed-quadrature levels reachable on a branch.
    pub fn reachable(&self, branch: Branch) -> (f64, f64) {
        (self.n_min_db(), self.n_sat_db(branch))
    }

    /// Field magnitude covered by the fit on a branch, mG.
    pub fn b_span(&self, branch: Branch) -> f64 {
        self.squeezed.branch(branch).x_max()
    }

    pub fn symmetry_assumed(&self) -> bool {
        self.summary.symmetry_assumed
    }

    pub fn summary(&self) -> &FitSummary {
        &self.summary
    }

    pub fn noise_at_field(&self, b_mg: f64, quadrature: Quadrature) -> Evaluation {
        let curves = match quadrature {
            Quadrature::Squeezed => &self.squeezed,
            Quadrature::Antisqueezed => &self.antisqueezed,
        };
        let branch = if b_mg >= 0.0 { Branch::Positive } else { Branch::Negative };
        let (db, clamped) = curves.branch(branch).eval_clamped(b_mg.abs());
        Evaluation {
            level: NoiseLevel::new(db).expect("interpolant of finite knots is finite"),
            clamped,
        }
    }

    /// Signed field on `branch` at which the squeezed quadrature reaches
    /// `target`. Where the map is flat the smallest such |B| is returned.
    pub fn field_for_noise(&self, target: NoiseLevel, branch: Branch) -> Result<f64, CalibrationError> {
        let curve = self.squeezed.branch(branch);
        curve
            .invert_non_decreasing(target.db())
            .map(|abs_b| branch.sign() * abs_b + 0.0)
            .ok_or(CalibrationError::Unreachable {
                target_db: target.db(),
                branch,
                lo_db: curve.y_first(),
                hi_db: curve.y_last(),
            })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("transfer function serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CalibrationError> {
        #[derive(Deserialize)]
        struct Probe {
            format_version: u32,
        }
        let probe: Probe = serde_json::from_str(text).map_err(|e| CalibrationError::Document(e.to_string()))?;
        if probe.format_version != TRANSFER_FORMAT_VERSION {
            return Err(CalibrationError::Version {
                found: probe.format_version,
            });
        }
        serde_json::from_str(text).map_err(|e| CalibrationError::Document(e.to_string()))
    }
}

/// Anti-squeezed analog of the synthetic model:
/// `base_db + swing_db * (1 - exp(-|B| / scale_mg))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AntisqueezeParams {
    pub base_db: f64,
    pub swing_db: f64,
    pub scale_mg: f64,
}

impl Default for AntisqueezeParams {
    fn default() -> Self {
        Self {
            base_db: 5.0,
            swing_db: -0.5,
            scale_mg: 50.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    pub depth_db: f64,
    pub b0_mg: f64,
    pub antisqueeze: AntisqueezeParams,
    pub noise_sigma_db: f64,
    pub seed: u64,
    pub b_max_mg: f64,
    pub step_mg: f64,
    pub positive_only: bool,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            depth_db: 2.3,
            b0_mg: 25.0,
            antisqueeze: AntisqueezeParams::default(),
            noise_sigma_db: 0.0,
            seed: 0x5eed_0001,
            b_max_mg: 200.0,
            step_mg: 5.0,
            positive_only: false,
        }
    }
}

impl SynthParams {
    fn validate(&self) -> Result<(), CalibrationError> {
        let bad = |m: &str| Err(CalibrationError::BadSynthParams(m.to_string()));
        if !(self.depth_db > 0.0 && self.depth_db.is_finite()) {
            return bad("depth_db must be > 0");
        }
        if !(self.b0_mg > 0.0 && self.b0_mg.is_finite()) {
            return bad("b0_mg must be > 0");
        }
        if !(self.step_mg > 0.0 && self.b_max_mg >= self.step_mg * (MIN_BRANCH_POINTS - 1) as f64) {
            return bad("need step_mg > 0 and at least 4 grid points per branch");
        }
        if !(self.noise_sigma_db >= 0.0) {
            return bad("noise_sigma_db must be >= 0");
        }
        if !(self.antisqueeze.scale_mg > 0.0) {
            return bad("anti-squeezed scale_mg must be > 0");
        }
        Ok(())
    }

    /// Noiseless generator values `(squeezed_db, antisqueezed_db)` at `b_mg`.
    pub fn generator(&self, b_mg: f64) -> (f64, f64) {
        let x = b_mg.abs();
        let sq = -self.depth_db * (-x / self.b0_mg).exp();
        let a = &self.antisqueeze;
        let anti = a.base_db + a.swing_db * (1.0 - (-x / a.scale_mg).exp());
        (sq, anti)
    }
}

/// Synthetic sweep on a uniform grid: squeezed level `-depth * exp(-|B|/b0)`
/// plus optional Gaussian measurement noise, deterministic in `seed`.
pub fn synth_calibration(params: &SynthParams) -> Result<CalibrationSet, CalibrationError> {
    params.validate()?;
    let n = (params.b_max_mg / params.step_mg).round() as i64;
    let start = if params.positive_only { 0 } else { -n };
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let noise = Normal::new(0.0, params.noise_sigma_db).map_err(|e| CalibrationError::BadSynthParams(e.to_string()))?;
    let mut points = Vec::with_capacity((n - start + 1) as usize);
    for k in start..=n {
        let b = k as f64 * params.step_mg + 0.0;
        let (mut sq, mut anti) = params.generator(b);
        if params.noise_sigma_db > 0.0 {
            sq += noise.sample(&mut rng);
            anti += noise.sample(&mut rng);
        }
        points.push(CalibrationPoint {
            b_mg: b,
            squeezed: NoiseLevel::new(sq)?,
            antisqueezed: NoiseLevel::new(anti)?,
        });
    }
    let mut extra = BTreeMap::new();
    extra.insert("source".to_string(), "synthetic".to_string());
    extra.insert("depth_db".to_string(), params.depth_db.to_string());
    extra.insert("b0_mg".to_string(), params.b0_mg.to_string());
    extra.insert("noise_sigma_db".to_string(), params.noise_sigma_db.to_string());
    extra.insert("seed".to_string(), params.seed.to_string());
    CalibrationSet::new(
        points,
        CalibrationMetadata {
            center_frequency_hz: Some(1.0e6),
            rbw_hz: Some(1.0e5),
            extra,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn db(x: f64) -> NoiseLevel {
        NoiseLevel::new(x).unwrap()
    }

    fn noiseless() -> SynthParams {
        SynthParams::default()
    }

    fn fitted() -> (SynthParams, TransferFunction) {
        let p = noiseless();
        let set = synth_calibration(&p).unwrap();
        (p, fit_transfer(&set, &FitOptions::default()).unwrap())
    }

    fn sweep_21() -> String {
        let mut s = String::from("# center_frequency_hz = 1e6\n# rbw_hz = 1e5\nb_mG,squeezed_dB,antisqueezed_dB\n");
        for k in -10..=10 {
            let b = 10.0 * k as f64;
            let sq = -2.3 * (-b.abs() / 25.0).exp();
            s.push_str(&format!("{b},{sq},5.0\n"));
        }
        s
    }

    #[test]
    fn loads_well_formed_sweep() {
        let set = load_calibration(&sweep_21()).unwrap();
        assert_eq!(set.len(), 21);
        assert_eq!(set.metadata.center_frequency_hz, Some(1e6));
        assert_eq!(set.metadata.rbw_hz, Some(1e5));
        assert!(set.points().windows(2).all(|w| w[0].b_mg < w[1].b_mg));
    }

    #[test]
    fn load_sorts_rows() {
        let text = "b_mG,squeezed_dB,antisqueezed_dB\n30,-0.5,5\n0,-2.3,5\n10,-1.5,5\n20,-1,5\n";
        let set = load_calibration(text).unwrap();
        let bs: Vec<f64> = set.points().iter().map(|p| p.b_mg).collect();
        assert_eq!(bs, vec![0.0, 10.0, 20.0, 30.0]);
    }

    #[test]
    fn load_rejects_unordered_row() {
        let text = "b_mG,squeezed_dB,antisqueezed_dB\n0,-2.3,5\n10,6,5\n20,-1,5\n30,-0.5,5\n";
        match load_calibration(text).unwrap_err() {
            CalibrationError::Unordered { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn load_rejects_empty_and_comment_only() {
        assert!(matches!(load_calibration(""), Err(CalibrationError::Empty)));
        assert!(matches!(load_calibration("# nothing\n"), Err(CalibrationError::Empty)));
        assert!(matches!(
            load_calibration("b_mG,squeezed_dB,antisqueezed_dB\n"),
            Err(CalibrationError::Empty)
        ));
    }

    #[test]
    fn load_rejects_malformed_and_duplicates() {
        let bad = "b_mG,squeezed_dB,antisqueezed_dB\n0,-2.3,5\n10,abc,5\n";
        match load_calibration(bad).unwrap_err() {
            CalibrationError::Malformed { line, message } => {
                assert_eq!(line, 3);
                assert!(message.contains("squeezed_dB"));
            }
            e => panic!("unexpected {e}"),
        }
        let dup = "b_mG,squeezed_dB,antisqueezed_dB\n0,-2.3,5\n10,-1,5\n10,-1,5\n";
        assert!(matches!(
            load_calibration(dup),
            Err(CalibrationError::Duplicate { line: 4, first_line: 3, .. })
        ));
        let hdr = "B,sq,anti\n0,-2.3,5\n";
        assert!(matches!(load_calibration(hdr), Err(CalibrationError::BadHeader(_))));
        let short = "b_mG,squeezed_dB,antisqueezed_dB\n0,-2.3\n";
        assert!(matches!(load_calibration(short), Err(CalibrationError::Malformed { line: 2, .. })));
    }

    #[test]
    fn load_rejects_thin_branch() {
        let text = "b_mG,squeezed_dB,antisqueezed_dB\n-10,-1.5,5\n0,-2.3,5\n10,-1.5,5\n20,-1,5\n30,-0.5,5\n";
        assert!(matches!(
            load_calibration(text),
            Err(CalibrationError::TooFewBranchPoints {
                branch: Branch::Negative,
                count: 2
            })
        ));
    }

    #[test]
    fn fit_reproduces_generator() {
        let (p, tf) = fitted();
        let mut worst = 0.0f64;
        for i in 0..=4000 {
            let b = -200.0 + 0.1 * i as f64;
            let e = tf.noise_at_field(b, Quadrature::Squeezed);
            assert!(!e.clamped);
            worst = worst.max((e.level.db() - p.generator(b).0).abs());
        }
        assert!(worst < 0.01, "max error {worst}");
    }

    #[test]
    fn zero_field_minimum() {
        let (_, tf) = fitted();
        assert_abs_diff_eq!(tf.n_min_db(), -2.3, epsilon = 1e-12);
        assert_abs_diff_eq!(tf.noise_at_field(0.0, Quadrature::Squeezed).level.db(), -2.3, epsilon = 1e-12);
        assert_eq!(tf.field_for_noise(db(-2.3), Branch::Positive).unwrap(), 0.0);
        assert_eq!(tf.field_for_noise(db(-2.3), Branch::Negative).unwrap(), 0.0);
    }

    #[test]
    fn generator_point_at_b0() {
        let (p, tf) = fitted();
        let at_b0 = tf.noise_at_field(p.b0_mg, Quadrature::Squeezed).level.db();
        assert_abs_diff_eq!(at_b0, -2.3 / std::f64::consts::E, epsilon = 1e-3);
        let b = tf.field_for_noise(db(-0.846_122_714_694_317_3), Branch::Positive).unwrap();
        assert!((b - p.b0_mg).abs() < 0.001 * 200.0, "b = {b}");
        let bn = tf.field_for_noise(db(-0.846_122_714_694_317_3), Branch::Negative).unwrap();
        assert!((bn + p.b0_mg).abs() < 0.001 * 200.0);
    }

    #[test]
    fn large_field_approaches_shot_noise() {
        let (_, tf) = fitted();
        let far = tf.noise_at_field(500.0, Quadrature::Squeezed);
        assert!(far.clamped);
        assert!(far.level.db() > -0.01 && far.level.db() <= 0.0);
    }

    #[test]
    fn below_floor_is_unreachable() {
        let (_, tf) = fitted();
        match tf.field_for_noise(db(-3.0), Branch::Positive).unwrap_err() {
            CalibrationError::Unreachable { lo_db, hi_db, .. } => {
                assert_abs_diff_eq!(lo_db, -2.3, epsilon = 1e-12);
                assert!(hi_db < 0.0);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn single_sign_sweep_is_mirrored() {
        let p = SynthParams {
            positive_only: true,
            ..noiseless()
        };
        let tf = fit_transfer(&synth_calibration(&p).unwrap(), &FitOptions::default()).unwrap();
        assert!(tf.symmetry_assumed());
        assert!(tf.summary().branches[1].mirrored);
        for b in [5.0, 17.0, 80.0] {
            assert_eq!(
                tf.noise_at_field(b, Quadrature::Squeezed).level,
                tf.noise_at_field(-b, Quadrature::Squeezed).level
            );
        }
        let full = fitted().1;
        assert!(!full.symmetry_assumed());
    }

    #[test]
    fn missing_zero_point_is_rejected() {
        let text = "b_mG,squeezed_dB,antisqueezed_dB\n5,-2,5\n10,-1.5,5\n20,-1,5\n30,-0.5,5\n";
        let set = load_calibration(text).unwrap();
        assert!(matches!(
            fit_transfer(&set, &FitOptions::default()),
            Err(CalibrationError::MissingZeroField)
        ));
    }

    #[test]
    fn noisy_data_is_monotonized() {
        let p = SynthParams {
            noise_sigma_db: 0.05,
            seed: 7,
            ..noiseless()
        };
        let tf = fit_transfer(&synth_calibration(&p).unwrap(), &FitOptions::default()).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=2000 {
            let v = tf.noise_at_field(0.1 * i as f64, Quadrature::Squeezed).level.db();
            assert!(v >= prev - 1e-12);
            prev = v;
        }
        assert!(tf.summary().branches.iter().any(|b| b.pooled_points > 0));
        assert!(tf.n_min_db() <= tf.summary().data_min_db + 0.1);
    }

    #[test]
    fn grossly_non_monotone_data_fails_fit() {
        let mut text = String::from("b_mG,squeezed_dB,antisqueezed_dB\n");
        for k in 0..=10 {
            let sq = if k % 2 == 0 { -2.0 } else { 0.0 };
            text.push_str(&format!("{},{sq},5\n", 10 * k));
        }
        let set = load_calibration(&text).unwrap();
        match fit_transfer(&set, &FitOptions::default()).unwrap_err() {
            CalibrationError::NonMonotone { rms_db, threshold_db, .. } => assert!(rms_db > threshold_db),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn antisqueezed_response_is_weak() {
        let (_, tf) = fitted();
        let a0 = tf.noise_at_field(0.0, Quadrature::Antisqueezed).level.db();
        let a1 = tf.noise_at_field(100.0, Quadrature::Antisqueezed).level.db();
        let s0 = tf.noise_at_field(0.0, Quadrature::Squeezed).level.db();
        let s1 = tf.noise_at_field(100.0, Quadrature::Squeezed).level.db();
        assert!((a1 - a0).abs() < 0.25 * (s1 - s0).abs());
    }

    #[test]
    fn synth_is_deterministic_and_exact_when_noiseless() {
        let p = SynthParams {
            noise_sigma_db: 0.1,
            ..noiseless()
        };
        assert_eq!(synth_calibration(&p).unwrap(), synth_calibration(&p).unwrap());
        let clean = synth_calibration(&noiseless()).unwrap();
        for pt in clean.points() {
            let (sq, anti) = noiseless().generator(pt.b_mg);
            assert_eq!(pt.squeezed.db(), sq);
            assert_eq!(pt.antisqueezed.db(), anti);
        }
        let zero = clean.points().iter().find(|p| p.b_mg == 0.0).unwrap();
        assert_eq!(zero.squeezed.db(), -2.3);
        assert!(synth_calibration(&SynthParams { depth_db: 0.0, ..noiseless() }).is_err());
        assert!(synth_calibration(&SynthParams { b0_mg: -1.0, ..noiseless() }).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let set = synth_calibration(&noiseless()).unwrap();
        let back = load_calibration(&set.to_csv()).unwrap();
        assert_eq!(set, back);
    }

    #[test]
    fn json_round_trip_and_version_check() {
        let (_, tf) = fitted();
        let back = TransferFunction::from_json(&tf.to_json()).unwrap();
        assert_eq!(tf, back);
        let bumped = tf.to_json().replacen("\"format_version\": 1", "\"format_version\": 99", 1);
        assert!(matches!(
            TransferFunction::from_json(&bumped),
            Err(CalibrationError::Version { found: 99 })
        ));
    }

    proptest! {
        #[test]
        fn inverse_round_trip(b in -200.0f64..200.0) {
            let (_, tf) = fitted();
            let level = tf.noise_at_field(b, Quadrature::Squeezed).level;
            let branch = if b >= 0.0 { Branch::Positive } else { Branch::Negative };
            let back = tf.field_for_noise(level, branch).unwrap();
            prop_assert!((back - b).abs() < 0.001 * tf.b_span(branch), "b={} back={}", b, back);
        }

        #[test]
        fn squeezed_map_monotone_in_abs_field(a in 0.0f64..200.0, d in 0.0f64..50.0) {
            let (_, tf) = fitted();
            let b2 = (a + d).min(200.0);
            let n1 = tf.noise_at_field(a, Quadrature::Squeezed).level.db();
            let n2 = tf.noise_at_field(b2, Quadrature::Squeezed).level.db();
            prop_assert!(n1 <= n2);
            let m1 = tf.noise_at_field(-a, Quadrature::Squeezed).level.db();
            let m2 = tf.noise_at_field(-b2, Quadrature::Squeezed).level.db();
            prop_assert!(m1 <= m2);
        }

        #[test]
        fn symmetric_data_gives_even_fit(sigma in 0.0f64..0.05, seed in 0u64..1000, b in 0.0f64..200.0) {
            // even data: mirror a positive-side noisy sweep onto the negative side
            let p = SynthParams { noise_sigma_db: sigma, seed, positive_only: true, ..noiseless() };
            let half = synth_calibration(&p).unwrap();
            let mut pts = half.points().to_vec();
            pts.extend(half.points().iter().filter(|q| q.b_mg > 0.0).map(|q| CalibrationPoint { b_mg: -q.b_mg, ..*q }));
            let set = CalibrationSet::new(pts, CalibrationMetadata::default()).unwrap();
            let tf = fit_transfer(&set, &FitOptions::default()).unwrap();
            prop_assert!(!tf.symmetry_assumed());
            let a = tf.noise_at_field(b, Quadrature::Squeezed).level.db();
            let c = tf.noise_at_field(-b, Quadrature::Squeezed).level.db();
            prop_assert_eq!(a, c);
        }
    }
}
