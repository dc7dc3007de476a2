//! Subcommands.

use serde_json::{json, Map, Value};
use squeezeshape::calibration::{
    fit_transfer, load_calibration, load_calibration_file, synth_calibration, CalibrationSet, FitOptions,
    Quadrature, TransferFunction,
};
use squeezeshape::compiler::{compile, roundtrip_error, CompiledDrive};
use squeezeshape::detection::{
    detect, rbw_response_width, shot_reference_trace, source_referred, spectrum, DetectionMode, NoiseTrace,
};
use squeezeshape::noise::{infer_source_report, NoiseLevel};

use crate::config::Job;
use crate::output::{csv_header, json_document, Report};
use crate::{WorkbenchError, BUNDLED_CALIBRATION};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Fit the transfer function to a calibration sweep.
    Calibrate,
    /// Compile a noise target into a coil drive.
    Compile,
    /// Compile, then pass the predicted noise through the detection chain.
    Simulate,
    /// Frequency-resolved squeezing spectrum.
    Spectrum,
    /// Compile and detect, scoring each stage against the target.
    Roundtrip,
    /// Write a synthetic calibration sweep.
    Synth,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Calibrate => "calibrate",
            Command::Compile => "compile",
            Command::Simulate => "simulate",
            Command::Spectrum => "spectrum",
            Command::Roundtrip => "roundtrip",
            Command::Synth => "synth",
        }
    }
}

/// Runs `command` and returns its outputs without touching the disk.
pub fn run(command: Command, job: &Job) -> Result<Report, WorkbenchError> {
    let mut report = Report::default();
    for w in job.config.validate()? {
        report.warn(w);
    }
    match command {
        Command::Calibrate => calibrate(job, &mut report)?,
        Command::Compile => {
            compile_job(job, &mut report)?;
        }
        Command::Simulate => {
            let compiled = compile_job(job, &mut report)?;
            simulate(job, &compiled, &mut report)?;
        }
        Command::Spectrum => spectrum_job(job, &mut report)?,
        Command::Roundtrip => {
            let compiled = compile_job(job, &mut report)?;
            let traces = simulate(job, &compiled, &mut report)?;
            roundtrip(job, &compiled, &traces, &mut report)?;
        }
        Command::Synth => synth(job, &mut report)?,
    }
    Ok(report)
}

fn calibration_set(job: &Job) -> Result<CalibrationSet, WorkbenchError> {
    Ok(match &job.calibration {
        Some(path) => load_calibration_file(path)?,
        None => load_calibration(BUNDLED_CALIBRATION)?,
    })
}

/// Persisted transfer function when configured, otherwise a fresh fit.
pub fn transfer_function(job: &Job) -> Result<TransferFunction, WorkbenchError> {
    match &job.transfer_function {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|source| WorkbenchError::Io {
                path: path.clone(),
                source,
            })?;
            Ok(TransferFunction::from_json(&text)?)
        }
        None => Ok(fit_transfer(&calibration_set(job)?, &FitOptions::default())?),
    }
}

fn rms_max(errors: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut sum, mut max, mut n) = (0.0, 0.0_f64, 0usize);
    for e in errors {
        sum += e * e;
        max = max.max(e.abs());
        n += 1;
    }
    if n == 0 {
        (0.0, 0.0)
    } else {
        ((sum / n as f64).sqrt(), max)
    }
}

fn calibrate(job: &Job, report: &mut Report) -> Result<(), WorkbenchError> {
    let set = calibration_set(job)?;
    let tf = fit_transfer(&set, &FitOptions::default())?;
    let (sq_rms, sq_max) = rms_max(
        set.points()
            .iter()
            .map(|p| tf.noise_at_field(p.b_mg, Quadrature::Squeezed).level.db() - p.squeezed.db()),
    );
    let (anti_rms, anti_max) = rms_max(
        set.points()
            .iter()
            .map(|p| tf.noise_at_field(p.b_mg, Quadrature::Antisqueezed).level.db() - p.antisqueezed.db()),
    );
    let budget = job.config.loss.budget()?;
    let inference = infer_source_report(NoiseLevel::new(tf.n_min_db())?, &budget)?;
    if tf.symmetry_assumed() {
        report.warn("calibration covers one field polarity; the other branch is mirrored");
    }

    let mut body = Map::new();
    body.insert(
        "source".into(),
        Value::String(match &job.calibration {
            Some(p) => p.display().to_string(),
            None => "bundled".into(),
        }),
    );
    body.insert("fit".into(), serde_json::to_value(tf.summary()).expect("summary serializes"));
    body.insert(
        "residuals".into(),
        json!({
            "points": set.len(),
            "squeezed_rms_db": sq_rms,
            "squeezed_max_db": sq_max,
            "antisqueezed_rms_db": anti_rms,
            "antisqueezed_max_db": anti_max,
        }),
    );
    body.insert("source_inference".into(), serde_json::to_value(&inference).expect("inference serializes"));

    report.summary.push(format!(
        "floor {:.4} dB, squeezed residual rms {:.2e} dB, source estimate {:.3} dB",
        tf.n_min_db(),
        sq_rms,
        inference.inferred_source_db
    ));
    report.add("transfer_function.json", tf.to_json());
    report.add("fit_report.json", json_document(job, "calibrate", body));
    Ok(())
}

fn compile_job(job: &Job, report: &mut Report) -> Result<CompiledDrive, WorkbenchError> {
    let tf = transfer_function(job)?;
    let spec = job.config.pulse.to_spec(&tf)?;
    let actuator = job.config.actuator.model()?;
    let compiled = compile(&spec, &tf, actuator.as_ref(), &job.config.compile.options())?;
    let d = &compiled.diagnostics;
    if d.ring_down_flag {
        report.warn("post-pulse ring-down exceeds the flag threshold");
    }
    for w in &d.warnings {
        report.warn(w.clone());
    }

    let mut body = Map::new();
    body.insert("spec".into(), serde_json::to_value(&spec).expect("spec serializes"));
    body.insert("actuator".into(), serde_json::to_value(actuator).expect("actuator serializes"));
    body.insert(
        "window".into(),
        json!({ "start": compiled.window.start, "end": compiled.window.end }),
    );
    body.insert("diagnostics".into(), serde_json::to_value(d).expect("diagnostics serialize"));

    report.summary.push(format!(
        "compiled {} samples, round trip rms {:.2e} dB, max {:.2e} dB",
        compiled.target_noise.len(),
        d.roundtrip_rms_db,
        d.roundtrip_max_db
    ));
    report.add(
        "compiled.csv",
        csv_header(job, "compile", None) + &compiled.to_csv(),
    );
    report.add("compile_diagnostics.json", json_document(job, "compile", body));
    Ok(compiled)
}

/// Detected traces and matching shot references, one pair per mode.
pub struct DetectedTraces {
    pub traces: Vec<(NoiseTrace, NoiseTrace)>,
}

fn simulate(job: &Job, compiled: &CompiledDrive, report: &mut Report) -> Result<DetectedTraces, WorkbenchError> {
    let budget = job.config.loss.budget()?;
    let source = source_referred(&compiled.predicted_noise, &budget)?;
    let mut traces = Vec::new();
    for mode in job.config.detection.mode.modes() {
        let cfg = job.config.detection.config(mode, budget);
        let trace = detect(&source, &cfg)?;
        let shot = shot_reference_trace(&cfg, source.dt(), source.len())?;
        let label = mode_label(mode);
        report.add(
            format!("trace_{label}.csv"),
            csv_header(job, "simulate", Some(label)) + &trace.to_csv(),
        );
        report.add(
            format!("shot_reference_{label}.csv"),
            csv_header(job, "simulate", Some(label)) + &shot.to_csv(),
        );
        report.summary.push(format!(
            "{label}: detected range [{:.3}, {:.3}] dB",
            trace.trace.min(),
            trace.trace.max()
        ));
        traces.push((trace, shot));
    }
    if job.config.report.plot_data {
        report.add("pulse_bundle.csv", pulse_bundle(job, compiled, &traces));
    }
    Ok(DetectedTraces { traces })
}

fn mode_label(mode: DetectionMode) -> &'static str {
    match mode {
        DetectionMode::QuasiStatic => "quasi_static",
        DetectionMode::MonteCarlo => "monte_carlo",
    }
}

fn pulse_bundle(job: &Job, compiled: &CompiledDrive, traces: &[(NoiseTrace, NoiseTrace)]) -> String {
    let mut out = csv_header(job, "simulate", None);
    out.push_str("t_s,target_dB,field_mG,predicted_dB");
    for (t, _) in traces {
        let label = mode_label(t.mode);
        out.push_str(&format!(",{label}_dB,{label}_shot_dB"));
    }
    out.push('\n');
    for i in 0..compiled.target_noise.len() {
        out.push_str(&format!(
            "{},{},{},{}",
            compiled.target_noise.time(i),
            compiled.target_noise.samples()[i],
            compiled.predicted_field.samples()[i],
            compiled.predicted_noise.samples()[i]
        ));
        for (t, s) in traces {
            out.push_str(&format!(",{},{}", t.trace.samples()[i], s.trace.samples()[i]));
        }
        out.push('\n');
    }
    out
}

/// Lag in samples, within `±max_lag`, that maximizes the cross-covariance
/// of `a` against `b`. Positive lag means `a` trails `b`.
pub fn peak_lag(a: &[f64], b: &[f64], max_lag: usize) -> isize {
    let n = a.len().min(b.len());
    if n == 0 {
        return 0;
    }
    let mean = |x: &[f64]| x[..n].iter().sum::<f64>() / n as f64;
    let (ma, mb) = (mean(a), mean(b));
    let max_lag = max_lag.min(n - 1) as isize;
    let mut best = (0, f64::NEG_INFINITY);
    for lag in -max_lag..=max_lag {
        let mut s = 0.0;
        for i in 0..n as isize {
            let j = i - lag;
            if (0..n as isize).contains(&j) {
                s += (a[i as usize] - ma) * (b[j as usize] - mb);
            }
        }
        if s > best.1 {
            best = (lag, s);
        }
    }
    best.0
}

fn roundtrip(
    job: &Job,
    compiled: &CompiledDrive,
    detected: &DetectedTraces,
    report: &mut Report,
) -> Result<(), WorkbenchError> {
    let (rms, max) = roundtrip_error(compiled);
    let window = compiled.window.clone();
    let target = &compiled.target_noise.samples()[window.clone()];
    let dt = compiled.target_noise.dt();
    let max_lag = ((4.0 * rbw_response_width(job.config.detection.rbw_hz)) / dt).ceil() as usize;

    let mut modes = Map::new();
    for (trace, _) in &detected.traces {
        let offset = trace.shot_reference_db;
        let levels: Vec<f64> = trace.trace.samples().iter().map(|v| v - offset).collect();
        let (d_rms, d_max) = rms_max(levels[window.clone()].iter().zip(target).map(|(d, t)| d - t));
        let lag = peak_lag(&levels, compiled.predicted_noise.samples(), max_lag);
        modes.insert(
            mode_label(trace.mode).into(),
            json!({
                "rms_vs_target_db": d_rms,
                "max_vs_target_db": d_max,
                "peak_lag_s": lag as f64 * dt,
                "n_averages": trace.n_averages,
            }),
        );
        report.summary.push(format!(
            "{}: detected vs target rms {:.3} dB, lag {:.2e} s",
            mode_label(trace.mode),
            d_rms,
            lag as f64 * dt
        ));
    }
    let mut body = Map::new();
    body.insert(
        "compile".into(),
        json!({ "rms_db": rms, "max_db": max, "window": [window.start, window.end] }),
    );
    body.insert("detection".into(), Value::Object(modes));
    body.insert("rbw_response_width_s".into(), Value::from(rbw_response_width(job.config.detection.rbw_hz)));
    report.add("roundtrip_report.json", json_document(job, "roundtrip", body));
    Ok(())
}

fn spectrum_job(job: &Job, report: &mut Report) -> Result<(), WorkbenchError> {
    let cfg = &job.config.spectrum;
    let profile = cfg.profile();
    let budget = job.config.loss.budget()?;
    let freqs = cfg.grid()?;
    let s = spectrum(&profile, &budget, &freqs)?;
    report.add("spectrum.csv", csv_header(job, "spectrum", None) + &s.to_csv());
    if job.config.report.plot_data {
        let mut out = csv_header(job, "spectrum", None);
        out.push_str("frequency_hz,squeezed_dB,antisqueezed_dB,source_squeezed_dB,source_antisqueezed_dB,shot_dB\n");
        for (i, &f) in s.frequency_hz.iter().enumerate() {
            let src = profile.source_pair(f)?;
            out.push_str(&format!(
                "{f},{},{},{},{},0\n",
                s.squeezed_db[i],
                s.antisqueezed_db[i],
                src.v_min().to_level().db(),
                src.v_max().to_level().db()
            ));
        }
        report.add("spectrum_bundle.csv", out);
    }
    let best = s.squeezed_db.iter().copied().fold(f64::INFINITY, f64::min);
    report.summary.push(format!("{} frequencies, deepest squeezing {best:.3} dB", freqs.len()));
    Ok(())
}

fn synth(job: &Job, report: &mut Report) -> Result<(), WorkbenchError> {
    let set = synth_calibration(&job.config.synth)?;
    report.summary.push(format!("{} calibration points", set.len()));
    report.add("synthetic_calibration.csv", set.to_csv());
    Ok(())
}
