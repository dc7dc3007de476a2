use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use squeezeshape_workbench::{exit_code, run, Command, Job, ModeSelection, Overrides};

/// Compile, simulate and score shaped squeezing pulses.
#[derive(Parser)]
#[command(name = "squeezeshape", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Job configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `paths.output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Monte Carlo seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Detection mode: quasi, mc or both.
    #[arg(long, global = true)]
    mode: Option<ModeSelection>,
    /// Also write per-figure column bundles.
    #[arg(long, global = true)]
    plot_data: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Fit the transfer function to a calibration sweep.
    Calibrate,
    /// Compile a noise target into a coil drive.
    Compile,
    /// Compile and pass the prediction through the detection chain.
    Simulate,
    /// Frequency-resolved squeezing spectrum.
    Spectrum,
    /// Compile and detect, scoring each stage against the target.
    Roundtrip,
    /// Write a synthetic calibration sweep.
    Synth,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Calibrate => Command::Calibrate,
            Cmd::Compile => Command::Compile,
            Cmd::Simulate => Command::Simulate,
            Cmd::Spectrum => Command::Spectrum,
            Cmd::Roundtrip => Command::Roundtrip,
            Cmd::Synth => Command::Synth,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let overrides = Overrides {
        output_dir: cli.out,
        seed: cli.seed,
        mode: cli.mode,
        plot_data: cli.plot_data,
    };
    let result = Job::load(cli.config.as_deref(), &overrides).and_then(|job| {
        let report = run(cli.command.into(), &job)?;
        report.write(&job.output_dir)?;
        Ok(report)
    });
    match &result {
        Ok(report) => {
            for line in &report.summary {
                println!("{line}");
            }
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
        }
        Err(e) => eprintln!("error: {e}"),
    }
    ExitCode::from(exit_code(&result) as u8)
}
