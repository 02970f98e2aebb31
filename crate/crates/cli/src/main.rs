//! `irs-sim`: batch driver for rate and estimation sweeps.
//!
//! Exit status is 0 on success, 1 for configuration or I/O errors and 2
//! when a solver fails numerically.

mod config;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use irs_core::experiments::{self, Metric, SweepSpec, TrialRecord};
use irs_core::selftest;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Core(#[from] irs_core::Error),
    #[error("{0} self-test check(s) failed")]
    Selftest(usize),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numerical() => 2,
            CliError::Selftest(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "irs-sim", version, about = "IRS-assisted uplink simulator with low-resolution ADCs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON sweep configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file; standard output when omitted.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// `key=value` with dotted keys for nested fields. Repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads for sweeps.
    #[arg(long, global = true, env = "IRS_SIM_THREADS")]
    threads: Option<usize>,
    /// Master seed; replaces `master_seed` from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Achievable rate of each beamformer over the sweep grid (CSV).
    RateSweep,
    /// NMSE of the estimators over the sweep grid (CSV).
    EstimateSweep,
    /// Run every beamformer on one seeded instance.
    Beamform,
    /// Phase-I Fisher information bound on one seeded instance.
    Crlb,
    /// Built-in invariant checks.
    Selftest,
}

fn open_output(path: &Option<PathBuf>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| CliError::Config(format!("cannot write {}: {e}", p.display())))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn print_summary(records: &[TrialRecord], metric: Metric) {
    let mut line = String::new();
    let mut last: Option<(u64, usize, usize, u32)> = None;
    let mut paragraph = Vec::new();
    for s in experiments::summarize(records).into_iter().filter(|s| s.metric == metric) {
        let key = (s.snr_db.to_bits(), s.tau, s.n, s.bits);
        if last != Some(key) {
            if !line.is_empty() {
                paragraph.push(std::mem::take(&mut line));
            }
            line = format!("snr_db={} tau={} n={} bits={}:", s.snr_db, s.tau, s.n, s.bits);
            last = Some(key);
        }
        line.push_str(&format!(" {}={:.4}", s.method, s.mean));
        if s.non_finite > 0 {
            line.push_str(&format!(" ({} non-finite)", s.non_finite));
        }
    }
    if !line.is_empty() {
        paragraph.push(line);
    }
    eprintln!("mean {} per point: {}", metric.name(), paragraph.join("; "));
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let estimation = matches!(cli.command, Command::EstimateSweep | Command::Crlb);
    let spec: SweepSpec = config::load(cli.config.as_deref(), &cli.overrides, cli.seed, estimation)?;
    match cli.command {
        Command::RateSweep | Command::EstimateSweep => {
            let mut out = open_output(&cli.output)?;
            let (records, metric) = if estimation {
                (experiments::run_estimation_sweep(&spec, cli.threads)?, Metric::Nmse)
            } else {
                (experiments::run_rate_sweep(&spec, cli.threads)?, Metric::RateBits)
            };
            experiments::write_csv(&records, &mut out)?;
            out.flush()?;
            print_summary(&records, metric);
        }
        Command::Beamform => {
            let mut out = open_output(&cli.output)?;
            let (ch, reports) = experiments::beamform_instance(&spec)?;
            let p = spec.points()[0];
            writeln!(out, "instance: M={} N={} snr_db={} bits={} seed={}", ch.m(), ch.n(), p.snr_db, p.bits, spec.master_seed)?;
            for r in &reports {
                let theta = match &r.design.phases {
                    Some(ph) => format!("{:?}", ph.angles()),
                    None => "-".to_string(),
                };
                writeln!(
                    out,
                    "{}: rate_bits={} objective={} iterations={} converged={} theta={}",
                    r.method.name(),
                    r.rate_bits,
                    r.objective,
                    r.design.iterations,
                    r.design.converged,
                    theta
                )?;
            }
            out.flush()?;
        }
        Command::Crlb => {
            let mut out = open_output(&cli.output)?;
            let (_, info) = experiments::crlb_instance(&spec)?;
            writeln!(out, "crlb_trace={}", info.crlb_trace)?;
            writeln!(out, "sigma_e2={}", info.sigma_e2_scaled(spec.estimation.sigma_e_scale))?;
            writeln!(out, "singular={}", info.singular)?;
            out.flush()?;
        }
        Command::Selftest => {
            let mut out = open_output(&cli.output)?;
            let report = selftest::run(spec.master_seed)?;
            for c in &report.checks {
                writeln!(
                    out,
                    "{} {}: {} probes, {} failures, max error {:e} (tolerance {:e})",
                    if c.passed() { "PASS" } else { "FAIL" },
                    c.name,
                    c.probes,
                    c.failures,
                    c.max_error,
                    c.tolerance
                )?;
            }
            writeln!(out, "{} passed, {} failed", report.passed(), report.failed())?;
            out.flush()?;
            if report.failed() > 0 {
                return Err(CliError::Selftest(report.failed()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("irs-sim: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
