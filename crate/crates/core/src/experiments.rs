//! Monte-Carlo sweeps over SNR, pilot length, IRS size and ADC resolution.
//!
//! Every trial draws from its own generator, seeded by a hash of
//! `(master_seed, point index, trial index)`, and each method inside a trial
//! uses a separate stream of that generator. Results therefore depend only
//! on the `SweepSpec`, never on the worker count or on which other
//! methods were enabled.

use std::io::Write;

use nalgebra::DVector;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beamforming::{self, GdConfig, Objective, SdrOptions};
use crate::channel_model::{composite_channel, gen_channels, ChannelSet, IrsState, PhaseVector, SystemConfig};
use crate::error::{Error, Result};
use crate::estimation::{self, ErrorVarianceScale, MlOptions, PilotAlphabet, PilotFrame, TrainingPhase};
use crate::quantization::{achievable_rate, distortion_factor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateMethod {
    NoIrs,
    RandomPhase,
    Pm,
    Sdr,
    Gd,
    Oracle,
}

impl RateMethod {
    pub const ALL: [RateMethod; 6] = [Self::NoIrs, Self::RandomPhase, Self::Pm, Self::Sdr, Self::Gd, Self::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            Self::NoIrs => "no_irs",
            Self::RandomPhase => "random_phase",
            Self::Pm => "pm",
            Self::Sdr => "sdr",
            Self::Gd => "gd",
            Self::Oracle => "oracle",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }

    fn stream(self) -> u64 {
        self as u64 + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstMethod {
    Ml,
    Ls,
    Lmmse,
}

impl EstMethod {
    pub const ALL: [EstMethod; 3] = [Self::Ml, Self::Ls, Self::Lmmse];

    pub fn name(self) -> &'static str {
        match self {
            Self::Ml => "ml",
            Self::Ls => "ls",
            Self::Lmmse => "lmmse",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }
}

/// Where the direct-channel error variance for phase II comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorVarianceSource {
    /// Fisher information at the true direct channel.
    #[default]
    Genie,
    /// Fisher information at the phase-I ML estimate.
    Blind,
}

/// How the direct-channel residual enters the phase-II observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// `e_d ~ CN(0, sigma_e2 / M)`.
    #[default]
    Drawn,
    /// `e_d = h_d - h_d_hat` from the phase-I ML estimate.
    Actual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RateOptions {
    pub sdr: SdrOptions,
    pub gd: GdConfig,
    /// Phase levels `K` of the exhaustive search.
    pub oracle_levels: usize,
    pub oracle_objective: Objective,
}

impl Default for RateOptions {
    fn default() -> Self {
        Self { sdr: SdrOptions::default(), gd: GdConfig::default(), oracle_levels: 16, oracle_objective: Objective::FullRate }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationOptions {
    pub alphabet: PilotAlphabet,
    pub sigma_e_source: ErrorVarianceSource,
    pub sigma_e_scale: ErrorVarianceScale,
    pub residual: ResidualMode,
    /// Prior variance of each complex channel entry, used by LS and LMMSE.
    pub prior_var: f64,
    pub ml: MlOptions,
}

impl Default for EstimationOptions {
    fn default() -> Self {
        Self {
            alphabet: PilotAlphabet::default(),
            sigma_e_source: ErrorVarianceSource::default(),
            sigma_e_scale: ErrorVarianceScale::default(),
            residual: ResidualMode::default(),
            prior_var: 1.0,
            ml: MlOptions::default(),
        }
    }
}

/// A sweep: the system parameters, the grids to scan and the methods to run.
///
/// Grids left unset fall back to the single value of the matching system
/// parameter, and an empty method list selects every method of the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub m: usize,
    pub n: usize,
    pub tau: usize,
    pub sigma_w2: f64,
    pub sigma_x2: f64,
    pub bits: u32,
    pub snr_db_grid: Option<Vec<f64>>,
    pub tau_grid: Option<Vec<usize>>,
    pub n_grid: Option<Vec<usize>>,
    pub bits_grid: Option<Vec<u32>>,
    pub methods: Vec<String>,
    pub trials: usize,
    pub master_seed: u64,
    pub rate: RateOptions,
    pub estimation: EstimationOptions,
}

impl Default for SweepSpec {
    fn default() -> Self {
        let base = SystemConfig::default();
        Self {
            m: base.m,
            n: base.n,
            tau: base.tau,
            sigma_w2: base.sigma_w2,
            sigma_x2: base.sigma_x2,
            bits: base.bits,
            snr_db_grid: None,
            tau_grid: None,
            n_grid: None,
            bits_grid: None,
            methods: Vec::new(),
            trials: 100,
            master_seed: 0,
            rate: RateOptions::default(),
            estimation: EstimationOptions::default(),
        }
    }
}

/// One grid point of a sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub snr_db: f64,
    pub tau: usize,
    pub n: usize,
    pub bits: u32,
}

impl SweepSpec {
    pub fn base(&self) -> SystemConfig {
        SystemConfig { m: self.m, n: self.n, tau: self.tau, sigma_w2: self.sigma_w2, sigma_x2: self.sigma_x2, bits: self.bits }
    }

    pub fn snr_grid(&self) -> Vec<f64> {
        self.snr_db_grid.clone().unwrap_or_else(|| vec![snr_db_for(self.sigma_x2, self.sigma_w2)])
    }

    /// Points in `(snr, tau, n, bits)` lexicographic grid order.
    pub fn points(&self) -> Vec<SweepPoint> {
        let taus = self.tau_grid.clone().unwrap_or_else(|| vec![self.tau]);
        let ns = self.n_grid.clone().unwrap_or_else(|| vec![self.n]);
        let bits = self.bits_grid.clone().unwrap_or_else(|| vec![self.bits]);
        let mut out = Vec::new();
        for &snr_db in &self.snr_grid() {
            for &tau in &taus {
                for &n in &ns {
                    for &b in &bits {
                        out.push(SweepPoint { snr_db, tau, n, bits: b });
                    }
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.base().validate()?;
        if self.trials == 0 {
            return Err(Error::InvalidArgument("trials must be >= 1".into()));
        }
        let empty = |name: &str, len: Option<usize>| match len {
            Some(0) => Err(Error::InvalidArgument(format!("{name} must not be empty"))),
            _ => Ok(()),
        };
        empty("snr_db_grid", self.snr_db_grid.as_ref().map(Vec::len))?;
        empty("tau_grid", self.tau_grid.as_ref().map(Vec::len))?;
        empty("n_grid", self.n_grid.as_ref().map(Vec::len))?;
        empty("bits_grid", self.bits_grid.as_ref().map(Vec::len))?;
        for p in self.points() {
            if !p.snr_db.is_finite() {
                return Err(Error::InvalidArgument(format!("SNR must be finite, got {}", p.snr_db)));
            }
            SystemConfig { n: p.n, tau: p.tau, bits: p.bits, ..self.base() }.validate()?;
        }
        Ok(())
    }

    pub fn rate_methods(&self) -> Result<Vec<RateMethod>> {
        parse_methods(&self.methods, &RateMethod::ALL, RateMethod::parse)
    }

    pub fn est_methods(&self) -> Result<Vec<EstMethod>> {
        parse_methods(&self.methods, &EstMethod::ALL, EstMethod::parse)
    }
}

fn parse_methods<T: Copy + Ord>(names: &[String], all: &[T], parse: fn(&str) -> Result<T>) -> Result<Vec<T>> {
    if names.is_empty() {
        return Ok(all.to_vec());
    }
    let mut out = names.iter().map(|s| parse(s)).collect::<Result<Vec<_>>>()?;
    out.sort();
    out.dedup();
    Ok(out)
}

/// `sigma_w2 = sigma_x2 / 10^(snr_db / 10)`.
pub fn noise_for(sigma_x2: f64, snr_db: f64) -> f64 {
    sigma_x2 * 10f64.powf(-snr_db / 10.0)
}

fn snr_db_for(sigma_x2: f64, sigma_w2: f64) -> f64 {
    10.0 * (sigma_x2 / sigma_w2).log10()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    RateBits,
    Nmse,
    CrlbTrace,
    Objective,
    Iterations,
    Converged,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Self::RateBits => "rate_bits",
            Self::Nmse => "nmse",
            Self::CrlbTrace => "crlb_trace",
            Self::Objective => "objective",
            Self::Iterations => "iterations",
            Self::Converged => "converged",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub point: usize,
    pub snr_db: f64,
    pub tau: usize,
    pub n: usize,
    pub bits: u32,
    pub method: String,
    /// Position of the method in the emitted order.
    pub method_rank: usize,
    pub trial: usize,
    pub seed: u64,
    pub metric: Metric,
    pub value: f64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of one trial, a hash of `(master_seed, point, trial)`.
pub fn trial_seed(master_seed: u64, point: usize, trial: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(master_seed) ^ point as u64) ^ (trial as u64).rotate_left(32))
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn run_parallel<F>(spec: &SweepSpec, threads: Option<usize>, work: F) -> Result<Vec<TrialRecord>>
where
    F: Fn(usize, SweepPoint, usize, u64) -> Result<Vec<TrialRecord>> + Sync,
{
    let points = spec.points();
    let items: Vec<(usize, SweepPoint, usize)> = points
        .iter()
        .enumerate()
        .flat_map(|(i, &p)| (0..spec.trials).map(move |t| (i, p, t)))
        .collect();
    let job = || {
        items
            .par_iter()
            .map(|&(i, p, t)| work(i, p, t, trial_seed(spec.master_seed, i, t)))
            .collect::<Vec<_>>()
    };
    let results = match threads {
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k.max(1))
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
            .install(job),
        None => job(),
    };
    let mut records = Vec::new();
    for r in results {
        records.extend(r?);
    }
    records.sort_by(|a, b| {
        (a.point, a.method_rank, a.trial, a.metric).cmp(&(b.point, b.method_rank, b.trial, b.metric))
    });
    Ok(records)
}

struct Recorder {
    point: usize,
    p: SweepPoint,
    trial: usize,
    seed: u64,
    out: Vec<TrialRecord>,
}

impl Recorder {
    fn push(&mut self, method: &str, rank: usize, metric: Metric, value: f64) {
        self.out.push(TrialRecord {
            point: self.point,
            snr_db: self.p.snr_db,
            tau: self.p.tau,
            n: self.p.n,
            bits: self.p.bits,
            method: method.to_string(),
            method_rank: rank,
            trial: self.trial,
            seed: self.seed,
            metric,
            value,
        });
    }
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Phases chosen by one beamformer, with its iteration count and convergence flag.
#[derive(Debug, Clone)]
pub struct Design {
    pub phases: Option<PhaseVector>,
    pub iterations: usize,
    pub converged: bool,
}

/// Run one beamformer on an instance. `phases` is `None` for `no_irs` and
/// for a skipped oracle.
pub fn design(method: RateMethod, ch: &ChannelSet, sigma_eff: f64, rho_q: f64, opts: &RateOptions, seed: u64) -> Result<Design> {
    let mut rng = stream_rng(seed, method.stream());
    let n = ch.n();
    Ok(match method {
        RateMethod::NoIrs => Design { phases: None, iterations: 0, converged: true },
        _ if n == 0 => Design { phases: Some(PhaseVector::zeros(0)), iterations: 0, converged: true },
        RateMethod::RandomPhase => Design { phases: Some(PhaseVector::random(n, &mut rng)), iterations: 0, converged: true },
        RateMethod::Pm => Design { phases: Some(beamforming::phase_match(ch, sigma_eff)?), iterations: 0, converged: true },
        RateMethod::Sdr => {
            let sol = beamforming::sdr_beamform(ch, sigma_eff, &opts.sdr, &mut rng)?;
            Design { phases: Some(sol.rounded), iterations: opts.sdr.randomizations, converged: true }
        }
        RateMethod::Gd => {
            let out = beamforming::gd_beamform(ch, sigma_eff, rho_q, &opts.gd, &mut rng)?;
            Design { phases: Some(out.phases), iterations: out.iterations, converged: out.converged }
        }
        RateMethod::Oracle => {
            match beamforming::brute_force_oracle(ch, sigma_eff, rho_q, opts.oracle_levels, opts.oracle_objective) {
                Ok(r) => Design { phases: Some(r.phases), iterations: beamforming::oracle_size(n, opts.oracle_levels) as usize, converged: true },
                Err(Error::InstanceTooLarge { .. }) => Design { phases: None, iterations: 0, converged: false },
                Err(e) => return Err(e),
            }
        }
    })
}

/// Achievable rate versus SNR for each beamformer.
pub fn run_rate_sweep(spec: &SweepSpec, threads: Option<usize>) -> Result<Vec<TrialRecord>> {
    spec.validate()?;
    let methods = spec.rate_methods()?;
    run_parallel(spec, threads, |point, p, trial, seed| {
        let cfg = SystemConfig { n: p.n, tau: p.tau, bits: p.bits, sigma_w2: noise_for(spec.sigma_x2, p.snr_db), ..spec.base() };
        let rho = distortion_factor(p.bits)?;
        let ch = gen_channels(&cfg, &mut stream_rng(seed, 0));
        let sigma_eff = cfg.sigma_w2 / cfg.sigma_x2;
        let mut rec = Recorder { point, p, trial, seed, out: Vec::new() };
        for (rank, &method) in methods.iter().enumerate() {
            let d = design(method, &ch, sigma_eff, rho, &spec.rate, seed)?;
            let skipped = method == RateMethod::Oracle && d.phases.is_none();
            if !skipped {
                let irs = match &d.phases {
                    Some(ph) => IrsState::On(ph.clone()),
                    None => IrsState::Off,
                };
                let h = composite_channel(&ch, &irs)?;
                let rate = achievable_rate(&h, cfg.sigma_x2, cfg.sigma_w2, rho)?;
                let objective: f64 = h.iter().map(|z| z.norm_sqr() / (sigma_eff + rho * z.norm_sqr())).sum();
                rec.push(method.name(), rank, Metric::RateBits, rate);
                rec.push(method.name(), rank, Metric::Objective, objective);
                rec.push(method.name(), rank, Metric::Iterations, d.iterations as f64);
            }
            rec.push(method.name(), rank, Metric::Converged, flag(d.converged));
        }
        Ok(rec.out)
    })
}

/// Outcome of the two training phases on one channel draw.
#[derive(Debug, Clone)]
pub struct EstimationTrial {
    pub phase1: estimation::EstimationResult,
    pub phase1_nmse: f64,
    /// `tr(J^-1)` of the phase-I system at the true direct channel.
    pub crlb_direct: f64,
    pub sigma_e2: f64,
    /// `tr(J^-1) / ||vec(H)||^2` of the phase-II system, when it exists.
    pub crlb_reflect_normalized: f64,
    /// NMSE, iterations and convergence of each phase-II method.
    pub reflect: Vec<(EstMethod, Option<(f64, usize, bool)>)>,
}

/// Phase I, the error variance, then phase II with each estimator.
pub fn estimation_trial(
    ch: &ChannelSet,
    tau: usize,
    sigma_w2: f64,
    methods: &[EstMethod],
    opts: &EstimationOptions,
    seed: u64,
) -> Result<EstimationTrial> {
    let mut rng = stream_rng(seed, 1);
    let frame1 = estimation::gen_pilots_with(tau, opts.alphabet, &mut rng)?;
    let sys1 = estimation::realize_system(ch, &frame1, sigma_w2, None, &mut rng)?;
    let phase1 = estimation::ml_direct(&sys1, &opts.ml)?;
    let phase1_nmse = estimation::nmse(&phase1.h_hat, &ch.h_d)?;
    let crlb_direct = estimation::fisher_for_system(&sys1, &ch.h_d)?.crlb_trace;
    let at = match opts.sigma_e_source {
        ErrorVarianceSource::Genie => ch.h_d.clone(),
        ErrorVarianceSource::Blind => phase1.h_hat.clone(),
    };
    let sigma_e2 = estimation::fisher_for_system(&sys1, &at)?.sigma_e2_scaled(opts.sigma_e_scale);

    let mut reflect = Vec::new();
    let mut crlb_reflect_normalized = f64::NAN;
    if sigma_e2.is_finite() {
        let frame2 = PilotFrame::reflect(frame1.a.clone(), estimation::dft_patterns(ch.n()))?;
        let mut rng2 = stream_rng(seed, 2);
        let sys2 = match opts.residual {
            ResidualMode::Drawn => estimation::realize_system(ch, &frame2, sigma_w2, Some(sigma_e2), &mut rng2)?,
            ResidualMode::Actual => {
                let e_d: DVector<Complex64> = &ch.h_d - &phase1.h_hat;
                estimation::realize_system_with_residual(ch, &frame2, sigma_w2, sigma_e2, &e_d, &mut rng2)?
            }
        };
        let truth = estimation::true_unknown(ch, TrainingPhase::II)?;
        crlb_reflect_normalized = estimation::fisher_for_system(&sys2, &truth)?.crlb_trace / truth.norm_squared();
        for &method in methods {
            let est = match method {
                EstMethod::Ml => estimation::ml_reflect(&sys2, &opts.ml)?,
                EstMethod::Ls => estimation::ls_estimate(&sys2, opts.prior_var)?,
                EstMethod::Lmmse => estimation::lmmse_estimate(&sys2, opts.prior_var)?,
            };
            let e = estimation::nmse(&est.h_hat, &truth)?;
            reflect.push((method, Some((e, est.iterations, est.converged))));
        }
    } else {
        // the phase-I bound does not exist, so phase II has no noise model
        reflect.extend(methods.iter().map(|&m| (m, None)));
    }
    Ok(EstimationTrial { phase1, phase1_nmse, crlb_direct, sigma_e2, crlb_reflect_normalized, reflect })
}

/// Method label of the phase-I estimate in estimation sweeps.
pub const DIRECT_LABEL: &str = "ml_direct";
/// Method label of the bound records in estimation sweeps.
pub const CRLB_LABEL: &str = "crlb";

/// NMSE versus SNR and pilot length for the phase-II estimators.
///
/// Per trial this emits the phase-I ML estimate (`ml_direct`), the bounds
/// (`crlb`: `crlb_trace` of phase I, `nmse` as the normalized phase-II
/// bound) and every requested phase-II estimator.
pub fn run_estimation_sweep(spec: &SweepSpec, threads: Option<usize>) -> Result<Vec<TrialRecord>> {
    spec.validate()?;
    let methods = spec.est_methods()?;
    for p in spec.points() {
        if p.bits != 1 {
            return Err(Error::InvalidArgument(format!("estimation is defined for 1-bit ADCs, got {} bits", p.bits)));
        }
        if p.n == 0 {
            return Err(Error::NoReflectingChannel);
        }
    }
    if !(spec.estimation.prior_var > 0.0) {
        return Err(Error::InvalidArgument("prior_var must be positive".into()));
    }
    run_parallel(spec, threads, |point, p, trial, seed| {
        let cfg = SystemConfig { n: p.n, tau: p.tau, bits: 1, sigma_w2: noise_for(spec.sigma_x2, p.snr_db), ..spec.base() };
        let ch = gen_channels(&cfg, &mut stream_rng(seed, 0));
        let t = estimation_trial(&ch, p.tau, cfg.sigma_w2 / cfg.sigma_x2, &methods, &spec.estimation, seed)?;
        let mut rec = Recorder { point, p, trial, seed, out: Vec::new() };
        rec.push(CRLB_LABEL, 0, Metric::CrlbTrace, t.crlb_direct);
        rec.push(CRLB_LABEL, 0, Metric::Nmse, t.crlb_reflect_normalized);
        rec.push(DIRECT_LABEL, 1, Metric::Nmse, t.phase1_nmse);
        rec.push(DIRECT_LABEL, 1, Metric::Iterations, t.phase1.iterations as f64);
        rec.push(DIRECT_LABEL, 1, Metric::Converged, flag(t.phase1.converged));
        for (k, (method, out)) in t.reflect.iter().enumerate() {
            let rank = k + 2;
            match out {
                Some((e, its, conv)) => {
                    rec.push(method.name(), rank, Metric::Nmse, *e);
                    rec.push(method.name(), rank, Metric::Iterations, *its as f64);
                    rec.push(method.name(), rank, Metric::Converged, flag(*conv));
                }
                None => {
                    rec.push(method.name(), rank, Metric::Nmse, f64::NAN);
                    rec.push(method.name(), rank, Metric::Converged, 0.0);
                }
            }
        }
        Ok(rec.out)
    })
}

/// Channel, phase-I system and Fisher information of trial 0 at the first
/// grid point, exactly as the estimation sweep draws them.
pub fn crlb_instance(spec: &SweepSpec) -> Result<(ChannelSet, estimation::FisherInfo)> {
    spec.validate()?;
    let p = spec.points()[0];
    let seed = trial_seed(spec.master_seed, 0, 0);
    let cfg = SystemConfig { n: p.n, tau: p.tau, bits: p.bits, sigma_w2: noise_for(spec.sigma_x2, p.snr_db), ..spec.base() };
    let ch = gen_channels(&cfg, &mut stream_rng(seed, 0));
    let mut rng = stream_rng(seed, 1);
    let frame = estimation::gen_pilots_with(p.tau, spec.estimation.alphabet, &mut rng)?;
    let sys = estimation::realize_system(&ch, &frame, cfg.sigma_w2 / cfg.sigma_x2, None, &mut rng)?;
    let info = estimation::fisher_for_system(&sys, &ch.h_d)?;
    Ok((ch, info))
}

/// One beamformer's result on a single instance.
#[derive(Debug, Clone)]
pub struct BeamformReport {
    pub method: RateMethod,
    pub design: Design,
    pub rate_bits: f64,
    pub objective: f64,
}

/// Every requested beamformer on trial 0 of the first grid point.
pub fn beamform_instance(spec: &SweepSpec) -> Result<(ChannelSet, Vec<BeamformReport>)> {
    spec.validate()?;
    let p = spec.points()[0];
    let seed = trial_seed(spec.master_seed, 0, 0);
    let cfg = SystemConfig { n: p.n, tau: p.tau, bits: p.bits, sigma_w2: noise_for(spec.sigma_x2, p.snr_db), ..spec.base() };
    let rho = distortion_factor(p.bits)?;
    let ch = gen_channels(&cfg, &mut stream_rng(seed, 0));
    let sigma_eff = cfg.sigma_w2 / cfg.sigma_x2;
    let mut out = Vec::new();
    for method in spec.rate_methods()? {
        let design = design(method, &ch, sigma_eff, rho, &spec.rate, seed)?;
        let (rate_bits, objective) = match (&design.phases, method) {
            (None, RateMethod::Oracle) => (f64::NAN, f64::NAN),
            (phases, _) => {
                let irs = phases.clone().map_or(IrsState::Off, IrsState::On);
                let h = composite_channel(&ch, &irs)?;
                let obj = h.iter().map(|z| z.norm_sqr() / (sigma_eff + rho * z.norm_sqr())).sum();
                (achievable_rate(&h, cfg.sigma_x2, cfg.sigma_w2, rho)?, obj)
            }
        };
        out.push(BeamformReport { method, design, rate_bits, objective });
    }
    Ok((ch, out))
}

pub const CSV_HEADER: [&str; 9] = ["snr_db", "tau", "n", "bits", "method", "trial", "seed", "metric", "value"];

/// Write records as CSV. Floats use the shortest representation that
/// round-trips.
pub fn write_csv<W: Write>(records: &[TrialRecord], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record([
            r.snr_db.to_string(),
            r.tau.to_string(),
            r.n.to_string(),
            r.bits.to_string(),
            r.method.clone(),
            r.trial.to_string(),
            r.seed.to_string(),
            r.metric.name().to_string(),
            r.value.to_string(),
        ])?;
    }
    w.flush()
}

/// Per-point statistics of one metric of one method.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub snr_db: f64,
    pub tau: usize,
    pub n: usize,
    pub bits: u32,
    pub method: String,
    pub metric: Metric,
    pub count: usize,
    /// Values that were NaN or infinite; excluded from the statistics below.
    pub non_finite: usize,
    pub mean: f64,
    pub median: f64,
    pub p10: f64,
    pub p90: f64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Aggregate records in their emitted order.
pub fn summarize(records: &[TrialRecord]) -> Vec<Summary> {
    let mut out: Vec<Summary> = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    let mut index = std::collections::BTreeMap::new();
    for r in records {
        let key = (r.point, r.method_rank, r.metric);
        let slot = *index.entry(key).or_insert_with(|| {
            out.push(Summary {
                snr_db: r.snr_db,
                tau: r.tau,
                n: r.n,
                bits: r.bits,
                method: r.method.clone(),
                metric: r.metric,
                count: 0,
                non_finite: 0,
                mean: f64::NAN,
                median: f64::NAN,
                p10: f64::NAN,
                p90: f64::NAN,
            });
            values.push(Vec::new());
            out.len() - 1
        });
        out[slot].count += 1;
        if r.value.is_finite() {
            values[slot].push(r.value);
        } else {
            out[slot].non_finite += 1;
        }
    }
    for (s, mut v) in out.iter_mut().zip(values) {
        if v.is_empty() {
            continue;
        }
        s.mean = v.iter().sum::<f64>() / v.len() as f64;
        v.sort_by(f64::total_cmp);
        s.median = percentile(&v, 0.5);
        s.p10 = percentile(&v, 0.1);
        s.p90 = percentile(&v, 0.9);
    }
    out
}
