//! Built-in invariant checks, run by `irs-sim selftest`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::beamforming::{homogenize, objective_trace, rate_gradient, rate_objective};
use crate::channel_model::{gen_channels, ChannelSet, PhaseVector, SystemConfig};
use crate::error::Result;
use crate::quantization::achievable_rate;

/// Rate from the full log-determinant
/// `log2 det(I + (1-rho)((1-rho) R_ww + rho diag(R_yy))^-1 h sigma_x2 h^H)`.
///
/// Cubic in `M`; only used to cross-check [`achievable_rate`].
pub fn determinant_form_rate(h: &DVector<Complex64>, sigma_x2: f64, sigma_w2: f64, rho_q: f64) -> f64 {
    let m = h.len();
    let c = |x: f64| Complex64::new(x, 0.0);
    let r_ww = DMatrix::<Complex64>::identity(m, m) * c(sigma_w2);
    let r_yy = h * h.adjoint() * c(sigma_x2) + &r_ww;
    let d = DMatrix::from_diagonal(&r_yy.diagonal());
    let inner = &r_ww * c(1.0 - rho_q) + d * c(rho_q);
    let inv = inner.try_inverse().expect("diagonal of a positive definite matrix");
    let arg = DMatrix::<Complex64>::identity(m, m) + inv * h * h.adjoint() * c((1.0 - rho_q) * sigma_x2);
    arg.determinant().re.log2()
}

/// Central finite-difference gradient of the full-rate objective.
pub fn finite_difference_gradient(ch: &ChannelSet, theta: &PhaseVector, sigma_w2: f64, rho_q: f64, step: f64) -> Result<Vec<f64>> {
    (0..theta.len())
        .map(|i| {
            let shift = |d: f64| {
                let mut t = theta.angles().to_vec();
                t[i] += d;
                rate_objective(ch, &PhaseVector::from_angles(t), sigma_w2, rho_q)
            };
            Ok((shift(step)? - shift(-step)?) / (2.0 * step))
        })
        .collect()
}

/// `max|g - g_fd| / max|g_fd|`.
pub fn gradient_relative_error(g: &[f64], fd: &[f64]) -> f64 {
    let err = g.iter().zip(fd).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
    let scale = fd.iter().fold(0.0f64, |a, y| a.max(y.abs()));
    if scale == 0.0 {
        err
    } else {
        err / scale
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub probes: usize,
    pub failures: usize,
    pub max_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelftestReport {
    pub checks: Vec<CheckResult>,
}

impl SelftestReport {
    pub fn passed(&self) -> usize {
        self.checks.iter().filter(|c| c.passed()).count()
    }

    pub fn failed(&self) -> usize {
        self.checks.len() - self.passed()
    }
}

fn random_instance<R: Rng>(max_m: usize, max_n: usize, rng: &mut R) -> ChannelSet {
    let cfg = SystemConfig { m: rng.random_range(1..=max_m), n: rng.random_range(1..=max_n), ..SystemConfig::default() };
    gen_channels(&cfg, rng)
}

struct Tally {
    result: CheckResult,
}

impl Tally {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self { result: CheckResult { name, probes: 0, failures: 0, max_error: 0.0, tolerance } }
    }

    fn record(&mut self, error: f64) {
        self.result.probes += 1;
        // NaN counts as a failure
        if !(error < self.result.tolerance) {
            self.result.failures += 1;
        }
        self.result.max_error = self.result.max_error.max(if error.is_nan() { f64::INFINITY } else { error });
    }
}

pub fn check_gradient(probes: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tally::new("gradient vs central differences", 1e-5);
    for _ in 0..probes {
        let ch = random_instance(8, 8, &mut rng);
        let sw = 10f64.powf(rng.random_range(-2.0..1.0));
        let rho = rng.random_range(0.0..0.5);
        let theta = PhaseVector::random(ch.n(), &mut rng);
        let g = rate_gradient(&ch, &theta, sw, rho)?;
        let fd = finite_difference_gradient(&ch, &theta, sw, rho, 1e-6)?;
        t.record(gradient_relative_error(&g, &fd));
    }
    Ok(t.result)
}

/// `[u; t]^H C [u; t] + const` against the trace objective at `u conj(t)`.
pub fn check_homogenization(probes: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tally::new("homogenization consistency", 1e-10);
    for _ in 0..probes {
        let ch = random_instance(8, 8, &mut rng);
        let sw = 10f64.powf(rng.random_range(-1.0..1.0));
        let obj = homogenize(&ch, sw)?;
        let u = PhaseVector::random(ch.n(), &mut rng);
        let phase = Complex64::from_polar(1.0, rng.random_range(-std::f64::consts::PI..std::f64::consts::PI));
        let mut ubar = DVector::zeros(ch.n() + 1);
        ubar.rows_mut(0, ch.n()).copy_from(u.unit());
        ubar[ch.n()] = phase;
        let lifted = obj.lifted_value(&ubar);
        let reference = objective_trace(&ch, &PhaseVector::from_phases_of(u.unit().iter().map(|z| z * phase.conj())), sw)?;
        t.record((lifted - reference).abs() / reference.abs().max(1.0));
    }
    Ok(t.result)
}

pub fn check_rate_identity(probes: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tally::new("determinant and scalar rate forms", 1e-10);
    for _ in 0..probes {
        let cfg = SystemConfig { m: rng.random_range(1..=16), n: rng.random_range(0..=8), ..SystemConfig::default() };
        let ch = gen_channels(&cfg, &mut rng);
        let h = &ch.h_d + ch.g.clone() * ch.h_r.component_mul(PhaseVector::random(cfg.n, &mut rng).unit());
        let sx = 10f64.powf(rng.random_range(-1.0..1.0));
        let sw = 10f64.powf(rng.random_range(-2.0..2.0));
        let rho = rng.random_range(0.0..0.9);
        let scalar = achievable_rate(&h, sx, sw, rho)?;
        t.record((determinant_form_rate(&h, sx, sw, rho) - scalar).abs());
    }
    Ok(t.result)
}

/// Every built-in invariant check with its default probe count.
pub fn run(seed: u64) -> Result<SelftestReport> {
    Ok(SelftestReport {
        checks: vec![
            check_gradient(100, seed)?,
            check_homogenization(1000, seed.wrapping_add(1))?,
            check_rate_identity(1000, seed.wrapping_add(2))?,
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn determinant_form_single_antenna() {
        // M = 1: log2(1 + (1-rho) sx |h|^2 / (sw + rho sx |h|^2))
        let h = DVector::from_vec(vec![Complex64::new(0.6, -0.8)]);
        let expected = (1.0f64 + 0.7 * 2.0 / (0.5 + 0.3 * 2.0)).log2();
        assert!((determinant_form_rate(&h, 2.0, 0.5, 0.3) - expected).abs() < 1e-14);
    }

    #[test]
    fn full_suite_passes() {
        let report = run(7).unwrap();
        assert_eq!(report.failed(), 0, "{report:?}");
        assert_eq!(report.checks.len(), 3);
    }

    #[test]
    fn nan_error_is_a_failure() {
        let mut t = Tally::new("x", 1.0);
        t.record(f64::NAN);
        assert_eq!(t.result.failures, 1);
    }
}
