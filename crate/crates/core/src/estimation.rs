//! Channel estimation from 1-bit quantized pilots.
//!
//! Training runs in two phases. In phase I the IRS is switched off and the
//! user sends `tau` pilots, so the BS observes `y = (a ⊗ I_M) h_d + w`.
//! In phase II the IRS is on and the reflecting channel `H = G diag(h_r)` is
//! estimated from `N` sub-frames of `tau` pilots each; sub-frame `s` uses the
//! IRS pattern `u^(s)_n = exp(-j 2 pi s n / N)`, which makes the stacked
//! regressor on `vec(H)` (column-major, index `n M + m`) full rank. The
//! direct-channel contribution is cancelled up to the phase-I residual `e_d`,
//! which enters as extra noise.
//!
//! All estimators work on the real-stacked model
//! `y_R = A_R h_R + n_R` with `A_R = [[Re A, -Im A], [Im A, Re A]]` and
//! `h_R = [Re h; Im h]`. Only the signs `r_R = sgn(y_R)` are observed.
//!
//! Bussgang baselines use a zero-mean prior `h ~ CN(0, p I)`:
//!
//! * LS: `h = (A_R^T A_R)^-1 A_R^T (sqrt(pi/2) sigma_y ∘ r_R)`, where
//!   `sigma_y,i` is the standard deviation of `y_R,i` under the prior.
//! * LMMSE: with `C_yy` the covariance of `y_R` and `D = diag(C_yy)`,
//!   `C_rr = (2/pi) asin(D^-1/2 C_yy D^-1/2)` (arcsine law) and
//!   `C_hr = sqrt(2/pi) (p/2) A_R^T D^-1/2`, the estimate is
//!   `h = C_hr C_rr^-1 r_R`. `C_yy` is block diagonal over antennas, and
//!   each block is solved separately.

use std::f64::consts::{FRAC_2_PI, PI, TAU};

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::channel_model::{cascade_matrix, ChannelSet, PhaseVector};
use crate::error::{Error, Result};
use crate::gaussian;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PilotAlphabet {
    /// `exp(j (pi/4 + k pi/2))`.
    Qpsk,
    /// Unit modulus with a uniform phase.
    #[default]
    RandomPhase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainingPhase {
    /// IRS off, direct channel.
    I,
    /// IRS on, reflecting channel.
    II,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PilotFrame {
    pub a: DVector<Complex64>,
    pub phase: TrainingPhase,
    /// One pattern per phase-II sub-frame; empty in phase I.
    pub irs_pattern: Vec<PhaseVector>,
}

impl PilotFrame {
    pub fn direct(a: DVector<Complex64>) -> Result<Self> {
        let frame = Self { a, phase: TrainingPhase::I, irs_pattern: Vec::new() };
        frame.validate()?;
        Ok(frame)
    }

    pub fn reflect(a: DVector<Complex64>, irs_pattern: Vec<PhaseVector>) -> Result<Self> {
        let frame = Self { a, phase: TrainingPhase::II, irs_pattern };
        frame.validate()?;
        Ok(frame)
    }

    pub fn tau(&self) -> usize {
        self.a.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.a.is_empty() {
            return Err(Error::InvalidArgument("pilot length must be >= 1".into()));
        }
        let modulus = self.a[0].norm();
        if !(modulus > 0.0) || self.a.iter().any(|z| (z.norm() - modulus).abs() > 1e-12 * modulus) {
            return Err(Error::InvalidArgument("pilots must have constant, nonzero modulus".into()));
        }
        match self.phase {
            TrainingPhase::I if !self.irs_pattern.is_empty() => {
                Err(Error::InvalidArgument("phase I pilots take no IRS pattern".into()))
            }
            TrainingPhase::II if self.irs_pattern.is_empty() => {
                Err(Error::InvalidArgument("phase II needs at least one IRS pattern".into()))
            }
            TrainingPhase::II => {
                let n = self.irs_pattern[0].len();
                if self.irs_pattern.iter().any(|p| p.len() != n) {
                    return Err(Error::InvalidArgument("IRS patterns differ in length".into()));
                }
                Ok(())
            }
            TrainingPhase::I => Ok(()),
        }
    }
}

pub fn pilot_symbols<R: Rng + ?Sized>(tau: usize, alphabet: PilotAlphabet, rng: &mut R) -> DVector<Complex64> {
    DVector::from_fn(tau, |_, _| match alphabet {
        PilotAlphabet::Qpsk => {
            let k = rng.random_range(0..4) as f64;
            Complex64::from_polar(1.0, PI / 4.0 + k * PI / 2.0)
        }
        PilotAlphabet::RandomPhase => Complex64::from_polar(1.0, rng.random_range(0.0..TAU)),
    })
}

/// Phase-I frame of `tau` random-phase pilots.
pub fn gen_pilots<R: Rng + ?Sized>(tau: usize, rng: &mut R) -> Result<PilotFrame> {
    gen_pilots_with(tau, PilotAlphabet::default(), rng)
}

pub fn gen_pilots_with<R: Rng + ?Sized>(tau: usize, alphabet: PilotAlphabet, rng: &mut R) -> Result<PilotFrame> {
    if tau == 0 {
        return Err(Error::InvalidArgument("pilot length must be >= 1".into()));
    }
    PilotFrame::direct(pilot_symbols(tau, alphabet, rng))
}

/// DFT training patterns `u^(s)_n = exp(-j 2 pi s n / N)`, `s = 0..N`.
pub fn dft_patterns(n: usize) -> Vec<PhaseVector> {
    (0..n)
        .map(|s| PhaseVector::from_angles((0..n).map(|k| -TAU * (s * k) as f64 / n as f64).collect::<Vec<_>>()))
        .collect()
}

/// `[[Re A, -Im A], [Im A, Re A]]`.
pub fn real_stack(a: &DMatrix<Complex64>) -> DMatrix<f64> {
    let (r, c) = a.shape();
    let mut out = DMatrix::zeros(2 * r, 2 * c);
    for j in 0..c {
        for i in 0..r {
            let z = a[(i, j)];
            out[(i, j)] = z.re;
            out[(i, c + j)] = -z.im;
            out[(r + i, j)] = z.im;
            out[(r + i, c + j)] = z.re;
        }
    }
    out
}

pub fn to_real(h: &DVector<Complex64>) -> DVector<f64> {
    let n = h.len();
    DVector::from_fn(2 * n, |i, _| if i < n { h[i].re } else { h[i - n].im })
}

pub fn to_complex(h: &DVector<f64>) -> DVector<Complex64> {
    let n = h.len() / 2;
    DVector::from_fn(n, |i, _| Complex64::new(h[i], h[n + i]))
}

/// `sgn(x)` with `sgn(0) = +1`.
fn sign(x: f64) -> f64 {
    if x < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Real-stacked 1-bit observation of one training phase.
#[derive(Debug, Clone, PartialEq)]
pub struct RealizedPilotSystem {
    pub phase: TrainingPhase,
    pub m: usize,
    /// Complex regressor `A`, one row per (sub-frame, slot, antenna).
    pub a: DMatrix<Complex64>,
    pub a_r: DMatrix<f64>,
    pub r_r: DVector<f64>,
    /// Sign-refined rows `r_i a_i`.
    pub a_tilde: DMatrix<f64>,
    /// Effective noise standard deviation of each real row.
    pub noise_std: DVector<f64>,
    /// Pilot symbol and antenna behind each complex row.
    pub row_pilot: Vec<Complex64>,
    pub row_antenna: Vec<usize>,
    pub sigma_w2: f64,
    pub sigma_e2: f64,
}

impl RealizedPilotSystem {
    /// Number of real unknowns.
    pub fn dim(&self) -> usize {
        self.a_r.ncols()
    }

    pub fn rows(&self) -> usize {
        self.a_r.nrows()
    }
}

/// Complex regressor of a frame for `m` antennas together with the pilot and
/// antenna of each row.
pub fn complex_regressor(frame: &PilotFrame, m: usize) -> (DMatrix<Complex64>, Vec<Complex64>, Vec<usize>) {
    let tau = frame.tau();
    match frame.phase {
        TrainingPhase::I => {
            let mut a = DMatrix::zeros(tau * m, m);
            let mut pilots = Vec::with_capacity(tau * m);
            let mut antennas = Vec::with_capacity(tau * m);
            for t in 0..tau {
                for k in 0..m {
                    a[(t * m + k, k)] = frame.a[t];
                    pilots.push(frame.a[t]);
                    antennas.push(k);
                }
            }
            (a, pilots, antennas)
        }
        TrainingPhase::II => {
            let n = frame.irs_pattern[0].len();
            let subframes = frame.irs_pattern.len();
            let rows = subframes * tau * m;
            let mut a = DMatrix::zeros(rows, m * n);
            let mut pilots = Vec::with_capacity(rows);
            let mut antennas = Vec::with_capacity(rows);
            for (s, pattern) in frame.irs_pattern.iter().enumerate() {
                for t in 0..tau {
                    for k in 0..m {
                        let row = (s * tau + t) * m + k;
                        for (col, u) in pattern.unit().iter().enumerate() {
                            a[(row, col * m + k)] = frame.a[t] * u;
                        }
                        pilots.push(frame.a[t]);
                        antennas.push(k);
                    }
                }
            }
            (a, pilots, antennas)
        }
    }
}

/// Unknown vector of a training phase: `h_d` or `vec(G diag(h_r))`.
pub fn true_unknown(ch: &ChannelSet, phase: TrainingPhase) -> Result<DVector<Complex64>> {
    match phase {
        TrainingPhase::I => Ok(ch.h_d.clone()),
        TrainingPhase::II => {
            let h = cascade_matrix(ch)?;
            Ok(DVector::from_column_slice(h.as_slice()))
        }
    }
}

fn complex_normal<R: Rng + ?Sized>(var: f64, rng: &mut R) -> Complex64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(s * re, s * im)
}

/// Simulate one training phase. In phase II the direct-channel residual is
/// drawn as `e_d ~ CN(0, sigma_e2 / M)`.
pub fn realize_system<R: Rng + ?Sized>(
    ch: &ChannelSet,
    frame: &PilotFrame,
    sigma_w2: f64,
    sigma_e2: Option<f64>,
    rng: &mut R,
) -> Result<RealizedPilotSystem> {
    realize_inner(ch, frame, sigma_w2, sigma_e2, None, rng)
}

/// Phase II with a given direct-channel residual `e_d = h_d - h_d_hat`.
pub fn realize_system_with_residual<R: Rng + ?Sized>(
    ch: &ChannelSet,
    frame: &PilotFrame,
    sigma_w2: f64,
    sigma_e2: f64,
    residual: &DVector<Complex64>,
    rng: &mut R,
) -> Result<RealizedPilotSystem> {
    if frame.phase != TrainingPhase::II {
        return Err(Error::InvalidArgument("a direct-channel residual only applies to phase II".into()));
    }
    realize_inner(ch, frame, sigma_w2, Some(sigma_e2), Some(residual), rng)
}

fn realize_inner<R: Rng + ?Sized>(
    ch: &ChannelSet,
    frame: &PilotFrame,
    sigma_w2: f64,
    sigma_e2: Option<f64>,
    residual: Option<&DVector<Complex64>>,
    rng: &mut R,
) -> Result<RealizedPilotSystem> {
    ch.validate()?;
    frame.validate()?;
    if !(sigma_w2 >= 0.0) || !sigma_w2.is_finite() {
        return Err(Error::InvalidArgument(format!("noise variance must be finite and >= 0, got {sigma_w2}")));
    }
    let m = ch.m();
    let sigma_e2 = match frame.phase {
        TrainingPhase::I => 0.0,
        TrainingPhase::II => {
            if ch.n() == 0 {
                return Err(Error::NoReflectingChannel);
            }
            if frame.irs_pattern[0].len() != ch.n() {
                return Err(Error::DimensionMismatch { what: "IRS pattern", expected: ch.n(), got: frame.irs_pattern[0].len() });
            }
            let v = sigma_e2.ok_or_else(|| Error::InvalidArgument("phase II needs the direct-channel error variance".into()))?;
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("error variance must be finite and >= 0, got {v}")));
            }
            v
        }
    };
    if let Some(e) = residual {
        if e.len() != m {
            return Err(Error::DimensionMismatch { what: "direct-channel residual", expected: m, got: e.len() });
        }
    }

    let (a, row_pilot, row_antenna) = complex_regressor(frame, m);
    let h = true_unknown(ch, frame.phase)?;
    let mut y = &a * &h;

    if frame.phase == TrainingPhase::II {
        let e_d = match residual {
            Some(e) => e.clone(),
            None if sigma_e2 > 0.0 => DVector::from_fn(m, |_, _| complex_normal(sigma_e2 / m as f64, rng)),
            None => DVector::zeros(m),
        };
        for (i, yi) in y.iter_mut().enumerate() {
            *yi += row_pilot[i] * e_d[row_antenna[i]];
        }
    }
    for yi in y.iter_mut() {
        *yi += complex_normal(sigma_w2, rng);
    }

    let rows = a.nrows();
    let a_r = real_stack(&a);
    let y_r = to_real(&y);
    let r_r = y_r.map(sign);
    let mut a_tilde = a_r.clone();
    for (i, mut row) in a_tilde.row_iter_mut().enumerate() {
        row *= r_r[i];
    }
    let per_row = |i: usize| ((sigma_e2 / m as f64) * row_pilot[i].norm_sqr() + sigma_w2).sqrt() / 2f64.sqrt();
    let noise_std = DVector::from_fn(2 * rows, |i, _| per_row(i % rows));

    Ok(RealizedPilotSystem {
        phase: frame.phase,
        m,
        a,
        a_r,
        r_r,
        a_tilde,
        noise_std,
        row_pilot,
        row_antenna,
        sigma_w2,
        sigma_e2,
    })
}

/// Rows of the refined regressor divided by their noise level, so the
/// likelihood reads `sum_i ln Phi(b_i^T h)`.
fn scaled_rows(sys: &RealizedPilotSystem) -> Result<DMatrix<f64>> {
    if sys.noise_std.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidArgument("the likelihood needs positive noise on every row".into()));
    }
    let mut b = sys.a_tilde.clone();
    for (i, mut row) in b.row_iter_mut().enumerate() {
        row /= sys.noise_std[i];
    }
    Ok(b)
}

/// Probit log-likelihood `sum_i ln Phi(a_tilde_i^T h / s_i)`.
pub fn log_likelihood(sys: &RealizedPilotSystem, h_r: &DVector<f64>) -> Result<f64> {
    if h_r.len() != sys.dim() {
        return Err(Error::DimensionMismatch { what: "real channel", expected: sys.dim(), got: h_r.len() });
    }
    let b = scaled_rows(sys)?;
    Ok((b * h_r).iter().map(|&z| gaussian::ln_cdf(z)).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlInit {
    #[default]
    Zero,
    LeastSquares,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlOptions {
    pub max_iters: usize,
    /// Stop once `||h_k - h_{k-1}|| < rel_step_tol * ||h_{k-1}||`.
    pub rel_step_tol: f64,
    /// Stop once `||grad|| <= grad_tol`.
    pub grad_tol: f64,
    pub armijo_c: f64,
    pub backtrack_ratio: f64,
    /// Norm bound per real dimension; the cap is `norm_cap * sqrt(d)`.
    pub norm_cap: f64,
    /// Largest trial step as a multiple of `1 / lambda_max(B^T B)`; 1 keeps
    /// the step fixed.
    pub max_step_growth: f64,
    pub init: MlInit,
}

impl Default for MlOptions {
    fn default() -> Self {
        Self {
            max_iters: 2_000,
            rel_step_tol: 1e-6,
            grad_tol: 1e-9,
            armijo_c: 1e-4,
            backtrack_ratio: 0.5,
            norm_cap: 1e3,
            max_step_growth: 1.0,
            init: MlInit::Zero,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimationResult {
    pub h_hat: DVector<Complex64>,
    pub iterations: usize,
    pub converged: bool,
    pub final_grad_norm: f64,
    /// Final log-likelihood for ML, NaN for the linear estimators.
    pub objective: f64,
    /// The LMMSE solve needed a diagonal ridge.
    pub regularized: bool,
}

impl EstimationResult {
    /// Reshape a phase-II estimate into the `M x N` cascade matrix.
    pub fn as_matrix(&self, m: usize) -> Result<DMatrix<Complex64>> {
        if m == 0 || self.h_hat.len() % m != 0 {
            return Err(Error::DimensionMismatch { what: "estimate length", expected: m, got: self.h_hat.len() });
        }
        Ok(DMatrix::from_column_slice(m, self.h_hat.len() / m, self.h_hat.as_slice()))
    }
}

fn likelihood_and_gradient(b: &DMatrix<f64>, h: &DVector<f64>) -> (f64, DVector<f64>) {
    let mut z = b * h;
    let mut f = 0.0;
    for v in z.iter_mut() {
        let (l, lam) = gaussian::ln_cdf_and_mills(*v);
        f += l;
        *v = lam;
    }
    (f, b.tr_mul(&z))
}

/// Gradient ascent on a probit likelihood with rows `b`.
///
/// `-ln Phi` has curvature at most 1, so `1 / lambda_max(B^T B)` always
/// passes the Armijo test in exact arithmetic. Backtracking only acts when
/// `max_step_growth > 1` lets the trial step exceed it.
fn probit_ascent(b: &DMatrix<f64>, start: DVector<f64>, opts: &MlOptions) -> Result<(DVector<f64>, f64, usize, bool, f64)> {
    let d = b.ncols();
    let lipschitz = SymmetricEigen::new(b.tr_mul(b)).eigenvalues.iter().copied().fold(0.0, f64::max);
    if !(lipschitz > 0.0) {
        return Err(Error::RankDeficient { dimension: 0, columns: d });
    }
    let base = 1.0 / lipschitz;
    let cap = opts.norm_cap * (d as f64).sqrt();

    let mut h = start;
    let (mut f, mut g) = likelihood_and_gradient(b, &h);
    let mut step = base;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iters {
        let gn = g.norm();
        if gn <= opts.grad_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let mut t = step;
        let (cand, fc, gc, ok) = loop {
            let cand = &h + &g * t;
            let (fc, gc) = likelihood_and_gradient(b, &cand);
            if fc >= f + opts.armijo_c * t * gn * gn {
                break (cand, fc, gc, true);
            }
            if t <= base {
                break (cand, fc, gc, false);
            }
            t = (t * opts.backtrack_ratio).max(base);
        };
        if !ok {
            // the safe step failing means its gain is below rounding
            if base * gn * gn <= 1e-10 * (1.0 + f.abs()) {
                converged = true;
                break;
            }
            return Err(Error::Divergence { before: f, after: fc });
        }
        let (mut next, mut fn_, mut gnext) = (cand, fc, gc);
        let mut capped = false;
        let norm = next.norm();
        if norm > cap {
            // on the segment [h, next], so concavity keeps the objective from dropping
            next *= cap / norm;
            (fn_, gnext) = likelihood_and_gradient(b, &next);
            capped = true;
        }
        if !(fn_ >= f) {
            return Err(Error::Divergence { before: f, after: fn_ });
        }
        let moved = (&next - &h).norm();
        let prev_norm = h.norm();
        h = next;
        f = fn_;
        g = gnext;
        if capped {
            break;
        }
        if moved < opts.rel_step_tol * prev_norm {
            converged = true;
            break;
        }
        step = (t / opts.backtrack_ratio).min(base * opts.max_step_growth.max(1.0));
    }
    let gn = g.norm();
    Ok((h, f, iterations, converged, gn))
}

fn ml_estimate(sys: &RealizedPilotSystem, opts: &MlOptions) -> Result<EstimationResult> {
    if opts.max_iters == 0 || !(opts.norm_cap > 0.0) || !(opts.rel_step_tol > 0.0) {
        return Err(Error::InvalidArgument("ML options must be positive".into()));
    }
    let b = scaled_rows(sys)?;
    let start = match opts.init {
        MlInit::Zero => DVector::zeros(sys.dim()),
        MlInit::LeastSquares => to_real(&ls_estimate(sys, 1.0)?.h_hat),
    };
    let (h, f, iterations, converged, gn) = probit_ascent(&b, start, opts)?;
    Ok(EstimationResult {
        h_hat: to_complex(&h),
        iterations,
        converged,
        final_grad_norm: gn,
        objective: f,
        regularized: false,
    })
}

/// ML estimate of the direct channel from a phase-I system.
pub fn ml_direct(sys: &RealizedPilotSystem, opts: &MlOptions) -> Result<EstimationResult> {
    if sys.phase != TrainingPhase::I {
        return Err(Error::InvalidArgument("ml_direct expects a phase I system".into()));
    }
    ml_estimate(sys, opts)
}

/// ML estimate of `vec(H)` from a phase-II system; the residual inflation is
/// already part of the per-row noise levels.
pub fn ml_reflect(sys: &RealizedPilotSystem, opts: &MlOptions) -> Result<EstimationResult> {
    if sys.phase != TrainingPhase::II {
        return Err(Error::InvalidArgument("ml_reflect expects a phase II system".into()));
    }
    ml_estimate(sys, opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorVarianceScale {
    /// `sigma_e2 = sqrt(2) tr(J^-1)`.
    #[default]
    Sqrt2,
    /// `sigma_e2 = tr(J^-1)`.
    Unit,
}

impl ErrorVarianceScale {
    pub fn factor(self) -> f64 {
        match self {
            Self::Sqrt2 => std::f64::consts::SQRT_2,
            Self::Unit => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherInfo {
    pub j: DMatrix<f64>,
    /// `tr(J^-1)`, infinite when `J` is singular.
    pub crlb_trace: f64,
    pub sigma_e2: f64,
    pub singular: bool,
}

impl FisherInfo {
    pub fn sigma_e2_scaled(&self, scale: ErrorVarianceScale) -> f64 {
        scale.factor() * self.crlb_trace
    }
}

/// Fisher information of sign observations `sgn(a_i^T h + n_i)`,
/// `n_i ~ N(0, s_i^2)`: `J = sum_i phi(z_i)^2 / (Phi(z_i) Phi(-z_i)) b_i b_i^T`
/// with `b_i = a_i / s_i` and `z_i = b_i^T h`.
pub fn fisher_rows(a_r: &DMatrix<f64>, noise_std: &DVector<f64>, h_r: &DVector<f64>) -> Result<FisherInfo> {
    if a_r.ncols() != h_r.len() {
        return Err(Error::DimensionMismatch { what: "real channel", expected: a_r.ncols(), got: h_r.len() });
    }
    if noise_std.len() != a_r.nrows() {
        return Err(Error::DimensionMismatch { what: "noise levels", expected: a_r.nrows(), got: noise_std.len() });
    }
    if noise_std.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidArgument("Fisher information needs positive noise".into()));
    }
    let d = a_r.ncols();
    let mut b = a_r.clone();
    for (i, mut row) in b.row_iter_mut().enumerate() {
        row /= noise_std[i];
    }
    let z = &b * h_r;
    // phi^2 / (Phi(z) Phi(-z)) as a product of inverse Mills ratios stays finite in the tails
    let w = z.map(|v| gaussian::inv_mills(v) * gaussian::inv_mills(-v));
    let mut bw = b.clone();
    for (i, mut row) in bw.row_iter_mut().enumerate() {
        row *= w[i];
    }
    let mut j = bw.tr_mul(&b);
    j = (&j + j.transpose()) * 0.5;
    let scale = j.diagonal().iter().copied().fold(0.0, f64::max);
    let eig = SymmetricEigen::new(j.clone()).eigenvalues;
    let max_eig = eig.iter().copied().fold(0.0, f64::max);
    let min_eig = eig.iter().copied().fold(f64::INFINITY, f64::min);
    // numerical rank test
    let invertible = scale > 0.0 && min_eig > d as f64 * f64::EPSILON * max_eig;
    let crlb_trace = if invertible {
        match Cholesky::new(j.clone()) {
            Some(ch) => ch.inverse().trace(),
            None => f64::INFINITY,
        }
    } else {
        f64::INFINITY
    };
    let singular = !crlb_trace.is_finite();
    debug_assert_eq!(j.nrows(), d);
    Ok(FisherInfo {
        j,
        crlb_trace,
        sigma_e2: ErrorVarianceScale::Sqrt2.factor() * crlb_trace,
        singular,
    })
}

/// Fisher information with white noise `sigma_w2 / 2` per real row.
pub fn fisher_matrix(a_r: &DMatrix<f64>, h_r: &DVector<f64>, sigma_w2: f64) -> Result<FisherInfo> {
    if !(sigma_w2 > 0.0) {
        return Err(Error::InvalidArgument("noise variance must be positive".into()));
    }
    let s = DVector::from_element(a_r.nrows(), (sigma_w2 / 2.0).sqrt());
    fisher_rows(a_r, &s, h_r)
}

/// Fisher information of a realized system at `h`.
pub fn fisher_for_system(sys: &RealizedPilotSystem, h: &DVector<Complex64>) -> Result<FisherInfo> {
    fisher_rows(&sys.a_r, &sys.noise_std, &to_real(h))
}

fn check_prior(prior_var: f64) -> Result<()> {
    if !(prior_var > 0.0) || !prior_var.is_finite() {
        return Err(Error::InvalidArgument(format!("prior variance must be positive, got {prior_var}")));
    }
    Ok(())
}

/// Standard deviation of each real observation under the prior `CN(0, p I)`.
fn output_std(sys: &RealizedPilotSystem, prior_var: f64) -> DVector<f64> {
    DVector::from_fn(sys.rows(), |i, _| {
        let row = sys.a_r.row(i);
        (0.5 * prior_var * row.norm_squared() + sys.noise_std[i].powi(2)).sqrt()
    })
}

/// Bussgang-scaled least squares.
pub fn ls_estimate(sys: &RealizedPilotSystem, prior_var: f64) -> Result<EstimationResult> {
    check_prior(prior_var)?;
    let a = &sys.a_r;
    let d = a.ncols();
    let gram = a.tr_mul(a);
    let eig = SymmetricEigen::new(gram.clone());
    let lam_max = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let (imin, lam_min) = eig
        .eigenvalues
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::INFINITY), |b, (i, v)| if v < b.1 { (i, v) } else { b });
    if !(lam_max > 0.0) || lam_min <= 1e-10 * lam_max {
        let v = eig.eigenvectors.column(imin);
        let dimension = v.iamax();
        return Err(Error::RankDeficient { dimension, columns: d });
    }
    let scaled = output_std(sys, prior_var).component_mul(&sys.r_r) * (PI / 2.0).sqrt();
    let rhs = a.tr_mul(&scaled);
    let chol = Cholesky::new(gram).ok_or(Error::RankDeficient { dimension: imin, columns: d })?;
    let h = chol.solve(&rhs);
    Ok(EstimationResult {
        h_hat: to_complex(&h),
        iterations: 0,
        converged: true,
        final_grad_norm: f64::NAN,
        objective: f64::NAN,
        regularized: false,
    })
}

/// Analytic second moments of one independent block of the LMMSE problem.
#[derive(Debug, Clone, PartialEq)]
pub struct LmmseBlock {
    /// Real row indices.
    pub rows: Vec<usize>,
    /// Real column indices.
    pub cols: Vec<usize>,
    /// `E[h_R r_R^T]` restricted to the block.
    pub c_hr: DMatrix<f64>,
    /// `E[r_R r_R^T]` restricted to the block.
    pub c_rr: DMatrix<f64>,
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Group complex rows that share a column or, with a residual, an antenna.
fn complex_components(sys: &RealizedPilotSystem) -> Vec<(Vec<usize>, Vec<usize>)> {
    let (rows, cols) = sys.a.shape();
    // nodes: rows, then columns, then antennas
    let mut parent: Vec<usize> = (0..rows + cols + sys.m).collect();
    let union = |p: &mut Vec<usize>, a: usize, b: usize| {
        let (ra, rb) = (find(p, a), find(p, b));
        if ra != rb {
            p[ra] = rb;
        }
    };
    for i in 0..rows {
        for j in 0..cols {
            if sys.a[(i, j)].norm() > 0.0 {
                union(&mut parent, i, rows + j);
            }
        }
        if sys.sigma_e2 > 0.0 {
            union(&mut parent, i, rows + cols + sys.row_antenna[i]);
        }
    }
    let mut groups: std::collections::BTreeMap<usize, (Vec<usize>, Vec<usize>)> = Default::default();
    for i in 0..rows {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().0.push(i);
    }
    for j in 0..cols {
        let r = find(&mut parent, rows + j);
        groups.entry(r).or_default().1.push(j);
    }
    groups.into_values().filter(|(r, _)| !r.is_empty()).collect()
}

/// Second moments of `(h_R, r_R)` under `h ~ CN(0, p I)`, white noise and,
/// in phase II, a residual `e_d ~ CN(0, sigma_e2 / M)` shared by all rows of
/// an antenna.
pub fn lmmse_covariances(sys: &RealizedPilotSystem, prior_var: f64) -> Result<Vec<LmmseBlock>> {
    check_prior(prior_var)?;
    let (rows_c, cols_c) = sys.a.shape();
    let e_var = sys.sigma_e2 / sys.m as f64;
    let mut blocks = Vec::new();
    for (crow, ccol) in complex_components(sys) {
        let nr = crow.len();
        let nc = ccol.len();
        let a_sub = DMatrix::from_fn(nr, nc, |i, j| sys.a[(crow[i], ccol[j])]);
        // complex covariance of y restricted to the block
        let mut k = &a_sub * a_sub.adjoint() * Complex64::new(prior_var, 0.0);
        for i in 0..nr {
            k[(i, i)] += Complex64::new(sys.sigma_w2, 0.0);
            if e_var > 0.0 {
                for j in 0..nr {
                    if sys.row_antenna[crow[i]] == sys.row_antenna[crow[j]] {
                        k[(i, j)] += sys.row_pilot[crow[i]] * sys.row_pilot[crow[j]].conj() * e_var;
                    }
                }
            }
        }
        let c_yy = real_stack(&k) * 0.5;
        let d_inv_sqrt: Vec<f64> = (0..2 * nr).map(|i| 1.0 / c_yy[(i, i)].sqrt()).collect();
        let c_rr = DMatrix::from_fn(2 * nr, 2 * nr, |i, j| {
            if i == j {
                1.0
            } else {
                // asin has infinite slope at 1, so keep identical rows exactly correlated
                FRAC_2_PI * (c_yy[(i, j)] / (c_yy[(i, i)] * c_yy[(j, j)]).sqrt()).clamp(-1.0, 1.0).asin()
            }
        });
        let a_r_sub = real_stack(&a_sub);
        let gain = (FRAC_2_PI).sqrt() * 0.5 * prior_var;
        let mut c_hr = a_r_sub.transpose() * gain;
        for (j, mut col) in c_hr.column_iter_mut().enumerate() {
            col *= d_inv_sqrt[j];
        }
        let rows: Vec<usize> = crow.iter().copied().chain(crow.iter().map(|i| i + rows_c)).collect();
        let cols: Vec<usize> = ccol.iter().copied().chain(ccol.iter().map(|j| j + cols_c)).collect();
        blocks.push(LmmseBlock { rows, cols, c_hr, c_rr });
    }
    Ok(blocks)
}

const RIDGE: f64 = 1e-10;

/// Bussgang LMMSE estimate under the prior `CN(0, prior_var I)`.
pub fn lmmse_estimate(sys: &RealizedPilotSystem, prior_var: f64) -> Result<EstimationResult> {
    let mut h = DVector::zeros(sys.dim());
    let mut regularized = false;
    for block in lmmse_covariances(sys, prior_var)? {
        let r = DVector::from_iterator(block.rows.len(), block.rows.iter().map(|&i| sys.r_r[i]));
        // unit diagonal, so a tiny pivot means C_rr is singular up to rounding
        let chol = match Cholesky::new(block.c_rr.clone()).filter(|c| c.l_dirty().diagonal().min().powi(2) > RIDGE) {
            Some(c) => c,
            None => {
                regularized = true;
                let n = block.c_rr.nrows();
                Cholesky::new(&block.c_rr + DMatrix::identity(n, n) * RIDGE)
                    .ok_or(Error::NotPsd { min_eigenvalue: f64::NAN })?
            }
        };
        let est = &block.c_hr * chol.solve(&r);
        for (k, &j) in block.cols.iter().enumerate() {
            h[j] = est[k];
        }
    }
    Ok(EstimationResult {
        h_hat: to_complex(&h),
        iterations: 0,
        converged: true,
        final_grad_norm: f64::NAN,
        objective: f64::NAN,
        regularized,
    })
}

/// `||h_hat - h||^2 / ||h||^2`.
pub fn nmse(h_hat: &DVector<Complex64>, h_true: &DVector<Complex64>) -> Result<f64> {
    if h_hat.len() != h_true.len() {
        return Err(Error::DimensionMismatch { what: "estimate", expected: h_true.len(), got: h_hat.len() });
    }
    let energy = h_true.norm_squared();
    if !(energy > 0.0) {
        return Err(Error::InvalidArgument("true channel has zero energy".into()));
    }
    Ok((h_hat - h_true).norm_squared() / energy)
}
