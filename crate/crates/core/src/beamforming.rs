//! Passive beamforming: choose the IRS phases to maximize the quantized rate.
//!
//! Four designs are provided:
//!
//! * semidefinite relaxation of the low-SNR objective, solved with a
//!   low-rank (Burer-Monteiro) factorization and rounded by Gaussian
//!   randomization;
//! * gradient ascent on the full Bussgang rate objective with Armijo
//!   backtracking and random restarts;
//! * phase matching, which co-phases every reflected path with the direct one;
//! * an exhaustive search over a uniform phase grid, used as a reference.

use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::channel_model::{cascade_matrix, ChannelSet, PhaseVector};
use crate::error::{Error, Result};

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };
const ONE: Complex64 = Complex64 { re: 1.0, im: 0.0 };

/// Which quantity a phase design is scored with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// `||h||^2 / sigma_w2`, the low-SNR trace objective.
    LowSnr,
    /// `sum_k |h_k|^2 / (sigma_w2 + rho_q |h_k|^2)`, the full-rate objective.
    FullRate,
}

fn check_phases(ch: &ChannelSet, u: &PhaseVector) -> Result<()> {
    ch.validate()?;
    if u.len() != ch.n() {
        return Err(Error::DimensionMismatch {
            what: "phase vector",
            expected: ch.n(),
            got: u.len(),
        });
    }
    Ok(())
}

fn reflected(ch: &ChannelSet, u: &PhaseVector) -> Result<DVector<Complex64>> {
    if ch.n() == 0 {
        return Ok(DVector::zeros(ch.m()));
    }
    Ok(cascade_matrix(ch)? * u.unit())
}

fn full_rate_value(h: &DVector<Complex64>, sigma_w2: f64, rho_q: f64) -> f64 {
    h.iter()
        .map(|z| {
            let p = z.norm_sqr();
            p / (sigma_w2 + rho_q * p)
        })
        .sum()
}

/// Low-SNR objective `tr(R_ww^-1 h h^H)` expanded into its linear, quadratic
/// and constant parts in `u`.
pub fn objective_trace(ch: &ChannelSet, u: &PhaseVector, sigma_w2: f64) -> Result<f64> {
    check_phases(ch, u)?;
    let refl = reflected(ch, u)?;
    let linear = 2.0 * ch.h_d.dotc(&refl).re;
    let quadratic = refl.norm_squared();
    let constant = ch.h_d.norm_squared();
    Ok((linear + quadratic + constant) / sigma_w2)
}

/// Full-rate objective `Gamma(theta) = h^H (R_ww + rho_q diag(h h^H))^-1 h`.
///
/// Transmit power enters only through the ratio `sigma_w2 / sigma_x2`, so
/// pass that ratio as `sigma_w2` when `sigma_x2 != 1`.
pub fn rate_objective(ch: &ChannelSet, theta: &PhaseVector, sigma_w2: f64, rho_q: f64) -> Result<f64> {
    check_phases(ch, theta)?;
    let h = &ch.h_d + reflected(ch, theta)?;
    Ok(full_rate_value(&h, sigma_w2, rho_q))
}

pub fn evaluate(ch: &ChannelSet, u: &PhaseVector, sigma_w2: f64, rho_q: f64, objective: Objective) -> Result<f64> {
    match objective {
        Objective::LowSnr => objective_trace(ch, u, sigma_w2),
        Objective::FullRate => rate_objective(ch, u, sigma_w2, rho_q),
    }
}

/// Homogenized quadratic form of the low-SNR objective.
///
/// With `ubar = [u; t]`, `ubar^H C ubar + const_term` equals the trace
/// objective at `u * conj(t)` whenever `|t| = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct HomogenizedObjective {
    /// `[[Q, c], [c^H, 0]]`, Hermitian, `(N+1) x (N+1)`.
    pub c_mat: DMatrix<Complex64>,
    /// `diag(h_r)^H G^H G diag(h_r) / sigma_w2`.
    pub q: DMatrix<Complex64>,
    /// `diag(h_r)^H G^H h_d / sigma_w2`.
    pub c: DVector<Complex64>,
    /// `||h_d||^2 / sigma_w2`.
    pub const_term: f64,
}

impl HomogenizedObjective {
    pub fn n(&self) -> usize {
        self.c.len()
    }

    /// Trace objective at a unit-modulus `u`.
    pub fn value(&self, u: &PhaseVector) -> f64 {
        let u = u.unit();
        (u.dotc(&(&self.q * u))).re + 2.0 * self.c.dotc(u).re + self.const_term
    }

    /// `ubar^H C ubar + const_term` for a lifted vector.
    pub fn lifted_value(&self, ubar: &DVector<Complex64>) -> f64 {
        ubar.dotc(&(&self.c_mat * ubar)).re + self.const_term
    }
}

pub fn homogenize(ch: &ChannelSet, sigma_w2: f64) -> Result<HomogenizedObjective> {
    let h = cascade_matrix(ch)?;
    let n = ch.n();
    let q = h.adjoint() * &h / Complex64::new(sigma_w2, 0.0);
    let c = h.adjoint() * &ch.h_d / Complex64::new(sigma_w2, 0.0);
    let mut c_mat = DMatrix::zeros(n + 1, n + 1);
    c_mat.view_mut((0, 0), (n, n)).copy_from(&q);
    for i in 0..n {
        c_mat[(i, n)] = c[i];
        c_mat[(n, i)] = c[i].conj();
    }
    Ok(HomogenizedObjective {
        c_mat,
        q,
        c,
        const_term: ch.h_d.norm_squared() / sigma_w2,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdrOptions {
    /// Factorization rank; `None` picks `ceil(sqrt(2 (N + 1)))`.
    pub rank: Option<usize>,
    pub restarts: usize,
    pub max_sweeps: usize,
    /// Stop sweeping once the objective gains less than this, relatively.
    pub step_tol: f64,
    /// Accept a solution whose dual residual is below this, relative to `max |C_ij|`.
    pub residual_tol: f64,
    pub randomizations: usize,
}

impl Default for SdrOptions {
    fn default() -> Self {
        Self {
            rank: None,
            restarts: 10,
            max_sweeps: 20_000,
            step_tol: 1e-13,
            residual_tol: 1e-7,
            randomizations: 200,
        }
    }
}

/// Solution of the unit-diagonal SDP `max tr(C U), U >= 0, U_ii = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct SdpSolution {
    pub u_mat: DMatrix<Complex64>,
    /// `tr(C U) + const_term` at the returned `U`.
    pub value: f64,
    /// Weak-duality bound on the trace objective: `value` plus `(N+1)` times
    /// the most negative eigenvalue of the dual slack `diag(y) - C`.
    pub upper_bound: f64,
    /// Dual infeasibility relative to `max |C_ij|`.
    pub residual: f64,
    pub sweeps: usize,
}

fn random_unit_rows<R: Rng + ?Sized>(n: usize, p: usize, rng: &mut R) -> DMatrix<Complex64> {
    let mut v = DMatrix::from_fn(n, p, |_, _| {
        Complex64::new(StandardNormal.sample(rng), StandardNormal.sample(rng))
    });
    for mut row in v.row_iter_mut() {
        let norm = row.norm();
        row /= Complex64::new(norm, 0.0);
    }
    v
}

fn trace_cu(c: &DMatrix<Complex64>, v: &DMatrix<Complex64>) -> f64 {
    // tr(C V V^H) = sum_ij C_ij <v_j, v_i>
    let cv = c * v;
    v.iter().zip(cv.iter()).map(|(a, b)| (a.conj() * b).re).sum()
}

/// Dual multipliers `y_i = Re (C U)_ii` and the smallest eigenvalue of `diag(y) - C`.
fn dual_check(c: &DMatrix<Complex64>, v: &DMatrix<Complex64>) -> f64 {
    let n = c.nrows();
    let cv = c * v;
    let mut slack = -c.clone();
    for i in 0..n {
        let y: f64 = v.row(i).iter().zip(cv.row(i).iter()).map(|(a, b)| (a.conj() * b).re).sum();
        slack[(i, i)] += Complex64::new(y, 0.0);
    }
    let eig = SymmetricEigen::new(slack).eigenvalues;
    eig.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Row-wise block-coordinate ascent on `tr(C V V^H)` with unit-norm rows.
///
/// Each row is replaced by the normalized sum `sum_{j != i} C_ij v_j`, which
/// is the exact maximizer of the objective in that row.
fn mix<R: Rng + ?Sized>(c: &DMatrix<Complex64>, p: usize, opts: &SdrOptions, rng: &mut R) -> (DMatrix<Complex64>, f64, usize) {
    let n = c.nrows();
    let mut v = random_unit_rows(n, p, rng);
    let mut f = trace_cu(c, &v);
    let mut sweeps = 0;
    let mut g = DVector::<Complex64>::zeros(p);
    while sweeps < opts.max_sweeps {
        sweeps += 1;
        for i in 0..n {
            g.fill(ZERO);
            for j in 0..n {
                if j != i {
                    let cij = c[(i, j)];
                    if cij != ZERO {
                        for k in 0..p {
                            g[k] += cij * v[(j, k)];
                        }
                    }
                }
            }
            let norm = g.norm();
            if norm > 0.0 {
                for k in 0..p {
                    v[(i, k)] = g[k] / norm;
                }
            }
        }
        let next = trace_cu(c, &v);
        let gain = next - f;
        f = next;
        if gain <= opts.step_tol * (1.0 + f.abs()) {
            break;
        }
    }
    (v, f, sweeps)
}

pub fn solve_sdr<R: Rng + ?Sized>(obj: &HomogenizedObjective, opts: &SdrOptions, rng: &mut R) -> Result<SdpSolution> {
    let c = &obj.c_mat;
    let n = c.nrows();
    if n == 0 || c.ncols() != n {
        return Err(Error::InvalidArgument("homogenized matrix must be square and nonempty".into()));
    }
    let herm_err = (c - c.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max);
    let scale = c.iter().map(|z| z.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    if herm_err > 1e-12 * scale.max(1.0) {
        return Err(Error::InvalidArgument(format!("matrix is not Hermitian (error {herm_err:e})")));
    }
    let p = opts
        .rank
        .unwrap_or_else(|| ((2.0 * n as f64).sqrt().ceil() as usize).max(2))
        .min(n)
        .max(1);

    let mut best: Option<(DMatrix<Complex64>, f64, f64, usize)> = None;
    let mut total_sweeps = 0;
    for _ in 0..opts.restarts.max(1) {
        let (v, f, sweeps) = mix(c, p, opts, rng);
        total_sweeps += sweeps;
        let lam_min = dual_check(c, &v);
        let residual = (-lam_min).max(0.0) / scale;
        let better = match &best {
            None => true,
            Some((_, bf, br, _)) => f > *bf + 1e-12 * (1.0 + bf.abs()) || (f >= *bf - 1e-12 * (1.0 + bf.abs()) && residual < *br),
        };
        if better {
            best = Some((v, f, residual, sweeps));
        }
    }
    let (v, f, residual, sweeps) = best.expect("at least one restart");
    let value = f + obj.const_term;
    if residual > opts.residual_tol {
        return Err(Error::NonConvergence {
            iterations: total_sweeps,
            residual,
            best_value: value,
        });
    }
    let u_mat = &v * v.adjoint();
    Ok(SdpSolution {
        u_mat,
        value,
        upper_bound: value + n as f64 * residual * scale,
        residual,
        sweeps,
    })
}

/// Gaussian randomization: sample `ubar = T Sigma^(1/2) gamma` from the
/// eigendecomposition `U = T Sigma T^H`, project each draw to unit modulus
/// relative to its last entry and keep the best.
pub fn randomize_round<R: Rng + ?Sized>(
    u_mat: &DMatrix<Complex64>,
    obj: &HomogenizedObjective,
    count: usize,
    rng: &mut R,
) -> Result<(PhaseVector, f64)> {
    let dim = obj.n() + 1;
    if u_mat.shape() != (dim, dim) {
        return Err(Error::DimensionMismatch {
            what: "lifted matrix",
            expected: dim,
            got: u_mat.nrows(),
        });
    }
    if count == 0 {
        return Err(Error::InvalidArgument("need at least one randomization".into()));
    }
    let eig = SymmetricEigen::new(u_mat.clone());
    let lam_max = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let lam_min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if lam_min < -1e-8 * lam_max.max(1.0) {
        return Err(Error::NotPsd { min_eigenvalue: lam_min });
    }
    let mut factor = eig.eigenvectors.clone();
    for (j, mut col) in factor.column_iter_mut().enumerate() {
        // eigenvalues at round-off level would inject O(sqrt(eps)) noise
        let lam = eig.eigenvalues[j];
        let lam = if lam > 1e-12 * lam_max { lam } else { 0.0 };
        col *= Complex64::new(lam.sqrt(), 0.0);
    }

    let n = obj.n();
    let mut best: Option<(PhaseVector, f64)> = None;
    for _ in 0..count {
        let gamma = DVector::from_fn(dim, |_, _| {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
        });
        let ubar = &factor * gamma;
        let anchor = ubar[n];
        let cand = if anchor.norm() > 0.0 {
            PhaseVector::from_phases_of(ubar.rows(0, n).iter().map(|z| z / anchor))
        } else {
            PhaseVector::from_phases_of(ubar.rows(0, n).iter().copied())
        };
        let value = obj.value(&cand);
        if best.as_ref().is_none_or(|(_, b)| value > *b) {
            best = Some((cand, value));
        }
    }
    Ok(best.expect("count >= 1"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdrSolution {
    pub u_mat: DMatrix<Complex64>,
    pub upper_bound: f64,
    pub relaxed_value: f64,
    pub residual: f64,
    pub rounded: PhaseVector,
    pub rounded_value: f64,
    pub randomization_count: usize,
}

/// Relax, solve and round the low-SNR design problem.
pub fn sdr_beamform<R: Rng + ?Sized>(ch: &ChannelSet, sigma_w2: f64, opts: &SdrOptions, rng: &mut R) -> Result<SdrSolution> {
    let obj = homogenize(ch, sigma_w2)?;
    let sol = solve_sdr(&obj, opts, rng)?;
    let (rounded, rounded_value) = randomize_round(&sol.u_mat, &obj, opts.randomizations, rng)?;
    Ok(SdrSolution {
        u_mat: sol.u_mat,
        upper_bound: sol.upper_bound,
        relaxed_value: sol.value,
        residual: sol.residual,
        rounded,
        rounded_value,
        randomization_count: opts.randomizations,
    })
}

/// Gradient of the full-rate objective with respect to the phase angles.
///
/// With `h = h_d + H u`, `H = G diag(h_r)` and weights
/// `w_k = sigma^2 / (sigma^2 + rho |h_k|^2)^2`,
/// `dGamma/dtheta_i = -2 Im(u_i sum_k w_k conj(h_k) H_ki)`.
pub fn rate_gradient(ch: &ChannelSet, theta: &PhaseVector, sigma_w2: f64, rho_q: f64) -> Result<Vec<f64>> {
    check_phases(ch, theta)?;
    if ch.n() == 0 {
        return Ok(Vec::new());
    }
    let h_casc = cascade_matrix(ch)?;
    let h = &ch.h_d + &h_casc * theta.unit();
    Ok(gradient_with(&h_casc, &h, theta, sigma_w2, rho_q))
}

fn gradient_with(h_casc: &DMatrix<Complex64>, h: &DVector<Complex64>, theta: &PhaseVector, sigma_w2: f64, rho_q: f64) -> Vec<f64> {
    let weighted = DVector::from_iterator(
        h.len(),
        h.iter().map(|z| {
            let d = sigma_w2 + rho_q * z.norm_sqr();
            z * (sigma_w2 / (d * d))
        }),
    );
    // s_i = sum_k w_k conj(h_k) H_ki = (H^T conj(w h))_i
    let s = h_casc.tr_mul(&weighted.conjugate());
    theta
        .unit()
        .iter()
        .zip(s.iter())
        .map(|(u, s)| -2.0 * (u * s).im)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GdConfig {
    pub max_iters: usize,
    pub step_init: f64,
    pub armijo_c: f64,
    pub backtrack_ratio: f64,
    /// Stop when `||grad||_inf <= grad_tol * (1 + Gamma)`.
    pub grad_tol: f64,
    pub restarts: usize,
}

impl Default for GdConfig {
    fn default() -> Self {
        Self {
            max_iters: 2_000,
            step_init: 1.0,
            armijo_c: 1e-4,
            backtrack_ratio: 0.5,
            grad_tol: 1e-8,
            restarts: 10,
        }
    }
}

impl GdConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| x > 0.0 && x < 1.0;
        if self.max_iters == 0 || self.restarts == 0 || !(self.step_init > 0.0) || !(self.grad_tol > 0.0) {
            return Err(Error::InvalidArgument("gradient settings must be positive".into()));
        }
        if !unit(self.armijo_c) || !unit(self.backtrack_ratio) {
            return Err(Error::InvalidArgument("armijo_c and backtrack_ratio must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// One ascent run from a fixed start.
#[derive(Debug, Clone, PartialEq)]
pub struct GdRun {
    pub phases: PhaseVector,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after every accepted step, starting with the initial value.
    pub history: Vec<f64>,
}

const MAX_STEP_GROWTH: f64 = 1e8;

pub fn gd_ascent(ch: &ChannelSet, sigma_w2: f64, rho_q: f64, start: &PhaseVector, cfg: &GdConfig) -> Result<GdRun> {
    cfg.validate()?;
    check_phases(ch, start)?;
    if ch.n() == 0 {
        let value = full_rate_value(&ch.h_d, sigma_w2, rho_q);
        return Ok(GdRun { phases: start.clone(), value, iterations: 0, converged: true, history: vec![value] });
    }
    let h_casc = cascade_matrix(ch)?;
    let field = |p: &PhaseVector| &ch.h_d + &h_casc * p.unit();

    let mut theta = start.clone();
    let mut h = field(&theta);
    let mut value = full_rate_value(&h, sigma_w2, rho_q);
    let mut history = vec![value];
    let mut step = cfg.step_init;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iters {
        let grad = gradient_with(&h_casc, &h, &theta, sigma_w2, rho_q);
        let gmax = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
        if gmax <= cfg.grad_tol * (1.0 + value) {
            converged = true;
            break;
        }
        iterations += 1;
        let g2: f64 = grad.iter().map(|g| g * g).sum();
        let mut alpha = step;
        let accepted = loop {
            let cand = PhaseVector::from_angles(theta.angles().iter().zip(&grad).map(|(t, g)| t + alpha * g).collect::<Vec<_>>());
            let hc = field(&cand);
            let vc = full_rate_value(&hc, sigma_w2, rho_q);
            if vc >= value + cfg.armijo_c * alpha * g2 {
                break Some((cand, hc, vc));
            }
            alpha *= cfg.backtrack_ratio;
            if alpha * gmax < 1e-16 {
                break None;
            }
        };
        let Some((cand, hc, vc)) = accepted else {
            // no representable ascent step left
            converged = gmax <= 1e-6 * (1.0 + value);
            break;
        };
        if vc < value {
            return Err(Error::Divergence { before: value, after: vc });
        }
        theta = cand;
        h = hc;
        value = vc;
        history.push(value);
        step = (alpha / cfg.backtrack_ratio).min(cfg.step_init * MAX_STEP_GROWTH);
    }
    Ok(GdRun { phases: theta, value, iterations, converged, history })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GdOutcome {
    pub phases: PhaseVector,
    pub value: f64,
    /// Whether the winning run met the gradient tolerance.
    pub converged: bool,
    /// Accepted steps summed over all restarts.
    pub iterations: usize,
}

/// Best of `cfg.restarts` ascent runs from uniformly drawn phases.
pub fn gd_beamform<R: Rng + ?Sized>(ch: &ChannelSet, sigma_w2: f64, rho_q: f64, cfg: &GdConfig, rng: &mut R) -> Result<GdOutcome> {
    cfg.validate()?;
    let starts: Vec<PhaseVector> = (0..cfg.restarts).map(|_| PhaseVector::random(ch.n(), rng)).collect();
    let mut best: Option<GdRun> = None;
    let mut iterations = 0;
    for start in &starts {
        let run = gd_ascent(ch, sigma_w2, rho_q, start, cfg)?;
        iterations += run.iterations;
        if best.as_ref().is_none_or(|b| run.value > b.value) {
            best = Some(run);
        }
    }
    let best = best.expect("restarts >= 1");
    Ok(GdOutcome { phases: best.phases, value: best.value, converged: best.converged, iterations })
}

/// Phase matching: `theta_n = -arg(p_n)` with `p = h_d^H G diag(h_r)`, which
/// maximizes the linear term of the trace objective element by element.
pub fn phase_match(ch: &ChannelSet, _sigma_w2: f64) -> Result<PhaseVector> {
    let h = cascade_matrix(ch)?;
    let p = h.tr_mul(&ch.h_d.conjugate());
    Ok(PhaseVector::from_angles(p.iter().map(|z| if z.norm() == 0.0 { 0.0 } else { -z.arg() }).collect::<Vec<_>>()))
}

pub const ORACLE_LIMIT: f64 = 1e7;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub phases: PhaseVector,
    pub value: f64,
    /// Grid index of each element, `theta_n = 2 pi k_n / K`.
    pub grid: Vec<usize>,
}

/// Number of grid points `K^N`, as a float so it cannot overflow.
pub fn oracle_size(n: usize, k: usize) -> f64 {
    (k as f64).powi(n as i32)
}

/// Exhaustive search over `theta in {2 pi k / K}^N`.
///
/// Points are visited in lexicographic order and only strict improvements
/// replace the incumbent, so ties resolve to the lowest index.
pub fn brute_force_oracle(ch: &ChannelSet, sigma_w2: f64, rho_q: f64, k: usize, objective: Objective) -> Result<OracleResult> {
    ch.validate()?;
    if k == 0 {
        return Err(Error::InvalidArgument("grid size must be >= 1".into()));
    }
    let n = ch.n();
    let size = oracle_size(n, k);
    if size > ORACLE_LIMIT {
        return Err(Error::InstanceTooLarge { size, limit: ORACLE_LIMIT });
    }
    let score = |h: &DVector<Complex64>| match objective {
        Objective::LowSnr => h.norm_squared() / sigma_w2,
        Objective::FullRate => full_rate_value(h, sigma_w2, rho_q),
    };
    if n == 0 {
        return Ok(OracleResult { phases: PhaseVector::zeros(0), value: score(&ch.h_d), grid: Vec::new() });
    }
    let h_casc = cascade_matrix(ch)?;
    let phasors: Vec<Complex64> = (0..k).map(|i| Complex64::from_polar(1.0, TAU * i as f64 / k as f64)).collect();
    let rebuild = |idx: &[usize]| {
        let mut h = ch.h_d.clone();
        for (col, &i) in idx.iter().enumerate() {
            h.axpy(phasors[i], &h_casc.column(col), ONE);
        }
        h
    };

    let last = n - 1;
    let mut idx = vec![0usize; n];
    let mut h = rebuild(&idx);
    let mut best_idx = idx.clone();
    let mut best = score(&h);
    'outer: loop {
        // advance the odometer; the last element moves fastest
        let mut pos = last;
        loop {
            idx[pos] += 1;
            if idx[pos] < k {
                break;
            }
            idx[pos] = 0;
            if pos == 0 {
                break 'outer;
            }
            pos -= 1;
        }
        if pos == last {
            let delta = phasors[idx[last]] - phasors[idx[last] - 1];
            h.axpy(delta, &h_casc.column(last), ONE);
        } else {
            h = rebuild(&idx);
        }
        let v = score(&h);
        if v > best {
            best = v;
            best_idx.copy_from_slice(&idx);
        }
    }
    let phases = PhaseVector::from_angles(best_idx.iter().map(|&i| TAU * i as f64 / k as f64).collect::<Vec<_>>());
    Ok(OracleResult { phases, value: best, grid: best_idx })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel_model::{composite_channel, gen_channels, IrsState, SystemConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn instance(m: usize, n: usize, rng: &mut ChaCha8Rng) -> ChannelSet {
        gen_channels(&SystemConfig { m, n, ..Default::default() }, rng)
    }

    #[test]
    fn trace_without_irs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ch = instance(3, 0, &mut rng);
        let v = objective_trace(&ch, &PhaseVector::zeros(0), 2.0).unwrap();
        assert!((v - ch.h_d.norm_squared() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn trace_matches_composite_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let ch = instance(rng.random_range(1..6), rng.random_range(1..8), &mut rng);
            let u = PhaseVector::random(ch.n(), &mut rng);
            let sw = rng.random_range(0.1..5.0);
            let direct = composite_channel(&ch, &IrsState::On(u.clone())).unwrap().norm_squared() / sw;
            let v = objective_trace(&ch, &u, sw).unwrap();
            assert!((v - direct).abs() < 1e-10 * (1.0 + direct));
        }
    }

    #[test]
    fn trace_quadratic_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ch = instance(4, 5, &mut rng);
        ch.h_d.fill(ZERO);
        let u = PhaseVector::random(5, &mut rng);
        let neg = PhaseVector::from_angles(u.angles().iter().map(|t| t + std::f64::consts::PI).collect::<Vec<_>>());
        let a = objective_trace(&ch, &u, 1.0).unwrap();
        let b = objective_trace(&ch, &neg, 1.0).unwrap();
        assert!((a - b).abs() < 1e-12 * a);
    }

    #[test]
    fn homogenization_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let ch = instance(rng.random_range(1..5), rng.random_range(1..6), &mut rng);
            let sw = rng.random_range(0.1..10.0);
            let obj = homogenize(&ch, sw).unwrap();
            let u = PhaseVector::random(ch.n(), &mut rng);
            let t = Complex64::from_polar(1.0, rng.random_range(0.0..TAU));
            let mut ubar = DVector::from_element(ch.n() + 1, t);
            ubar.rows_mut(0, ch.n()).copy_from(u.unit());
            let shifted = PhaseVector::from_phases_of(u.unit().iter().map(|z| z * t.conj()));
            let reference = objective_trace(&ch, &shifted, sw).unwrap();
            assert!((obj.lifted_value(&ubar) - reference).abs() < 1e-10 * (1.0 + reference));
            assert!((obj.value(&u) - objective_trace(&ch, &u, sw).unwrap()).abs() < 1e-10 * (1.0 + reference));
            let herm = (&obj.c_mat - obj.c_mat.adjoint()).norm();
            assert!(herm < 1e-12);
        }
    }

    #[test]
    fn homogenize_without_direct_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ch = instance(3, 4, &mut rng);
        ch.h_d.fill(ZERO);
        let obj = homogenize(&ch, 1.0).unwrap();
        for i in 0..5 {
            assert_eq!(obj.c_mat[(4, i)], ZERO);
            assert_eq!(obj.c_mat[(i, 4)], ZERO);
        }
        assert_eq!(obj.const_term, 0.0);
        assert!(homogenize(&instance(2, 0, &mut rng), 1.0).is_err());
    }

    #[test]
    fn sdr_two_by_two_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let ch = instance(3, 1, &mut rng);
            let obj = homogenize(&ch, 1.0).unwrap();
            let sol = solve_sdr(&obj, &SdrOptions::default(), &mut rng).unwrap();
            // max over |x| <= 1 of q + 2 Re(c conj(x)) is q + 2 |c|
            let expected = obj.q[(0, 0)].re + 2.0 * obj.c[0].norm() + obj.const_term;
            assert!((sol.value - expected).abs() < 1e-6, "{} vs {}", sol.value, expected);
            let x = sol.u_mat[(0, 1)];
            let target = Complex64::from_polar(1.0, obj.c_mat[(0, 1)].arg());
            assert!((x - target).norm() < 1e-6);
        }
    }

    #[test]
    fn sdr_identity_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 4;
        let obj = HomogenizedObjective {
            c_mat: DMatrix::identity(n + 1, n + 1),
            q: DMatrix::identity(n, n),
            c: DVector::zeros(n),
            const_term: 0.0,
        };
        let sol = solve_sdr(&obj, &SdrOptions::default(), &mut rng).unwrap();
        assert!((sol.value - (n + 1) as f64).abs() < 1e-9);
        for i in 0..=n {
            assert!((sol.u_mat[(i, i)].re - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn sdr_dominates_grid_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let ch = instance(4, rng.random_range(1..=4), &mut rng);
            let sw = 10.0;
            let sol = sdr_beamform(&ch, sw, &SdrOptions::default(), &mut rng).unwrap();
            let oracle = brute_force_oracle(&ch, sw, 0.0, 16, Objective::LowSnr).unwrap();
            assert!(sol.upper_bound >= oracle.value - 1e-6);
            assert!(sol.rounded_value <= sol.upper_bound + 1e-6);
            let eig = SymmetricEigen::new(sol.u_mat.clone()).eigenvalues;
            assert!(eig.iter().all(|&l| l > -1e-8));
            for i in 0..=ch.n() {
                assert!((sol.u_mat[(i, i)].re - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sdr_bound_covers_probes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ch = instance(3, 6, &mut rng);
        let obj = homogenize(&ch, 1.0).unwrap();
        let sol = solve_sdr(&obj, &SdrOptions::default(), &mut rng).unwrap();
        for _ in 0..500 {
            let u = PhaseVector::random(6, &mut rng);
            assert!(objective_trace(&ch, &u, 1.0).unwrap() <= sol.upper_bound + 1e-9);
        }
    }

    #[test]
    fn non_hermitian_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut obj = homogenize(&instance(2, 2, &mut rng), 1.0).unwrap();
        obj.c_mat[(0, 1)] += c(1.0, 0.0);
        assert!(solve_sdr(&obj, &SdrOptions::default(), &mut rng).is_err());
    }

    #[test]
    fn rank_one_rounding_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ch = instance(3, 4, &mut rng);
        let obj = homogenize(&ch, 1.0).unwrap();
        let v = PhaseVector::random(5, &mut rng);
        let u_mat = v.unit() * v.unit().adjoint();
        let (u, _) = randomize_round(&u_mat, &obj, 7, &mut rng).unwrap();
        let last = v.unit()[4];
        for i in 0..4 {
            let expected = v.unit()[i] / last;
            assert!((u.unit()[i] - expected).norm() < 1e-9);
        }
    }

    #[test]
    fn rounding_rejects_indefinite() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let obj = homogenize(&instance(2, 1, &mut rng), 1.0).unwrap();
        let bad = DMatrix::from_row_slice(2, 2, &[c(1.0, 0.0), c(2.0, 0.0), c(2.0, 0.0), c(1.0, 0.0)]);
        assert!(matches!(randomize_round(&bad, &obj, 3, &mut rng), Err(Error::NotPsd { .. })));
    }

    #[test]
    fn rounding_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let ch = instance(3, 4, &mut rng);
        let a = sdr_beamform(&ch, 1.0, &SdrOptions::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sdr_beamform(&ch, 1.0, &SdrOptions::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gradient_single_element_closed_form() {
        // Gamma(theta) = |h_d + b e^{j theta}|^2 / sigma^2 when rho = 0, b = g h_r
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..50 {
            let ch = instance(1, 1, &mut rng);
            let b = ch.g[(0, 0)] * ch.h_r[0];
            let a = ch.h_d[0];
            let sw = rng.random_range(0.1..4.0);
            let theta = rng.random_range(0.0..TAU);
            // d/dtheta |a + b e^{jt}|^2 = -2 Im(conj(a) b e^{jt})... written out:
            let z = b * Complex64::from_polar(1.0, theta);
            let expected = 2.0 * (a.conj() * z * c(0.0, 1.0)).re / sw;
            let g = rate_gradient(&ch, &PhaseVector::from_angles([theta]), sw, 0.0).unwrap();
            assert!((g[0] - expected).abs() < 1e-8);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..100 {
            let ch = instance(rng.random_range(1..=8), rng.random_range(1..=8), &mut rng);
            let sw = 10f64.powf(rng.random_range(-2.0..1.0));
            let rho = rng.random_range(0.0..0.5);
            let theta = PhaseVector::random(ch.n(), &mut rng);
            let g = rate_gradient(&ch, &theta, sw, rho).unwrap();
            let step = 1e-6;
            let fd: Vec<f64> = (0..ch.n())
                .map(|i| {
                    let shift = |d: f64| {
                        let mut t = theta.angles().to_vec();
                        t[i] += d;
                        rate_objective(&ch, &PhaseVector::from_angles(t), sw, rho).unwrap()
                    };
                    (shift(step) - shift(-step)) / (2.0 * step)
                })
                .collect();
            let err = g.iter().zip(&fd).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
            let scale = fd.iter().fold(0.0f64, |a, y| a.max(y.abs()));
            assert!(err / scale < 1e-5, "relative error {}", err / scale);
        }
    }

    #[test]
    fn gradient_vanishes_at_grid_maximum() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let ch = instance(2, 1, &mut rng);
        let rho = 0.3634;
        let oracle = brute_force_oracle(&ch, 1.0, rho, 1_000_000, Objective::FullRate).unwrap();
        let g = rate_gradient(&ch, &oracle.phases, 1.0, rho).unwrap();
        assert!(g[0].abs() < 1e-4, "{}", g[0]);
    }

    #[test]
    fn gd_finds_single_element_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let ch = instance(3, 1, &mut rng);
            let rho = 0.3634;
            let oracle = brute_force_oracle(&ch, 0.5, rho, 100_000, Objective::FullRate).unwrap();
            let gd = gd_beamform(&ch, 0.5, rho, &GdConfig::default(), &mut rng).unwrap();
            let d = (gd.phases.angles()[0] - oracle.phases.angles()[0]).rem_euclid(TAU);
            assert!(d.min(TAU - d) < 1e-3, "angle gap {d}");
        }
    }

    #[test]
    fn gd_history_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        for _ in 0..20 {
            let ch = instance(4, 6, &mut rng);
            let start = PhaseVector::random(6, &mut rng);
            let run = gd_ascent(&ch, 0.2, 0.1175, &start, &GdConfig::default()).unwrap();
            assert!(run.history.windows(2).all(|w| w[1] >= w[0]));
        }
    }

    #[test]
    fn objective_is_periodic() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let ch = instance(2, 1, &mut rng);
        let t = rng.random_range(0.0..TAU);
        let a = rate_objective(&ch, &PhaseVector::from_angles([t]), 1.0, 0.3).unwrap();
        let b = rate_objective(&ch, &PhaseVector::from_angles([t + TAU]), 1.0, 0.3).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn gd_rejects_bad_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let ch = instance(2, 2, &mut rng);
        let cfg = GdConfig { armijo_c: 1.5, ..Default::default() };
        assert!(gd_beamform(&ch, 1.0, 0.3, &cfg, &mut rng).is_err());
    }

    #[test]
    fn pm_single_antenna_coherent_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let ch = instance(1, 5, &mut rng);
            let pm = phase_match(&ch, 1.0).unwrap();
            let h = composite_channel(&ch, &IrsState::On(pm)).unwrap();
            let coherent = ch.h_d[0].norm() + (0..5).map(|n| (ch.g[(0, n)] * ch.h_r[n]).norm()).sum::<f64>();
            assert!((h[0].norm() - coherent).abs() < 1e-12);
        }
    }

    #[test]
    fn pm_maximizes_linear_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let ch = instance(4, 6, &mut rng);
        let obj = homogenize(&ch, 1.0).unwrap();
        let linear = |u: &PhaseVector| 2.0 * obj.c.dotc(u.unit()).re;
        let pm = linear(&phase_match(&ch, 1.0).unwrap());
        for _ in 0..100 {
            assert!(pm >= linear(&PhaseVector::random(6, &mut rng)) - 1e-12);
        }
    }

    #[test]
    fn pm_quarter_turn() {
        let ch = ChannelSet::new(
            DVector::from_element(1, c(0.7, 0.0)),
            DVector::from_element(1, c(1.0, 0.0)),
            DMatrix::from_element(1, 1, Complex64::from_polar(1.0, std::f64::consts::FRAC_PI_4)),
        )
        .unwrap();
        let pm = phase_match(&ch, 1.0).unwrap();
        assert!((pm.angles()[0] - (TAU - std::f64::consts::FRAC_PI_4)).abs() < 1e-12);
    }

    #[test]
    fn oracle_single_element_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let ch = instance(3, 1, &mut rng);
        let oracle = brute_force_oracle(&ch, 1.0, 0.2, 360, Objective::FullRate).unwrap();
        let scan = (0..360)
            .map(|k| rate_objective(&ch, &PhaseVector::from_angles([TAU * k as f64 / 360.0]), 1.0, 0.2).unwrap())
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (k, v)| if v > b.1 { (k, v) } else { b });
        assert_eq!(oracle.grid[0], scan.0);
        assert!((oracle.value - scan.1).abs() < 1e-12);
    }

    #[test]
    fn oracle_dominates_on_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let k = 16;
        let snap = |p: &PhaseVector| {
            PhaseVector::from_angles(p.angles().iter().map(|t| (t / TAU * k as f64).round() * TAU / k as f64).collect::<Vec<_>>())
        };
        for _ in 0..10 {
            let ch = instance(3, 3, &mut rng);
            for objective in [Objective::LowSnr, Objective::FullRate] {
                let oracle = brute_force_oracle(&ch, 1.0, 0.36, k, objective).unwrap();
                let pm = snap(&phase_match(&ch, 1.0).unwrap());
                let gd = snap(&gd_beamform(&ch, 1.0, 0.36, &GdConfig { restarts: 2, ..Default::default() }, &mut rng).unwrap().phases);
                for p in [pm, gd] {
                    assert!(evaluate(&ch, &p, 1.0, 0.36, objective).unwrap() <= oracle.value + 1e-9);
                }
                assert!((evaluate(&ch, &oracle.phases, 1.0, 0.36, objective).unwrap() - oracle.value).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn oracle_symmetric_instance() {
        let col = [c(0.8, -0.3), c(0.1, 0.9)];
        let g = DMatrix::from_row_slice(2, 2, &[col[0], col[0], col[1], col[1]]);
        let ch = ChannelSet::new(
            DVector::from_vec(vec![c(0.4, 0.2), c(-0.5, 0.3)]),
            DVector::from_element(2, c(0.6, 0.6)),
            g,
        )
        .unwrap();
        let oracle = brute_force_oracle(&ch, 1.0, 0.3, 16, Objective::FullRate).unwrap();
        assert_eq!(oracle.grid[0], oracle.grid[1]);
    }

    #[test]
    fn oracle_refuses_large_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let ch = instance(2, 7, &mut rng);
        assert!(matches!(
            brute_force_oracle(&ch, 1.0, 0.3, 16, Objective::LowSnr),
            Err(Error::InstanceTooLarge { .. })
        ));
    }
}
