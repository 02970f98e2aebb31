//! Few-bit ADC model.
//!
//! Each real dimension of the received sample passes through a Lloyd-Max
//! scalar quantizer designed for a unit-variance Gaussian input. Its
//! normalized mean-square error is the distortion factor `rho_q` of the
//! Bussgang linearization, which drives the achievable-rate expressions.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::DVector;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::gaussian;

const LLOYD_TOL: f64 = 1e-12;
const LLOYD_MAX_ITERS: usize = 10_000;
/// Above this resolution the compander codebook is used without refinement.
const LLOYD_MAX_BITS: u32 = 12;
const MAX_BITS: u32 = 24;

/// Scalar codebook for a unit-variance Gaussian input.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// Reconstruction levels, ascending.
    pub levels: Vec<f64>,
    /// Decision thresholds, `levels.len() - 1` of them.
    pub thresholds: Vec<f64>,
    /// `E[(x - Q(x))^2]` for `x ~ N(0, 1)`.
    pub distortion: f64,
    pub iterations: usize,
}

impl Codebook {
    pub fn quantize(&self, x: f64) -> f64 {
        // a sample sitting on a threshold goes to the upper cell
        let cell = self.thresholds.partition_point(|&t| t <= x);
        self.levels[cell]
    }
}

fn cell_bounds(thresholds: &[f64], i: usize) -> (f64, f64) {
    let lo = if i == 0 { f64::NEG_INFINITY } else { thresholds[i - 1] };
    let hi = thresholds.get(i).copied().unwrap_or(f64::INFINITY);
    (lo, hi)
}

// phi(x), x*phi(x) and Phi(x) with the limits at +-inf
fn moments_at(x: f64) -> (f64, f64, f64) {
    if x.is_infinite() {
        (0.0, 0.0, if x > 0.0 { 1.0 } else { 0.0 })
    } else {
        let p = gaussian::pdf(x);
        (p, x * p, gaussian::cdf(x))
    }
}

fn centroid(lo: f64, hi: f64) -> f64 {
    let (pl, _, cl) = moments_at(lo);
    let (ph, _, ch) = moments_at(hi);
    (pl - ph) / (ch - cl)
}

fn exact_distortion(levels: &[f64], thresholds: &[f64]) -> f64 {
    levels
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let (lo, hi) = cell_bounds(thresholds, i);
            let (pl, xpl, cl) = moments_at(lo);
            let (ph, xph, ch) = moments_at(hi);
            let prob = ch - cl;
            let first = pl - ph;
            let second = prob + xpl - xph;
            second - 2.0 * c * first + c * c * prob
        })
        .sum()
}

fn midpoints(levels: &[f64]) -> Vec<f64> {
    levels.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
}

/// Lloyd-Max fixed-point iteration started from the Gaussian compander
/// codebook (point density proportional to `p(x)^(1/3)`).
pub fn lloyd_max(bits: u32) -> Result<Codebook> {
    if bits == 0 {
        return Err(Error::InvalidArgument("quantizer needs at least 1 bit".into()));
    }
    if bits > MAX_BITS {
        return Err(Error::InvalidArgument(format!("quantizer resolution capped at {MAX_BITS} bits")));
    }
    let count = 1usize << bits;
    let mut levels: Vec<f64> = (0..count)
        .map(|i| 3f64.sqrt() * gaussian::inv_cdf((i as f64 + 0.5) / count as f64))
        .collect();
    let mut iterations = 0;
    if bits <= LLOYD_MAX_BITS {
        while iterations < LLOYD_MAX_ITERS {
            iterations += 1;
            let thresholds = midpoints(&levels);
            let mut delta: f64 = 0.0;
            for (i, level) in levels.iter_mut().enumerate() {
                let (lo, hi) = cell_bounds(&thresholds, i);
                let c = centroid(lo, hi);
                delta = delta.max((c - *level).abs());
                *level = c;
            }
            symmetrize(&mut levels);
            if delta < LLOYD_TOL {
                break;
            }
        }
    }
    let thresholds = midpoints(&levels);
    let distortion = exact_distortion(&levels, &thresholds);
    Ok(Codebook {
        levels,
        thresholds,
        distortion,
        iterations,
    })
}

// The Gaussian is symmetric, so enforce exact mirror levels against round-off.
fn symmetrize(levels: &mut [f64]) {
    let n = levels.len();
    for i in 0..n / 2 {
        let a = 0.5 * (levels[n - 1 - i] - levels[i]);
        levels[i] = -a;
        levels[n - 1 - i] = a;
    }
}

/// Shared, lazily built codebook for `bits`.
pub fn codebook(bits: u32) -> Result<Arc<Codebook>> {
    static CACHE: OnceLock<Mutex<BTreeMap<u32, Arc<Codebook>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(cb) = cache.lock().expect("codebook cache poisoned").get(&bits) {
        return Ok(cb.clone());
    }
    let cb = Arc::new(lloyd_max(bits)?);
    let mut guard = cache.lock().expect("codebook cache poisoned");
    Ok(guard.entry(bits).or_insert(cb).clone())
}

/// Distortion factor `rho_q` of a `bits`-bit Lloyd-Max quantizer on Gaussian input.
pub fn distortion_factor(bits: u32) -> Result<f64> {
    if bits == 1 {
        // sign quantizer: 1 - 2/pi exactly
        return Ok(1.0 - 2.0 / std::f64::consts::PI);
    }
    Ok(codebook(bits)?.distortion)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizerSpec {
    pub bits: u32,
    pub rho_q: f64,
}

impl QuantizerSpec {
    pub fn new(bits: u32) -> Result<Self> {
        Ok(Self {
            bits,
            rho_q: distortion_factor(bits)?,
        })
    }
}

/// `+1` for `x >= 0`, `-1` otherwise.
pub fn sgn(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Apply the ADC to every entry. One bit yields `sgn(re) + j sgn(im)`;
/// more bits map each real part through the unit-variance codebook, so the
/// caller pre-scales by the input standard deviation.
pub fn quantize(y: &DVector<Complex64>, spec: &QuantizerSpec) -> Result<DVector<Complex64>> {
    if spec.bits == 1 {
        return Ok(y.map(|z| Complex64::new(sgn(z.re), sgn(z.im))));
    }
    let cb = codebook(spec.bits)?;
    Ok(y.map(|z| Complex64::new(cb.quantize(z.re), cb.quantize(z.im))))
}

fn check_rate_inputs(h: &DVector<Complex64>, sigma_x2: f64, sigma_w2: f64, rho_q: f64) -> Result<()> {
    if !h.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        return Err(Error::InvalidArgument("channel entries must be finite".into()));
    }
    if !(sigma_w2 > 0.0 && sigma_w2.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise variance must be positive, got {sigma_w2}")));
    }
    if !(sigma_x2 > 0.0 && sigma_x2.is_finite()) {
        return Err(Error::InvalidArgument(format!("transmit power must be positive, got {sigma_x2}")));
    }
    if !(0.0..1.0).contains(&rho_q) {
        return Err(Error::InvalidArgument(format!("distortion factor must lie in [0, 1), got {rho_q}")));
    }
    Ok(())
}

/// Bussgang achievable rate in bits per channel use.
///
/// The covariance `R_ww + rho_q sigma_x2 diag(h h^H)` is diagonal, so the
/// quadratic form reduces to a sum over antennas.
pub fn achievable_rate(h: &DVector<Complex64>, sigma_x2: f64, sigma_w2: f64, rho_q: f64) -> Result<f64> {
    check_rate_inputs(h, sigma_x2, sigma_w2, rho_q)?;
    let quad: f64 = h
        .iter()
        .map(|z| {
            let p = z.norm_sqr();
            p / (sigma_w2 + rho_q * sigma_x2 * p)
        })
        .sum();
    Ok((1.0 + (1.0 - rho_q) * sigma_x2 * quad).log2())
}

/// Low-SNR proxy `sigma_x2 (1 - rho_q) ||h||^2 / sigma_w2` (in nats).
pub fn low_snr_rate_proxy(h: &DVector<Complex64>, sigma_x2: f64, sigma_w2: f64, rho_q: f64) -> Result<f64> {
    check_rate_inputs(h, sigma_x2, sigma_w2, rho_q)?;
    Ok(sigma_x2 * (1.0 - rho_q) * h.norm_squared() / sigma_w2)
}
