//! Baseband channels of the IRS-assisted SIMO uplink.
//!
//! A single-antenna user reaches an `M`-antenna base station over a direct
//! link `h_d` and over a reflected link through an `N`-element surface
//! (`h_r` into the surface, `G` out of it). With phase vector `u` the
//! composite channel is `h = G diag(u) h_r + h_d`.

use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Link dimensions and power levels for one simulated system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    /// Base-station antennas.
    pub m: usize,
    /// IRS elements; zero means no surface.
    pub n: usize,
    /// Pilot length.
    pub tau: usize,
    /// Noise variance (linear).
    pub sigma_w2: f64,
    /// Transmit power (linear).
    pub sigma_x2: f64,
    /// ADC resolution in bits.
    pub bits: u32,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            m: 4,
            n: 5,
            tau: 32,
            sigma_w2: 1.0,
            sigma_x2: 1.0,
            bits: 1,
        }
    }
}

impl SystemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::InvalidArgument("antenna count M must be >= 1".into()));
        }
        if self.tau == 0 {
            return Err(Error::InvalidArgument("pilot length tau must be >= 1".into()));
        }
        if !(self.sigma_w2 > 0.0 && self.sigma_w2.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise variance must be positive, got {}",
                self.sigma_w2
            )));
        }
        if !(self.sigma_x2 > 0.0 && self.sigma_x2.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "transmit power must be positive, got {}",
                self.sigma_x2
            )));
        }
        if self.bits == 0 {
            return Err(Error::InvalidArgument("ADC resolution must be >= 1 bit".into()));
        }
        Ok(())
    }

    /// Noise variance for a given SNR in dB, with `SNR = 1 / sigma_w2`.
    pub fn noise_for_snr_db(snr_db: f64) -> f64 {
        10f64.powf(-snr_db / 10.0)
    }
}

/// One realization of the three channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSet {
    /// User -> BS, length `M`.
    pub h_d: DVector<Complex64>,
    /// User -> IRS, length `N`.
    pub h_r: DVector<Complex64>,
    /// IRS -> BS, `M x N`.
    pub g: DMatrix<Complex64>,
}

impl ChannelSet {
    pub fn new(h_d: DVector<Complex64>, h_r: DVector<Complex64>, g: DMatrix<Complex64>) -> Result<Self> {
        let ch = Self { h_d, h_r, g };
        ch.validate()?;
        Ok(ch)
    }

    pub fn m(&self) -> usize {
        self.h_d.len()
    }

    pub fn n(&self) -> usize {
        self.h_r.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.g.nrows() != self.m() {
            return Err(Error::DimensionMismatch {
                what: "rows of G",
                expected: self.m(),
                got: self.g.nrows(),
            });
        }
        if self.g.ncols() != self.n() {
            return Err(Error::DimensionMismatch {
                what: "columns of G",
                expected: self.n(),
                got: self.g.ncols(),
            });
        }
        let finite = |z: &Complex64| z.re.is_finite() && z.im.is_finite();
        if !(self.h_d.iter().all(finite) && self.h_r.iter().all(finite) && self.g.iter().all(finite)) {
            return Err(Error::InvalidArgument("channel entries must be finite".into()));
        }
        Ok(())
    }
}

/// IRS phase shifts with their unit-modulus representation.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseVector {
    theta: Vec<f64>,
    u: DVector<Complex64>,
}

/// Reduce an angle into `[0, 2pi)`.
pub fn wrap_angle(t: f64) -> f64 {
    let r = t.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if r >= TAU {
        0.0
    } else {
        r
    }
}

impl PhaseVector {
    pub fn from_angles(theta: impl IntoIterator<Item = f64>) -> Self {
        let theta: Vec<f64> = theta.into_iter().map(wrap_angle).collect();
        let u = DVector::from_iterator(theta.len(), theta.iter().map(|&t| Complex64::from_polar(1.0, t)));
        Self { theta, u }
    }

    /// Phases of arbitrary nonzero complex entries; zero entries map to phase 0.
    pub fn from_phases_of(z: impl IntoIterator<Item = Complex64>) -> Self {
        Self::from_angles(z.into_iter().map(|z| if z == Complex64::new(0.0, 0.0) { 0.0 } else { z.arg() }))
    }

    pub fn zeros(n: usize) -> Self {
        Self::from_angles(std::iter::repeat_n(0.0, n))
    }

    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        Self::from_angles((0..n).map(|_| rng.random::<f64>() * TAU).collect::<Vec<_>>())
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn angles(&self) -> &[f64] {
        &self.theta
    }

    pub fn unit(&self) -> &DVector<Complex64> {
        &self.u
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum IrsState {
    On(PhaseVector),
    /// Every element absorbs: no reflected path at all.
    Off,
}

fn cn01<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Draw `h_d`, `h_r` and `G` with i.i.d. CN(0, 1) entries.
///
/// Draw order is `h_d`, then `h_r`, then `G` row by row.
pub fn gen_channels<R: Rng + ?Sized>(cfg: &SystemConfig, rng: &mut R) -> ChannelSet {
    let (m, n) = (cfg.m, cfg.n);
    let h_d = DVector::from_iterator(m, (0..m).map(|_| cn01(rng)));
    let h_r = DVector::from_iterator(n, (0..n).map(|_| cn01(rng)));
    let g_entries: Vec<Complex64> = (0..m * n).map(|_| cn01(rng)).collect();
    let g = DMatrix::from_row_slice(m, n, &g_entries);
    ChannelSet { h_d, h_r, g }
}

/// `G diag(h_r)`: column `n` is `G[:, n] * h_r[n]`.
pub fn cascade_matrix(ch: &ChannelSet) -> Result<DMatrix<Complex64>> {
    ch.validate()?;
    if ch.n() == 0 {
        return Err(Error::NoReflectingChannel);
    }
    let mut h = ch.g.clone();
    for (mut col, &hr) in h.column_iter_mut().zip(ch.h_r.iter()) {
        col *= hr;
    }
    Ok(h)
}

/// Effective channel seen by the base station for the given surface state.
pub fn composite_channel(ch: &ChannelSet, irs: &IrsState) -> Result<DVector<Complex64>> {
    ch.validate()?;
    match irs {
        IrsState::Off => Ok(ch.h_d.clone()),
        IrsState::On(phases) => {
            if phases.len() != ch.n() {
                return Err(Error::DimensionMismatch {
                    what: "phase vector",
                    expected: ch.n(),
                    got: phases.len(),
                });
            }
            let mut h = ch.h_d.clone();
            for (k, (&hr, &u)) in ch.h_r.iter().zip(phases.unit().iter()).enumerate() {
                h.axpy(hr * u, &ch.g.column(k), Complex64::new(1.0, 0.0));
            }
            Ok(h)
        }
    }
}
