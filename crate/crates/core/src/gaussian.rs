//! Standard normal helpers with tail-safe logarithms.

use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};

use libm::erfc;
use statrs::function::erf::erfc_inv;

const LOWER_TAIL: f64 = -30.0;

pub fn pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub fn cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

pub fn inv_cdf(p: f64) -> f64 {
    let x = -SQRT_2 * erfc_inv(2.0 * p);
    if !x.is_finite() {
        return x;
    }
    // one Newton step against the accurate cdf
    let d = pdf(x);
    if d > 0.0 {
        x - (cdf(x) - p) / d
    } else {
        x
    }
}

// 1 - 1/x^2 + 3/x^4 - 15/x^6 + 105/x^8, the Mills-ratio series for x -> -inf
fn tail_series(x: f64) -> f64 {
    let r = 1.0 / (x * x);
    1.0 - r * (1.0 - 3.0 * r * (1.0 - 5.0 * r * (1.0 - 7.0 * r)))
}

/// `ln Phi(x)`, finite for every finite `x`.
pub fn ln_cdf(x: f64) -> f64 {
    if x < LOWER_TAIL {
        -0.5 * x * x - (-x).ln() - 0.5 * (2.0 * PI).ln() + tail_series(x).ln()
    } else {
        cdf(x).ln()
    }
}

/// Inverse Mills ratio `phi(x) / Phi(x)`.
pub fn inv_mills(x: f64) -> f64 {
    if x < LOWER_TAIL {
        -x / tail_series(x)
    } else {
        pdf(x) / cdf(x)
    }
}

/// `(ln Phi(x), phi(x) / Phi(x))` from a single `erfc` evaluation.
pub fn ln_cdf_and_mills(x: f64) -> (f64, f64) {
    if x < LOWER_TAIL {
        (ln_cdf(x), inv_mills(x))
    } else {
        let c = cdf(x);
        (c.ln(), pdf(x) / c)
    }
}
