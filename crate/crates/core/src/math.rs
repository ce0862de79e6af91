//! Float math provider.
//!
//! `core` has no transcendental functions, so under `no_std` they come from
//! `libm`. The two providers agree to within 1 ulp, which is far below every
//! tolerance used in this crate.

#[cfg(feature = "std")]
mod provider {
    pub fn exp(x: f64) -> f64 {
        x.exp()
    }
    pub fn ln(x: f64) -> f64 {
        x.ln()
    }
    pub fn sqrt(x: f64) -> f64 {
        x.sqrt()
    }
    pub fn round(x: f64) -> f64 {
        x.round()
    }
    pub fn pow(x: f64, y: f64) -> f64 {
        x.powf(y)
    }
}

#[cfg(not(feature = "std"))]
mod provider {
    pub fn exp(x: f64) -> f64 {
        libm::exp(x)
    }
    pub fn ln(x: f64) -> f64 {
        libm::log(x)
    }
    pub fn sqrt(x: f64) -> f64 {
        libm::sqrt(x)
    }
    pub fn round(x: f64) -> f64 {
        libm::round(x)
    }
    pub fn pow(x: f64, y: f64) -> f64 {
        libm::pow(x, y)
    }
}

pub(crate) use provider::{exp, ln, pow, round, sqrt};

/// Largest of two floats, NaN-propagating on the first argument.
pub(crate) fn max(a: f64, b: f64) -> f64 {
    if a >= b {
        a
    } else {
        b
    }
}
