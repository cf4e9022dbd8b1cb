//! Special functions: beta function and Hermite polynomials.

use crate::error::{Error, Result};

/// `ln B(a, b)` through the log-gamma identity.
pub fn ln_beta(a: f64, b: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "beta function needs positive arguments, got ({a}, {b})"
        )));
    }
    Ok(libm::lgamma(a) + libm::lgamma(b) - libm::lgamma(a + b))
}

/// `B(a, b) = int_0^1 u^(a-1) (1-u)^(b-1) du`.
pub fn beta_function(a: f64, b: f64) -> Result<f64> {
    ln_beta(a, b).map(f64::exp)
}

/// Probabilists' Hermite polynomial `He_k(v)`.
///
/// `d^k/dx^k g_1(u, x) = (-1)^k u^(-k/2) He_k(x / sqrt(u)) g_1(u, x)` in one
/// dimension, which is how kernel derivatives of any order are evaluated.
pub fn hermite(k: usize, v: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, v);
    match k {
        0 => prev,
        _ => {
            for j in 1..k {
                let next = v * cur - j as f64 * prev;
                prev = cur;
                cur = next;
            }
            cur
        }
    }
}
