//! Gaussian kernels `g_c(u, x) = (2 pi c u)^(-d/2) exp(-|x|^2 / (2 c u))`,
//! their derivatives, and numerical checks of the convolution bound and of
//! the kernel sensitivity inequalities.

use std::f64::consts::PI;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::driftlib::{DriftSpec, Exponent};
use crate::error::{Error, Result};
use crate::quadrature::{integrate, integrate_singular, integrate_to_infinity, integrate_two_sided, QuadResult, Singular, Tolerance};
use crate::scalar::{norm_sq, Scalar};
use crate::special::{beta_function, hermite};

fn check_args<T: Scalar>(c: T, u: T) -> Result<()> {
    if !(u > T::zero()) {
        return Err(Error::InvalidParameter(format!("kernel time must be positive, got {u}")));
    }
    if !(c >= T::one()) {
        return Err(Error::InvalidParameter(format!("variance inflation must be >= 1, got {c}")));
    }
    Ok(())
}

/// `g_c(u, x)` without argument checks.
#[inline]
pub fn g_unchecked<T: Scalar>(c: T, u: T, x: &[T]) -> T {
    let var = c * u;
    let two_pi = T::lit(2.0 * PI);
    (two_pi * var).powf(T::lit(-0.5 * x.len() as f64)) * (-norm_sq(x) / (T::lit(2.0) * var)).exp()
}

/// Density of `N(0, c u I_d)` at `x`.
pub fn g<T: Scalar>(c: T, u: T, x: &[T]) -> Result<T> {
    check_args(c, u)?;
    Ok(g_unchecked(c, u, x))
}

/// `grad_x g_c(u, x) = -x / (c u) g_c(u, x)`.
pub fn grad_g<T: Scalar>(c: T, u: T, x: &[T]) -> Result<Vec<T>> {
    check_args(c, u)?;
    let s = -g_unchecked(c, u, x) / (c * u);
    Ok(x.iter().map(|&xi| s * xi).collect())
}

/// `hess_x g_c(u, x) = (x x^T / (c u)^2 - I / (c u)) g_c(u, x)`, row major.
pub fn hess_g<T: Scalar>(c: T, u: T, x: &[T]) -> Result<Vec<Vec<T>>> {
    check_args(c, u)?;
    let var = c * u;
    let gv = g_unchecked(c, u, x);
    Ok((0..x.len())
        .map(|i| {
            (0..x.len())
                .map(|j| {
                    let delta = if i == j { T::one() / var } else { T::zero() };
                    (x[i] * x[j] / (var * var) - delta) * gv
                })
                .collect()
        })
        .collect())
}

/// `d^k/dx^k g_c(u, x)` in one dimension, through Hermite polynomials.
pub fn derivative_1d(k: usize, c: f64, u: f64, x: f64) -> Result<f64> {
    check_args(c, u)?;
    let var = c * u;
    let sign = if k.is_multiple_of(2) { 1.0 } else { -1.0 };
    Ok(sign * var.powf(-0.5 * k as f64) * hermite(k, x / var.sqrt()) * g_unchecked(c, u, &[x]))
}

/// `d/du d^k/dx^k g_c(u, x) = (c/2) d^(k+2)/dx^(k+2) g_c(u, x)` (heat equation).
pub fn time_derivative_1d(k: usize, c: f64, u: f64, x: f64) -> Result<f64> {
    Ok(0.5 * c * derivative_1d(k + 2, c, u, x)?)
}

/// Gaussian kernel `g_c` in dimension `d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussKernel {
    pub c: f64,
    pub d: usize,
}

impl GaussKernel {
    pub fn new(c: f64, d: usize) -> Result<Self> {
        if !(c >= 1.0 && c.is_finite()) || d == 0 {
            return Err(Error::InvalidParameter(format!("kernel needs c >= 1 and d >= 1, got c={c}, d={d}")));
        }
        Ok(GaussKernel { c, d })
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d {
            return Err(Error::InvalidParameter(format!("point has {} components, kernel dimension is {}", x.len(), self.d)));
        }
        Ok(())
    }

    pub fn density(&self, u: f64, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        g(self.c, u, x)
    }

    pub fn grad(&self, u: f64, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        grad_g(self.c, u, x)
    }

    pub fn hess(&self, u: f64, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_dim(x)?;
        hess_g(self.c, u, x)
    }

    /// Gaussian tail mass outside the cube `[-r, r]^d` at time `u`.
    pub fn tail_outside_cube(&self, u: f64, r: f64) -> f64 {
        let one_axis = libm::erfc(r / (2.0 * self.c * u).sqrt());
        1.0 - (1.0 - one_axis).powi(self.d as i32)
    }
}

/// Inequalities of the kernel sensitivity lemma, all for `g_1` against `g_c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Inequality {
    /// `|d^z g_1(u,x)| <= C u^(-|z|/2) g_c(u,x)`.
    GradBound,
    /// `|d_u d^z g_1(u,x)| <= C u^(-1-|z|/2) g_c(u,x)`.
    TimeDerivBound,
    /// `|d^z g_1(u,x) - d^z g_1(u,x')| <= C (|x-x'| ^ sqrt u) u^(-(1+|z|)/2) (g_c(u,x) + g_c(u,x'))`.
    SpaceHolder,
    /// `|d^z g_1(u',x) - d^z g_1(u,x)| <= C (|u'-u| ^ u) u^(-1-|z|/2) (g_c(u,x) + g_c(u',x))`.
    TimeHolder,
}

impl Inequality {
    pub const ALL: [Inequality; 4] = [
        Inequality::GradBound,
        Inequality::TimeDerivBound,
        Inequality::SpaceHolder,
        Inequality::TimeHolder,
    ];
}

impl fmt::Display for Inequality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Inequality::GradBound => "grad_bound",
            Inequality::TimeDerivBound => "time_deriv_bound",
            Inequality::SpaceHolder => "space_holder",
            Inequality::TimeHolder => "time_holder",
        })
    }
}

/// Sampling grid of a constant search (dimension one).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchGrid {
    /// Points per axis.
    pub points: usize,
    pub u_min: f64,
    pub horizon: f64,
    /// Largest `|x| / sqrt(u)` sampled.
    pub v_max: f64,
    /// Derivative orders `|z|` considered, `min_order..=max_order`.
    pub min_order: usize,
    pub max_order: usize,
}

impl Default for SearchGrid {
    fn default() -> Self {
        SearchGrid {
            points: 64,
            u_min: 1e-4,
            horizon: 1.0,
            v_max: 8.0,
            min_order: 0,
            max_order: 2,
        }
    }
}

impl SearchGrid {
    /// Same ranges with `factor` times as many points per axis.
    pub fn refined(&self, factor: usize) -> Self {
        SearchGrid {
            points: self.points * factor,
            ..*self
        }
    }

    fn u_values(&self) -> Vec<f64> {
        logspace(self.u_min, self.horizon, self.points)
    }

    fn v_values(&self) -> Vec<f64> {
        linspace(0.0, self.v_max, self.points)
    }
}

pub(crate) fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

pub(crate) fn logspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    let (la, lb) = (a.ln(), b.ln());
    linspace(la, lb, n).into_iter().map(f64::exp).collect()
}

/// Largest sampled ratio of one inequality and where it was attained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SensitivityResult {
    pub inequality: Inequality,
    pub c: f64,
    pub constant: f64,
    pub order: usize,
    pub u: f64,
    pub u2: f64,
    pub x: f64,
    pub x2: f64,
}

fn ratio_max(a: SensitivityResult, b: SensitivityResult) -> SensitivityResult {
    // ties resolved towards the first candidate, so the reduction is order independent
    if b.constant > a.constant {
        b
    } else {
        a
    }
}

/// LHS / (RHS without `C`) of one sensitivity inequality at a single point,
/// for the derivative of order `k` (dimension one, `u <= u2`). Pairs that
/// coincide up to rounding (`|x - x2| <= 1e-9 sqrt u`, `|u2 - u| <= 1e-9 u`)
/// give 0: their difference quotient is pure round-off.
pub fn sensitivity_ratio(inequality: Inequality, c: f64, k: usize, u: f64, u2: f64, x: f64, x2: f64) -> f64 {
    let d = |u: f64, x: f64| derivative_1d(k, 1.0, u, x).unwrap_or(f64::NAN);
    let gc = |u: f64, x: f64| g_unchecked(c, u, &[x]);
    let kf = k as f64;
    match inequality {
        Inequality::GradBound => d(u, x).abs() * u.powf(0.5 * kf) / gc(u, x),
        Inequality::TimeDerivBound => {
            let dt = time_derivative_1d(k, 1.0, u, x).unwrap_or(f64::NAN);
            dt.abs() * u.powf(1.0 + 0.5 * kf) / gc(u, x)
        }
        Inequality::SpaceHolder => {
            if (x - x2).abs() <= 1e-9 * u.sqrt() {
                return 0.0;
            }
            let lhs = (d(u, x) - d(u, x2)).abs();
            let rhs = (x - x2).abs().min(u.sqrt()) * u.powf(-0.5 * (1.0 + kf)) * (gc(u, x) + gc(u, x2));
            lhs / rhs
        }
        Inequality::TimeHolder => {
            if (u2 - u).abs() <= 1e-9 * u {
                return 0.0;
            }
            let lhs = (d(u2, x) - d(u, x)).abs();
            let rhs = (u2 - u).abs().min(u) * u.powf(-1.0 - 0.5 * kf) * (gc(u, x) + gc(u2, x));
            lhs / rhs
        }
    }
}

/// Empirical constant of one sensitivity inequality: the sup over the grid
/// of LHS / (RHS without `C`), for `g_1` against `g_c` in dimension one.
pub fn sensitivity_constant_search(inequality: Inequality, c: f64, grid: &SearchGrid) -> Result<SensitivityResult> {
    if !(c > 1.0 && c.is_finite()) {
        return Err(Error::InvalidParameter(format!("constant search needs c > 1, got {c}")));
    }
    if grid.points < 2 || !(grid.u_min > 0.0 && grid.horizon > grid.u_min) || !(grid.v_max > 0.0) {
        return Err(Error::InvalidParameter("degenerate search grid".into()));
    }
    let us = grid.u_values();
    let vs = grid.v_values();
    let start = SensitivityResult {
        inequality,
        c,
        constant: 0.0,
        order: 0,
        u: us[0],
        u2: us[0],
        x: 0.0,
        x2: 0.0,
    };
    let orders: Vec<usize> = (grid.min_order..=grid.max_order).collect();
    // one work item per (order, u) pair, reduced by a deterministic max
    let items: Vec<(usize, usize)> = orders
        .iter()
        .flat_map(|&k| (0..us.len()).map(move |i| (k, i)))
        .collect();
    let best = items
        .par_iter()
        .map(|&(k, i)| {
            let u = us[i];
            let mut best = start;
            let mut consider = |ratio: f64, u2: f64, x: f64, x2: f64| {
                if ratio > best.constant {
                    best = SensitivityResult {
                        constant: ratio,
                        order: k,
                        u,
                        u2,
                        x,
                        x2,
                        ..start
                    };
                }
            };
            match inequality {
                Inequality::GradBound | Inequality::TimeDerivBound => {
                    for &v in &vs {
                        let x = v * u.sqrt();
                        consider(sensitivity_ratio(inequality, c, k, u, u, x, x), u, x, x);
                    }
                }
                Inequality::SpaceHolder => {
                    let x2s = linspace(-grid.v_max, grid.v_max, grid.points);
                    for &v in &vs {
                        let x = v * u.sqrt();
                        for &w in &x2s {
                            let x2 = w * u.sqrt();
                            consider(sensitivity_ratio(inequality, c, k, u, u, x, x2), u, x, x2);
                        }
                    }
                }
                Inequality::TimeHolder => {
                    for &u2 in us.iter().skip(i) {
                        for &v in &vs {
                            let x = v * u.sqrt();
                            consider(sensitivity_ratio(inequality, c, k, u, u2, x, x), u2, x, x);
                        }
                    }
                }
            }
            best
        })
        .reduce(|| start, ratio_max);
    if !best.constant.is_finite() {
        return Err(Error::NonConvergent(format!("{inequality} ratio is not finite")));
    }
    Ok(best)
}

/// One verified inequality instance, exported as a CSV row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundCheckReport {
    pub inequality_id: String,
    pub params: Vec<(String, f64)>,
    pub lhs: f64,
    pub rhs: f64,
    pub satisfied: bool,
    pub quad_error: f64,
}

impl BoundCheckReport {
    pub fn csv_header(&self) -> String {
        let mut cols = vec!["inequality_id".to_string()];
        cols.extend(self.params.iter().map(|(k, _)| k.clone()));
        cols.extend(["lhs", "rhs", "satisfied", "quad_error"].map(String::from));
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.inequality_id.clone()];
        cols.extend(self.params.iter().map(|(_, v)| format!("{v:.16e}")));
        cols.push(format!("{:.16e}", self.lhs));
        cols.push(format!("{:.16e}", self.rhs));
        cols.push(self.satisfied.to_string());
        cols.push(format!("{:.16e}", self.quad_error));
        cols.join(",")
    }
}

/// Parameters of one convolution bound instance (`s < t`, points in one
/// dimension).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvolutionCase {
    pub beta: f64,
    pub gamma: f64,
    pub c: f64,
    pub s: f64,
    pub t: f64,
    pub x: f64,
    pub y: f64,
}

/// Explicit constant of the convolution bound, obtained by carrying the
/// Hölder steps through with exact Gaussian identities:
/// `C = (2 pi c)^(-d/(2 rho')) * rho_bar'^(-d/(2 rho_bar'))`, `rho_bar'` the
/// conjugate exponent of `rho'`.
pub fn convolution_constant(rho_prime: Exponent, c: f64, d: usize) -> f64 {
    let inv = rho_prime.recip();
    if inv == 0.0 {
        return 1.0;
    }
    let conj = 1.0 / (1.0 - inv);
    let df = d as f64;
    (2.0 * PI * c).powf(-df * inv / 2.0) * conj.powf(-df / (2.0 * conj))
}

/// Checks the Gaussian convolution bound for a time-constant weight `f = 1`
/// and the test function `phi` (whose declared exponents play the role of
/// `rho'`, `q'`). The left side is computed by nested adaptive quadrature,
/// the right side from the closed formula with the beta function.
pub fn convolution_bound_check(phi: &DriftSpec<f64>, case: &ConvolutionCase) -> Result<BoundCheckReport> {
    let ConvolutionCase { beta, gamma, c, s, t, x, y } = *case;
    if phi.dim() != 1 {
        return Err(Error::Unsupported("convolution bound check is implemented for d = 1".into()));
    }
    if !(0.0 <= s && s < t && beta >= 0.0 && gamma >= 0.0 && c >= 1.0) {
        return Err(Error::InvalidParameter("need 0 <= s < t, beta, gamma >= 0 and c >= 1".into()));
    }
    let (rho_p, q_p) = (phi.rho(), phi.q());
    let kappa = 0.5 * rho_p.recip();
    let conj_q = 1.0 / (1.0 - q_p.recip());
    let limit = 1.0 - q_p.recip();
    if (beta + kappa).max(gamma + kappa) >= limit {
        return Err(Error::Precondition(format!(
            "time singularities not integrable: max(beta, gamma) + d/(2 rho') = {} >= 1 - 1/q' = {limit}",
            beta.max(gamma) + kappa
        )));
    }
    let tau = t - s;
    let norm = phi.lq_lrho_norm(t)?;
    let beta_fn = beta_function(1.0 - conj_q * (beta + kappa), 1.0 - conj_q * (gamma + kappa))?;
    let rhs = convolution_constant(rho_p, c, 1)
        * norm.value
        * g_unchecked(c, tau, &[y - x])
        * tau.powf(limit - (beta + gamma + kappa))
        * beta_fn.powf(1.0 / conj_q);

    let lhs = convolution_lhs(phi, case)?;
    let tol = 1e-6;
    let satisfied = lhs.value <= rhs * (1.0 + tol) + lhs.error;
    Ok(BoundCheckReport {
        inequality_id: "convolution".into(),
        params: vec![
            ("rho_prime".into(), rho_p.finite().unwrap_or(f64::INFINITY)),
            ("q_prime".into(), q_p.finite().unwrap_or(f64::INFINITY)),
            ("beta".into(), beta),
            ("gamma".into(), gamma),
            ("c".into(), c),
            ("s".into(), s),
            ("t".into(), t),
            ("x".into(), x),
            ("y".into(), y),
        ],
        lhs: lhs.value,
        rhs,
        satisfied,
        quad_error: lhs.error,
    })
}

fn convolution_lhs(phi: &DriftSpec<f64>, case: &ConvolutionCase) -> Result<QuadResult> {
    let ConvolutionCase { beta, gamma, c, s, t, x, y } = *case;
    let tol = Tolerance::relative(1e-7);
    let singular_order = match phi.family() {
        crate::driftlib::DriftFamily::PowerSingularity { gamma, .. } => *gamma,
        _ => 0.0,
    };
    let mut breaks: Vec<f64> = vec![x, y, 0.0];
    if let crate::driftlib::DriftFamily::PowerSingularity { radius, .. } = phi.family() {
        breaks.extend([-radius, *radius]);
    }
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    let mut inner_error = 0.0f64;
    let mut failure: Option<Error> = None;
    let mut inner = |u: f64| -> f64 {
        let (a, b) = (u - s, t - u);
        if a <= 0.0 || b <= 0.0 {
            return 0.0;
        }
        let integrand = |z: f64| {
            let p = phi.evaluate(u, &[z])[0].abs();
            if p == 0.0 {
                0.0
            } else {
                g_unchecked(c, a, &[z - x]) * p * g_unchecked(c, b, &[y - z])
            }
        };
        let mut total = QuadResult::ZERO;
        let mut run = |r: Result<QuadResult>| match r {
            Ok(q) => total = total + q,
            Err(e) => {
                failure.get_or_insert(e);
            }
        };
        let (lo, hi) = (breaks[0], breaks[breaks.len() - 1]);
        run(integrate_to_infinity(|v| integrand(lo - v), 0.0, tol));
        run(integrate_to_infinity(|v| integrand(hi + v), 0.0, tol));
        for w in breaks.windows(2) {
            let singular = if w[0] == 0.0 {
                Singular::Left(singular_order)
            } else if w[1] == 0.0 {
                Singular::Right(singular_order)
            } else {
                Singular::None
            };
            run(integrate_singular(integrand, w[0], w[1], singular, tol));
        }
        inner_error = inner_error.max(total.error);
        total.value * a.powf(-beta) * b.powf(-gamma)
    };
    let outer = integrate_two_sided(&mut inner, s, t, beta, gamma, Tolerance::relative(1e-7))?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(QuadResult {
        value: outer.value,
        error: outer.error + inner_error * (t - s),
    })
}

/// `int g_c(u, x) dx` over the real line (used to check normalization).
pub fn mass_1d(c: f64, u: f64) -> Result<f64> {
    check_args(c, u)?;
    let tol = Tolerance::relative(1e-12);
    let half = integrate_to_infinity(|x| g_unchecked(c, u, &[x]), 0.0, tol)?;
    Ok(2.0 * half.value)
}

/// `int g_c(u, z - x) g_c(v, y - z) dz`, which should equal `g_c(u + v, y - x)`.
pub fn convolve_1d(c: f64, u: f64, v: f64, x: f64, y: f64) -> Result<f64> {
    check_args(c, u)?;
    check_args(c, v)?;
    let tol = Tolerance::relative(1e-12);
    let f = |z: f64| g_unchecked(c, u, &[z - x]) * g_unchecked(c, v, &[y - z]);
    let (lo, hi) = (x.min(y), x.max(y));
    let mid = integrate(f, lo, hi, tol)?;
    let left = integrate_to_infinity(|w| f(lo - w), 0.0, tol)?;
    let right = integrate_to_infinity(|w| f(hi + w), 0.0, tol)?;
    Ok(mid.value + left.value + right.value)
}
