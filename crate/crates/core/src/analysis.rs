//! Error metrics, rate fitting, Monte Carlo weak errors and Gronwall-Volterra
//! constants.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::GridDensity;
use crate::driftlib::Variant;
use crate::error::{Error, Result};
use crate::gaussian::g_unchecked;
use crate::quadrature::gauss_legendre;
use crate::scalar::Scalar;
use crate::scheme::{coupled_terminals, SchemeParams};
use crate::special::beta_function;

fn check_pair<T: Scalar>(num: &GridDensity<T>, reference: &GridDensity<T>) -> Result<()> {
    num.grid.check_same(&reference.grid)?;
    let (a, b) = (num.time.as_f64(), reference.time.as_f64());
    if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0) {
        return Err(Error::GridMismatch(format!("densities are at different times ({a} vs {b})")));
    }
    Ok(())
}

/// `max_y |num - ref| / g_c(t, y - x)`.
pub fn weighted_sup_error<T: Scalar>(num: &GridDensity<T>, reference: &GridDensity<T>, x: &[T], c: T) -> Result<T> {
    check_pair(num, reference)?;
    if !(c > T::one()) {
        return Err(Error::InvalidParameter(format!("weight inflation must exceed 1, got {c}")));
    }
    let grid = &num.grid;
    let mut z = vec![T::zero(); x.len()];
    let mut best = T::zero();
    for idx in 0..grid.len() {
        let node = grid.node(idx);
        for i in 0..z.len() {
            z[i] = node[i] - x[i];
        }
        let w = g_unchecked(c, num.time, &z);
        if w > T::zero() {
            best = best.max((num.values[idx] - reference.values[idx]).abs() / w);
        }
    }
    Ok(best)
}

/// Total variation distance `(1/2) int |num - ref|` (trapezoid).
pub fn tv_error<T: Scalar>(num: &GridDensity<T>, reference: &GridDensity<T>) -> Result<T> {
    check_pair(num, reference)?;
    let total: T = (0..num.grid.len())
        .map(|i| num.grid.weight(i) * (num.values[i] - reference.values[i]).abs())
        .sum();
    Ok(total / T::lit(2.0))
}

/// Least-squares line through `(ln h, ln error)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    /// Euclidean norm of the log residuals.
    pub residual_norm: f64,
    pub residuals: Vec<f64>,
}

pub fn fit_rate(pairs: &[(f64, f64)]) -> Result<RateFit> {
    if pairs.len() < 3 {
        return Err(Error::InvalidParameter(format!("rate fit needs at least 3 points, got {}", pairs.len())));
    }
    if let Some(&(h, e)) = pairs.iter().find(|&&(h, e)| !(h > 0.0 && e > 0.0 && h.is_finite() && e.is_finite())) {
        return Err(Error::InvalidParameter(format!("rate fit needs positive finite data, got ({h}, {e})")));
    }
    let xs: Vec<f64> = pairs.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1.ln()).collect();
    let m = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / m, ys.iter().sum::<f64>() / m);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidParameter("rate fit needs at least two distinct step sizes".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residuals: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| y - (intercept + slope * x)).collect();
    let residual_norm = residuals.iter().map(|r| r * r).sum::<f64>().sqrt();
    Ok(RateFit {
        slope,
        intercept,
        residual_norm,
        residuals,
    })
}

/// One row of a rate study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub n: usize,
    pub h: f64,
    pub weighted_sup_error: f64,
    pub tv_error: f64,
}

/// Rate study outcome: rows sorted by `n`, the fit of the weighted sup
/// error, and the pass flag `slope >= alpha/2 - slack`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub variant: Variant,
    pub drift: serde_json::Value,
    pub rows: Vec<RateRow>,
    pub slope: f64,
    pub intercept: f64,
    pub residual_norm: f64,
    pub alpha_over_2: f64,
    pub slack: f64,
    pub pass: bool,
}

impl RateReport {
    pub fn new(variant: Variant, drift: serde_json::Value, mut rows: Vec<RateRow>, alpha: f64, slack: f64) -> Result<Self> {
        rows.sort_by_key(|r| r.n);
        let pairs: Vec<(f64, f64)> = rows.iter().map(|r| (r.h, r.weighted_sup_error)).collect();
        let fit = fit_rate(&pairs)?;
        Ok(RateReport {
            variant,
            drift,
            rows,
            slope: fit.slope,
            intercept: fit.intercept,
            residual_norm: fit.residual_norm,
            alpha_over_2: alpha / 2.0,
            slack,
            pass: fit.slope >= alpha / 2.0 - slack,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,h,weighted_sup_error,tv_error\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{:.16e},{:.16e},{:.16e}", r.n, r.h, r.weighted_sup_error, r.tv_error);
        }
        out
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "variant": self.variant,
            "drift": self.drift,
            "slope": self.slope,
            "intercept": self.intercept,
            "residual_norm": self.residual_norm,
            "alpha_over_2": self.alpha_over_2,
            "slack": self.slack,
            "pass": self.pass,
        })
    }
}

/// Test functions for weak errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TestFunction {
    /// `x_1`.
    Coordinate,
    /// `|x|^2`.
    SquaredNorm,
    /// `e * exp(-1 / (1 - |x|^2))` on the unit ball, 0 outside.
    Bump,
    /// `1{x_1 > level}`.
    HalfSpace(f64),
}

impl TestFunction {
    pub fn eval<T: Scalar>(&self, x: &[T]) -> f64 {
        match *self {
            TestFunction::Coordinate => x[0].as_f64(),
            TestFunction::SquaredNorm => x.iter().map(|v| v.as_f64().powi(2)).sum(),
            TestFunction::Bump => {
                let r2: f64 = x.iter().map(|v| v.as_f64().powi(2)).sum();
                if r2 < 1.0 {
                    (1.0 - 1.0 / (1.0 - r2)).exp()
                } else {
                    0.0
                }
            }
            TestFunction::HalfSpace(level) => {
                if x[0].as_f64() > level {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl fmt::Display for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TestFunction::Coordinate => write!(f, "coordinate"),
            TestFunction::SquaredNorm => write!(f, "squared_norm"),
            TestFunction::Bump => write!(f, "bump"),
            TestFunction::HalfSpace(l) if *l == 0.0 => write!(f, "half_space"),
            TestFunction::HalfSpace(l) => write!(f, "half_space:{l}"),
        }
    }
}

impl FromStr for TestFunction {
    type Err = Error;

    /// `coordinate`, `squared_norm`, `bump`, `half_space` or `half_space:<level>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coordinate" => Ok(TestFunction::Coordinate),
            "squared_norm" => Ok(TestFunction::SquaredNorm),
            "bump" => Ok(TestFunction::Bump),
            "half_space" => Ok(TestFunction::HalfSpace(0.0)),
            _ => match s.strip_prefix("half_space:").map(str::parse::<f64>) {
                Some(Ok(level)) if level.is_finite() => Ok(TestFunction::HalfSpace(level)),
                _ => Err(Error::InvalidParameter(format!("unknown test function '{s}'"))),
            },
        }
    }
}

impl Serialize for TestFunction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for TestFunction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Common-random-numbers estimate of `E phi(X^h_T) - E phi(X^{h_ref}_T)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakErrorEstimate {
    pub phi: TestFunction,
    pub n: usize,
    pub n_ref: usize,
    pub samples: usize,
    pub estimate: f64,
    pub std_error: f64,
    /// 95% normal interval.
    pub ci_low: f64,
    pub ci_high: f64,
    pub coarse_mean: f64,
    pub fine_mean: f64,
}

pub fn mc_weak_error<T: Scalar>(
    params: &SchemeParams<T>,
    phi: TestFunction,
    n_ref: usize,
    samples: usize,
    seed: u64,
) -> Result<WeakErrorEstimate> {
    if samples < 100 {
        return Err(Error::InvalidParameter(format!("weak error needs at least 100 samples, got {samples}")));
    }
    if n_ref == 0 || !n_ref.is_multiple_of(params.n) {
        return Err(Error::InvalidParameter(format!("n_ref = {n_ref} must be a multiple of n = {}", params.n)));
    }
    let pairs: Vec<(f64, f64)> = (0..samples as u64)
        .into_par_iter()
        .map(|i| {
            coupled_terminals(params, n_ref, seed, i).map(|(coarse, fine)| (phi.eval(&coarse), phi.eval(&fine)))
        })
        .collect::<Result<_>>()?;
    let m = samples as f64;
    let (mut sc, mut sf, mut sd) = (0.0, 0.0, 0.0);
    for &(c, f) in &pairs {
        sc += c;
        sf += f;
        sd += c - f;
    }
    let mean = sd / m;
    let var = pairs.iter().map(|&(c, f)| (c - f - mean).powi(2)).sum::<f64>() / (m - 1.0);
    let se = (var / m).sqrt();
    let z = 1.959_963_984_540_054;
    Ok(WeakErrorEstimate {
        phi,
        n: params.n,
        n_ref,
        samples,
        estimate: mean,
        std_error: se,
        ci_low: mean - z * se,
        ci_high: mean + z * se,
        coarse_mean: sc / m,
        fine_mean: sf / m,
    })
}

/// Kolmogorov-Smirnov distance between a grid CDF and a sample (d = 1).
pub fn ks_distance<T: Scalar>(density: &GridDensity<T>, samples: &[f64]) -> f64 {
    let mut xs: Vec<f64> = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let cdf: Vec<f64> = density.cdf().iter().map(|v| v.as_f64()).collect();
    let grid = &density.grid;
    let y0 = grid.coord(0, 0).as_f64();
    let dy = grid.spacing().as_f64();
    let last = grid.points() - 1;
    let at = |y: f64| -> f64 {
        let pos = (y - y0) / dy;
        if pos <= 0.0 {
            return 0.0;
        }
        if pos >= last as f64 {
            return cdf[last];
        }
        // the CDF of the trapezoid density is piecewise quadratic; linear
        // interpolation between nodes is exact to O(dy^2 * |gamma'|)
        let j = pos.floor() as usize;
        let f = pos - j as f64;
        cdf[j] * (1.0 - f) + cdf[j + 1] * f
    };
    let m = xs.len() as f64;
    let mut best = 0.0f64;
    for (i, &x) in xs.iter().enumerate() {
        let f = at(x);
        best = best.max((f - i as f64 / m).abs()).max(((i + 1) as f64 / m - f).abs());
    }
    best
}

/// The two integral inequalities of the Gronwall-Volterra lemma:
/// I: `f(t) <= eta + delta t^beta int_0^t f(s) s^(-beta_tilde) ds`;
/// II: `f(t) <= a + b t^beta_check int_0^t f(s) s^(-beta_tilde) (t - s)^(-beta_hat) ds`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "case", rename_all = "snake_case")]
pub enum GronwallCase {
    I {
        beta_tilde: f64,
        beta: f64,
        eta: f64,
        delta: f64,
    },
    II {
        beta_tilde: f64,
        beta_hat: f64,
        beta_check: f64,
        a: f64,
        b: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GronwallInput {
    #[serde(flatten)]
    pub case: GronwallCase,
    pub horizon: f64,
}

impl GronwallInput {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        match self.case {
            GronwallCase::I {
                beta_tilde,
                beta,
                eta,
                delta,
            } => {
                if !(beta_tilde < 1.0) || !(beta > beta_tilde - 1.0) {
                    return bad(format!("case I needs beta_tilde < 1 and beta > beta_tilde - 1 (got {beta_tilde}, {beta})"));
                }
                if !(eta >= 0.0 && delta >= 0.0) {
                    return bad("case I needs eta, delta >= 0".into());
                }
            }
            GronwallCase::II {
                beta_tilde,
                beta_hat,
                beta_check,
                a,
                b,
            } => {
                if !(beta_tilde < 1.0 && beta_hat < 1.0) || !(beta_check > beta_tilde + beta_hat - 1.0) {
                    return bad(format!(
                        "case II needs beta_tilde, beta_hat < 1 and beta_check > beta_tilde + beta_hat - 1 \
                         (got {beta_tilde}, {beta_hat}, {beta_check})"
                    ));
                }
                if !(a >= 0.0 && b >= 0.0) {
                    return bad("case II needs a, b >= 0".into());
                }
            }
        }
        Ok(())
    }
}

/// Case II reduced to case I: `f <= eta + delta t^beta int f s^(-beta_tilde)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GronwallReduction {
    pub eta: f64,
    pub delta: f64,
    pub beta: f64,
    pub beta_tilde: f64,
    /// Doubling steps taken (0 when no singularity at `s = t`).
    pub iterations: usize,
}

fn case_one_constant(eta: f64, delta: f64, beta: f64, beta_tilde: f64, horizon: f64) -> f64 {
    if delta == 0.0 {
        return eta;
    }
    eta * (delta * horizon.powf(1.0 + beta - beta_tilde) / (1.0 + beta.min(0.0) - beta_tilde)).exp()
}

/// Iterates inequality II until the kernel exponent at `s = t` is `<= 0`.
pub fn gronwall_reduction(input: &GronwallInput) -> Result<GronwallReduction> {
    input.validate()?;
    let t = input.horizon;
    match input.case {
        GronwallCase::I {
            beta_tilde,
            beta,
            eta,
            delta,
        } => Ok(GronwallReduction {
            eta,
            delta,
            beta,
            beta_tilde,
            iterations: 0,
        }),
        GronwallCase::II {
            beta_tilde,
            beta_hat,
            beta_check,
            a,
            b,
        } => {
            if beta_hat <= 0.0 {
                // (t - s)^(-beta_hat) <= t^(-beta_hat)
                return Ok(GronwallReduction {
                    eta: a,
                    delta: b,
                    beta: beta_check - beta_hat,
                    beta_tilde,
                    iterations: 0,
                });
            }
            let gamma = 1.0 + beta_check - beta_tilde - beta_hat;
            let (mut an, mut bn) = (a, b);
            let mut n = 0usize;
            if beta_tilde >= beta_check {
                // exponent at s = t after n steps: beta_hat - (2^n - 1) gamma
                while beta_hat - (2f64.powi(n as i32) - 1.0) * gamma > 0.0 {
                    let p = 2f64.powi(n as i32);
                    let rest = 1.0 + (p - 1.0) * gamma - beta_hat;
                    let next_a = an + an * bn * t.powf(p * gamma) * beta_function(1.0 - beta_tilde, rest)?;
                    bn = bn * bn * beta_function(p * gamma, rest)?;
                    an = next_a;
                    n += 1;
                    guard(n)?;
                }
            } else {
                // exponent at s = t after n steps: 2^n (beta_hat - 1) + 1
                while 2f64.powi(n as i32) * (beta_hat - 1.0) + 1.0 > 0.0 {
                    let p = 2f64.powi(n as i32);
                    let next_a = an + an * bn * t.powf(p * gamma) * beta_function(1.0 - beta_tilde, p * (1.0 - beta_hat))?;
                    bn = bn * bn * beta_function(p * (1.0 - beta_hat), p * (1.0 - beta_hat))?;
                    an = next_a;
                    n += 1;
                    guard(n)?;
                }
            }
            Ok(GronwallReduction {
                eta: an,
                delta: bn,
                beta: 2f64.powi(n as i32) * gamma + beta_tilde - 1.0,
                beta_tilde,
                iterations: n,
            })
        }
    }
}

fn guard(n: usize) -> Result<()> {
    if n > 60 {
        Err(Error::NonConvergent("doubling iteration did not remove the singularity".into()))
    } else {
        Ok(())
    }
}

/// Finite `K` with `sup_[0,T] f <= K` for every bounded nonnegative `f`
/// satisfying the inequality.
pub fn gronwall_constant(input: &GronwallInput) -> Result<f64> {
    let r = gronwall_reduction(input)?;
    Ok(case_one_constant(r.eta, r.delta, r.beta, r.beta_tilde, input.horizon))
}

/// Bound on `sup_[0,t] f` from one application of the inequality, valid
/// while the resulting denominator is positive; `None` beyond that range.
pub fn small_time_bound(input: &GronwallInput, t: f64) -> Result<Option<f64>> {
    input.validate()?;
    if !(t >= 0.0 && t <= input.horizon) {
        return Err(Error::InvalidParameter(format!("t = {t} outside [0, T]")));
    }
    let value = match input.case {
        GronwallCase::I {
            beta_tilde,
            beta,
            eta,
            delta,
        } => {
            let den = 1.0 - beta_tilde - delta * t.powf(beta + 1.0 - beta_tilde);
            (den > 0.0).then(|| eta * (1.0 - beta_tilde) / den)
        }
        GronwallCase::II {
            beta_tilde,
            beta_hat,
            beta_check,
            a,
            b,
        } => {
            let gamma = beta_check + 1.0 - beta_tilde - beta_hat;
            let den = 1.0 - b * beta_function(1.0 - beta_tilde, 1.0 - beta_hat)? * t.powf(gamma);
            (den > 0.0).then(|| a / den)
        }
    };
    Ok(value)
}

/// Extremal solution of the inequality taken with equality, against the
/// constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GronwallCheck {
    pub input: GronwallInput,
    pub points: usize,
    pub sup_f: f64,
    pub constant: f64,
    pub tolerance: f64,
    pub satisfied: bool,
}

/// Solves `f(t) = A + B t^P int_0^t f(s) s^(-beta_tilde) (t - s)^(-beta_hat) ds`
/// on `points` uniform nodes by product integration with piecewise linear
/// `f`. Cells touching `s = 0` or `s = t` use Gauss-Legendre in the variable
/// `v` with `s = v^(1/(1 - e))`, which removes the endpoint singularity.
/// When `f` itself has a `t^(1 - beta_tilde)` onset the error is first order
/// in the spacing.
pub fn gronwall_numeric_check(input: &GronwallInput, points: usize) -> Result<GronwallCheck> {
    input.validate()?;
    if points < 8 {
        return Err(Error::InvalidParameter("numeric check needs at least 8 points".into()));
    }
    let (big_a, big_b, pw, bt, bh) = match input.case {
        GronwallCase::I {
            beta_tilde,
            beta,
            eta,
            delta,
        } => (eta, delta, beta, beta_tilde, 0.0),
        GronwallCase::II {
            beta_tilde,
            beta_hat,
            beta_check,
            a,
            b,
        } => (a, b, beta_check, beta_tilde, beta_hat),
    };
    let constant = gronwall_constant(input)?;
    let n = points - 1;
    let dt = input.horizon / n as f64;
    let gl: Vec<(f64, f64)> = gauss_legendre(8).into_iter().map(|(x, w)| (0.5 * (x + 1.0), 0.5 * w)).collect();
    // rule on [0, 1] for a weight singular like v^(-e) at 0
    let left_rule = |e: f64| -> Vec<(f64, f64)> {
        if e <= 0.0 {
            return gl.clone();
        }
        let p = 1.0 / (1.0 - e);
        gl.iter().map(|&(v, w)| (v.powf(p), w * p * v.powf(p - 1.0))).collect()
    };
    let left = left_rule(bt);
    let right: Vec<(f64, f64)> = left_rule(bh).into_iter().map(|(x, w)| (1.0 - x, w)).collect();
    let split: Vec<(f64, f64)> = left
        .iter()
        .map(|&(x, w)| (0.5 * x, 0.5 * w))
        .chain(right.iter().map(|&(x, w)| (0.5 + 0.5 * x, 0.5 * w)))
        .collect();
    // regular-cell tables: (j + xi)^(-bt) and (r - xi)^(-bh)
    let a_tab: Vec<[f64; 8]> = (0..=n).map(|j| std::array::from_fn(|m| (j as f64 + gl[m].0).powf(-bt))).collect();
    let b_tab: Vec<[f64; 8]> = (0..=n).map(|r| std::array::from_fn(|m| (r as f64 - gl[m].0).powf(-bh))).collect();
    let scale = dt.powf(1.0 - bt - bh);

    let mut f = vec![0.0f64; n + 1];
    f[0] = big_a;
    let mut sup = big_a;
    for i in 1..=n {
        let ti = i as f64 * dt;
        let coef = big_b * ti.powf(pw) * scale;
        // returns (weight on f_j, weight on f_(j+1)) for cell j
        let special = |j: usize, rule: &[(f64, f64)]| -> (f64, f64) {
            let (mut l, mut r) = (0.0, 0.0);
            for &(xi, w) in rule {
                let k = w * (j as f64 + xi).powf(-bt) * (i as f64 - j as f64 - xi).powf(-bh);
                l += k * (1.0 - xi);
                r += k * xi;
            }
            (l, r)
        };
        let mut known = 0.0;
        for j in 1..i.saturating_sub(1) {
            let (at, bt_row) = (&a_tab[j], &b_tab[i - j]);
            let (mut l, mut r) = (0.0, 0.0);
            for m in 0..8 {
                let k = gl[m].1 * at[m] * bt_row[m];
                l += k * (1.0 - gl[m].0);
                r += k * gl[m].0;
            }
            known += l * f[j] + r * f[j + 1];
        }
        let diag = if i == 1 {
            let (l, r) = special(0, &split);
            known += l * f[0];
            r
        } else {
            let (l0, r0) = special(0, &left);
            known += l0 * f[0] + r0 * f[1];
            let (l, r) = special(i - 1, &right);
            known += l * f[i - 1];
            r
        };
        let den = 1.0 - coef * diag;
        if !(den > 0.0) {
            return Err(Error::NonConvergent(format!(
                "implicit step at t = {ti} has nonpositive denominator; refine the grid"
            )));
        }
        let fi = (big_a + coef * known) / den;
        if !fi.is_finite() {
            return Err(Error::NonConvergent(format!("discrete solution overflowed at t = {ti}")));
        }
        f[i] = fi;
        sup = sup.max(fi);
    }
    let tolerance = 1e-6;
    Ok(GronwallCheck {
        input: *input,
        points,
        sup_f: sup,
        constant,
        tolerance,
        satisfied: sup <= constant * (1.0 + tolerance),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{Grid, GridDensity};
    use crate::driftlib::{DriftFamily, DriftSpec, Exponent};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn gaussian_density(c: f64, shift: f64, scale: f64) -> GridDensity<f64> {
        let grid = Grid::new(vec![0.0], 8.0, 801).unwrap();
        let values = (0..grid.len()).map(|i| scale * g_unchecked(c, 1.0, &[grid.node(i)[0] - shift])).collect();
        GridDensity::new(1.0, Some(4), grid, values)
    }

    #[test]
    fn weighted_error_examples() {
        let a = gaussian_density(1.0, 0.0, 1.0);
        assert_eq!(weighted_sup_error(&a, &a, &[0.0], 2.0).unwrap(), 0.0);
        let eps = 1e-3;
        let mut b = a.clone();
        for i in 0..b.values.len() {
            b.values[i] += eps * g_unchecked(2.0, 1.0, &b.grid.node(i));
        }
        assert_relative_eq!(weighted_sup_error(&b, &a, &[0.0], 2.0).unwrap(), eps, max_relative = 1e-12);
        assert!(weighted_sup_error(&a, &a, &[0.0], 1.0).is_err());
        let other = GridDensity::new(1.0, None, Grid::new(vec![0.0], 8.0, 401).unwrap(), vec![0.0; 401]);
        assert!(matches!(tv_error(&a, &other), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn tv_examples() {
        let grid = Grid::new(vec![0.0], 2.0, 401).unwrap();
        let bump = |center: f64| {
            let values: Vec<f64> = (0..401)
                .map(|i| if (grid.node(i)[0] - center).abs() < 0.5 { 1.0 } else { 0.0 })
                .collect();
            let d = GridDensity::new(1.0, None, grid.clone(), values);
            let m = d.mass;
            GridDensity::new(1.0, None, grid.clone(), d.values.iter().map(|v| v / m).collect())
        };
        let (p, q) = (bump(-1.0), bump(1.0));
        assert_eq!(tv_error(&p, &p).unwrap(), 0.0);
        assert_relative_eq!(tv_error(&p, &q).unwrap(), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn tv_below_weighted_error() {
        let a = gaussian_density(1.0, 0.0, 1.0);
        let b = gaussian_density(1.0, 0.2, 1.0);
        let tv = tv_error(&a, &b).unwrap();
        let ws = weighted_sup_error(&a, &b, &[0.0], 2.0).unwrap();
        assert!(tv > 0.0 && tv <= ws);
    }

    #[test]
    fn fit_examples() {
        let hs = [1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0];
        let fit = fit_rate(&hs.map(|h: f64| (h, 2.0 * h.sqrt()))).unwrap();
        assert_relative_eq!(fit.slope, 0.5, max_relative = 1e-12);
        assert_relative_eq!(fit.intercept, 2f64.ln(), max_relative = 1e-12);
        assert!(fit.residual_norm < 1e-12);
        let fit = fit_rate(&hs.map(|h| (h, 3.0 * h))).unwrap();
        assert_relative_eq!(fit.slope, 1.0, max_relative = 1e-12);
        assert!(fit_rate(&[(0.1, 1.0), (0.2, 2.0)]).is_err());
        assert!(fit_rate(&[(0.1, 1.0), (0.2, 0.0), (0.3, 1.0)]).is_err());
    }

    #[test]
    fn report_csv_and_pass_flag() {
        let rows = [64usize, 16, 32]
            .iter()
            .map(|&n| RateRow {
                n,
                h: 1.0 / n as f64,
                weighted_sup_error: (1.0 / n as f64).powf(0.3),
                tv_error: 0.1,
            })
            .collect();
        let rep = RateReport::new(Variant::Primary, serde_json::json!({}), rows, 0.5, 0.1).unwrap();
        assert_eq!(rep.rows.iter().map(|r| r.n).collect::<Vec<_>>(), vec![16, 32, 64]);
        assert!(rep.pass);
        assert!(rep.to_csv().starts_with("n,h,weighted_sup_error,tv_error\n16,6.25"));
        assert_eq!(rep.summary_json()["pass"], true);
    }

    #[test]
    fn test_function_ids_round_trip() {
        for s in ["coordinate", "squared_norm", "bump", "half_space", "half_space:0.5"] {
            assert_eq!(s.parse::<TestFunction>().unwrap().to_string(), s);
        }
        assert!("cube".parse::<TestFunction>().is_err());
        assert_eq!(TestFunction::Bump.eval(&[0.0]), 1.0);
        assert_eq!(TestFunction::Bump.eval(&[1.0]), 0.0);
    }

    fn params(family: DriftFamily<f64>, n: usize) -> SchemeParams<f64> {
        let drift = DriftSpec::new(family, 1, Exponent::Infinite, Exponent::Infinite).unwrap();
        SchemeParams::new(drift, 1.0, n, vec![0.0], None, Variant::Primary).unwrap()
    }

    #[test]
    fn weak_error_trivial_cases() {
        let zero = params(DriftFamily::Zero, 8);
        let est = mc_weak_error(&zero, TestFunction::Coordinate, 64, 200, 3).unwrap();
        // coarse increments are sums of the fine ones
        assert!(est.estimate.abs() < 1e-13 && est.std_error < 1e-13);
        let cst = params(DriftFamily::Constant { mu: vec![0.4] }, 8);
        let est = mc_weak_error(&cst, TestFunction::Coordinate, 64, 200, 3).unwrap();
        assert!(est.estimate.abs() < 1e-12);
        let sign = params(DriftFamily::BoundedSign { beta: 1.0 }, 16);
        let est = mc_weak_error(&sign, TestFunction::HalfSpace(0.5), 16, 200, 3).unwrap();
        assert_eq!(est.estimate, 0.0);
        assert!(mc_weak_error(&sign, TestFunction::Coordinate, 64, 99, 3).is_err());
        assert!(mc_weak_error(&sign, TestFunction::Coordinate, 40, 200, 3).is_err());
    }

    #[test]
    fn gronwall_examples() {
        let one = GronwallInput {
            case: GronwallCase::I {
                beta_tilde: 0.0,
                beta: 0.0,
                eta: 1.0,
                delta: 1.0,
            },
            horizon: 1.0,
        };
        assert_relative_eq!(gronwall_constant(&one).unwrap(), std::f64::consts::E, max_relative = 1e-10);
        let flat = GronwallInput {
            case: GronwallCase::I {
                beta_tilde: 0.3,
                beta: -0.2,
                eta: 2.5,
                delta: 0.0,
            },
            horizon: 3.0,
        };
        assert_eq!(gronwall_constant(&flat).unwrap(), 2.5);
        let two = GronwallInput {
            case: GronwallCase::II {
                beta_tilde: 0.0,
                beta_hat: 0.5,
                beta_check: 0.0,
                a: 1.0,
                b: 1.0,
            },
            horizon: 1.0,
        };
        assert_relative_eq!(small_time_bound(&two, 0.04).unwrap().unwrap(), 5.0 / 3.0, max_relative = 1e-12);
        assert_eq!(small_time_bound(&two, 0.5).unwrap(), None);
        let bad = GronwallInput {
            case: GronwallCase::II {
                beta_tilde: 0.5,
                beta_hat: 0.5,
                beta_check: -0.1,
                a: 1.0,
                b: 1.0,
            },
            horizon: 1.0,
        };
        assert!(gronwall_constant(&bad).is_err());
    }

    #[test]
    fn doubling_counts_match_closed_forms() {
        // branch beta_tilde >= beta_check: ceil(log2(1 + beta_hat / gamma))
        let input = GronwallInput {
            case: GronwallCase::II {
                beta_tilde: 0.2,
                beta_hat: 0.7,
                beta_check: 0.0,
                a: 1.0,
                b: 0.5,
            },
            horizon: 1.0,
        };
        let r = gronwall_reduction(&input).unwrap();
        let gamma: f64 = 1.0 + 0.0 - 0.2 - 0.7;
        assert_eq!(r.iterations, (1.0 + 0.7 / gamma).log2().ceil() as usize);
        assert!(r.beta > 0.2 - 1.0);
        // other branch: ceil(-log2(1 - beta_hat))
        let input = GronwallInput {
            case: GronwallCase::II {
                beta_tilde: 0.1,
                beta_hat: 0.6,
                beta_check: 0.5,
                a: 1.0,
                b: 0.5,
            },
            horizon: 1.0,
        };
        let r = gronwall_reduction(&input).unwrap();
        assert_eq!(r.iterations, (-(1.0f64 - 0.6).log2()).ceil() as usize);
    }

    #[test]
    fn case_two_without_singularity_is_case_one() {
        let two = GronwallInput {
            case: GronwallCase::II {
                beta_tilde: 0.3,
                beta_hat: 0.0,
                beta_check: 0.1,
                a: 1.5,
                b: 0.7,
            },
            horizon: 1.3,
        };
        let one = GronwallInput {
            case: GronwallCase::I {
                beta_tilde: 0.3,
                beta: 0.1,
                eta: 1.5,
                delta: 0.7,
            },
            horizon: 1.3,
        };
        assert_eq!(gronwall_constant(&two).unwrap(), gronwall_constant(&one).unwrap());
        let (c1, c2) = (gronwall_numeric_check(&one, 512).unwrap(), gronwall_numeric_check(&two, 512).unwrap());
        assert_relative_eq!(c1.sup_f, c2.sup_f, max_relative = 1e-12);
    }

    #[test]
    fn classical_gronwall_fixed_point() {
        let input = GronwallInput {
            case: GronwallCase::I {
                beta_tilde: 0.0,
                beta: 0.0,
                eta: 1.0,
                delta: 1.0,
            },
            horizon: 1.0,
        };
        let check = gronwall_numeric_check(&input, 4096).unwrap();
        assert_relative_eq!(check.sup_f, std::f64::consts::E, max_relative = 1e-7);
        assert!(check.satisfied);
    }

    #[test]
    fn singular_fixed_point_matches_series() {
        // f = eta + delta int_0^t f(s) s^(-1/2) ds has f = eta exp(2 delta sqrt(t))
        let input = GronwallInput {
            case: GronwallCase::I {
                beta_tilde: 0.5,
                beta: 0.0,
                eta: 1.0,
                delta: 0.8,
            },
            horizon: 1.0,
        };
        let check = gronwall_numeric_check(&input, 2048).unwrap();
        // first order in the spacing: f ~ sqrt(t) near the singular start
        assert_relative_eq!(check.sup_f, (1.6f64).exp(), max_relative = 5e-4);
        // and the closed-form constant is exactly this value here
        assert_relative_eq!(check.constant, (1.6f64).exp(), max_relative = 1e-12);
        assert!(check.satisfied);
    }

    #[test]
    fn abel_equation_fixed_point() {
        // f = 1 + int_0^t f(s) (t - s)^(-1/2) ds has f = e^(pi t) erfc(-sqrt(pi t))
        let input = GronwallInput {
            case: GronwallCase::II {
                beta_tilde: 0.0,
                beta_hat: 0.5,
                beta_check: 0.0,
                a: 1.0,
                b: 1.0,
            },
            horizon: 0.5,
        };
        let check = gronwall_numeric_check(&input, 2048).unwrap();
        let pi = std::f64::consts::PI;
        let exact = (pi * 0.5).exp() * libm::erfc(-(pi * 0.5).sqrt());
        assert_relative_eq!(check.sup_f, exact, max_relative = 1e-4);
        assert!(check.satisfied);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn case_two_monotone_in_b_and_horizon(
            bt in 0.0f64..0.7, bh in 0.05f64..0.7, gamma in 0.2f64..1.0,
            a in 0.5f64..2.0, b in 0.1f64..1.0, t in 0.3f64..1.5, db in 0.0f64..0.5, dt in 0.0f64..0.5,
        ) {
            let mk = |b: f64, horizon: f64| GronwallInput {
                case: GronwallCase::II { beta_tilde: bt, beta_hat: bh, beta_check: gamma + bt + bh - 1.0, a, b },
                horizon,
            };
            let base = gronwall_constant(&mk(b, t)).unwrap();
            prop_assert!(gronwall_constant(&mk(b + db, t)).unwrap() >= base);
            prop_assert!(gronwall_constant(&mk(b, t + dt)).unwrap() >= base);
        }
    }
}
