//! Adaptive Gauss-Kronrod quadrature with power-law endpoint substitution.
//!
//! Integrable endpoint singularities of the form `(x - a)^(-s)`, `s < 1`, are
//! removed by the change of variables `x = a + (b - a) v^p` with
//! `p = 1 / (1 - s)`, after which the integrand is bounded and the 7/15-point
//! Kronrod pair converges at its usual rate.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_5,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_48,
    0.0,
];

const WGK: [f64; 8] = [
    0.022_935_322_010_529_224,
    0.063_092_092_629_978_56,
    0.104_790_010_322_250_19,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_42,
    0.204_432_940_075_298_89,
    0.209_482_141_084_727_82,
];

const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_64,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// Two-point Gauss-Legendre rule on `[-1, 1]`.
pub const GAUSS_LEGENDRE_2: [(f64, f64); 2] = [
    (-0.577_350_269_189_625_7, 1.0),
    (0.577_350_269_189_625_7, 1.0),
];

/// Three-point Gauss-Legendre rule on `[-1, 1]`.
pub const GAUSS_LEGENDRE_3: [(f64, f64); 3] = [
    (-0.774_596_669_241_483_4, 5.0 / 9.0),
    (0.0, 8.0 / 9.0),
    (0.774_596_669_241_483_4, 5.0 / 9.0),
];

/// `n`-point Gauss-Legendre rule on `[-1, 1]` (Newton iteration on `P_n`).
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    assert!(n >= 1, "a rule needs at least one node");
    let mut rule = vec![(0.0, 0.0); n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { x } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pm) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        rule[i] = (-x, w);
        rule[n - 1 - i] = (x, w);
    }
    rule
}

/// Integral value with an absolute error estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadResult {
    pub value: f64,
    pub error: f64,
}

impl QuadResult {
    pub const ZERO: QuadResult = QuadResult {
        value: 0.0,
        error: 0.0,
    };
}

impl std::ops::Add for QuadResult {
    type Output = QuadResult;

    fn add(self, rhs: QuadResult) -> QuadResult {
        QuadResult {
            value: self.value + rhs.value,
            error: self.error + rhs.error,
        }
    }
}

/// Stopping rule for [`integrate`].
#[derive(Debug, Clone, Copy)]
pub struct Tolerance {
    pub abs: f64,
    pub rel: f64,
    pub max_intervals: usize,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            abs: 1e-14,
            rel: 1e-8,
            max_intervals: 4000,
        }
    }
}

impl Tolerance {
    pub fn relative(rel: f64) -> Self {
        Tolerance {
            rel,
            ..Tolerance::default()
        }
    }
}

fn gk15<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> QuadResult {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = half * XGK[j];
        let pair = f(center - dx) + f(center + dx);
        kronrod += WGK[j] * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    QuadResult {
        value: kronrod * half,
        error: ((kronrod - gauss) * half).abs(),
    }
}

struct Segment {
    a: f64,
    b: f64,
    est: QuadResult,
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.est.error == other.est.error
    }
}

impl Eq for Segment {}

impl PartialOrd for Segment {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Segment {
    fn cmp(&self, other: &Self) -> Ordering {
        self.est.error.total_cmp(&other.est.error)
    }
}

/// Globally adaptive Gauss-Kronrod integration of `f` over `[a, b]`.
///
/// Bisects the interval with the largest error estimate until the summed
/// estimate drops below `max(tol.abs, tol.rel * |I|)`.
pub fn integrate<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, tol: Tolerance) -> Result<QuadResult> {
    if a == b {
        return Ok(QuadResult::ZERO);
    }
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "integration bounds must be finite, got [{a}, {b}]"
        )));
    }
    let first = gk15(&mut f, a, b);
    if !first.value.is_finite() {
        return Err(Error::Quadrature(format!("non-finite integrand on [{a}, {b}]")));
    }
    let mut heap = BinaryHeap::new();
    heap.push(Segment { a, b, est: first });
    let mut total = first;
    loop {
        let target = tol.abs.max(tol.rel * total.value.abs());
        if total.error <= target {
            break;
        }
        if heap.len() >= tol.max_intervals {
            return Err(Error::Quadrature(format!(
                "error {:.3e} above target {:.3e} after {} intervals",
                total.error,
                target,
                heap.len()
            )));
        }
        let worst = heap.pop().expect("heap never empty");
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            // interval exhausted at machine precision; accept what we have
            heap.push(worst);
            break;
        }
        let left = gk15(&mut f, worst.a, mid);
        let right = gk15(&mut f, mid, worst.b);
        if !(left.value.is_finite() && right.value.is_finite()) {
            return Err(Error::Quadrature(format!(
                "non-finite integrand on [{}, {}]",
                worst.a, worst.b
            )));
        }
        total.value += left.value + right.value - worst.est.value;
        total.error += left.error + right.error - worst.est.error;
        heap.push(Segment {
            a: worst.a,
            b: mid,
            est: left,
        });
        heap.push(Segment {
            a: mid,
            b: worst.b,
            est: right,
        });
    }
    // re-sum to shed the drift of the running updates
    let (value, error) = heap
        .iter()
        .fold((0.0, 0.0), |(v, e), s| (v + s.est.value, e + s.est.error));
    Ok(QuadResult { value, error })
}

/// Location of an integrable power singularity `|x - e|^(-order)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Singular {
    None,
    Left(f64),
    Right(f64),
}

/// Integrates over `[a, b]` after a power-law substitution that removes a
/// singularity of the given order (`< 1`) at one endpoint.
pub fn integrate_singular<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    singular: Singular,
    tol: Tolerance,
) -> Result<QuadResult> {
    let order = match singular {
        Singular::None => return integrate(f, a, b, tol),
        Singular::Left(s) | Singular::Right(s) => s,
    };
    if order >= 1.0 {
        return Err(Error::NotMember(format!(
            "endpoint singularity of order {order} is not integrable"
        )));
    }
    if order <= 0.0 {
        return integrate(f, a, b, tol);
    }
    let p = 1.0 / (1.0 - order);
    let len = b - a;
    let left = matches!(singular, Singular::Left(_));
    integrate(
        |v| {
            if v <= 0.0 {
                return 0.0;
            }
            let jac = len * p * v.powf(p - 1.0);
            let x = if left { a + len * v.powf(p) } else { b - len * v.powf(p) };
            f(x) * jac
        },
        0.0,
        1.0,
        tol,
    )
}

/// Integrates over `[a, b]` with power singularities of orders `left` and
/// `right` at the two ends, splitting at the midpoint.
pub fn integrate_two_sided<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    left: f64,
    right: f64,
    tol: Tolerance,
) -> Result<QuadResult> {
    let mid = 0.5 * (a + b);
    let lo = integrate_singular(&mut f, a, mid, Singular::Left(left), tol)?;
    let hi = integrate_singular(&mut f, mid, b, Singular::Right(right), tol)?;
    Ok(lo + hi)
}

/// Integrates over `[a, +inf)` via `x = a + v / (1 - v)`.
pub fn integrate_to_infinity<F: FnMut(f64) -> f64>(mut f: F, a: f64, tol: Tolerance) -> Result<QuadResult> {
    integrate(
        |v| {
            if v >= 1.0 {
                return 0.0;
            }
            let w = 1.0 - v;
            let y = f(a + v / w) / (w * w);
            if y.is_finite() {
                y
            } else {
                0.0
            }
        },
        0.0,
        1.0,
        tol,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn polynomial_is_exact() {
        let r = integrate(|x| x.powi(5) - 2.0 * x, 0.0, 2.0, Tolerance::default()).unwrap();
        assert_relative_eq!(r.value, 64.0 / 6.0 - 4.0, max_relative = 1e-14);
    }

    #[test]
    fn endpoint_singularity_via_substitution() {
        // 2 * int_0^1 x^-0.8 dx = 10
        let r = integrate_singular(
            |x| 2.0 * x.powf(-0.8),
            0.0,
            1.0,
            Singular::Left(0.8),
            Tolerance::relative(1e-10),
        )
        .unwrap();
        assert_relative_eq!(r.value, 10.0, max_relative = 1e-10);
    }

    #[test]
    fn two_sided_arcsine() {
        let r = integrate_two_sided(
            |u| (u * (1.0 - u)).powf(-0.5),
            0.0,
            1.0,
            0.5,
            0.5,
            Tolerance::relative(1e-12),
        )
        .unwrap();
        assert_relative_eq!(r.value, std::f64::consts::PI, max_relative = 1e-11);
    }

    #[test]
    fn half_line_gaussian() {
        let r = integrate_to_infinity(|x| (-x * x / 2.0).exp(), 0.0, Tolerance::relative(1e-10)).unwrap();
        assert_relative_eq!(r.value, (std::f64::consts::PI / 2.0).sqrt(), max_relative = 1e-9);
    }

    #[test]
    fn non_integrable_order_rejected() {
        let r = integrate_singular(|x| 1.0 / x, 0.0, 1.0, Singular::Left(1.0), Tolerance::default());
        assert!(matches!(r, Err(Error::NotMember(_))));
    }

    #[test]
    fn gauss_legendre_rules_integrate_polynomials() {
        let cubic = |x: f64| 4.0 * x.powi(3) + 3.0 * x * x;
        let two: f64 = GAUSS_LEGENDRE_2.iter().map(|&(x, w)| w * cubic(x)).sum();
        assert_relative_eq!(two, 2.0, max_relative = 1e-14);
        let quintic = |x: f64| x.powi(4) + x.powi(5);
        for n in [1usize, 2, 3, 8, 13] {
            let rule = gauss_legendre(n);
            let total: f64 = rule.iter().map(|r| r.1).sum();
            assert!((total - 2.0).abs() < 1e-14);
            // exact for degree 2n - 1
            let deg = 2 * n - 2;
            let m: f64 = rule.iter().map(|&(x, w)| w * x.powi(deg as i32)).sum();
            assert!((m - 2.0 / (deg as f64 + 1.0)).abs() < 1e-14, "n = {n}");
        }
        assert!((gauss_legendre(3)[0].0 - GAUSS_LEGENDRE_3[0].0).abs() < 1e-15);
        let three: f64 = GAUSS_LEGENDRE_3.iter().map(|&(x, w)| w * quintic(x)).sum();
        assert_relative_eq!(three, 0.4, max_relative = 1e-14);
    }
}
