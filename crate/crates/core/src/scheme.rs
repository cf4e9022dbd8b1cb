//! The two randomized, cutoffed Euler-Maruyama schemes
//! `X_{k+1} = X_k + (W_{t_{k+1}} - W_{t_k}) + h b_h(U_k, X_k)`, `U_k ~ U[t_k, t_{k+1}]`.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::driftlib::{Cutoff, DriftSpec, Variant};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, NormalStream, SubStream, UniformStream};
use crate::scalar::Scalar;

/// Horizon, step count, start point, cutoff constant, variant and drift.
#[derive(Debug, Clone)]
pub struct SchemeParams<T> {
    pub horizon: T,
    pub n: usize,
    pub x0: Vec<T>,
    pub b_const: T,
    pub variant: Variant,
    pub drift: DriftSpec<T>,
}

impl<T: Scalar> SchemeParams<T> {
    /// Validated parameters. `b_const = None` selects the drift's default.
    pub fn new(
        drift: DriftSpec<T>,
        horizon: T,
        n: usize,
        x0: Vec<T>,
        b_const: Option<T>,
        variant: Variant,
    ) -> Result<Self> {
        drift.alpha()?;
        if !(horizon > T::zero() && horizon.is_finite()) {
            return Err(Error::InvalidParameter("horizon must be positive and finite".into()));
        }
        if n == 0 {
            return Err(Error::InvalidParameter("step count must be at least 1".into()));
        }
        if x0.len() != drift.dim() || x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "start point must be a finite vector of dimension {}",
                drift.dim()
            )));
        }
        let b_const = b_const.unwrap_or_else(|| drift.default_cutoff_constant());
        if !(b_const > T::zero() && b_const.is_finite()) {
            return Err(Error::InvalidParameter("cutoff constant B must be positive".into()));
        }
        Ok(SchemeParams {
            horizon,
            n,
            x0,
            b_const,
            variant,
            drift,
        })
    }

    /// Same configuration with another step count.
    pub fn with_steps(&self, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("step count must be at least 1".into()));
        }
        Ok(SchemeParams { n, ..self.clone() })
    }

    pub fn dim(&self) -> usize {
        self.drift.dim()
    }

    /// `h = T / n`.
    pub fn h(&self) -> T {
        self.horizon / T::of_usize(self.n)
    }

    /// `t_k = k T / n`.
    pub fn time(&self, k: usize) -> T {
        T::of_usize(k) * self.horizon / T::of_usize(self.n)
    }

    pub fn cutoff(&self) -> Cutoff<T> {
        self.drift
            .cutoff(self.variant, self.h(), self.b_const)
            .expect("parameters validated at construction")
    }

    /// `B h^(1 - (1/q + d/(2 rho)))`, the largest drift increment of one step
    /// for the primary variant (`B h^(1/2)` for the zero-first variant).
    pub fn max_drift_increment(&self) -> T {
        self.cutoff().threshold * self.h()
    }
}

/// Largest grid index `k` with `k h <= s`, snapping quotients that are
/// within a few ulps of an integer (so `0.3 / 0.1` lands on 3).
pub fn step_floor_index<T: Scalar>(s: T, h: T) -> usize {
    let ratio = s / h;
    let nearest = ratio.round();
    let k = if (ratio - nearest).abs() <= T::lit(4.0) * T::epsilon() * nearest.max(T::one()) {
        nearest
    } else {
        ratio.floor()
    };
    k.to_usize().unwrap_or(0)
}

/// `tau_s = floor(s / h) h`.
pub fn step_floor<T: Scalar>(s: T, h: T) -> T {
    T::of_usize(step_floor_index(s, h)) * h
}

/// One simulated trajectory with every random input stored.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample<T> {
    pub times: Vec<T>,
    pub states: Vec<Vec<T>>,
    /// `U_k` in `[t_k, t_{k+1}]`.
    pub draws: Vec<T>,
    pub increments: Vec<Vec<T>>,
    pub seed: u64,
    pub stream: u64,
}

impl<T: Scalar> PathSample<T> {
    pub fn terminal(&self) -> &[T] {
        self.states.last().expect("paths have at least one state")
    }

    /// CSV with columns `k, t_k, U_k, dW_*, X_*`; the last row has no draw
    /// and no increment.
    pub fn to_csv(&self) -> String {
        let d = self.states[0].len();
        let mut out = String::from("k,t_k,U_k");
        for i in 0..d {
            let _ = write!(out, ",dW_{i}");
        }
        for i in 0..d {
            let _ = write!(out, ",X_{i}");
        }
        out.push('\n');
        for (k, (t, x)) in self.times.iter().zip(&self.states).enumerate() {
            let _ = write!(out, "{k},{:.16e}", t.as_f64());
            match (self.draws.get(k), self.increments.get(k)) {
                (Some(u), Some(dw)) => {
                    let _ = write!(out, ",{:.16e}", u.as_f64());
                    for v in dw {
                        let _ = write!(out, ",{:.16e}", v.as_f64());
                    }
                }
                _ => {
                    out.push(',');
                    for _ in 0..d {
                        out.push(',');
                    }
                }
            }
            for v in x {
                let _ = write!(out, ",{:.16e}", v.as_f64());
            }
            out.push('\n');
        }
        out
    }
}

#[allow(clippy::too_many_arguments)]
fn advance<T: Scalar>(
    params: &SchemeParams<T>,
    cutoff: &Cutoff<T>,
    k: usize,
    u_frac: f64,
    normals: &mut NormalStream,
    sqrt_h: T,
    x: &mut [T],
    dw: &mut [T],
    b: &mut [T],
) -> T {
    let h = params.h();
    let tk = params.time(k);
    let u = tk + h * T::lit(u_frac);
    for w in dw.iter_mut() {
        *w = T::lit(normals.draw()) * sqrt_h;
    }
    cutoff.apply(&params.drift, u, x, b);
    for ((xi, &wi), &bi) in x.iter_mut().zip(dw.iter()).zip(b.iter()) {
        *xi = *xi + wi + h * bi;
    }
    u
}

/// Full path for stream `stream`, Brownian and randomization draws taken from
/// the two sub-streams of that stream.
pub fn simulate_path<T: Scalar>(params: &SchemeParams<T>, seed: u64, stream: u64) -> PathSample<T> {
    simulate_path_with_streams(params, seed, stream, stream)
}

/// Full path with the Brownian and randomization sub-streams taken from
/// possibly different stream indices.
pub fn simulate_path_with_streams<T: Scalar>(
    params: &SchemeParams<T>,
    seed: u64,
    brownian_stream: u64,
    randomization_stream: u64,
) -> PathSample<T> {
    let d = params.dim();
    let cutoff = params.cutoff();
    let sqrt_h = params.h().sqrt();
    let mut normals = NormalStream::new(stream_rng(seed, brownian_stream, SubStream::Brownian));
    let mut uniforms = UniformStream::new(stream_rng(seed, randomization_stream, SubStream::Randomization));
    let mut x = params.x0.clone();
    let mut dw = vec![T::zero(); d];
    let mut b = vec![T::zero(); d];
    let mut sample = PathSample {
        times: (0..=params.n).map(|k| params.time(k)).collect(),
        states: Vec::with_capacity(params.n + 1),
        draws: Vec::with_capacity(params.n),
        increments: Vec::with_capacity(params.n),
        seed,
        stream: brownian_stream,
    };
    sample.states.push(x.clone());
    for k in 0..params.n {
        let u = advance(params, &cutoff, k, uniforms.draw(), &mut normals, sqrt_h, &mut x, &mut dw, &mut b);
        sample.draws.push(u);
        sample.increments.push(dw.clone());
        sample.states.push(x.clone());
    }
    sample
}

/// Terminal value `X_T` of stream `stream` without storing the path.
pub fn simulate_terminal<T: Scalar>(params: &SchemeParams<T>, seed: u64, stream: u64) -> Vec<T> {
    let d = params.dim();
    let cutoff = params.cutoff();
    let sqrt_h = params.h().sqrt();
    let mut normals = NormalStream::new(stream_rng(seed, stream, SubStream::Brownian));
    let mut uniforms = UniformStream::new(stream_rng(seed, stream, SubStream::Randomization));
    let mut x = params.x0.clone();
    let mut dw = vec![T::zero(); d];
    let mut b = vec![T::zero(); d];
    for k in 0..params.n {
        advance(params, &cutoff, k, uniforms.draw(), &mut normals, sqrt_h, &mut x, &mut dw, &mut b);
    }
    x
}

/// `count` independent terminal values, sample `i` drawn from stream `i`.
/// The result does not depend on how streams are spread over workers.
pub fn simulate_terminals<T: Scalar>(params: &SchemeParams<T>, count: usize, seed: u64) -> Vec<Vec<T>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| simulate_terminal(params, seed, i))
        .collect()
}

/// Terminal values of the scheme at `params.n` steps and at `n_ref` steps,
/// driven by common random numbers: the coarse Brownian increments are sums
/// of `n_ref / n` consecutive fine ones, and both schemes read their time
/// randomization from the start of the same sub-stream.
pub fn coupled_terminals<T: Scalar>(
    params: &SchemeParams<T>,
    n_ref: usize,
    seed: u64,
    stream: u64,
) -> Result<(Vec<T>, Vec<T>)> {
    if n_ref == 0 || !n_ref.is_multiple_of(params.n) {
        return Err(Error::InvalidParameter(format!(
            "n_ref = {n_ref} must be a positive multiple of n = {}",
            params.n
        )));
    }
    let ratio = n_ref / params.n;
    let fine = params.with_steps(n_ref)?;
    let d = params.dim();
    let (coarse_cut, fine_cut) = (params.cutoff(), fine.cutoff());
    let (h, h_fine) = (params.h(), fine.h());
    let sqrt_fine = h_fine.sqrt();
    let mut normals = NormalStream::new(stream_rng(seed, stream, SubStream::Brownian));
    let mut coarse_u = UniformStream::new(stream_rng(seed, stream, SubStream::Randomization));
    let mut fine_u = UniformStream::new(stream_rng(seed, stream, SubStream::Randomization));
    let mut xc = params.x0.clone();
    let mut xf = params.x0.clone();
    let mut dw_c = vec![T::zero(); d];
    let mut dw_f = vec![T::zero(); d];
    let mut b = vec![T::zero(); d];
    for k in 0..params.n {
        dw_c.fill(T::zero());
        for j in 0..ratio {
            let kf = k * ratio + j;
            for (wf, wc) in dw_f.iter_mut().zip(dw_c.iter_mut()) {
                *wf = T::lit(normals.draw()) * sqrt_fine;
                *wc += *wf;
            }
            let u = fine.time(kf) + h_fine * T::lit(fine_u.draw());
            fine_cut.apply(&fine.drift, u, &xf, &mut b);
            for ((xi, &wi), &bi) in xf.iter_mut().zip(&dw_f).zip(&b) {
                *xi = *xi + wi + h_fine * bi;
            }
        }
        let u = params.time(k) + h * T::lit(coarse_u.draw());
        coarse_cut.apply(&params.drift, u, &xc, &mut b);
        for ((xi, &wi), &bi) in xc.iter_mut().zip(&dw_c).zip(&b) {
            *xi = *xi + wi + h * bi;
        }
    }
    Ok((xc, xf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driftlib::{DriftFamily, Exponent};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const INF: Exponent = Exponent::Infinite;

    fn params(family: DriftFamily<f64>, rho: Exponent, q: Exponent, n: usize, variant: Variant) -> SchemeParams<f64> {
        let drift = DriftSpec::new(family, 1, rho, q).unwrap();
        SchemeParams::new(drift, 1.0, n, vec![0.0], None, variant).unwrap()
    }

    #[test]
    fn step_floor_examples() {
        assert_relative_eq!(step_floor(0.37, 0.1), 0.3, max_relative = 1e-15);
        assert_relative_eq!(step_floor(0.3, 0.1), 0.3, max_relative = 1e-15);
        assert_eq!(step_floor_index(0.3, 0.1), 3);
        assert_eq!(step_floor(0.0, 0.25), 0.0);
        assert_eq!(step_floor_index(0.9999, 0.25), 3);
    }

    #[test]
    fn zero_drift_replays_increments() {
        let p = params(DriftFamily::Zero, INF, INF, 16, Variant::Primary);
        let path = simulate_path(&p, 5, 2);
        let mut x = 0.0;
        for dw in &path.increments {
            x += dw[0];
        }
        assert_eq!(path.terminal()[0], x);
    }

    #[test]
    fn constant_drift_is_exact() {
        let p = params(DriftFamily::Constant { mu: vec![0.5] }, INF, INF, 8, Variant::Primary);
        let path = simulate_path(&p, 1, 0);
        let w: f64 = path.increments.iter().map(|d| d[0]).sum();
        assert_relative_eq!(path.terminal()[0], w + 0.5, max_relative = 1e-14, epsilon = 1e-14);
    }

    #[test]
    fn homogeneous_drift_ignores_randomization() {
        let p = params(DriftFamily::BoundedSign { beta: 1.0 }, INF, INF, 32, Variant::Primary);
        let a = simulate_path_with_streams(&p, 9, 4, 4);
        let b = simulate_path_with_streams(&p, 9, 4, 1234);
        assert_ne!(a.draws, b.draws);
        assert_eq!(a.states, b.states);
    }

    #[test]
    fn time_singular_drift_depends_on_randomization() {
        let family = DriftFamily::TimeSingular {
            delta: 0.3,
            inner: Box::new(DriftFamily::BoundedSign { beta: 1.0 }),
        };
        let p = params(family, INF, Exponent::Finite(3.0), 32, Variant::Primary);
        let a = simulate_path_with_streams(&p, 9, 4, 4);
        let b = simulate_path_with_streams(&p, 9, 4, 1234);
        assert_ne!(a.states, b.states);
    }

    #[test]
    fn zero_first_variant_skips_first_step_drift() {
        let p = params(DriftFamily::BoundedSign { beta: 1.0 }, INF, INF, 4, Variant::ZeroFirst);
        let path = simulate_path(&p, 3, 0);
        assert_eq!(path.states[1][0], path.increments[0][0]);
    }

    #[test]
    fn zero_drift_terminal_moments() {
        let p = params(DriftFamily::Zero, INF, INF, 8, Variant::Primary);
        let n = 20_000;
        let xs = simulate_terminals(&p, n, 17);
        let mean = xs.iter().map(|x| x[0]).sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x[0] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() <= 4.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() <= 4.0 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn terminals_match_per_stream_paths() {
        let p = params(DriftFamily::BoundedSign { beta: 1.0 }, INF, INF, 16, Variant::Primary);
        let batch = simulate_terminals(&p, 40, 77);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let other = pool.install(|| simulate_terminals(&p, 40, 77));
        assert_eq!(batch, other);
        for (i, x) in batch.iter().enumerate() {
            assert_eq!(x, simulate_path(&p, 77, i as u64).terminal());
        }
    }

    #[test]
    fn f32_and_f64_share_random_inputs() {
        let d64 = DriftSpec::<f64>::new(DriftFamily::BoundedSign { beta: 1.0 }, 1, INF, INF).unwrap();
        let d32 = DriftSpec::<f32>::new(DriftFamily::BoundedSign { beta: 1.0 }, 1, INF, INF).unwrap();
        let p64 = SchemeParams::new(d64, 1.0, 16, vec![0.0], None, Variant::Primary).unwrap();
        let p32 = SchemeParams::new(d32, 1.0, 16, vec![0.0f32], None, Variant::Primary).unwrap();
        let a = simulate_terminal(&p64, 1, 1)[0];
        let b = simulate_terminal(&p32, 1, 1)[0] as f64;
        assert!((a - b).abs() < 1e-4);
    }

    #[test]
    fn coupled_terminals_agree_when_n_equals_n_ref() {
        let p = params(DriftFamily::BoundedSign { beta: 1.0 }, INF, INF, 64, Variant::Primary);
        let (c, f) = coupled_terminals(&p, 64, 3, 9).unwrap();
        assert_eq!(c, f);
        assert_eq!(c, simulate_terminal(&p, 3, 9));
        assert!(coupled_terminals(&p, 100, 3, 9).is_err());
    }

    #[test]
    fn inadmissible_params_rejected() {
        let drift = DriftSpec::<f64>::new(DriftFamily::Zero, 2, Exponent::Finite(2.0), INF).unwrap();
        assert!(SchemeParams::new(drift, 1.0, 4, vec![0.0, 0.0], None, Variant::Primary).is_err());
    }

    fn power_params(n: usize, b_const: f64, variant: Variant) -> SchemeParams<f64> {
        let drift = DriftSpec::new(
            DriftFamily::PowerSingularity {
                theta: 1.0,
                gamma: 0.4,
                radius: 1.0,
            },
            1,
            Exponent::Finite(2.4),
            INF,
        )
        .unwrap();
        SchemeParams::new(drift, 1.0, n, vec![0.05], Some(b_const), variant).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn recursion_identity_and_draw_ranges(
            seed in any::<u64>(), stream in 0u64..1000, n in 1usize..64, b_const in 0.1f64..3.0, zero_first in any::<bool>()
        ) {
            let variant = if zero_first { Variant::ZeroFirst } else { Variant::Primary };
            let p = power_params(n, b_const, variant);
            let path = simulate_path(&p, seed, stream);
            prop_assert_eq!(&path, &simulate_path(&p, seed, stream));
            let cut = p.cutoff();
            let h = p.h();
            let bound = match variant {
                Variant::Primary => b_const * h.powf(1.0 - p.drift.condition().threshold_exponent),
                Variant::ZeroFirst => b_const * h.sqrt(),
            };
            for k in 0..n {
                let (t0, t1) = (path.times[k], path.times[k + 1]);
                prop_assert!(t0 <= path.draws[k] && path.draws[k] <= t1);
                let mut b = [0.0];
                cut.apply(&p.drift, path.draws[k], &path.states[k], &mut b);
                prop_assert!(b[0].abs() <= cut.threshold);
                prop_assert!((b[0] * h).abs() <= bound * (1.0 + 1e-14));
                let residual = path.states[k + 1][0] - path.states[k][0] - path.increments[k][0] - h * b[0];
                prop_assert!(residual.abs() <= 4.0 * f64::EPSILON * (1.0 + path.states[k + 1][0].abs()));
            }
        }
    }
}
