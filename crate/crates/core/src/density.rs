//! Transition densities of the scheme on a truncated uniform grid (d = 1, 2).
//!
//! The law of `X_t` for `t` in `(t_k, t_{k+1}]` given `X_{t_k} = z` is the
//! mixture `(1/h) int_0^h g_1(t - t_k, y - z - (t - t_k) b_h(t_k + s, z)) ds`.
//! The `s`-average is replaced by a weighted node rule, so one step is a
//! Gaussian kernel per source node with a finite set of displacements. The
//! start point is never placed on the grid: the first step is evaluated
//! analytically from `x`.
//!
//! Kernel rows are banded (`+-10` standard deviations around each
//! displacement) and memoized by displacement, so drifts that take few
//! distinct values (sign drifts, time-singular drifts with a sign profile)
//! cost the same as the zero drift.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::driftlib::{DriftFamily, Variant};
use crate::error::{Error, Result};
use crate::gaussian::g_unchecked;
use crate::quadrature::{GAUSS_LEGENDRE_2, GAUSS_LEGENDRE_3};
use crate::scalar::Scalar;
use crate::scheme::SchemeParams;

/// Grid sizing and quadrature settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    /// Points per axis; `None` selects 2048 (d = 1) or 256 (d = 2).
    pub points: Option<usize>,
    /// Half-width `L = l_factor sqrt(T) + displacement budget`.
    pub l_factor: f64,
    /// Randomization nodes per step for time-dependent drifts.
    pub m_nodes: usize,
    /// Kernel band half-width in standard deviations.
    pub band_sigmas: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            points: None,
            l_factor: 8.0,
            m_nodes: 16,
            band_sigmas: 10.0,
        }
    }
}

impl GridConfig {
    pub fn points_for(&self, d: usize) -> usize {
        self.points.unwrap_or(if d == 1 { 2048 } else { 256 })
    }
}

/// Uniform lattice over `[x - L, x + L]^d` with `N` points per axis,
/// row-major for `d = 2`. Node offsets are `(2j - (N - 1)) Δ/2`, so the
/// lattice is exactly symmetric about its center.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    center: Vec<T>,
    half_width: T,
    points: usize,
    spacing: T,
}

impl<T: Scalar> Grid<T> {
    pub fn new(center: Vec<T>, half_width: T, points: usize) -> Result<Self> {
        let d = center.len();
        if !(d == 1 || d == 2) {
            return Err(Error::Unsupported(format!(
                "grid propagation is available for d = 1, 2 only (got d = {d}); use Monte Carlo"
            )));
        }
        if points < 3 {
            return Err(Error::InvalidParameter("a grid needs at least 3 points per axis".into()));
        }
        if !(half_width > T::zero() && half_width.is_finite()) {
            return Err(Error::InvalidParameter("grid half-width must be positive".into()));
        }
        let spacing = T::lit(2.0) * half_width / T::of_usize(points - 1);
        Ok(Grid {
            center,
            half_width,
            points,
            spacing,
        })
    }

    /// Grid for `params` with `L = l_factor sqrt(T) + budget`, the budget
    /// sized for the coarsest step `h_max` that will use the grid.
    pub fn for_params(params: &SchemeParams<T>, cfg: &GridConfig, h_max: T) -> Result<Self> {
        let thr = params.drift.threshold(params.variant, h_max, params.b_const);
        let budget = params.drift.displacement_budget(params.horizon, h_max * thr);
        let half = T::lit(cfg.l_factor) * params.horizon.sqrt() + budget;
        Grid::new(params.x0.clone(), half, cfg.points_for(params.dim()))
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn spacing(&self) -> T {
        self.spacing
    }

    pub fn half_width(&self) -> T {
        self.half_width
    }

    pub fn center(&self) -> &[T] {
        &self.center
    }

    pub fn len(&self) -> usize {
        self.points.pow(self.dim() as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Offset of node `j` from the center along one axis.
    pub fn axis_offset(&self, j: usize) -> T {
        let twice = 2 * j as i64 - (self.points as i64 - 1);
        T::lit(twice as f64) * self.spacing / T::lit(2.0)
    }

    pub fn coord(&self, axis: usize, j: usize) -> T {
        self.center[axis] + self.axis_offset(j)
    }

    pub fn node(&self, idx: usize) -> Vec<T> {
        match self.dim() {
            1 => vec![self.coord(0, idx)],
            _ => vec![self.coord(0, idx / self.points), self.coord(1, idx % self.points)],
        }
    }

    /// Offset of a node from the center.
    pub fn node_offset(&self, idx: usize) -> Vec<T> {
        match self.dim() {
            1 => vec![self.axis_offset(idx)],
            _ => vec![self.axis_offset(idx / self.points), self.axis_offset(idx % self.points)],
        }
    }

    /// Trapezoid weight along one axis.
    pub fn axis_weight(&self, j: usize) -> T {
        if j == 0 || j + 1 == self.points {
            self.spacing / T::lit(2.0)
        } else {
            self.spacing
        }
    }

    pub fn weight(&self, idx: usize) -> T {
        match self.dim() {
            1 => self.axis_weight(idx),
            _ => self.axis_weight(idx / self.points) * self.axis_weight(idx % self.points),
        }
    }

    /// Gaussian tail bound `d erfc(L / sqrt(4 T))`: the mass a density
    /// dominated by `g_2(T, . - x)` can place outside the grid.
    pub fn tail_bound(&self, horizon: T) -> T {
        let z = self.half_width.as_f64() / (4.0 * horizon.as_f64()).sqrt();
        T::lit(self.dim() as f64 * libm::erfc(z))
    }

    pub fn check_same(&self, other: &Grid<T>) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "grids differ (N = {} vs {}, L = {} vs {})",
                self.points, other.points, self.half_width, other.half_width
            )))
        }
    }
}

/// Density values on a grid at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity<T> {
    pub time: T,
    /// Index of the grid time (`t = t_step`), or `None` for intra-step times.
    pub step: Option<usize>,
    pub grid: Grid<T>,
    pub values: Vec<T>,
    /// Trapezoid integral of `values`.
    pub mass: T,
    /// `1 - mass`.
    pub tail_defect: T,
}

impl<T: Scalar> GridDensity<T> {
    pub fn new(time: T, step: Option<usize>, grid: Grid<T>, values: Vec<T>) -> Self {
        let mass = values.iter().enumerate().map(|(i, &v)| grid.weight(i) * v).sum::<T>();
        GridDensity {
            time,
            step,
            grid,
            values,
            mass,
            tail_defect: T::one() - mass,
        }
    }

    /// `int |y - c| Gamma(y) dy` (one dimension).
    pub fn first_abs_moment(&self, about: T) -> T {
        (0..self.values.len())
            .map(|i| self.grid.weight(i) * self.values[i] * (self.grid.node(i)[0] - about).abs())
            .sum()
    }

    /// Trapezoid cumulative distribution at the grid nodes (one dimension).
    pub fn cdf(&self) -> Vec<T> {
        let half = self.grid.spacing() / T::lit(2.0);
        let mut acc = T::zero();
        let mut out = Vec::with_capacity(self.values.len());
        out.push(acc);
        for w in self.values.windows(2) {
            acc += half * (w[0] + w[1]);
            out.push(acc);
        }
        out
    }

    /// Linear interpolation of the density (one dimension), zero off-grid.
    pub fn interpolate(&self, y: T) -> T {
        let g = &self.grid;
        let pos = (y - g.coord(0, 0)) / g.spacing();
        if pos < T::zero() || pos > T::of_usize(g.points() - 1) {
            return T::zero();
        }
        let j = pos.floor().to_usize().unwrap_or(0).min(g.points() - 2);
        let frac = pos - T::of_usize(j);
        self.values[j] * (T::one() - frac) + self.values[j + 1] * frac
    }

    /// CSV with `#` metadata lines, then `y` (one column per axis) and `gamma`.
    pub fn to_csv(&self, metadata: &[(&str, String)]) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# t={:.16e}", self.time.as_f64());
        let _ = writeln!(out, "# mass={:.16e}", self.mass.as_f64());
        for (k, v) in metadata {
            let _ = writeln!(out, "# {k}={v}");
        }
        match self.grid.dim() {
            1 => out.push_str("y,gamma\n"),
            _ => out.push_str("y0,y1,gamma\n"),
        }
        for (i, v) in self.values.iter().enumerate() {
            for c in self.grid.node(i) {
                let _ = write!(out, "{:.16e},", c.as_f64());
            }
            let _ = writeln!(out, "{:.16e}", v.as_f64());
        }
        out
    }
}

/// Nodes and weights of the `s`-average over `[t_k, t_{k+1}]` for step `k`.
///
/// One node when the drift does not depend on time (or vanishes on the
/// step); `M` midpoint nodes otherwise; on the first step of a time-singular
/// drift the nodes follow `s = h v^(1/(1-delta))` with the Jacobian folded
/// into the weights, which are then normalized to sum to one.
pub fn randomization_nodes<T: Scalar>(params: &SchemeParams<T>, k: usize, m_nodes: usize) -> Vec<(T, T)> {
    let h = params.h();
    let tk = params.time(k);
    let half = T::lit(0.5);
    if params.drift.is_time_homogeneous() || (params.variant == Variant::ZeroFirst && k == 0) || m_nodes <= 1 {
        return vec![(tk + half * h, T::one())];
    }
    let m = m_nodes;
    let mf = T::of_usize(m);
    if let (0, DriftFamily::TimeSingular { delta, .. }) = (k, params.drift.family()) {
        let p = T::one() / (T::one() - *delta);
        let raw: Vec<(T, T)> = (0..m)
            .map(|i| {
                let v = (T::of_usize(i) + half) / mf;
                (h * v.powf(p), p * v.powf(p - T::one()) / mf)
            })
            .collect();
        let total: T = raw.iter().map(|&(_, w)| w).sum();
        return raw.into_iter().map(|(s, w)| (s, w / total)).collect();
    }
    (0..m)
        .map(|i| (tk + h * (T::of_usize(i) + half) / mf, T::one() / mf))
        .collect()
}

/// Density at `y` of `X_t`, `t` in `(t_k, t_{k+1}]`, started from `x` at `t_k`:
/// the node rule applied to `(1/h) int g_1(t - t_k, y - x - (t - t_k) b_h(t_k + s, x)) ds`.
pub fn first_step_density<T: Scalar>(
    params: &SchemeParams<T>,
    k: usize,
    t: T,
    x: &[T],
    y: &[T],
    m_nodes: usize,
) -> Result<T> {
    if k >= params.n {
        return Err(Error::InvalidParameter(format!("step {k} outside 0..{}", params.n)));
    }
    let (tk, tk1) = (params.time(k), params.time(k + 1));
    if !(t > tk && t <= tk1) {
        return Err(Error::InvalidParameter(format!("t = {t} is not in (t_k, t_(k+1)] = ({tk}, {tk1}]")));
    }
    let tau = t - tk;
    let cutoff = params.cutoff();
    let mut b = vec![T::zero(); params.dim()];
    let mut z = vec![T::zero(); params.dim()];
    let mut total = T::zero();
    for (s, w) in randomization_nodes(params, k, m_nodes) {
        cutoff.apply(&params.drift, s, x, &mut b);
        for i in 0..z.len() {
            z[i] = y[i] - x[i] - tau * b[i];
        }
        total += w * g_unchecked(T::one(), tau, &z);
    }
    Ok(total)
}

/// Source nodes grouped so that all members share `b(t, .)` at every time.
struct SourceGroups<T> {
    group_of: Vec<u32>,
    representative: Vec<Vec<T>>,
}

fn source_groups<T: Scalar>(params: &SchemeParams<T>, grid: &Grid<T>) -> SourceGroups<T> {
    let drift = &params.drift;
    let mut index: HashMap<Vec<u64>, u32> = HashMap::new();
    let mut representative = Vec::new();
    let mut group_of = Vec::with_capacity(grid.len());
    let mut b = vec![T::zero(); grid.dim()];
    for idx in 0..grid.len() {
        let z = grid.node(idx);
        let key: Vec<u64> = match drift.family() {
            DriftFamily::TimeSingular { inner, .. } => {
                // time enters only through a scalar factor
                let profile = profile_of(inner, &z, &mut b);
                profile.iter().map(|v| v.key_bits()).collect()
            }
            DriftFamily::Custom(c) if !c.time_homogeneous => z.iter().map(|v| v.key_bits()).collect(),
            _ => {
                drift.evaluate_into(params.time(0), &z, &mut b);
                b.iter().map(|v| v.key_bits()).collect()
            }
        };
        let next = representative.len() as u32;
        let g = *index.entry(key).or_insert_with(|| {
            representative.push(z.clone());
            next
        });
        group_of.push(g);
    }
    SourceGroups {
        group_of,
        representative,
    }
}

fn profile_of<T: Scalar>(inner: &DriftFamily<T>, z: &[T], out: &mut [T]) -> Vec<T> {
    // the bounded profile of a time-singular drift, evaluated through a
    // homogeneous wrapper so no family logic is duplicated
    let d = z.len();
    let spec = crate::driftlib::DriftSpec::new(
        inner.clone(),
        d,
        crate::driftlib::Exponent::Infinite,
        crate::driftlib::Exponent::Infinite,
    )
    .expect("profile validated with its parent drift");
    spec.evaluate_into(T::zero(), z, out);
    out.to_vec()
}

/// Nodes whose trapezoid cell straddles a jump point `xi` of the drift (one
/// dimension): `(node, neighbour, a)` means a fraction `a` of the node's
/// cell lies on the neighbour's side of `xi`, so its kernel row becomes
/// `(1 - a) K_node + a K_neighbour`. This keeps the source quadrature second
/// order across the jump and every row a probability density.
fn jump_mixtures<T: Scalar>(params: &SchemeParams<T>, grid: &Grid<T>) -> Vec<(usize, usize, T)> {
    let mut out = Vec::new();
    if grid.dim() != 1 {
        return out;
    }
    let dy = grid.spacing();
    let half = dy / T::lit(2.0);
    let z0 = grid.coord(0, 0);
    let mut points = Vec::new();
    for r in params.drift.family().jump_radii() {
        points.push(r);
        if r > T::zero() {
            points.push(-r);
        }
    }
    for xi in points {
        let pos = (xi - z0) / dy;
        if !(pos > T::one() && pos < T::of_usize(grid.points() - 2)) {
            continue;
        }
        let j = pos.floor().to_usize().unwrap_or(0);
        let left = xi - grid.coord(0, j);
        if left < half {
            out.push((j, j + 1, (half - left) / dy));
        } else if left > half {
            out.push((j + 1, j, (left - half) / dy));
        }
    }
    out
}

/// Banded one-dimensional stencil: `values[o - start]` is the kernel value
/// at lattice offset `o` (in units of the spacing).
#[derive(Debug, Clone, PartialEq)]
pub struct Stencil<T> {
    pub start: isize,
    pub values: Vec<T>,
}

fn build_stencil<T: Scalar>(tau: T, spacing: T, band_sigmas: T, nodes: &[(T, T)]) -> Stencil<T> {
    // nodes: (weight, displacement along the axis)
    let sigma = tau.sqrt();
    let (mut lo_d, mut hi_d) = (nodes[0].1, nodes[0].1);
    for &(_, dsp) in nodes {
        lo_d = lo_d.min(dsp);
        hi_d = hi_d.max(dsp);
    }
    let lo = ((lo_d - band_sigmas * sigma) / spacing).floor().to_isize().unwrap_or(0);
    let hi = ((hi_d + band_sigmas * sigma) / spacing).ceil().to_isize().unwrap_or(0);
    let values = (lo..=hi)
        .map(|o| {
            let off = T::lit(o as f64) * spacing;
            nodes.iter().map(|&(w, dsp)| w * g_unchecked(T::one(), tau, &[off - dsp])).sum()
        })
        .collect();
    Stencil { start: lo, values }
}

#[derive(Debug, Clone)]
enum Rows<T> {
    /// One merged stencil per source.
    OneD { stencils: Vec<Stencil<T>>, row: Vec<u32> },
    /// Per source: list of `(weight, axis-0 stencil, axis-1 stencil)`.
    TwoD {
        axis: Vec<Stencil<T>>,
        terms: Vec<Vec<(T, u32, u32)>>,
        row: Vec<u32>,
    },
}

/// One-step transition kernel on a grid: row `z` is the density of the step
/// started at node `z`, already averaged over the randomization.
#[derive(Debug, Clone)]
pub struct StepKernel<T> {
    pub grid: Grid<T>,
    pub step: usize,
    /// Elapsed time of the (possibly partial) step.
    pub tau: T,
    rows: Rows<T>,
}

/// Kernel of step `k` over elapsed time `tau` in `(0, h]`.
pub fn build_step_kernel<T: Scalar>(
    params: &SchemeParams<T>,
    k: usize,
    tau: T,
    grid: &Grid<T>,
    cfg: &GridConfig,
) -> Result<StepKernel<T>> {
    let groups = source_groups(params, grid);
    build_step_kernel_grouped(params, k, tau, grid, cfg, &groups)
}

fn group_displacements<T: Scalar>(
    params: &SchemeParams<T>,
    nodes: &[(T, T)],
    tau: T,
    groups: &SourceGroups<T>,
) -> Vec<Vec<(T, Vec<T>)>> {
    let cutoff = params.cutoff();
    let d = params.dim();
    let mut b = vec![T::zero(); d];
    groups
        .representative
        .iter()
        .map(|z| {
            nodes
                .iter()
                .map(|&(s, w)| {
                    cutoff.apply(&params.drift, s, z, &mut b);
                    (w, b.iter().map(|&bi| tau * bi).collect())
                })
                .collect()
        })
        .collect()
}

fn build_step_kernel_grouped<T: Scalar>(
    params: &SchemeParams<T>,
    k: usize,
    tau: T,
    grid: &Grid<T>,
    cfg: &GridConfig,
    groups: &SourceGroups<T>,
) -> Result<StepKernel<T>> {
    if k >= params.n || !(tau > T::zero() && tau <= params.h() * (T::one() + T::lit(8.0) * T::epsilon())) {
        return Err(Error::InvalidParameter(format!("kernel needs k < n and 0 < tau <= h (k = {k}, tau = {tau})")));
    }
    let nodes = randomization_nodes(params, k, cfg.m_nodes);
    let disps = group_displacements(params, &nodes, tau, groups);
    let band = T::lit(cfg.band_sigmas);
    let spacing = grid.spacing();
    let rows = match grid.dim() {
        1 => {
            let mut memo: HashMap<Vec<u64>, u32> = HashMap::new();
            let mut stencils = Vec::new();
            let mut stencil_of = |merged: Vec<(T, T)>| -> u32 {
                let key: Vec<u64> = merged.iter().flat_map(|(w, v)| [w.key_bits(), v.key_bits()]).collect();
                *memo.entry(key).or_insert_with(|| {
                    stencils.push(build_stencil(tau, spacing, band, &merged));
                    (stencils.len() - 1) as u32
                })
            };
            let merged_of = |g: u32| -> Vec<(T, T)> { disps[g as usize].iter().map(|(w, v)| (*w, v[0])).collect() };
            let group_stencil: Vec<u32> = (0..disps.len() as u32).map(|g| stencil_of(merged_of(g))).collect();
            let mut row: Vec<u32> = groups.group_of.iter().map(|&g| group_stencil[g as usize]).collect();
            for (node, other, a) in jump_mixtures(params, grid) {
                let (gn, go) = (groups.group_of[node], groups.group_of[other]);
                if gn == go {
                    continue;
                }
                let mut merged: Vec<(T, T)> = merged_of(gn).into_iter().map(|(w, v)| ((T::one() - a) * w, v)).collect();
                merged.extend(merged_of(go).into_iter().map(|(w, v)| (a * w, v)));
                row[node] = stencil_of(merged);
            }
            Rows::OneD { stencils, row }
        }
        _ => {
            let mut memo: HashMap<u64, u32> = HashMap::new();
            let mut axis = Vec::new();
            let mut stencil_for = |dsp: T| -> u32 {
                *memo.entry(dsp.key_bits()).or_insert_with(|| {
                    axis.push(build_stencil(tau, spacing, band, &[(T::one(), dsp)]));
                    (axis.len() - 1) as u32
                })
            };
            let terms: Vec<Vec<(T, u32, u32)>> = disps
                .iter()
                .map(|list| list.iter().map(|(w, v)| (*w, stencil_for(v[0]), stencil_for(v[1]))).collect())
                .collect();
            Rows::TwoD {
                axis,
                terms,
                row: groups.group_of.clone(),
            }
        }
    };
    Ok(StepKernel {
        grid: grid.clone(),
        step: k,
        tau,
        rows,
    })
}

impl<T: Scalar> StepKernel<T> {
    /// `out(y) = sum_z w_z gamma(z) K(z, y)` (trapezoid quadrature over sources).
    pub fn apply(&self, gamma: &[T]) -> Vec<T> {
        let n = self.grid.points() as isize;
        let mut out = vec![T::zero(); gamma.len()];
        match &self.rows {
            Rows::OneD { stencils, row } => {
                for (j, &gj) in gamma.iter().enumerate() {
                    if gj == T::zero() {
                        continue;
                    }
                    let a = self.grid.weight(j) * gj;
                    let st = &stencils[row[j] as usize];
                    let first = j as isize + st.start;
                    let lo = (-first).max(0) as usize;
                    let hi = ((n - first).min(st.values.len() as isize)).max(0) as usize;
                    if lo >= hi {
                        continue;
                    }
                    let base = (first + lo as isize) as usize;
                    for (o, v) in out[base..base + (hi - lo)].iter_mut().zip(&st.values[lo..hi]) {
                        *o += a * *v;
                    }
                }
            }
            Rows::TwoD { axis, terms, row } => {
                let np = self.grid.points();
                for (idx, &gj) in gamma.iter().enumerate() {
                    if gj == T::zero() {
                        continue;
                    }
                    let a = self.grid.weight(idx) * gj;
                    let (j0, j1) = ((idx / np) as isize, (idx % np) as isize);
                    for &(w, s0, s1) in &terms[row[idx] as usize] {
                        let (st0, st1) = (&axis[s0 as usize], &axis[s1 as usize]);
                        for (o0, v0) in st0.values.iter().enumerate() {
                            let i0 = j0 + st0.start + o0 as isize;
                            if i0 < 0 || i0 >= n {
                                continue;
                            }
                            let c = a * w * *v0;
                            let f1 = j1 + st1.start;
                            let lo = (-f1).max(0) as usize;
                            let hi = ((n - f1).min(st1.values.len() as isize)).max(0) as usize;
                            if lo >= hi {
                                continue;
                            }
                            let base = i0 as usize * np + (f1 + lo as isize) as usize;
                            for (o, v1) in out[base..base + (hi - lo)].iter_mut().zip(&st1.values[lo..hi]) {
                                *o += c * *v1;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Kernel value `K(z_src, y_dst)`.
    pub fn entry(&self, src: usize, dst: usize) -> T {
        let look = |st: &Stencil<T>, off: isize| -> T {
            let i = off - st.start;
            if i < 0 || i as usize >= st.values.len() {
                T::zero()
            } else {
                st.values[i as usize]
            }
        };
        match &self.rows {
            Rows::OneD { stencils, row } => look(&stencils[row[src] as usize], dst as isize - src as isize),
            Rows::TwoD { axis, terms, row } => {
                let np = self.grid.points() as isize;
                let (s0, s1) = (src as isize / np, src as isize % np);
                let (d0, d1) = (dst as isize / np, dst as isize % np);
                terms[row[src] as usize]
                    .iter()
                    .map(|&(w, a0, a1)| w * look(&axis[a0 as usize], d0 - s0) * look(&axis[a1 as usize], d1 - s1))
                    .sum()
            }
        }
    }

    /// Trapezoid integral of row `src` over the target grid.
    pub fn row_mass(&self, src: usize) -> T {
        (0..self.grid.len()).map(|i| self.grid.weight(i) * self.entry(src, i)).sum()
    }
}

fn first_step_on_grid<T: Scalar>(params: &SchemeParams<T>, k: usize, tau: T, grid: &Grid<T>, cfg: &GridConfig) -> GridDensity<T> {
    let cutoff = params.cutoff();
    let x = &params.x0;
    let d = params.dim();
    let mut b = vec![T::zero(); d];
    let disps: Vec<(T, Vec<T>)> = randomization_nodes(params, k, cfg.m_nodes)
        .into_iter()
        .map(|(s, w)| {
            cutoff.apply(&params.drift, s, x, &mut b);
            (w, b.iter().map(|&bi| tau * bi).collect())
        })
        .collect();
    let mut z = vec![T::zero(); d];
    let values = (0..grid.len())
        .map(|idx| {
            // grid is centered at x, so y - x is the exact node offset
            let off = grid.node_offset(idx);
            disps
                .iter()
                .map(|(w, dsp)| {
                    for i in 0..d {
                        z[i] = off[i] - dsp[i];
                    }
                    *w * g_unchecked(T::one(), tau, &z)
                })
                .sum()
        })
        .collect();
    GridDensity::new(params.time(k) + tau, if tau == params.h() { Some(k + 1) } else { None }, grid.clone(), values)
}

fn check_grid<T: Scalar>(params: &SchemeParams<T>, grid: &Grid<T>) -> Result<()> {
    if grid.dim() != params.dim() {
        return Err(Error::GridMismatch("grid and drift dimensions differ".into()));
    }
    if grid.center() != params.x0.as_slice() {
        return Err(Error::GridMismatch("the grid must be centered at the start point".into()));
    }
    Ok(())
}

/// Mass budget of a propagated density: the Gaussian tail bound plus `1e-8`
/// plus a summation round-off allowance, which only matters in `f32`.
pub fn mass_budget<T: Scalar>(grid: &Grid<T>, horizon: T) -> T {
    let roundoff = T::lit(64.0) * T::epsilon() * T::of_usize(grid.len()).sqrt();
    grid.tail_bound(horizon) + T::lit(1e-8) + roundoff
}

/// Propagates from `x` at `t_{start}` up to `t_n`, handing each density at
/// `t_{start+1}, ..., t_n` to `visit`.
pub fn propagate_with<T: Scalar, F: FnMut(&GridDensity<T>) -> Result<()>>(
    params: &SchemeParams<T>,
    grid: &Grid<T>,
    cfg: &GridConfig,
    start: usize,
    mut visit: F,
) -> Result<GridDensity<T>> {
    check_grid(params, grid)?;
    if start >= params.n {
        return Err(Error::InvalidParameter(format!("start step {start} must be < n = {}", params.n)));
    }
    let budget = mass_budget(grid, params.horizon);
    let check = |dens: &GridDensity<T>, step: usize| -> Result<()> {
        if dens.tail_defect.abs() > budget || !dens.mass.is_finite() {
            return Err(Error::MassDefect {
                step,
                defect: dens.tail_defect.as_f64(),
                budget: budget.as_f64(),
            });
        }
        Ok(())
    };
    let h = params.h();
    let mut current = first_step_on_grid(params, start, h, grid, cfg);
    check(&current, start + 1)?;
    visit(&current)?;
    let groups = source_groups(params, grid);
    let mut cached: Option<StepKernel<T>> = None;
    for k in start + 1..params.n {
        let reuse = params.drift.is_time_homogeneous() && cached.is_some();
        if !reuse {
            cached = Some(build_step_kernel_grouped(params, k, h, grid, cfg, &groups)?);
        }
        let kernel = cached.as_ref().expect("kernel built above");
        let values = kernel.apply(&current.values);
        current = GridDensity::new(params.time(k + 1), Some(k + 1), grid.clone(), values);
        check(&current, k + 1)?;
        visit(&current)?;
    }
    Ok(current)
}

/// Densities at `t_1, ..., t_n` started from `x` at time 0.
pub fn propagate<T: Scalar>(params: &SchemeParams<T>, grid: &Grid<T>, cfg: &GridConfig) -> Result<Vec<GridDensity<T>>> {
    let mut seq = Vec::with_capacity(params.n);
    propagate_with(params, grid, cfg, 0, |dens| {
        seq.push(dens.clone());
        Ok(())
    })?;
    Ok(seq)
}

/// Density at `t_n` only.
pub fn terminal_density<T: Scalar>(params: &SchemeParams<T>, grid: &Grid<T>, cfg: &GridConfig) -> Result<GridDensity<T>> {
    propagate_with(params, grid, cfg, 0, |_| Ok(()))
}

/// Stand-in for the diffusion density at `T`: the scheme propagated with
/// `n_ref` steps, `n_ref` a multiple of `params.n` with ratio at least 16.
pub fn reference_density<T: Scalar>(
    params: &SchemeParams<T>,
    n_ref: usize,
    grid: &Grid<T>,
    cfg: &GridConfig,
) -> Result<GridDensity<T>> {
    if !n_ref.is_multiple_of(params.n) || n_ref / params.n < 16 {
        return Err(Error::InvalidParameter(format!(
            "n_ref = {n_ref} must be a multiple of n = {} with ratio >= 16",
            params.n
        )));
    }
    terminal_density(&params.with_steps(n_ref)?, grid, cfg)
}

/// Density at an arbitrary `t` in `(t_l, t_(l+1)]` from the density at `t_l`
/// (or from `x` when `l = start`).
pub fn density_between<T: Scalar>(
    params: &SchemeParams<T>,
    at_l: Option<&GridDensity<T>>,
    l: usize,
    t: T,
    cfg: &GridConfig,
    grid: &Grid<T>,
) -> Result<GridDensity<T>> {
    let tau = t - params.time(l);
    match at_l {
        None => Ok(first_step_on_grid(params, l, tau, grid, cfg)),
        Some(dens) => {
            grid.check_same(&dens.grid)?;
            let kernel = build_step_kernel(params, l, tau, grid, cfg)?;
            Ok(GridDensity::new(t, None, grid.clone(), kernel.apply(&dens.values)))
        }
    }
}

/// `max_y Gamma(y) / g_c(t, y - x)`.
pub fn empirical_gaussian_bound<T: Scalar>(density: &GridDensity<T>, x: &[T], c: T) -> Result<T> {
    if !(c > T::one()) {
        return Err(Error::InvalidParameter(format!("Gaussian bound needs c > 1, got {c}")));
    }
    let mut best = T::zero();
    let mut z = vec![T::zero(); x.len()];
    for (idx, &v) in density.values.iter().enumerate() {
        let node = density.grid.node(idx);
        for i in 0..z.len() {
            z[i] = node[i] - x[i];
        }
        let w = g_unchecked(c, density.time, &z);
        if w > T::zero() {
            best = best.max(v / w);
        }
    }
    Ok(best)
}

/// Time-Hölder ratio of the scheme density started at `x` at `t_k`:
/// `max_y |Gamma(t, y) - Gamma(t_l, y)| / [((t - t_l)/(t_l - t_k))^(alpha/2)
/// (1 + 1_{alpha=1} ln((t_l - t_k)/h)) g_c(t - t_k, y - x)]`,
/// for `t` in `[t_l, t_(l+1)]`. `seq` holds the densities at
/// `t_(k+1), ..., t_n` as returned by [`propagate_with`] from `start = k`.
pub fn holder_time_modulus<T: Scalar>(
    params: &SchemeParams<T>,
    seq: &[GridDensity<T>],
    k: usize,
    l: usize,
    t: T,
    c: T,
    cfg: &GridConfig,
) -> Result<T> {
    if !(l > k && l < params.n) {
        return Err(Error::InvalidParameter(format!("need k < l < n, got k = {k}, l = {l}")));
    }
    let (tl, tl1) = (params.time(l), params.time(l + 1));
    if !(t >= tl && t <= tl1) {
        return Err(Error::InvalidParameter("t must lie in [t_l, t_(l+1)]".into()));
    }
    if t == tl {
        return Ok(T::zero());
    }
    let at_l = seq
        .get(l - k - 1)
        .ok_or_else(|| Error::InvalidParameter("density sequence too short".into()))?;
    let grid = &at_l.grid;
    let at_t = if t == tl1 {
        seq.get(l - k).cloned().map_or_else(|| density_between(params, Some(at_l), l, t, cfg, grid), Ok)?
    } else {
        density_between(params, Some(at_l), l, t, cfg, grid)?
    };
    let alpha = T::lit(params.drift.alpha()?);
    let tk = params.time(k);
    let mut factor = ((t - tl) / (tl - tk)).powf(alpha / T::lit(2.0));
    if alpha == T::one() {
        factor *= T::one() + ((tl - tk) / params.h()).ln();
    }
    let x = grid.center();
    let mut best = T::zero();
    let mut z = vec![T::zero(); x.len()];
    for idx in 0..grid.len() {
        let off = grid.node_offset(idx);
        z.copy_from_slice(&off);
        let w = g_unchecked(c, t - tk, &z);
        if w > T::zero() {
            best = best.max((at_t.values[idx] - at_l.values[idx]).abs() / (factor * w));
        }
    }
    Ok(best)
}

/// Outcome of a Duhamel check at a grid time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DuhamelReport {
    pub step: usize,
    pub time: f64,
    pub sup_residual: f64,
    /// `sum_k sup_y |GL3 - GL2|` over the steps.
    pub quadrature_estimate: f64,
    pub aliasing: f64,
    pub tail: f64,
    pub roundoff: f64,
    /// Sum of the four terms above.
    pub budget: f64,
    pub y: Vec<f64>,
    pub residual: Vec<f64>,
}

impl DuhamelReport {
    pub fn within(&self, factor: f64) -> bool {
        self.sup_residual <= factor * self.budget
    }
}

/// Duhamel residual `Gamma^h(0, x, t_l, y) - g_1(t_l, y - x) + int_0^t_l E[b_h(U, X_tau) . grad g_1(t_l - r, y - X_r)] dr`
/// on every `stride`-th grid node (d = 1).
///
/// Conditioning on `X_{t_k}` and integrating out the Brownian increment on
/// `[t_k, r]` turns the integrand on step `k` into
/// `int Gamma_k(w) avg_s b_h(s, w) . grad g_1(t_l - t_k, y - w - b_h(s, w)(r - t_k)) dw`,
/// evaluated with the stored densities and integrated in `r` by three-point
/// Gauss-Legendre; the two-point rule supplies the error estimate.
pub fn duhamel_residual<T: Scalar>(
    params: &SchemeParams<T>,
    seq: &[GridDensity<T>],
    l: usize,
    stride: usize,
    cfg: &GridConfig,
) -> Result<DuhamelReport> {
    if params.dim() != 1 {
        return Err(Error::Unsupported("the Duhamel residual is implemented for d = 1".into()));
    }
    if l == 0 || l > seq.len() || l > params.n {
        return Err(Error::InvalidParameter(format!("step {l} outside 1..={}", seq.len().min(params.n))));
    }
    let grid = &seq[0].grid;
    check_grid(params, grid)?;
    let stride = stride.max(1);
    let np = grid.points();
    let targets: Vec<usize> = (0..np).step_by(stride).collect();
    let h = params.h();
    let t = params.time(l);
    let cutoff = params.cutoff();
    let groups = source_groups(params, grid);
    let mut b = [T::zero()];

    let mut integral = vec![T::zero(); targets.len()];
    let mut quad_est = T::zero();
    let mut step_sup = T::zero();

    // r-nodes on [t_k, t_k + h]: GL3 then GL2, as fractions of h
    let half = T::lit(0.5);
    let gl3: Vec<(T, T)> = GAUSS_LEGENDRE_3.iter().map(|&(x, w)| (half * (T::lit(x) + T::one()), half * T::lit(w))).collect();
    let gl2: Vec<(T, T)> = GAUSS_LEGENDRE_2.iter().map(|&(x, w)| (half * (T::lit(x) + T::one()), half * T::lit(w))).collect();

    for k in 0..l {
        let tk = params.time(k);
        let tau = t - tk;
        let nodes = randomization_nodes(params, k, cfg.m_nodes);
        let eval_rule = |rule: &[(T, T)], b: &mut [T; 1]| -> Vec<T> {
            let mut acc = vec![T::zero(); targets.len()];
            for &(frac, wr) in rule {
                let dr = frac * h;
                let vals = if k == 0 {
                    // point source at x
                    let x = &params.x0;
                    let terms: Vec<(T, T)> = nodes
                        .iter()
                        .map(|&(s, w)| {
                            cutoff.apply(&params.drift, s, x, b);
                            (w, b[0])
                        })
                        .collect();
                    targets
                        .iter()
                        .map(|&i| {
                            let off = grid.axis_offset(i);
                            terms
                                .iter()
                                .filter(|(_, bv)| *bv != T::zero())
                                .map(|&(w, bv)| w * bv * grad_g1(tau, off - bv * dr))
                                .sum()
                        })
                        .collect()
                } else {
                    duhamel_step_integrand(params, &seq[k - 1], &groups, &nodes, &targets, tau, dr, b)
                };
                for (a, v) in acc.iter_mut().zip(vals) {
                    *a += wr * h * v;
                }
            }
            acc
        };
        let i3 = eval_rule(&gl3, &mut b);
        let i2 = eval_rule(&gl2, &mut b);
        let mut sup_diff = T::zero();
        let mut sup_val = T::zero();
        for ((acc, &v3), &v2) in integral.iter_mut().zip(&i3).zip(&i2) {
            *acc += v3;
            sup_diff = sup_diff.max((v3 - v2).abs());
            sup_val = sup_val.max(v3.abs());
        }
        quad_est += sup_diff;
        step_sup += sup_val;
    }

    let dens = &seq[l - 1];
    let mut residual = Vec::with_capacity(targets.len());
    let mut ys = Vec::with_capacity(targets.len());
    let mut sup_res = T::zero();
    let mut sup_gamma = T::zero();
    for (a, &i) in targets.iter().enumerate() {
        let off = grid.axis_offset(i);
        let heat = g_unchecked(T::one(), t, &[off]);
        let r = dens.values[i] - heat + integral[a];
        sup_res = sup_res.max(r.abs());
        sup_gamma = sup_gamma.max(dens.values[i].abs()).max(heat);
        residual.push(r.as_f64());
        ys.push(grid.coord(0, i).as_f64());
    }

    let dx = grid.spacing().as_f64();
    let hf = h.as_f64();
    let lf = l as f64;
    let aliasing = 2.0 * lf * (-2.0 * std::f64::consts::PI.powi(2) * (hf / 2.0) / (dx * dx)).exp() * sup_gamma.as_f64();
    let tail = grid.tail_bound(params.horizon).as_f64() * (2.0 * std::f64::consts::PI * hf).powf(-0.5);
    let eps = T::epsilon().as_f64();
    let roundoff = 64.0 * eps * (lf + np as f64) * (1.0 + sup_gamma.as_f64() + step_sup.as_f64());
    let quad = quad_est.as_f64();
    Ok(DuhamelReport {
        step: l,
        time: t.as_f64(),
        sup_residual: sup_res.as_f64(),
        quadrature_estimate: quad,
        aliasing,
        tail,
        roundoff,
        budget: quad + aliasing + tail + roundoff,
        y: ys,
        residual,
    })
}

#[inline]
fn grad_g1<T: Scalar>(tau: T, z: T) -> T {
    -z / tau * g_unchecked(T::one(), tau, &[z])
}

#[allow(clippy::too_many_arguments)]
fn duhamel_step_integrand<T: Scalar>(
    params: &SchemeParams<T>,
    gamma_k: &GridDensity<T>,
    groups: &SourceGroups<T>,
    nodes: &[(T, T)],
    targets: &[usize],
    tau: T,
    dr: T,
    b: &mut [T; 1],
) -> Vec<T> {
    let grid = &gamma_k.grid;
    let spacing = grid.spacing();
    let cutoff = params.cutoff();
    // drift values per group and node
    let per_group: Vec<Vec<(T, T)>> = groups
        .representative
        .iter()
        .map(|z| {
            nodes
                .iter()
                .map(|&(s, w)| {
                    cutoff.apply(&params.drift, s, z, b);
                    (w, b[0])
                })
                .collect()
        })
        .collect();
    let ng = per_group.len();
    // (node, share of its cell) per group, split across jump points as in
    // the step kernel
    let mut share = vec![None; grid.len()];
    for (node, other, a) in jump_mixtures(params, grid) {
        share[node] = Some((other, a));
    }
    let mut members: Vec<Vec<(usize, T)>> = vec![Vec::new(); ng];
    for (j, &g) in groups.group_of.iter().enumerate() {
        if gamma_k.values[j] == T::zero() {
            continue;
        }
        match share[j] {
            Some((other, a)) if groups.group_of[other] != g => {
                members[g as usize].push((j, T::one() - a));
                members[groups.group_of[other] as usize].push((j, a));
            }
            _ => members[g as usize].push((j, T::one())),
        }
    }
    for m in members.iter_mut() {
        m.sort_by_key(|&(j, _)| j);
    }
    let kernel = |g: usize, off: T| -> T {
        per_group[g]
            .iter()
            .filter(|(_, bv)| *bv != T::zero())
            .map(|&(w, bv)| w * bv * grad_g1(tau, off - bv * dr))
            .sum()
    };
    let mut out = vec![T::zero(); targets.len()];
    let (t_lo, t_hi) = (targets[0] as isize, *targets.last().expect("nonempty") as isize);
    for g in 0..ng {
        if members[g].is_empty() || per_group[g].iter().all(|(_, bv)| *bv == T::zero()) {
            continue;
        }
        let m = &members[g];
        if m.len() * targets.len() <= 2 * grid.points() {
            for (a, &i) in targets.iter().enumerate() {
                let mut acc = T::zero();
                for &(j, f) in m {
                    let off = T::lit((i as isize - j as isize) as f64) * spacing;
                    acc += f * grid.weight(j) * gamma_k.values[j] * kernel(g, off);
                }
                out[a] += acc;
            }
        } else {
            let (j_lo, j_hi) = (m[0].0 as isize, m.last().expect("nonempty").0 as isize);
            let o_lo = t_lo - j_hi;
            let table: Vec<T> = (o_lo..=t_hi - j_lo).map(|o| kernel(g, T::lit(o as f64) * spacing)).collect();
            for (a, &i) in targets.iter().enumerate() {
                let mut acc = T::zero();
                for &(j, f) in m {
                    acc += f * grid.weight(j) * gamma_k.values[j] * table[(i as isize - j as isize - o_lo) as usize];
                }
                out[a] += acc;
            }
        }
    }
    out
}
