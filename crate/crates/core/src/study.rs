//! Convergence-rate study: grid densities at several step counts against a
//! fine-step reference, with the density diagnostics gathered on the way.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{tv_error, weighted_sup_error, RateReport, RateRow};
use crate::density::{
    duhamel_residual, empirical_gaussian_bound, holder_time_modulus, propagate, reference_density, Grid, GridConfig,
    GridDensity,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::scheme::SchemeParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub n_list: Vec<usize>,
    pub n_ref: usize,
    pub grid: GridConfig,
    /// Inflation `c` of the weight `g_c`.
    pub c_weight: f64,
    /// Pass threshold is `alpha/2 - slack`.
    pub slack: f64,
    /// Evaluate the Duhamel residual on every `duhamel_stride`-th node; 0 skips it.
    pub duhamel_stride: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            n_list: vec![16, 32, 64, 128, 256, 512],
            n_ref: 8192,
            grid: GridConfig::default(),
            c_weight: 2.0,
            slack: 0.1,
            duhamel_stride: 16,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_list.len() < 3 {
            return Err(Error::InvalidParameter("a rate study needs at least 3 step counts".into()));
        }
        if self.n_list.windows(2).any(|w| w[0] >= w[1]) || self.n_list[0] == 0 {
            return Err(Error::InvalidParameter("n_list must be strictly increasing and positive".into()));
        }
        let n_max = *self.n_list.last().expect("nonempty");
        if self.n_ref < 16 * n_max {
            return Err(Error::InvalidParameter(format!("n_ref = {} must be at least 16 * {n_max}", self.n_ref)));
        }
        if let Some(n) = self.n_list.iter().find(|&&n| !self.n_ref.is_multiple_of(n)) {
            return Err(Error::InvalidParameter(format!("n_ref = {} is not a multiple of n = {n}", self.n_ref)));
        }
        if !(self.c_weight > 1.0) {
            return Err(Error::InvalidParameter(format!("c_weight must exceed 1, got {}", self.c_weight)));
        }
        Ok(())
    }
}

/// Per-`n` diagnostics of the scheme density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyDiagnostics {
    pub n: usize,
    /// `max_y Gamma^h(T, y) / g_c(T, y - x)`.
    pub gaussian_bound: f64,
    /// Time-Hölder ratio from `t_0` at `t_l + h/2`, `l = n/2`.
    pub holder_ratio: f64,
    pub duhamel_sup_residual: Option<f64>,
    pub duhamel_budget: Option<f64>,
    /// Largest `|1 - mass|` over the propagated sequence.
    pub max_mass_defect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyOutcome {
    pub report: RateReport,
    pub diagnostics: Vec<StudyDiagnostics>,
    pub grid_points: usize,
    pub grid_half_width: f64,
    pub reference_mass: f64,
}

/// Runs the study for `params` (its own `n` is ignored). Runs over `n` are
/// independent and merged in ascending order.
pub fn rate_study<T: Scalar>(params: &SchemeParams<T>, cfg: &StudyConfig) -> Result<StudyOutcome> {
    cfg.validate()?;
    let alpha = params.drift.alpha()?;
    let h_max = params.horizon / T::of_usize(cfg.n_list[0]);
    let grid = Grid::for_params(params, &cfg.grid, h_max)?;
    let base = params.with_steps(cfg.n_list[0])?;
    let reference = reference_density(&base, cfg.n_ref, &grid, &cfg.grid)?;
    let c = T::lit(cfg.c_weight);

    let runs: Vec<(RateRow, StudyDiagnostics)> = cfg
        .n_list
        .par_iter()
        .map(|&n| -> Result<(RateRow, StudyDiagnostics)> {
            let p = params.with_steps(n)?;
            let seq = propagate(&p, &grid, &cfg.grid)?;
            let terminal = seq.last().expect("n >= 1");
            let row = RateRow {
                n,
                h: p.h().as_f64(),
                weighted_sup_error: weighted_sup_error(terminal, &reference, &p.x0, c)?.as_f64(),
                tv_error: tv_error(terminal, &reference)?.as_f64(),
            };
            let diag = diagnostics(&p, &seq, cfg)?;
            Ok((row, diag))
        })
        .collect::<Result<_>>()?;
    let (rows, diagnostics): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
    let report = RateReport::new(params.variant, params.drift.to_json()?, rows, alpha, cfg.slack)?;
    Ok(StudyOutcome {
        report,
        diagnostics,
        grid_points: grid.points(),
        grid_half_width: grid.half_width().as_f64(),
        reference_mass: reference.mass.as_f64(),
    })
}

fn diagnostics<T: Scalar>(p: &SchemeParams<T>, seq: &[GridDensity<T>], cfg: &StudyConfig) -> Result<StudyDiagnostics> {
    let n = p.n;
    let c = T::lit(cfg.c_weight);
    let terminal = seq.last().expect("n >= 1");
    let gaussian_bound = empirical_gaussian_bound(terminal, &p.x0, c)?.as_f64();
    let holder_ratio = if n >= 4 {
        let l = n / 2;
        let t = p.time(l) + p.h() / T::lit(2.0);
        holder_time_modulus(p, seq, 0, l, t, c, &cfg.grid)?.as_f64()
    } else {
        f64::NAN
    };
    let (res, budget) = if cfg.duhamel_stride > 0 && p.dim() == 1 {
        let rep = duhamel_residual(p, seq, n, cfg.duhamel_stride, &cfg.grid)?;
        (Some(rep.sup_residual), Some(rep.budget))
    } else {
        (None, None)
    };
    let max_mass_defect = seq.iter().map(|d| d.tail_defect.abs().as_f64()).fold(0.0, f64::max);
    Ok(StudyDiagnostics {
        n,
        gaussian_bound,
        holder_ratio,
        duhamel_sup_residual: res,
        duhamel_budget: budget,
        max_mass_defect,
    })
}
