//! Command implementations. Each returns its artifacts in memory; the binary
//! decides whether they go to stdout or to files.

use std::fmt::Write as _;

use anyhow::{bail, Context};
use emlab::density::{density_between, propagate_with};
use emlab::{
    check_condition, mc_weak_error, rate_study, run_suite, simulate_path, simulate_terminals, Error, Grid, Scalar,
};
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, Precision};

/// How a command ended, mapped to the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    Failed,
    Inadmissible,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Ok => 0,
            Status::Failed => 1,
            Status::Inadmissible => 2,
        }
    }
}

/// Exit code for an error raised while running a command.
pub fn error_exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<Error>() {
        Some(Error::Inadmissible { .. }) => 2,
        _ => 1,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    pub status: Status,
    /// Short machine-readable summary, printed on stdout.
    pub summary: Value,
    /// Named artifacts, written under `--out` when given.
    pub files: Vec<(String, String)>,
}

impl Output {
    fn new(status: Status, summary: Value) -> Self {
        Output {
            status,
            summary,
            files: Vec::new(),
        }
    }

    fn with_file(mut self, name: &str, content: String) -> Self {
        self.files.push((name.to_string(), content));
        self
    }

    pub fn file(&self, name: &str) -> Option<&str> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, c)| c.as_str())
    }
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json values serialize");
    s.push('\n');
    s
}

/// Admissibility of the configured drift exponents.
pub fn check(cfg: &ExperimentConfig) -> anyhow::Result<Output> {
    let drift = cfg.drift::<f64>()?;
    let rep = check_condition(drift.dim(), drift.rho(), drift.q());
    let status = if rep.admissible { Status::Ok } else { Status::Inadmissible };
    let summary = json!({
        "d": drift.dim(),
        "rho": drift.rho(),
        "q": drift.q(),
        "admissible": rep.admissible,
        "alpha": rep.alpha,
        "threshold_exponent": rep.threshold_exponent,
        "failure_reason": rep.failure_reason,
    });
    Ok(Output::new(status, summary))
}

fn metadata(cfg: &ExperimentConfig, n: usize) -> anyhow::Result<Vec<(&'static str, String)>> {
    Ok(vec![
        ("drift", serde_json::to_string(&cfg.drift)?),
        ("variant", serde_json::to_string(&cfg.scheme.variant)?.trim_matches('"').to_string()),
        ("n", n.to_string()),
        ("T", format!("{:.16e}", cfg.scheme.horizon)),
        ("precision", serde_json::to_string(&cfg.precision)?.trim_matches('"').to_string()),
    ])
}

/// Scheme density with `n` steps at time `t` (default `T`).
pub fn density(cfg: &ExperimentConfig, n: usize, t: Option<f64>) -> anyhow::Result<Output> {
    match cfg.precision {
        Precision::F64 => density_impl::<f64>(cfg, n, t),
        Precision::F32 => density_impl::<f32>(cfg, n, t),
    }
}

fn density_impl<T: Scalar>(cfg: &ExperimentConfig, n: usize, t: Option<f64>) -> anyhow::Result<Output> {
    let p = cfg.params::<T>(n)?;
    let t_val = t.unwrap_or(cfg.scheme.horizon);
    if !(t_val > 0.0 && t_val <= cfg.scheme.horizon) {
        bail!("t = {t_val} must lie in (0, T]");
    }
    let gcfg = cfg.study.grid.grid_config();
    let grid = Grid::for_params(&p, &gcfg, p.h())?;
    let h = p.h().as_f64();
    // last grid time strictly before t
    let l = (((t_val / h).ceil() as usize).max(1) - 1).min(n - 1);
    let tt = T::lit(t_val);
    let dens = if l == 0 {
        density_between(&p, None, 0, tt, &gcfg, &grid)?
    } else {
        let mut at_l = None;
        propagate_with(&p, &grid, &gcfg, 0, |dens| {
            if dens.step == Some(l) {
                at_l = Some(dens.clone());
            }
            Ok(())
        })?;
        let at_l = at_l.context("propagation did not reach the requested step")?;
        density_between(&p, Some(&at_l), l, tt, &gcfg, &grid)?
    };
    let mut meta = metadata(cfg, n)?;
    meta.push(("grid_points", grid.points().to_string()));
    meta.push(("half_width", format!("{:.16e}", grid.half_width().as_f64())));
    let summary = json!({
        "t": dens.time.as_f64(),
        "n": n,
        "mass": dens.mass.as_f64(),
        "tail_defect": dens.tail_defect.as_f64(),
        "grid_points": grid.points(),
        "half_width": grid.half_width().as_f64(),
    });
    Ok(Output::new(Status::Ok, summary).with_file("density.csv", dens.to_csv(&meta)))
}

/// Convergence-rate study; passes when the fitted slope clears `alpha/2 - slack`.
pub fn rate(cfg: &ExperimentConfig) -> anyhow::Result<Output> {
    match cfg.precision {
        Precision::F64 => rate_impl::<f64>(cfg),
        Precision::F32 => rate_impl::<f32>(cfg),
    }
}

fn rate_impl<T: Scalar>(cfg: &ExperimentConfig) -> anyhow::Result<Output> {
    let study = cfg.study.study_config();
    let n0 = *study.n_list.first().context("study.n_list is empty")?;
    let p = cfg.params::<T>(n0)?;
    let out = rate_study(&p, &study)?;
    let mut summary = out.report.summary_json();
    summary["grid_points"] = json!(out.grid_points);
    summary["grid_half_width"] = json!(out.grid_half_width);
    summary["reference_mass"] = json!(out.reference_mass);
    let full = json!({ "summary": summary.clone(), "rows": out.report.rows, "diagnostics": out.diagnostics });
    let mut diag = String::from("n,gaussian_bound,holder_ratio,duhamel_sup_residual,duhamel_budget,max_mass_defect\n");
    for d in &out.diagnostics {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.16e}")).unwrap_or_default();
        let _ = writeln!(
            diag,
            "{},{:.16e},{:.16e},{},{},{:.16e}",
            d.n,
            d.gaussian_bound,
            d.holder_ratio,
            opt(d.duhamel_sup_residual),
            opt(d.duhamel_budget),
            d.max_mass_defect
        );
    }
    let status = if out.report.pass { Status::Ok } else { Status::Failed };
    Ok(Output::new(status, summary)
        .with_file("rate.csv", out.report.to_csv())
        .with_file("diagnostics.csv", diag)
        .with_file("rate.json", pretty(&full)))
}

/// Monte Carlo weak error with common random numbers.
pub fn mc(cfg: &ExperimentConfig) -> anyhow::Result<Output> {
    match cfg.precision {
        Precision::F64 => mc_impl::<f64>(cfg),
        Precision::F32 => mc_impl::<f32>(cfg),
    }
}

fn mc_impl<T: Scalar>(cfg: &ExperimentConfig) -> anyhow::Result<Output> {
    let m = &cfg.mc;
    let p = cfg.params::<T>(m.n)?;
    let est = mc_weak_error(&p, m.phi, m.n_ref, m.samples, cfg.seed)?;
    let summary = serde_json::to_value(&est)?;
    Ok(Output::new(Status::Ok, summary.clone()).with_file("mc.json", pretty(&summary)))
}

/// Verification suite for the kernel and Gronwall lemmas.
pub fn lemmas(cfg: &ExperimentConfig) -> anyhow::Result<Output> {
    let rep = run_suite(&cfg.suite_config())?;
    let mut groups = serde_json::Map::new();
    for e in &rep.entries {
        groups.entry(e.group.clone()).or_insert_with(|| json!(rep.group_passed(&e.group)));
    }
    let summary = json!({ "all_passed": rep.all_passed, "checks": rep.entries.len(), "groups": groups });
    let status = if rep.all_passed { Status::Ok } else { Status::Failed };
    Ok(Output::new(status, summary)
        .with_file("suite.csv", rep.to_csv())
        .with_file("suite.json", pretty(&serde_json::to_value(&rep)?)))
}

/// Terminal values of `paths` independent paths, and optionally the full
/// trajectory of one stream.
pub fn simulate(cfg: &ExperimentConfig, n: usize, paths: usize, trajectory: Option<u64>) -> anyhow::Result<Output> {
    match cfg.precision {
        Precision::F64 => simulate_impl::<f64>(cfg, n, paths, trajectory),
        Precision::F32 => simulate_impl::<f32>(cfg, n, paths, trajectory),
    }
}

fn simulate_impl<T: Scalar>(
    cfg: &ExperimentConfig,
    n: usize,
    paths: usize,
    trajectory: Option<u64>,
) -> anyhow::Result<Output> {
    let p = cfg.params::<T>(n)?;
    let terminals = simulate_terminals(&p, paths, cfg.seed);
    let d = p.dim();
    let mut csv = String::from("stream");
    for i in 0..d {
        let _ = write!(csv, ",X_{i}");
    }
    csv.push('\n');
    let mut mean = vec![0.0; d];
    for (i, x) in terminals.iter().enumerate() {
        let _ = write!(csv, "{i}");
        for (j, v) in x.iter().enumerate() {
            let _ = write!(csv, ",{:.16e}", v.as_f64());
            mean[j] += v.as_f64() / paths.max(1) as f64;
        }
        csv.push('\n');
    }
    let summary = json!({ "n": n, "paths": paths, "seed": cfg.seed, "terminal_mean": mean });
    let mut out = Output::new(Status::Ok, summary).with_file("terminals.csv", csv);
    if let Some(stream) = trajectory {
        out = out.with_file("path.csv", simulate_path(&p, cfg.seed, stream).to_csv());
    }
    Ok(out)
}
