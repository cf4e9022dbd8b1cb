use std::path::PathBuf;
use std::process::Command;

use emlab::gaussian::g;
use emlab_cli::{commands, ExperimentConfig, Status};
use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_emlab"))
}

fn write_config(name: &str, doc: &Value) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("emlab-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join(name);
    std::fs::write(&path, doc.to_string()).unwrap();
    path
}

fn cfg(doc: Value) -> ExperimentConfig {
    ExperimentConfig::from_json_str(&doc.to_string()).unwrap()
}

fn drift(family: &str, params: Value, d: usize, rho: Value, q: Value) -> Value {
    json!({ "family": family, "params": params, "d": d, "rho": rho, "q": q })
}

type Parsed = (Vec<(String, String)>, Vec<(f64, f64)>);

fn parse_density(csv: &str) -> Parsed {
    let mut meta = Vec::new();
    let mut rows = Vec::new();
    for line in csv.lines() {
        if let Some(m) = line.strip_prefix("# ") {
            let (k, v) = m.split_once('=').unwrap();
            meta.push((k.to_string(), v.to_string()));
        } else if !line.starts_with('y') {
            let (y, v) = line.split_once(',').unwrap();
            rows.push((y.parse().unwrap(), v.parse().unwrap()));
        }
    }
    (meta, rows)
}

#[test]
fn check_reports_alpha_and_exit_codes() {
    let ok = write_config("ok.json", &json!({ "drift": drift("zero", json!({}), 1, json!(4), json!(8)) }));
    let out = bin().args(["--config", ok.to_str().unwrap(), "check"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["admissible"], true);
    assert!((v["alpha"].as_f64().unwrap() - 0.5).abs() < 1e-15);

    let bad = write_config(
        "bad.json",
        &json!({ "drift": drift("zero", json!({}), 2, json!(2), json!("inf")), "scheme": { "x": [0, 0] } }),
    );
    let out = bin().args(["--config", bad.to_str().unwrap(), "check"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().args(["--config", bad.to_str().unwrap(), "density", "--n", "4"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let out = bin().arg("check").output().unwrap();
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["alpha"], 1.0);
}

#[test]
fn runtime_failures_exit_one() {
    let path = write_config("broken.json", &json!({ "study": { "n_list": [32, 16, 64] } }));
    let out = bin().args(["--config", path.to_str().unwrap(), "check"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = bin().args(["--config", "/nonexistent/emlab.json", "check"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_lists_defaults() {
    let out = bin().arg("--help").output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    for needle in ["n_ref = 8192", "c_weight = 2", "--threads", "--seed", "--out", "--config"] {
        assert!(text.contains(needle), "missing {needle}");
    }
}

#[test]
fn schema_defaults_match_the_code() {
    let schema: Value =
        serde_json::from_str(include_str!("../config.schema.json")).expect("schema parses");
    let code = serde_json::to_value(ExperimentConfig::default()).unwrap();
    let props = &schema["properties"];
    for section in ["scheme", "study", "mc", "lemmas"] {
        for (key, spec) in props[section]["properties"].as_object().unwrap() {
            if let Some(default) = spec.get("default") {
                assert_eq!(&code[section][key], default, "{section}.{key}");
            }
        }
    }
    for (key, spec) in props["study"]["properties"]["grid"]["properties"].as_object().unwrap() {
        assert_eq!(&code["study"]["grid"][key], &spec["default"], "study.grid.{key}");
    }
    assert_eq!(code["seed"], props["seed"]["default"]);
    assert_eq!(code["precision"], props["precision"]["default"]);
    assert_eq!(code["drift"], props["drift"]["default"]);
}

#[test]
fn zero_and_constant_drift_densities_are_gaussian() {
    for (family, params, shift) in [("zero", json!({}), 0.0), ("constant", json!({ "mu": [-0.4] }), -0.4)] {
        let c = cfg(json!({
            "drift": drift(family, params, 1, json!("inf"), json!("inf")),
            "scheme": { "T": 2.0, "x": [0.25] },
            "study": { "grid": { "N": 1024 } }
        }));
        let out = commands::density(&c, 8, Some(1.3)).unwrap();
        let (meta, rows) = parse_density(out.file("density.csv").unwrap());
        assert_eq!(meta[0].0, "t");
        assert_eq!(rows.len(), 1024);
        let worst = rows
            .iter()
            .map(|&(y, v)| (v - g(1.0, 1.3, &[y - 0.25 - shift * 1.3]).unwrap()).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-9, "{family}: {worst:e}");
    }
}

#[test]
fn singular_drift_density_keeps_its_mass() {
    let c = cfg(json!({
        "drift": drift("power_singularity", json!({ "theta": 1.0, "gamma": 0.4, "radius": 1.0 }), 1, json!(2.4), json!("inf")),
        "study": { "grid": { "N": 1024 } }
    }));
    let out = commands::density(&c, 16, None).unwrap();
    let mass = out.summary["mass"].as_f64().unwrap();
    assert!((mass - 1.0).abs() < 1e-6, "{mass}");
    let (_, rows) = parse_density(out.file("density.csv").unwrap());
    assert!(rows.iter().all(|&(_, v)| v >= -1e-14));
}

#[test]
fn density_csv_uses_seventeen_significant_digits() {
    let out = commands::density(&ExperimentConfig::default(), 4, None).unwrap();
    let csv = out.file("density.csv").unwrap();
    let row = csv.lines().find(|l| !l.starts_with('#') && !l.starts_with('y')).unwrap();
    for field in row.split(',') {
        let mantissa = field.split('e').next().unwrap().trim_start_matches('-');
        assert_eq!(mantissa.len(), 18, "{field}");
    }
}

#[test]
fn mc_is_zero_for_zero_drift_and_equal_step_counts() {
    let zero = cfg(json!({ "mc": { "samples": 2000, "n": 8, "n_ref": 64 } }));
    let out = commands::mc(&zero).unwrap();
    assert_eq!(out.summary["estimate"].as_f64().unwrap(), 0.0);

    let sign = cfg(json!({
        "drift": drift("bounded_sign", json!({ "beta": 1.0 }), 1, json!("inf"), json!("inf")),
        "mc": { "samples": 2000, "n": 16, "n_ref": 16, "phi": "squared_norm" }
    }));
    let out = commands::mc(&sign).unwrap();
    assert_eq!(out.summary["estimate"].as_f64().unwrap(), 0.0);
}

#[test]
fn mc_for_a_bounded_drift_is_small() {
    // |E phi(X^h) - E phi(X)| <= TV distance for an indicator; the grid study
    // puts that distance below 0.05 at n = 16
    let sign = cfg(json!({
        "drift": drift("bounded_sign", json!({ "beta": 1.0 }), 1, json!("inf"), json!("inf")),
        "mc": { "samples": 20000, "n": 16, "n_ref": 256, "phi": "half_space:0.5" }
    }));
    let out = commands::mc(&sign).unwrap();
    let (lo, hi) = (out.summary["ci_low"].as_f64().unwrap(), out.summary["ci_high"].as_f64().unwrap());
    assert!(lo > -0.05 && hi < 0.05, "[{lo}, {hi}]");
}

#[test]
fn rate_command_writes_its_artifacts() {
    let c = cfg(json!({
        "drift": drift("bounded_sign", json!({ "beta": 1.0 }), 1, json!("inf"), json!("inf")),
        "study": { "n_list": [8, 16, 32], "n_ref": 512, "grid": { "N": 512 } }
    }));
    let out = commands::rate(&c).unwrap();
    assert_eq!(out.status, Status::Ok);
    assert!(out.file("rate.csv").unwrap().starts_with("n,h,weighted_sup_error,tv_error\n"));
    assert_eq!(out.file("diagnostics.csv").unwrap().lines().count(), 4);
    let full: Value = serde_json::from_str(out.file("rate.json").unwrap()).unwrap();
    assert_eq!(full["rows"].as_array().unwrap().len(), 3);
    assert!(full["summary"]["slope"].as_f64().unwrap() > 0.3);
}

#[test]
fn simulate_is_reproducible_and_seed_sensitive() {
    let a = commands::simulate(&ExperimentConfig::default(), 8, 50, Some(2)).unwrap();
    let b = commands::simulate(&ExperimentConfig::default(), 8, 50, Some(2)).unwrap();
    assert_eq!(a, b);
    let other = cfg(json!({ "seed": 2 }));
    let c = commands::simulate(&other, 8, 50, None).unwrap();
    assert_ne!(a.file("terminals.csv"), c.file("terminals.csv"));
    assert_eq!(a.file("path.csv").unwrap().lines().count(), 10);
}

#[test]
fn single_precision_runs_end_to_end() {
    let c = cfg(json!({ "precision": "f32", "study": { "grid": { "N": 512 } } }));
    let out = commands::density(&c, 8, None).unwrap();
    let (meta, rows) = parse_density(out.file("density.csv").unwrap());
    assert!(meta.contains(&("precision".into(), "f32".into())));
    let worst = rows.iter().map(|&(y, v)| (v - g(1.0, 1.0, &[y]).unwrap()).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-5, "{worst:e}");
}
