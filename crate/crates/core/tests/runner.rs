use std::path::PathBuf;

use serde_json::Value;
use vlab::runner::{canonical_json, execute, run, validate, Command, ExperimentConfig};

fn parse(text: &str) -> ExperimentConfig {
    ExperimentConfig::from_json(text).unwrap()
}

fn shipped(name: &str) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    ExperimentConfig::load(&path).unwrap()
}

#[test]
fn validation_examples() {
    let bad_dt = parse(r#"{"command": "cpcheck", "kernel": {"type": "constant"}, "grid": {"T": 1.0, "dt": 2.0}, "mu": [1.0]}"#);
    assert!(validate(&bad_dt).iter().any(|v| v.path == "grid.dt"));

    let no_psi = parse(
        r#"{"command": "eq27", "kernel": {"type": "constant"}, "operator": {"type": "dense", "matrix": [[-1.0]]},
            "noise": {"J": 1, "q": [1.0], "paths": 10}, "grid": {"T": 1.0, "dt": 0.01}, "n_list": [9.0, 99.0]}"#,
    );
    assert!(validate(&no_psi).iter().any(|v| v.message == "psi required"));

    let coarse = parse(r#"{"command": "cpcheck", "kernel": {"type": "constant"}, "grid": {"T": 1.0, "dt": 0.2}, "mu": [1.0]}"#);
    assert!(validate(&coarse).iter().any(|v| v.path == "grid.dt"));

    let small_n = parse(
        r#"{"command": "yosida", "kernel": {"type": "constant"}, "operator": {"type": "dense", "matrix": [[3.0]]},
            "grid": {"T": 1.0, "dt": 0.01}, "n_list": [4.0, 8.0]}"#,
    );
    assert!(validate(&small_n).iter().any(|v| v.path == "n_list"));

    assert!(ExperimentConfig::from_json(r#"{"command": "cpcheck", "bogus": 1}"#).is_err());
}

#[test]
fn shipped_configs_validate() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let config = ExperimentConfig::load(&path).unwrap();
        assert_eq!(validate(&config), vec![], "{}", path.display());
    }
}

#[test]
fn hash_ignores_key_order() {
    let a = parse(r#"{"command": "cpcheck", "kernel": {"type": "exponential", "gamma": 2.0}, "grid": {"T": 1.0, "dt": 0.01}, "mu": [1.0]}"#);
    let b = parse(r#"{"mu": [1.0], "grid": {"dt": 0.01, "T": 1.0}, "kernel": {"gamma": 2.0, "type": "exponential"}, "command": "cpcheck"}"#);
    assert_eq!(a.hash(), b.hash());
    let c = parse(r#"{"command": "cpcheck", "kernel": {"type": "exponential", "gamma": 2.5}, "grid": {"T": 1.0, "dt": 0.01}, "mu": [1.0]}"#);
    assert_ne!(a.hash(), c.hash());
    let v: Value = serde_json::from_str(r#"{"b": {"d": 1, "c": [2, {"f": 0, "e": 1}]}, "a": null}"#).unwrap();
    assert_eq!(canonical_json(&v), r#"{"a":null,"b":{"c":[2,{"e":1,"f":0}],"d":1}}"#);
}

#[test]
fn cpcheck_run_writes_listed_artifacts() {
    let config = parse(r#"{"command": "cpcheck", "kernel": {"type": "constant"}, "grid": {"T": 1.0, "dt": 0.01}, "mu": [0.0, 1.0, 10.0]}"#);
    let dir = tempfile::tempdir().unwrap();
    let manifest = run(&config, dir.path()).unwrap();
    assert!(manifest.pass);
    assert_eq!(manifest.command, Command::Cpcheck);
    let mut on_disk: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n != "manifest.json")
        .collect();
    on_disk.sort();
    let mut listed = manifest.artifacts.clone();
    listed.sort();
    assert_eq!(on_disk, listed);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["verdict"], "pass");
    let written: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(written["config_hash"], config.hash());
}

#[test]
fn resolvent_csv_matches_exponential() {
    let out = execute(&shipped("resolvent_scalar_constant.json")).unwrap();
    let (name, body) = &out.csv[0];
    assert_eq!(name, "resolvent.csv");
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    assert_eq!(rdr.headers().unwrap().iter().collect::<Vec<_>>(), vec!["t", "s_1_1"]);
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let t: f64 = rec[0].parse().unwrap();
        let s: f64 = rec[1].parse().unwrap();
        assert!((s - (-t).exp()).abs() <= 1e-6, "t = {t}");
    }
    assert!(out.invariants.iter().all(|i| i.pass));
}

#[test]
fn csv_floats_round_trip() {
    let out = execute(&shipped("resolvent_mittag_leffler.json")).unwrap();
    let s = vlab::resolvent::build_resolvent(
        &vlab::OperatorModel::spectral(vec![-1.0]).unwrap(),
        &vlab::Kernel::power_law(0.5, 0.0).unwrap(),
        vlab::Grid::with_horizon(1.0, 0.001).unwrap(),
    )
    .unwrap();
    let mut rdr = csv::Reader::from_reader(out.csv[0].1.as_bytes());
    for (i, rec) in rdr.records().enumerate() {
        let v: f64 = rec.unwrap()[1].parse().unwrap();
        assert_eq!(v.to_bits(), s.mode(0).unwrap()[i].to_bits());
    }
}

#[test]
fn yosida_experiment_run_scalar() {
    let config = parse(
        r#"{"command": "eq27", "kernel": {"type": "constant"}, "operator": {"type": "dense", "matrix": [[-1.0]]},
            "noise": {"J": 1, "q": [1.0], "paths": 2000, "seed": 7},
            "psi": {"type": "constant", "matrix": [[1.0]]},
            "grid": {"T": 1.0, "dt": 0.01}, "n_list": [9.0, 99.0]}"#,
    );
    let dir = tempfile::tempdir().unwrap();
    let manifest = run(&config, dir.path()).unwrap();
    assert!(manifest.pass);
    assert_eq!(manifest.seed, 7);
    let mut rdr = csv::Reader::from_path(dir.path().join("eq27.csv")).unwrap();
    let eps: Vec<f64> = rdr.records().map(|r| r.unwrap()[1].parse().unwrap()).collect();
    assert!(eps[1] < eps[0]);
}

#[test]
fn expected_failure_is_a_pass() {
    let out = execute(&shipped("cpcheck_linear.json")).unwrap();
    assert!(out.invariants.iter().all(|i| i.pass));
    let mut strict = shipped("cpcheck_linear.json");
    strict.expect = None;
    assert!(!execute(&strict).unwrap().invariants[0].pass);
}
