use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use proptest::prelude::*;
use roughbsde_cli::config::Value;
use roughbsde_cli::experiments::SPECS;
use roughbsde_cli::{ExperimentConfig, OUTPUT_ROOT_VAR};

fn cli(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_roughbsde")).args(args).env(OUTPUT_ROOT_VAR, root).output().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn read_column(path: &Path, col: &str) -> Vec<f64> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let idx = rdr.headers().unwrap().iter().position(|h| h == col).unwrap();
    rdr.records().map(|r| r.unwrap()[idx].parse().unwrap()).collect()
}

#[test]
fn lists_every_experiment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cli(tmp.path(), &["list-experiments"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert_eq!(text.lines().count(), SPECS.len());
    for id in ["chen-check", "ito-consistency", "linear-rbsde-duality", "feynman-kac", "stability"] {
        assert!(text.contains(id));
    }
}

#[test]
fn chen_check_on_linear_path_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.conf", "experiment = chen-check\npath = linear\npoints = 20\n");
    let out = cli(tmp.path(), &["run", &cfg]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    assert!(stdout(&out).contains("PASS violations = 0"));
    let dir = tmp.path().join("chen-check");
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["passed"], true);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert!(manifest["wall_time_s"].as_f64().unwrap() >= 0.0);
    assert!(manifest["versions"]["roughbsde"].is_string());
    assert!(read_column(&dir.join("chen.csv"), "defect").iter().all(|&d| d <= 1e-12));
}

#[test]
fn ito_consistency_reports_half_order() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "i.conf", "experiment = ito-consistency\nseed = 9\n");
    let out = cli(tmp.path(), &["run", &cfg]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    let dir = tmp.path().join("ito-consistency");
    let errors = read_column(&dir.join("ito_rate.csv"), "l2_error");
    assert_eq!(errors.len(), 4);
    let slope = read_column(&dir.join("ito_fit.csv"), "slope")[0];
    assert!((0.4..=0.6).contains(&slope), "slope {slope}");
}

#[test]
fn duality_error_is_within_tolerance() {
    let tmp = tempfile::tempdir().unwrap();
    let text = "experiment = linear-rbsde-duality\nsteps = 6\nsubsteps = 40\ntol = 1e-6\nexport_solution = 1\n";
    let cfg = write_config(tmp.path(), "d.conf", text);
    let out = cli(tmp.path(), &["run", &cfg]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    let dir = tmp.path().join("linear-rbsde-duality");
    let errs = read_column(&dir.join("duality_error.csv"), "max_abs_error");
    assert!(errs.iter().all(|&e| e <= 1e-6));
    assert_eq!(read_column(&dir.join("solution.csv"), "y").len(), 64 * 241);
    assert!(dir.join("windows.csv").exists());
}

#[test]
fn config_errors_exit_with_two_and_are_logged() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.conf", "experiment = chen-check\nwobble = 3\n");
    let out = cli(tmp.path(), &["run", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    let out = cli(tmp.path(), &["validate", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    let missing = tmp.path().join("missing.conf");
    let out = cli(tmp.path(), &["run", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let log = fs::read_to_string(tmp.path().join("errors.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    assert!(lines.iter().all(|l| l["kind"] == "config" && l["exit_code"] == 2));
    assert!(lines[0]["message"].as_str().unwrap().contains("wobble"));
}

#[test]
fn audit_failures_exit_with_one_and_are_logged() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "a.conf", "experiment = cole-hopf\ntol = 1e-15\n");
    let out = cli(tmp.path(), &["run", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("FAIL max_abs_error"));
    let log = fs::read_to_string(tmp.path().join("errors.jsonl")).unwrap();
    let rec: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(rec["kind"], "audit");
    assert_eq!(rec["experiment"], "cole-hopf");
}

#[test]
fn numeric_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "n.conf", "experiment = cole-hopf\nxi_scale = 0.5\n");
    let out = cli(tmp.path(), &["run", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    let log = fs::read_to_string(tmp.path().join("errors.jsonl")).unwrap();
    assert!(log.contains("\"kind\":\"numeric\""));
}

#[test]
fn validate_prints_a_round_tripping_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "v.conf", "# flow run\nexperiment = flow-cauchy\nlevels = 3\n");
    let out = cli(tmp.path(), &["validate", &cfg]);
    assert!(out.status.success());
    let parsed = ExperimentConfig::parse(&stdout(&out)).unwrap();
    assert_eq!(parsed.int("levels").unwrap(), 3);
    assert_eq!(parsed.to_text(), stdout(&out));
}

#[test]
fn same_config_and_seed_give_identical_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let text = "experiment = linear-rbsde-contraction\nproblems = 5\nseed = 4\n";
    for root in [a.path(), b.path()] {
        let cfg = write_config(root, "r.conf", text);
        assert_eq!(cli(root, &["run", &cfg]).status.code(), Some(0));
    }
    let name = "linear-rbsde-contraction";
    let files: Vec<_> = fs::read_dir(a.path().join(name)).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert!(files.len() >= 3);
    for f in files.iter().filter(|f| f.to_string_lossy() != "manifest.json") {
        let x = fs::read(a.path().join(name).join(f)).unwrap();
        let y = fs::read(b.path().join(name).join(f)).unwrap();
        assert_eq!(x, y, "{f:?} differs");
    }
}

#[test]
fn output_key_names_the_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "o.conf", "experiment = pvar-bruteforce\npaths = 10\noutput = pv\n");
    assert_eq!(cli(tmp.path(), &["run", &cfg]).status.code(), Some(0));
    assert!(tmp.path().join("pv").join("pvar.csv").exists());
    assert!(tmp.path().join("pv").join("config.txt").exists());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn configs_round_trip(which in 0usize..10, seed in any::<u64>(), scale in -1e6f64..1e6, k in 0u64..1000) {
        let spec = &SPECS[which % SPECS.len()];
        let mut cfg = ExperimentConfig::defaults(spec.id).unwrap();
        cfg.params.insert("seed".into(), Value::Int(seed));
        let keys: Vec<String> = cfg.params.keys().cloned().collect();
        for (j, key) in keys.iter().enumerate() {
            let v = match &cfg.params[key] {
                Value::Float(_) => Value::Float(scale / (j + 1) as f64),
                Value::Int(_) if key != "seed" => Value::Int(k + j as u64),
                other => other.clone(),
            };
            cfg.params.insert(key.clone(), v);
        }
        let back = ExperimentConfig::parse(&cfg.to_text()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
