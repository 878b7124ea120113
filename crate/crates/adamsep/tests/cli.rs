use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use adamsep::config::{parse_value, Job};
use adamsep::CliError;
use adamsep_core::optimizers::max_eta;
use adamsep_core::Noise;
use adamsep_core::OptimizerSpec;
use serde_json::{json, Value};
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_adamsep"));
    c.env_remove("ADAMSEP_WORKERS");
    c
}

/// Writes `cfg` into a fresh directory and runs the binary on it.
fn run_cfg(cfg: &Value, extra: &[&str]) -> (TempDir, Output) {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("cfg.json");
    fs::write(&path, serde_json::to_vec_pretty(cfg).unwrap()).unwrap();
    let out = bin()
        .arg("--config")
        .arg(&path)
        .arg("--out")
        .arg(dir.path().join("out"))
        .args(extra)
        .output()
        .unwrap();
    (dir, out)
}

fn run_dir(out: &Output) -> PathBuf {
    PathBuf::from(String::from_utf8(out.stdout.clone()).unwrap().trim())
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn config_errors(v: Value) -> Vec<String> {
    match parse_value(&v, Path::new(".")) {
        Err(CliError::Config(errs)) => errs,
        Err(e) => panic!("expected config errors, got {e}"),
        Ok(_) => panic!("expected config errors for {v}"),
    }
}

#[test]
fn minimal_run_config_fills_defaults() {
    let cfg = parse_value(&json!({"command": "run"}), Path::new(".")).unwrap();
    let Job::Run(job) = &cfg.job else { panic!("not a run job") };
    assert_eq!(job.horizon, 100);
    assert_eq!(job.master_seed, 42);
    assert_eq!(job.x1, vec![0.0]);
    assert_eq!(job.oracle.noise(), Noise::Gaussian { sigma: 1.0 });
    let OptimizerSpec::Adam(p) = &job.optimizer else { panic!("default optimizer is Adam") };
    assert_eq!(p.beta1(), 0.0);
    assert!(p.is_calibrated());
    let eta = max_eta(1, 1.0, 1e-8, 0.0, 1.0).unwrap();
    assert_eq!(p.eta(), Some(eta));
    assert!((p.gamma() - eta / 10.0).abs() <= 1e-15 * eta);
    assert_eq!(p.beta2(), 1.0 - 1.0 / 100.0);
    assert!(cfg.formats.csv && cfg.formats.json);
}

#[test]
fn minimal_run_writes_steps_and_ledger() {
    let (_d, out) = run_cfg(&json!({"command": "run", "run": {"T": 12}}), &[]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let dir = run_dir(&out);
    let steps = fs::read_to_string(dir.join("steps.csv")).unwrap();
    let mut lines = steps.lines();
    assert_eq!(lines.next(), Some("t,x_0,g_0,grad_0,m_0,v_0,gamma_0"));
    assert_eq!(lines.count(), 12);
    let ledger: Value = serde_json::from_slice(&fs::read(dir.join("ledger.json")).unwrap()).unwrap();
    assert_eq!(ledger["T"], 12);
    assert!(ledger["E"].as_f64().unwrap() > 0.0);
}

#[test]
fn unknown_keys_are_rejected_and_all_violations_listed() {
    let errs = config_errors(json!({
        "command": "run",
        "colour": 1,
        "run": {"T": 20, "seeed": 3},
        "optimizer": {"kind": "adam", "eta": -1.0}
    }));
    assert!(errs.iter().any(|e| e.contains("colour")), "{errs:?}");
    assert!(errs.iter().any(|e| e.contains("run.seeed")), "{errs:?}");
    assert!(errs.iter().any(|e| e.contains("eta")), "{errs:?}");
    assert!(errs.len() >= 3);
}

#[test]
fn negative_n_names_the_key() {
    let errs = config_errors(json!({"command": "tail", "run": {"N": -5}}));
    assert!(errs.iter().any(|e| e.starts_with("run.N")), "{errs:?}");
}

#[test]
fn beta2_conflicts_with_calibrated_mode() {
    let errs = config_errors(json!({
        "command": "run",
        "optimizer": {"kind": "adam", "eta": 0.05, "beta2": 0.99}
    }));
    assert!(errs.iter().any(|e| e.contains("beta2") && e.contains("calibrated")), "{errs:?}");
}

#[test]
fn missing_schedule_file_is_a_config_error() {
    let cfg = json!({
        "command": "lowerbound",
        "optimizer": {"kind": "sgd", "schedule": "nope.csv"},
        "run": {"T": 20, "delta_bar": 0.1}
    });
    let (_d, out) = run_cfg(&cfg, &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("nope.csv"));
}

#[test]
fn malformed_json_exits_2() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, "{\"command\": ").unwrap();
    let out = bin().arg("--config").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn lowerbound_above_threshold_names_clause() {
    let cfg = json!({"command": "lowerbound", "optimizer": {"kind": "sgd", "gamma": 0.5}, "run": {"T": 100, "delta": 0.02}});
    let (_d, out) = run_cfg(&cfg, &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("delta < 1/64 violated"), "{}", stderr(&out));

    // Tiny steps make the exponential clause bind.
    let cfg = json!({"command": "lowerbound", "optimizer": {"kind": "sgd", "gamma": 0.01}, "run": {"T": 10, "delta": 0.001}});
    let (_d, out) = run_cfg(&cfg, &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("delta < exp(-1/sqrt(32 gamma T R)) violated"), "{}", stderr(&out));
}

#[test]
fn lowerbound_valid_instance_passes_with_mc() {
    let cfg = json!({
        "command": "lowerbound",
        "optimizer": {"kind": "sgd", "gamma": 0.5},
        "run": {"T": 10, "delta": 0.001, "N": 20000}
    });
    let (_d, out) = run_cfg(&cfg, &["--workers", "2"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let report: Value = serde_json::from_slice(&fs::read(run_dir(&out).join("report.json")).unwrap()).unwrap();
    for v in ["prob_exceeds_target", "energy_meets_bound", "energy_meets_threshold", "mc_consistent"] {
        assert_eq!(report["verdicts"][v], true, "{v}");
    }
}

#[test]
fn sgd_divergence_exits_3_with_partial_output() {
    let cfg = json!({
        "command": "run",
        "optimizer": {"kind": "sgd", "gamma": 3.0},
        "run": {"T": 2000, "x1": [1.0]}
    });
    let (_d, out) = run_cfg(&cfg, &[]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    let steps = fs::read_to_string(run_dir(&out).join("steps.csv")).unwrap();
    let rows = steps.lines().count() - 1;
    assert!(rows > 100 && rows < 2000, "{rows} rows");
    assert!(fs::metadata(run_dir(&out).join("ledger.json")).is_ok());
}

#[test]
fn lemmas_default_seed_is_clean() {
    let (_d, out) = run_cfg(&json!({"command": "lemmas", "run": {"cases": 1000, "gen_beta_cases": 50}}), &[]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let v = fs::read_to_string(run_dir(&out).join("violations.csv")).unwrap();
    assert_eq!(v, "check_id,seed,d,T,beta1,margin,worst_t,worst_i,case\n");
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn outputs_do_not_depend_on_worker_count() {
    let cfg = json!({
        "command": "tail",
        "oracle": {"noise": "hard-instance"},
        "optimizer": {"kind": "sgd"},
        "run": {"T": 50, "N": 3000, "deltas": [0.1, 0.03, 0.01]}
    });
    let (_a, one) = run_cfg(&cfg, &["--workers", "1"]);
    let (_b, four) = run_cfg(&cfg, &["--workers", "4"]);
    assert_eq!(one.status.code(), Some(0), "{}", stderr(&one));
    assert_eq!(dir_contents(&run_dir(&one)), dir_contents(&run_dir(&four)));
    assert_eq!(run_dir(&one).file_name(), run_dir(&four).file_name());
}

#[test]
fn workers_env_fallback_and_zero_rejected() {
    let cfg = json!({"command": "run", "run": {"T": 10}});
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("cfg.json");
    fs::write(&path, cfg.to_string()).unwrap();
    let ok = bin().arg("--config").arg(&path).arg("--out").arg(dir.path()).env("ADAMSEP_WORKERS", "3").output().unwrap();
    assert_eq!(ok.status.code(), Some(0));
    let bad = bin().arg("--config").arg(&path).arg("--workers").arg("0").output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn run_directory_is_stamped_with_config_hash() {
    let (_a, a) = run_cfg(&json!({"command": "run", "run": {"T": 10}}), &[]);
    let (_b, b) = run_cfg(&json!({"command": "run", "run": {"T": 11}}), &[]);
    let (na, nb) = (run_dir(&a), run_dir(&b));
    let (na, nb) = (na.file_name().unwrap().to_str().unwrap(), nb.file_name().unwrap().to_str().unwrap());
    assert!(na.starts_with("run-") && na.len() == "run-".len() + 16);
    assert_ne!(na, nb);
}
