use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const CONTACT: &str = r#"{
  "model": {"m": 1.0, "kappa_plus": 0.8},
  "init": {"z": 0.5},
  "run": {"t_end": 5, "record_times": [0, 1, 2, 5], "replicates": 200, "master_seed": 7}
}"#;

fn bdlp(args: &[&str], dir: &Path, seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_bdlp"));
    cmd.args(args).current_dir(dir).env_remove("BDLP_SEED");
    if let Some(s) = seed_env {
        cmd.env("BDLP_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn scenario(dir: &TempDir, name: &str, text: &str) -> String {
    let path = dir.path().join(name);
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn run(dir: &TempDir, sub: &str, config: &str, out: &str) -> Output {
    bdlp(&[sub, "--config", config, "--out", out], dir.path(), None)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn contact_density_matches_closed_form_at_t5() {
    let dir = TempDir::new().unwrap();
    let cfg = scenario(&dir, "contact.json", CONTACT);
    let o = run(&dir, "simulate", &cfg, "out");
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("out/density.csv")).unwrap();
    let row = text.lines().find(|l| l.starts_with("5,")).unwrap();
    let cols: Vec<f64> = row.split(',').map(|c| c.parse().unwrap()).collect();
    assert!((cols[1] - 0.18394).abs() <= 3.0 * cols[2], "{row}");
    assert!(dir.path().join("out/paircorr.csv").exists());
    assert!(!dir.path().join("out/positions.csv").exists());
}

#[test]
fn same_seed_gives_identical_csv_bodies() {
    let dir = TempDir::new().unwrap();
    let cfg = scenario(&dir, "contact.json", CONTACT);
    for out in ["a", "b"] {
        let o = bdlp(
            &[
                "simulate",
                "--config",
                &cfg,
                "--out",
                out,
                "--jobs",
                if out == "a" { "1" } else { "3" },
            ],
            dir.path(),
            None,
        );
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for file in ["density.csv", "paircorr.csv"] {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        let b = fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs");
    }
}

#[test]
fn seed_environment_variable_overrides_config() {
    let dir = TempDir::new().unwrap();
    let cfg = scenario(&dir, "contact.json", CONTACT);
    let o = bdlp(
        &["simulate", "--config", &cfg, "--out", "env"],
        dir.path(),
        Some("12345"),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let meta = read_json(&dir.path().join("env/run.json"));
    assert_eq!(meta["master_seed"], 12345);
    assert_eq!(meta["seed_source"], "BDLP_SEED");
    assert_eq!(meta["config"]["run"]["master_seed"], 12345);

    let o = run(&dir, "simulate", &cfg, "plain");
    assert_eq!(o.status.code(), Some(0));
    let a = fs::read(dir.path().join("env/density.csv")).unwrap();
    let b = fs::read(dir.path().join("plain/density.csv")).unwrap();
    assert_ne!(a, b);

    let o = bdlp(
        &["simulate", "--config", &cfg, "--out", "bad"],
        dir.path(),
        Some("not-a-number"),
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn run_metadata_echoes_defaults_and_resolved_config() {
    let dir = TempDir::new().unwrap();
    let cfg = scenario(
        &dir,
        "min.json",
        r#"{"model": {"m": 1.0, "kappa_plus": 0.8}, "init": {"z": 0.5}, "run": {"t_end": 1, "replicates": 4}}"#,
    );
    let o = run(&dir, "moments", &cfg, "out");
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let meta = read_json(&dir.path().join("out/run.json"));
    let defaults: Vec<&str> = meta["defaults_applied"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    for f in ["model.dim", "model.length", "moments.grid_points", "estimators.bins"] {
        assert!(defaults.contains(&f), "{f} missing from {defaults:?}");
    }
    assert_eq!(meta["config"]["model"]["dim"], 1);
    assert_eq!(meta["config"]["model"]["length"], 100.0);
    assert_eq!(meta["config"]["moments"]["grid_points"], 1024);
    assert_eq!(meta["config"]["estimators"]["bins"], 50);
    assert_eq!(meta["exit_code"], 0);
    for f in ["k1.csv", "q.csv", "bounds.csv"] {
        let text = fs::read_to_string(dir.path().join("out").join(f)).unwrap();
        assert!(text.starts_with('#'), "{f} lacks a units line");
    }
}

#[test]
fn negative_mortality_is_rejected_naming_the_field() {
    let dir = TempDir::new().unwrap();
    let cfg = scenario(&dir, "neg.json", r#"{"model": {"m": -1.0, "kappa_plus": 0.8}}"#);
    let o = run(&dir, "simulate", &cfg, "out");
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("model.m"), "{}", stderr(&o));
}

#[test]
fn misspelled_key_gets_a_suggestion() {
    let dir = TempDir::new().unwrap();
    let cfg = scenario(
        &dir,
        "typo.json",
        "{\n  \"model\": {\"m\": 1.0,\n    \"kappa_pls\": 0.8}\n}",
    );
    let o = run(&dir, "simulate", &cfg, "out");
    assert_eq!(o.status.code(), Some(1));
    let msg = stderr(&o);
    assert!(
        msg.contains("kappa_pls") && msg.contains("did you mean `kappa_plus`"),
        "{msg}"
    );
    assert!(msg.contains("line 3"), "{msg}");
}

#[test]
fn verify_passes_for_strongly_damped_model() {
    let dir = TempDir::new().unwrap();
    let cfg = scenario(
        &dir,
        "verify.json",
        r#"{"experiment": "verify", "model": {"m": 20, "kappa_plus": 1, "kappa_minus": 1}, "verify": {"c": 4}}"#,
    );
    let o = run(&dir, "verify", &cfg, "out");
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("out/conditions.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(2).collect();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r.split(',').nth(1) == Some("true")), "{text}");
    assert!(dir.path().join("out/harmonic_report.txt").exists());
}

#[test]
fn verify_failure_exits_with_code_3() {
    let dir = TempDir::new().unwrap();
    let cfg = scenario(
        &dir,
        "weak.json",
        r#"{"model": {"m": 0.1, "kappa_plus": 1, "kappa_minus": 1}}"#,
    );
    let o = run(&dir, "verify", &cfg, "out");
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert_eq!(read_json(&dir.path().join("out/run.json"))["exit_code"], 3);
}

#[test]
fn runaway_population_exits_with_code_2() {
    let dir = TempDir::new().unwrap();
    let cfg = scenario(
        &dir,
        "boom.json",
        r#"{"model": {"m": 0, "kappa_plus": 5}, "init": {"z": 1}, "run": {"t_end": 5, "replicates": 2, "event_cap": 1000}}"#,
    );
    let o = run(&dir, "simulate", &cfg, "out");
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn compare_reports_z_scores() {
    let dir = TempDir::new().unwrap();
    let cfg = scenario(&dir, "contact.json", CONTACT);
    let o = bdlp(
        &["compare", "--config", &cfg, "--out", "out", "--plots"],
        dir.path(),
        None,
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("out/compare.csv")).unwrap();
    let header = text.lines().nth(1).unwrap();
    assert_eq!(header, "t,quantity,r_lo,r_hi,simulated,stderr,moments,z");
    let density_rows = text.lines().filter(|l| l.contains(",density,")).count();
    assert_eq!(density_rows, 4);
    assert!(dir.path().join("out/compare.svg").exists());
}

#[test]
fn usage_errors_exit_with_code_1() {
    let dir = TempDir::new().unwrap();
    assert_eq!(bdlp(&["simulate"], dir.path(), None).status.code(), Some(1));
    assert_eq!(
        bdlp(&["simulate", "--config", "missing.json"], dir.path(), None)
            .status
            .code(),
        Some(1)
    );
    let cfg = scenario(
        &dir,
        "v.json",
        r#"{"experiment": "verify", "model": {"m": 1, "kappa_plus": 1}}"#,
    );
    assert_eq!(run(&dir, "simulate", &cfg, "out").status.code(), Some(1));
    assert_eq!(bdlp(&["--help"], dir.path(), None).status.code(), Some(0));
}

#[test]
fn shipped_scenarios_run() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let dir = TempDir::new().unwrap();
    for entry in fs::read_dir(&root).unwrap() {
        let path = entry.unwrap().path();
        let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        let sub = meta["experiment"].as_str().unwrap();
        let out = dir.path().join(path.file_stem().unwrap());
        let o = bdlp(
            &[sub, "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()],
            dir.path(),
            None,
        );
        assert_eq!(o.status.code(), Some(0), "{}: {}", path.display(), stderr(&o));
    }
}
