use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn run(args: &[&str], threads: Option<usize>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_spdelab"));
    cmd.args(args);
    if let Some(n) = threads {
        cmd.env("SPDELAB_THREADS", n.to_string());
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &TempDir, name: &str, body: &str) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, body).unwrap();
    p
}

const OU_MINIMAL: &str = r#"{
  "model": { "n_modes": 8, "grid_size": 24, "spec": { "preset": "HeatDirichlet" } },
  "integrator": { "dt": 0.01, "t_final": 1.0, "record_every": 5 },
  "mc": { "n_paths": 1, "master_seed": 9 },
  "observables": ["sin(h=0:2)", "cos(h=0:1,1:1)"]
}"#;

fn cmd(sub: &str, config: &Path, out: &Path, extra: &[&str], threads: Option<usize>) -> Output {
    let mut args = vec![sub, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    run(&args, threads)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn simulate_row_count_and_seed_header() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "ou.json", OU_MINIMAL);
    let out = dir.path().join("out");
    let o = cmd("simulate", &cfg, &out, &[], None);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(out.join("trajectory_path0000.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "# master_seed=9");
    assert!(lines[1].starts_with("t,mode_0,"));
    assert_eq!(lines.len() - 2, 100 / 5 + 1);
    assert!(!text.contains('\r'));
}

#[test]
fn simulate_is_byte_identical_across_runs_and_workers() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "ou.json", &OU_MINIMAL.replace("\"n_paths\": 1", "\"n_paths\": 3"));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(cmd("simulate", &cfg, &a, &[], Some(1)).status.success());
    assert!(cmd("simulate", &cfg, &b, &[], Some(2)).status.success());
    for id in 0..3 {
        let name = format!("trajectory_path{id:04}.csv");
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap());
    }
}

#[test]
fn seed_flag_overrides_config() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "ou.json", OU_MINIMAL);
    let out = dir.path().join("out");
    assert!(cmd("simulate", &cfg, &out, &["--seed", "123"], None).status.success());
    let text = fs::read_to_string(out.join("trajectory_path0000.csv")).unwrap();
    assert!(text.starts_with("# master_seed=123\n"));
}

#[test]
fn invalid_beta_is_rejected_by_name() {
    let dir = TempDir::new().unwrap();
    let body = OU_MINIMAL.replace(
        r#"{ "preset": "HeatDirichlet" }"#,
        r#"{ "preset": "ScaledIdentityHOneNoise", "beta": 1.0 }"#,
    );
    let cfg = write_config(&dir, "bad.json", &body);
    let o = cmd("simulate", &cfg, &dir.path().join("out"), &[], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("beta > 2"), "{}", stderr(&o));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn unknown_field_reports_its_path() {
    let dir = TempDir::new().unwrap();
    let body = OU_MINIMAL.replace(r#""dt": 0.01"#, r#""dt": 0.01, "dtt": 1"#);
    let cfg = write_config(&dir, "bad.json", &body);
    let o = cmd("simulate", &cfg, &dir.path().join("out"), &[], None);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("integrator") && err.contains("dtt"), "{err}");

    let body = OU_MINIMAL.replace(r#""preset": "HeatDirichlet""#, r#""preset": "HeatDirichlet", "noise": 2"#);
    let cfg = write_config(&dir, "bad2.json", &body);
    let o = cmd("simulate", &cfg, &dir.path().join("out"), &[], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.spec"), "{}", stderr(&o));
}

#[test]
fn observable_mode_out_of_range_is_rejected() {
    let dir = TempDir::new().unwrap();
    let body = OU_MINIMAL.replace("sin(h=0:2)", "sin(h=8:2)");
    let cfg = write_config(&dir, "bad.json", &body);
    let o = cmd("semigroup", &cfg, &dir.path().join("out"), &[], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("observables[0]"), "{}", stderr(&o));
}

#[test]
fn semigroup_emits_mehler_column_only_without_drift() {
    let dir = TempDir::new().unwrap();
    let body = OU_MINIMAL.replace("\"n_paths\": 1", "\"n_paths\": 200");
    let cfg = write_config(&dir, "ou.json", &body);
    let out = dir.path().join("ou");
    assert!(cmd("semigroup", &cfg, &out, &[], None).status.success());
    let text = fs::read_to_string(out.join("semigroup.csv")).unwrap();
    let header = text.lines().nth(1).unwrap();
    assert_eq!(header, "observable,t,mc_value,mc_stderr,n_paths,n_discarded,mehler_exact");
    assert_eq!(text.lines().count(), 2 + 2);
    for row in text.lines().skip(2) {
        let cells: Vec<f64> = row.split(',').map(|c| c.parse().unwrap()).collect();
        assert!((cells[2] - cells[6]).abs() <= 4.0 * cells[3] + 1e-12, "{row}");
    }

    let cubic = body.replace(
        r#""integrator""#,
        r#""drift": { "variant": { "kind": "NemytskiiGradient", "phi_prime": [0, 0, 0, 1] } },
  "integrator""#,
    );
    let cfg = write_config(&dir, "cubic.json", &cubic);
    let out = dir.path().join("cubic");
    assert!(cmd("semigroup", &cfg, &out, &[], None).status.success());
    let text = fs::read_to_string(out.join("semigroup.csv")).unwrap();
    assert!(!text.lines().nth(1).unwrap().contains("mehler"));
}

#[test]
fn yosida_emits_property_table() {
    let dir = TempDir::new().unwrap();
    let body = OU_MINIMAL.replace(
        r#""integrator""#,
        r#""drift": { "variant": { "kind": "NemytskiiGradient", "phi_prime": [0, 0, 0, 1] } },
  "yosida": { "deltas": [1.0, 0.1], "n_pairs": 50 },
  "integrator""#,
    );
    let cfg = write_config(&dir, "y.json", &body);
    let out = dir.path().join("out");
    let o = cmd("yosida", &cfg, &out, &[], None);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(out.join("yosida_checks.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[1],
        "delta,n_pairs,lipschitz_ratio,lipschitz_bound,monotonicity,norm_excess,f_delta_dissipativity,zeta2,pass"
    );
    assert_eq!(lines.len(), 4);
    assert!(lines[2..].iter().all(|l| l.ends_with(",true")));
}

#[test]
fn dirichlet_emits_eps_ladder_scan() {
    let dir = TempDir::new().unwrap();
    let body = OU_MINIMAL.replace("\"n_paths\": 1", "\"n_paths\": 100").replace(
        r#""integrator""#,
        r#""domain": { "spec": { "shape": "Ball", "radius": 0.5 }, "eps_ladder": [0.2, 0.1, 0.05] },
  "integrator""#,
    );
    let cfg = write_config(&dir, "d.json", &body);
    let out = dir.path().join("out");
    let o = cmd("dirichlet", &cfg, &out, &[], None);
    assert!(o.status.success(), "{}", stderr(&o));
    for j in 0..2 {
        let text = fs::read_to_string(out.join(format!("fk_scan_obs{j}.csv"))).unwrap();
        assert_eq!(text.lines().nth(1).unwrap(), "eps,value,stderr,gap,gap_se");
        assert_eq!(text.lines().count(), 2 + 3);
    }
    assert!(out.join("killed_exit.csv").exists());
}

#[test]
fn dirichlet_without_domain_is_an_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "ou.json", OU_MINIMAL);
    let o = cmd("dirichlet", &cfg, &dir.path().join("out"), &[], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("domain"));
}

#[test]
fn invariant_gaussian_ensemble_outputs() {
    let dir = TempDir::new().unwrap();
    let body = OU_MINIMAL.replace(
        r#""integrator""#,
        r#""invariant": { "method": "gaussian", "n_samples": 300, "p_list": [2] },
  "integrator""#,
    );
    let cfg = write_config(&dir, "inv.json", &body);
    let out = dir.path().join("out");
    let o = cmd("invariant", &cfg, &out, &[], None);
    assert!(o.status.success(), "{}", stderr(&o));
    let ens = fs::read_to_string(out.join("ensemble.csv")).unwrap();
    assert_eq!(ens.lines().count(), 2 + 300);
    let doc: Value = serde_json::from_str(&fs::read_to_string(out.join("invariant.json")).unwrap()).unwrap();
    assert_eq!(doc["master_seed"], 9);
    assert_eq!(doc["data"]["invariance"].as_array().unwrap().len(), 2);
    assert_eq!(doc["data"]["e_concentration"]["finite_fraction"], 1.0);
}

fn validator(name: &str) -> jsonschema::Validator {
    let schema: Value = serde_json::from_str(&fs::read_to_string(repo_root().join("schema").join(name)).unwrap()).unwrap();
    jsonschema::validator_for(&schema).unwrap()
}

#[test]
fn shipped_configs_match_the_schema() {
    let v = validator("experiment.schema.json");
    let mut n = 0;
    for entry in fs::read_dir(repo_root().join("configs")).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            let doc: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
            let errors: Vec<String> = v.iter_errors(&doc).map(|e| e.to_string()).collect();
            assert!(errors.is_empty(), "{}: {errors:?}", path.display());
            n += 1;
        }
    }
    assert!(n >= 5);
    let bad: Value = serde_json::from_str(&OU_MINIMAL.replace(r#""dt": 0.01"#, r#""dt": -1"#)).unwrap();
    assert!(!v.is_valid(&bad));
}

#[test]
fn verify_fast_suite_on_ou_preset_passes_and_matches_schema() {
    let dir = TempDir::new().unwrap();
    let body = OU_MINIMAL.replace(r#", "master_seed": 9"#, "");
    let cfg = write_config(&dir, "ou.json", &body);
    let out = dir.path().join("out");
    let o = cmd("verify", &cfg, &out, &["--suite", "fast"], None);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{stdout}\n{}", stderr(&o));
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("verify_report.json")).unwrap()).unwrap();
    assert_eq!(report["all_pass"], true);
    assert_eq!(report["suite"], "fast");
    assert_eq!(report["master_seed"], 0);
    assert_eq!(report["checks"].as_array().unwrap().len(), 15);
    let errors: Vec<String> = validator("verify_report.schema.json")
        .iter_errors(&report)
        .map(|e| e.to_string())
        .collect();
    assert!(errors.is_empty(), "{errors:?}");
    let timings = fs::read_to_string(out.join("verify_timings.csv")).unwrap();
    assert_eq!(timings.lines().nth(1).unwrap(), "check_id,runtime_ms");
}

#[test]
fn verify_flags_corrupted_drift_sign_with_witness() {
    let dir = TempDir::new().unwrap();
    let cfg = repo_root().join("configs/corrupted_sign.json");
    let out = dir.path().join("out");
    let o = cmd("verify", &cfg, &out, &["--suite", "fast"], None);
    assert_eq!(o.status.code(), Some(1));
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("verify_report.json")).unwrap()).unwrap();
    let first = &report["checks"][0];
    assert_eq!(first["check_id"], "00-config-dissipativity");
    assert_eq!(first["pass"], false);
    assert!(first["detail"].as_str().unwrap().contains("witness x="));
    assert_eq!(report["all_pass"], false);

    let o = cmd("simulate", &cfg, &dir.path().join("sim"), &[], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nondecreasing"));
}

#[test]
fn bad_thread_variable_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "ou.json", OU_MINIMAL);
    let mut c = Command::new(env!("CARGO_BIN_EXE_spdelab"));
    c.args(["simulate", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()])
        .env("SPDELAB_THREADS", "many");
    let o = c.output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("SPDELAB_THREADS"));
}
