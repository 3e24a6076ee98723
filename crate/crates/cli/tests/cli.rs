use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hybrid_pe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hybrid-pe")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn bounds_prints_a_ledger() {
    let o = hybrid_pe(&["bounds"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let names: Vec<&str> = v["entries"].as_array().unwrap().iter().map(|e| e["name"].as_str().unwrap()).collect();
    for n in ["psi_M", "sigma", "kappa_g", "lambda_g", "rho_nu"] {
        assert!(names.contains(&n), "missing {n}");
    }
}

#[test]
fn bounds_reads_inputs_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[bounds]\ngamma_c = 1.0\nlambda_c = 0.2\ngamma_d = 1.0\nlambda_d = 0.5\nphi_max = 2.0\npsi_0 = 0.0\n\
         delta = 3.0\nmu = 0.5\nq_min = 1.0\nq_max = 2.0\nzeta = 0.5\n",
    );
    let o = hybrid_pe(&["bounds", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["inputs"]["lambda_c"], 0.2);
}

#[test]
fn invalid_config_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[motivational]\nperiodz = 3\n");
    let o = hybrid_pe(&["run", "motivational", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("periodz"));
}

#[test]
fn motivational_run_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[motivational]\nperiods = 4\nstep = 0.005\n");
    let out = dir.path().join("out");
    let o = hybrid_pe(&["run", "motivational", "--baselines", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(matches!(o.status.code(), Some(0) | Some(2)), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let passed = manifest["passed"].as_bool().unwrap();
    assert_eq!(o.status.code(), Some(if passed { 0 } else { 2 }));
    assert!(out.join("arc_theta_err_ct.csv").is_file());
    assert!(out.join("pe_certificate.json").is_file());
}

#[test]
fn spacecraft_run_accepts_controller_choice() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[spacecraft]\nt_end = 2000.0\n");
    let out = dir.path().join("out");
    let o = hybrid_pe(&["run", "spacecraft", "--controller", "pid", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(matches!(o.status.code(), Some(0) | Some(2)), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("arc_integrator.csv").is_file());
    assert!(out.join("arc_pointing_error.csv").is_file());
}

#[test]
fn certify_pe_reads_a_csv_arc() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("psi.csv");
    let mut text = String::from("t,j,component_0,component_1\n");
    for j in 0..6 {
        let (a, b) = if j % 2 == 0 { (1.0, 0.0) } else { (0.0, 1.0) };
        text.push_str(&format!("0,{j},{a},{b}\n"));
    }
    fs::write(&path, text).unwrap();
    let o = hybrid_pe(&["certify-pe", "--arc", path.to_str().unwrap(), "--delta", "2", "--rows", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["mu"], 1.0);

    let o = hybrid_pe(&["certify-pe", "--arc", path.to_str().unwrap(), "--delta", "1", "--rows", "1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_arc_file_exits_with_one() {
    let o = hybrid_pe(&["certify-pe", "--arc", "/nonexistent/psi.csv", "--delta", "1"]);
    assert_eq!(o.status.code(), Some(1));
}
