use std::path::Path;
use std::process::{Command, Output};

fn polaron(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_polaron"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .env_remove("POLARON_THREADS")
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn missing_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = polaron(dir.path(), &["crystal", "--config", "/nonexistent/polaron.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot read"));
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[crystal]\nlattice_constant = 3.0\n").unwrap();
    let out = polaron(dir.path(), &["crystal", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_thread_variable_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_polaron"))
        .args(["crystal", "--out"])
        .arg(dir.path())
        .env("POLARON_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn identity_pekar_reports_no_binding() {
    let dir = tempfile::tempdir().unwrap();
    let out = polaron(dir.path(), &["pekar", "--eps", "identity"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&dir.path().join("pekar.json"));
    assert_eq!(v["status"], "no_binding");
    assert_eq!(v["energy"], 0.0);
}

#[test]
fn crystal_is_deterministic_and_checkpointed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(polaron(a.path(), &["crystal", "--threads", "1"]).status.success());
    assert!(polaron(b.path(), &["crystal", "--threads", "1"]).status.success());
    let ta = std::fs::read(a.path().join("crystal.json")).unwrap();
    assert_eq!(ta, std::fs::read(b.path().join("crystal.json")).unwrap());
    let v = json(&a.path().join("crystal.json"));
    assert!((v["gap"].as_f64().unwrap() - 0.0284880369).abs() < 1e-9);
    let ck = polaron::checkpoint::Checkpoint::read(&a.path().join("checkpoints/crystal.ckpt")).unwrap();
    assert_eq!(ck.field("v0").unwrap().domain.dims, [6; 3]);
}

#[test]
fn defect_command_respects_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let out = polaron(dir.path(), &["defect", "--supercell", "2", "--charge", "0.1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&dir.path().join("defect.json"));
    let f = v["f_crys"].as_f64().unwrap();
    let d = v["d_nu_nu"].as_f64().unwrap();
    assert!(f <= 0.0 && f >= -0.5 * d);
    assert!(dir.path().join("checkpoints/defect.ckpt").exists());
}

#[test]
fn infeasible_supercell_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cap.toml");
    std::fs::write(&cfg, "[defect]\ndim_cap = 10\n").unwrap();
    let out = polaron(dir.path(), &["defect", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn nonconvergence_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("short.toml");
    std::fs::write(&cfg, "[crystal]\nmax_iter = 2\n").unwrap();
    let out = polaron(dir.path(), &["crystal", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
