use std::fs;
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_esrf");

const SMALL: &str = r#"[model]
dim_state = 1
dim_obs = 1
horizon = 1.0
obs_matrix = [[1.0]]
model_noise_cov = [[1.0]]
obs_noise_cov = [[1.0]]

[model.drift]
kind = "linear"
matrix = [[-0.5]]

[sweep]
variants = ["etkf"]
ensemble_size = 8
h_values = [0.25, 0.125, 0.0625, 0.03125]
h_fine = 0.0078125
num_seeds = 2
error_kinds = ["cov_analysis"]
"#;

#[test]
fn quick_check_exits_zero() {
    let out = Command::new(BIN).args(["check", "--quick"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.lines().count() >= 9);
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn sweep_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let out_dir = dir.path().join("out");
    let out = Command::new(BIN)
        .args(["sweep", "--format", "jsonl", "--parallel", "1", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    let code = out.status.code().unwrap();
    assert!(code == 0 || code == 1, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["errors.jsonl", "summary.jsonl", "meta.json"] {
        assert!(out_dir.join(f).exists(), "missing {f}");
    }
    let errors = fs::read_to_string(out_dir.join("errors.jsonl")).unwrap();
    assert_eq!(errors.lines().count(), 4);
}

#[test]
fn bad_config_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, SMALL.replace("\"etkf\"", "\"etkf2\"")).unwrap();
    let out = Command::new(BIN).args(["sweep", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains(":14:"), "{stderr}");
}
