use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_phi4lab"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

#[test]
fn verify_passes() {
    let out = run(bin().args(["verify", "--seed", "5"]));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 5, "{text}");
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(bin().arg("scaling-study").arg("--out").arg(dir.path()));
    assert_eq!(out.status.code(), Some(2));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[grid]\nhalf_width = 1.0\nsurprise = true\n").unwrap();
    let out = run(bin().arg("scaling-study").arg("--config").arg(&bad).arg("--out").arg(dir.path()));
    assert_eq!(out.status.code(), Some(2));

    // delta outside (0, 1)
    let text = std::fs::read_to_string(config("smoke.toml")).unwrap().replace("deltas = [0.2]", "deltas = [0.9, 1.5]");
    let bad = dir.path().join("range.toml");
    std::fs::write(&bad, text).unwrap();
    let out = run(bin().arg("scaling-study").arg("--config").arg(&bad).arg("--out").arg(dir.path()));
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn scaling_study_then_plots() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(bin().arg("scaling-study").arg("--config").arg(config("smoke.toml")).arg("--out").arg(dir.path()));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["ledger.jsonl", "reports.json", "fits.json"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let out = run(bin().args(["emit-plots", "--object", "cherry_bar", "--p", "2"]).arg("--out").arg(dir.path()));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("reports.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
}

#[test]
fn exhausted_budget_exits_with_three_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        bin()
            .arg("scaling-study")
            .arg("--config")
            .arg(config("smoke.toml"))
            .arg("--out")
            .arg(dir.path())
            .args(["--budget-seconds", "0", "--threads", "1"]),
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let partial = std::fs::read(dir.path().join("ledger.jsonl")).unwrap();
    let out = run(bin().arg("scaling-study").arg("--config").arg(config("smoke.toml")).arg("--out").arg(dir.path()));
    assert_eq!(out.status.code(), Some(0));
    let full = std::fs::read(dir.path().join("ledger.jsonl")).unwrap();
    assert!(full.len() > partial.len() && full.starts_with(&partial));

    let fresh = tempfile::tempdir().unwrap();
    run(bin().arg("scaling-study").arg("--config").arg(config("smoke.toml")).arg("--out").arg(fresh.path()));
    assert_eq!(std::fs::read(fresh.path().join("ledger.jsonl")).unwrap(), full);
}

#[test]
fn sample_exports_fields() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(bin().arg("sample").arg("--config").arg(config("smoke.toml")).arg("--out").arg(dir.path()));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["xi.bin", "xi_delta.bin", "coeff.bin", "lollipop_hat.bin", "cherry_bar.bin", "chickenfoot_bar.bin"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
}
