use std::path::PathBuf;
use std::process::Command;

fn sidlab() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sidlab"));
    cmd.env("RUST_LOG", "warn");
    cmd
}

fn smoke_config() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")
}

#[test]
fn train_then_sample_and_ablate() {
    let dir = tempfile::tempdir().unwrap();
    let models = dir.path().join("models");
    let status = sidlab()
        .args(["train", "--config"])
        .arg(smoke_config())
        .arg("--out")
        .arg(&models)
        .status()
        .unwrap();
    assert!(status.success());
    for f in ["dataset.jsonl", "denoiser.json", "critic.json"] {
        assert!(models.join(f).exists(), "{f} missing");
    }

    let out = dir.path().join("samples");
    let status = sidlab()
        .args(["sample", "--sampler", "cid", "--nfe", "4", "--count", "7", "--config"])
        .arg(smoke_config())
        .arg("--models")
        .arg(&models)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(out.join("samples_cid_4.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 8);

    let ablate = dir.path().join("ablate");
    let output = sidlab()
        .args(["ablate", "--seed", "3", "--config"])
        .arg(smoke_config())
        .arg("--models")
        .arg(&models)
        .arg("--out")
        .arg(&ablate)
        .output()
        .unwrap();
    assert!(output.status.success());
    let csv = std::fs::read_to_string(ablate.join("ablation.csv")).unwrap();
    assert!(csv.starts_with("sampler,nfe,validity,unique,novel,degree_tv,seed\n"));
    assert_eq!(csv.lines().count(), 11);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",3")));
}

#[test]
fn missing_models_fail_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let output = sidlab()
        .args(["sample", "--sampler", "sid", "--nfe", "4", "--config"])
        .arg(smoke_config())
        .arg("--models")
        .arg(dir.path())
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("error:"));
}

#[test]
fn bad_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");
    std::fs::write(&config, r#"{"version": 1, "nfe": []}"#).unwrap();
    let output = sidlab().args(["train", "--config"]).arg(&config).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn verify_runs_selected_criteria() {
    let output = sidlab().args(["verify", "--only", "1,5"]).output().unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert_eq!(stdout.lines().filter(|l| l.contains("PASS")).count(), 2);
}
