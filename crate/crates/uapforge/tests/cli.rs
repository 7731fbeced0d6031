//! CLI surface tests: exit codes, diagnostics, and override precedence.

use std::path::Path;
use std::process::Command;

use uapforge::adapter::ToyDualEncoder;
use uapforge::dataset::{write_manifest, Geometry};

const BIN: &str = env!("CARGO_BIN_EXE_uapforge");

fn toy_corpus(dir: &Path) -> std::path::PathBuf {
    let enc = ToyDualEncoder::new(1, Geometry::new(8, 8, 3), 32);
    let ds = enc.aligned_dataset(2, 4, 24, 4).unwrap();
    write_manifest(&ds, dir).unwrap()
}

fn quick_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("attack.toml");
    std::fs::write(
        &path,
        "iterations = 2\ntext_iterations = 1\n[text]\nsample_count = 4\n",
    )
    .unwrap();
    path
}

#[test]
fn unknown_config_key_fails_with_suggestion() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = toy_corpus(dir.path());
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "epsilonI = 0.05\n").unwrap();
    let out = Command::new(BIN)
        .args(["attack-image", "--adapter", "toy:1"])
        .arg("--manifest")
        .arg(&manifest)
        .arg("--config")
        .arg(&config)
        .arg("--workdir")
        .arg(dir.path())
        .env_remove("UAPFORGE_SEED")
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("epsilonI"), "{stderr}");
    assert!(stderr.contains("did you mean 'epsilon_I'"), "{stderr}");
}

#[test]
fn unknown_adapter_is_a_clean_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = toy_corpus(dir.path());
    let out = Command::new(BIN)
        .args(["attack-image", "--adapter", "resnet"])
        .arg("--manifest")
        .arg(&manifest)
        .arg("--workdir")
        .arg(dir.path())
        .env_remove("UAPFORGE_SEED")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown adapter"));
}

#[test]
fn missing_manifest_is_a_clean_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(BIN)
        .args(["attack-image", "--adapter", "toy"])
        .arg("--manifest")
        .arg(dir.path().join("nope.jsonl"))
        .arg("--workdir")
        .arg(dir.path())
        .env_remove("UAPFORGE_SEED")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest"));
}

#[test]
fn env_seed_overrides_config_and_flag_beats_env() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = toy_corpus(dir.path());
    let config = quick_config(dir.path());
    let run = |workdir: &Path, env: Option<&str>, flag: Option<&str>| {
        std::fs::create_dir_all(workdir).unwrap();
        let mut cmd = Command::new(BIN);
        cmd.args(["attack-image", "--adapter", "toy:1", "--out", "uap.bin"])
            .arg("--manifest")
            .arg(&manifest)
            .arg("--config")
            .arg(&config)
            .arg("--workdir")
            .arg(workdir);
        match env {
            Some(v) => cmd.env("UAPFORGE_SEED", v),
            None => cmd.env_remove("UAPFORGE_SEED"),
        };
        if let Some(s) = flag {
            cmd.args(["--seed", s]);
        }
        let out = cmd.output().unwrap();
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        std::fs::read(workdir.join("uap.bin")).unwrap()
    };

    let env1 = run(&dir.path().join("env1"), Some("1"), None);
    let env2 = run(&dir.path().join("env2"), Some("2"), None);
    assert_ne!(env1, env2, "different env seeds must give different UAPs");

    // A flag seed beats the env seed.
    let flag1 = run(&dir.path().join("flag1"), Some("2"), Some("1"));
    assert_eq!(env1, flag1, "--seed 1 should reproduce UAPFORGE_SEED=1");
}

#[test]
fn evaluate_then_report_renders_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = toy_corpus(dir.path());
    let out = Command::new(BIN)
        .args(["evaluate", "--adapter", "toy:1", "--k", "1,2"])
        .arg("--manifest")
        .arg(&manifest)
        .arg("--workdir")
        .arg(dir.path())
        .env_remove("UAPFORGE_SEED")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let out = Command::new(BIN)
        .args(["report", "--report", "report.json"])
        .arg("--workdir")
        .arg(dir.path())
        .env_remove("UAPFORGE_SEED")
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("ASR@K"), "{stdout}");
    assert!(stdout.contains("I2T") && stdout.contains("T2I"), "{stdout}");
    // No attack given: clean equals adversarial, ASR must be 0.
    assert!(stdout.contains("0.00"), "{stdout}");
}
