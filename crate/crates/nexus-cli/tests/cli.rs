//! Black-box tests of the `nexus` binary: exit codes, determinism, artifact
//! production, and the documented pipeline chain on a small dataset.

use std::path::Path;
use std::process::{Command, Output};

fn nexus(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nexus"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("failed to launch the nexus binary")
}

fn assert_exit(out: &Output, code: i32, context: &str) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "{context}: expected exit {code}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Small but complete configuration: 60 days of data, a 2-day lookback, and
/// a deliberately short training budget.
const TINY_TOML: &str = r#"
seed = 7

[model]
lookback = 16
patch_len = 4
stride = 2
rank = 8
mix_rank = 4
d_hidden = 8
head_hidden = 8

[train]
max_epochs = 2
patience = 2
batch_size = 64

[synth]
n_days = 60

[split.fractions]
train = 0.7
val = 0.15
"#;

fn write_tiny_config(dir: &Path) {
    std::fs::write(dir.join("tiny.toml"), TINY_TOML).unwrap();
}

#[test]
fn pipeline_chain_produces_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny_config(dir.path());
    for cmd in [
        "generate", "prepare", "train", "evaluate", "ablate", "analyze", "predict",
    ] {
        let out = nexus(dir.path(), &[cmd, "--config", "tiny.toml", "--out", "run"]);
        assert_exit(&out, 0, cmd);
    }
    for artifact in [
        "effective_config.toml",
        "raw.csv",
        "aligned.csv",
        "norm_stats.json",
        "model.ckpt",
        "train_report.csv",
        "metrics.csv",
        "residuals.csv",
        "ablation.csv",
        "diurnal.csv",
        "monthly.csv",
        "regime.csv",
        "correlations.csv",
        "forecast.csv",
    ] {
        assert!(
            dir.path().join("run").join(artifact).is_file(),
            "missing artifact {artifact}"
        );
    }

    // Table shapes: 6 ablation variants, 8 diurnal bins, 12 months, 16
    // regime cells, one forecast row per site.
    let lines = |name: &str| {
        std::fs::read_to_string(dir.path().join("run").join(name))
            .unwrap()
            .lines()
            .count()
    };
    assert_eq!(lines("ablation.csv"), 1 + 6);
    assert_eq!(lines("diurnal.csv"), 1 + 8);
    assert_eq!(lines("monthly.csv"), 1 + 12);
    assert_eq!(lines("regime.csv"), 1 + 16);
    assert_eq!(lines("forecast.csv"), 1 + 4);
    assert_eq!(lines("metrics.csv"), 1 + 3 + 1);
}

#[test]
fn generate_is_deterministic_and_counts_rows() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny_config(dir.path());
    let args = [
        "generate", "--config", "tiny.toml", "--out", "a", "-o", "a/data.csv",
    ];
    let out = nexus(dir.path(), &args);
    assert_exit(&out, 0, "generate");
    let first = std::fs::read(dir.path().join("a/data.csv")).unwrap();
    let out = nexus(dir.path(), &args);
    assert_exit(&out, 0, "generate again");
    let second = std::fs::read(dir.path().join("a/data.csv")).unwrap();
    assert_eq!(first, second, "same config and seed must give identical bytes");
    // sites x days x 24 hourly rows plus the header.
    let rows = first.iter().filter(|&&b| b == b'\n').count();
    assert_eq!(rows, 1 + 4 * 60 * 24);

    // A different seed changes the data.
    let out = nexus(
        dir.path(),
        &[
            "generate", "--config", "tiny.toml", "--seed", "8", "--out", "a", "-o", "a/data.csv",
        ],
    );
    assert_exit(&out, 0, "generate with different seed");
    let third = std::fs::read(dir.path().join("a/data.csv")).unwrap();
    assert_ne!(first, third);
}

#[test]
fn generate_rejects_too_few_days() {
    let dir = tempfile::tempdir().unwrap();
    let out = nexus(dir.path(), &["generate", "--days", "10", "--out", "x"]);
    assert_exit(&out, 2, "generate --days 10");
    assert!(String::from_utf8_lossy(&out.stderr).contains("30"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[model]\nbanana = 1\n").unwrap();
    let out = nexus(
        dir.path(),
        &["generate", "--config", "bad.toml", "--out", "x"],
    );
    assert_exit(&out, 2, "unknown config key");
    assert!(String::from_utf8_lossy(&out.stderr).contains("banana"));
}

#[test]
fn prepare_rejects_a_malformed_header() {
    let dir = tempfile::tempdir().unwrap();
    // The so2 column is missing.
    std::fs::write(
        dir.path().join("bad.csv"),
        "timestamp,site_id,lat,lon,co,no,tp,ssr,u10,v10,skt\n",
    )
    .unwrap();
    let out = nexus(
        dir.path(),
        &["prepare", "--input", "bad.csv", "--out", "x"],
    );
    assert_exit(&out, 2, "prepare with bad header");
    assert!(String::from_utf8_lossy(&out.stderr).contains("so2"));
}

#[test]
fn norm_stats_sidecar_is_stable_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny_config(dir.path());
    for cmd in ["generate", "prepare"] {
        let out = nexus(dir.path(), &[cmd, "--config", "tiny.toml", "--out", "p1"]);
        assert_exit(&out, 0, cmd);
    }
    let first = std::fs::read(dir.path().join("p1/norm_stats.json")).unwrap();
    let out = nexus(
        dir.path(),
        &["prepare", "--config", "tiny.toml", "--out", "p1"],
    );
    assert_exit(&out, 0, "prepare again");
    let second = std::fs::read(dir.path().join("p1/norm_stats.json")).unwrap();
    assert_eq!(first, second);
}

#[test]
fn evaluate_detects_a_mismatched_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny_config(dir.path());
    for cmd in ["generate", "prepare", "train"] {
        let out = nexus(dir.path(), &[cmd, "--config", "tiny.toml", "--out", "run"]);
        assert_exit(&out, 0, cmd);
    }
    // A config whose model disagrees with the checkpoint.
    let other = TINY_TOML.replace("d_hidden = 8", "d_hidden = 12");
    std::fs::write(dir.path().join("other.toml"), other).unwrap();
    let out = nexus(
        dir.path(),
        &["evaluate", "--config", "other.toml", "--out", "run"],
    );
    assert_exit(&out, 3, "evaluate with mismatched config");

    // A corrupted checkpoint fails the checksum.
    let ckpt_path = dir.path().join("run/model.ckpt");
    let mut bytes = std::fs::read(&ckpt_path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    std::fs::write(&ckpt_path, bytes).unwrap();
    let out = nexus(
        dir.path(),
        &["evaluate", "--config", "tiny.toml", "--out", "run"],
    );
    assert_exit(&out, 3, "evaluate with corrupted checkpoint");
}

#[test]
fn every_subcommand_documents_its_flags() {
    let dir = tempfile::tempdir().unwrap();
    let shared = ["--config", "--seed", "--out"];
    let specific: &[(&str, &[&str])] = &[
        ("generate", &["--days", "--output"]),
        ("prepare", &["--input"]),
        ("train", &["--data"]),
        ("evaluate", &["--checkpoint", "--data", "--split"]),
        ("ablate", &["--data"]),
        ("analyze", &["--data"]),
        ("predict", &["--checkpoint", "--data"]),
    ];
    for (cmd, flags) in specific {
        let out = nexus(dir.path(), &[cmd, "--help"]);
        assert_exit(&out, 0, &format!("{cmd} --help"));
        let help = String::from_utf8_lossy(&out.stdout);
        for flag in shared.iter().chain(flags.iter()) {
            assert!(help.contains(flag), "{cmd} --help is missing {flag}");
        }
    }
}
