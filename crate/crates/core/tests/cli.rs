//! The command-line surface and its exit codes.

mod common;

use std::process::Command;

use common::tiny;
use moe_distill::continual::Strategy;
use moe_distill::teachers::{collect, suite, write_trajectories};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_moe-distill"))
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = bin().arg("train").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = bin().args(["report", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_config_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["distill", "--config"])
        .arg(dir.path().join("absent.toml"))
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn select_writes_an_audit_with_m_ids() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("pool.jsonl");
    let audit = dir.path().join("audit.tsv");
    write_trajectories(&input, &collect(&suite(40, 0.05)[1], 4, 9, 1).unwrap()).unwrap();
    let out = bin()
        .args(["select", "--strategy", "dpp", "--m", "2", "--input"])
        .arg(&input)
        .arg("--out")
        .arg(&audit)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&audit).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split('\t').collect();
    assert_eq!(row[4].split(',').count(), 2);
}

#[test]
fn distill_twice_gives_identical_metrics_and_report_reads_them() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(&config, tiny(Strategy::Ours, 2).to_toml()).unwrap();
    let mut files = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        let out = bin()
            .args(["distill", "--seed", "7", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out_dir)
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        files.push(std::fs::read(out_dir.join("metrics.tsv")).unwrap());
    }
    assert_eq!(files[0], files[1]);

    let plot = dir.path().join("plot");
    let out = bin()
        .args(["report", "--out"])
        .arg(dir.path().join("a"))
        .arg("--plot")
        .arg(&plot)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("Acc") && text.contains("BWT"));
    assert!(plot.join("pca.tsv").exists() && plot.join("summary.tsv").exists());

    let out = bin()
        .args(["eval", "--stage", "2", "--seed", "7", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("a"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 5);
}

#[test]
fn teach_writes_one_file_per_task() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(&config, tiny(Strategy::Ours, 2).to_toml()).unwrap();
    let out = bin()
        .args(["teach", "--stage", "2", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("task_2.jsonl").exists() && dir.path().join("task_3.jsonl").exists());
    assert!(!dir.path().join("task_0.jsonl").exists());
}
