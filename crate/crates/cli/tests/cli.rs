use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_semclip");

fn semclip(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(BIN)
        .current_dir(dir)
        .env_remove("SEMCLIP_CONFIG")
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "semclip {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

fn gen(dir: &Path, count: &str) {
    std::fs::write(dir.join("cfg.json"), r#"{"seed": 5, "parallelism": 1, "repeats": 3}"#).unwrap();
    semclip(
        dir,
        &[
            "--config",
            "cfg.json",
            "gen-synth",
            "--count",
            count,
            "--fraction-overview-solvable",
            "0.5",
            "--out",
            "data",
        ],
    );
}

fn with<'a>(rest: &[&'a str]) -> Vec<&'a str> {
    [&["--config", "cfg.json"][..], rest].concat()
}

#[test]
fn synth_supervise_train_evaluate_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen(dir, "12");
    assert_eq!(read(dir.join("data/manifest.jsonl")).lines().count(), 12);
    assert_eq!(read(dir.join("data/scenes.jsonl")).lines().count(), 12);
    assert!(dir.join("data/images/synth-00000.png").exists());

    semclip(
        dir,
        &with(&["build-supervision", "--dataset", "data/manifest.jsonl", "--out", "sup"]),
    );
    assert_eq!(read(dir.join("sup/supervision.jsonl")).lines().count(), 12);
    semclip(
        dir,
        &with(&[
            "train",
            "--dataset",
            "data/manifest.jsonl",
            "--supervision",
            "sup/supervision.jsonl",
            "--out",
            "model",
        ]),
    );
    assert!(read(dir.join("model/encoder.json")).contains("semclip-tiny-encoder/1"));

    for (strategy, out) in [
        ("topk", "ev_topk"),
        ("none", "ev_none"),
        ("optimal", "ev_opt"),
        ("random", "ev_rand"),
    ] {
        semclip(
            dir,
            &with(&[
                "evaluate",
                "--dataset",
                "data/manifest.jsonl",
                "--strategy",
                strategy,
                "--encoder",
                "model/encoder.json",
                "--out",
                out,
            ]),
        );
        for f in ["records.jsonl", "metrics.json", "report.csv", "report.md"] {
            assert!(dir.join(out).join(f).exists(), "{out}/{f}");
        }
    }
    let metrics: serde_json::Value = serde_json::from_str(&read(dir.join("ev_opt/metrics.json"))).unwrap();
    assert_eq!(metrics["config"]["strategy"], "optimal");
    assert_eq!(metrics["metrics"][0]["accuracy"], 1.0);
    let none: serde_json::Value = serde_json::from_str(&read(dir.join("ev_none/metrics.json"))).unwrap();
    assert_eq!(none["metrics"][0]["accuracy"], 0.5);
    assert_eq!(none["metrics"][0]["mean_visual_tokens"], 576.0);
    // three repeats of twelve records
    assert_eq!(read(dir.join("ev_rand/records.jsonl")).lines().count(), 36);

    let out = semclip(
        dir,
        &[
            "report",
            "ev_topk/metrics.json",
            "ev_none/metrics.json",
            "ev_opt/metrics.json",
            "--out",
            "rep",
        ],
    );
    let csv = read(dir.join("rep/report.csv"));
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("strategy,accuracy,img_tokens,answerer_queries,wall_time_s"));
    assert!(String::from_utf8_lossy(&out.stdout).contains("| optimal |"));
    assert!(read(dir.join("rep/scatter.svg")).starts_with("<svg"));
}

#[test]
fn evaluation_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen(dir, "8");
    for out in ["a", "b"] {
        semclip(
            dir,
            &[
                "--config",
                "cfg.json",
                "evaluate",
                "--dataset",
                "data/manifest.jsonl",
                "--strategy",
                "random",
                "--out",
                out,
            ],
        );
    }
    assert_eq!(read(dir.join("a/records.jsonl")), read(dir.join("b/records.jsonl")));
}

#[test]
fn external_answerer_over_stdio_matches_the_in_process_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen(dir, "6");
    let external = format!("external:{BIN} serve-toy --scenes data/scenes.jsonl");
    for (answerer, out) in [("toy", "local"), (external.as_str(), "remote")] {
        semclip(
            dir,
            &[
                "--config",
                "cfg.json",
                "evaluate",
                "--dataset",
                "data/manifest.jsonl",
                "--strategy",
                "topk",
                "--scorer",
                "gt",
                "--answerer",
                answerer,
                "--out",
                out,
            ],
        );
    }
    assert_eq!(
        read(dir.join("local/records.jsonl")),
        read(dir.join("remote/records.jsonl"))
    );
    assert!(read(dir.join("remote/records.jsonl"))
        .lines()
        .all(|l| l.contains(r#""correct":true"#)));
}

#[test]
fn partition_writes_cells() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen(dir, "1");
    semclip(
        dir,
        &[
            "partition",
            "data/images/synth-00000.png",
            "--grid-n",
            "2",
            "--out",
            "cells",
        ],
    );
    let regions: serde_json::Value = serde_json::from_str(&read(dir.join("cells/regions.json"))).unwrap();
    assert_eq!(regions.as_array().unwrap().len(), 4);
    assert!(dir.join("cells/cell_3.png").exists());
}

#[test]
fn bad_input_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("bad.json"), r#"{"k": 0}"#).unwrap();
    let out = Command::new(BIN)
        .current_dir(dir)
        .args(["--config", "bad.json", "partition", "x.png", "--out", "o"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("k"));

    std::fs::write(dir.join("typo.json"), r#"{"grid": 3}"#).unwrap();
    let out = Command::new(BIN)
        .current_dir(dir)
        .args(["--config", "typo.json", "partition", "x.png", "--out", "o"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("grid"));
}
