use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn crrg(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_crrg"));
    cmd.args(args).current_dir(dir).env_remove("CRRG_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn fails_with(out: &Output, needle: &str) {
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(needle), "expected {needle:?} in {err}");
}

/// A small fixture and a quick config with short training.
fn setup(text_source: &str) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(&crrg(
        dir.path(),
        &[
            "synth",
            "--out",
            ".",
            "--studies",
            "40",
            "--rsna-images",
            "24",
        ],
        &[],
    ));
    let cfg = json!({
        "seed": 3,
        "paths": {"mimic": "mimic", "rsna": "rsna", "output": "out"},
        "detector": {"train": {"epochs": 2, "batch_size": 8, "learn_rate": 0.01}},
        "selector": {"epochs": 2, "batch_size": 32, "learn_rate": 0.001},
        "generator": {"train": {"epochs": 1, "batch_size": 8, "learn_rate": 0.002}},
        "clip": {"train": {"batch_size": 8, "learn_rate": 0.001, "total_epochs": 2, "warmup_epochs": 1},
                 "text_source": text_source},
        "classifier": {"train": {"epochs": 3, "batch_size": 8, "learn_rate": 0.01}}
    });
    std::fs::write(dir.path().join("config.json"), cfg.to_string()).unwrap();
    dir
}

fn manifest(dir: &Path, out: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join(out).join("manifest.json")).unwrap())
        .unwrap()
}

#[test]
fn stages_refuse_to_run_out_of_order() {
    let d = setup("generated");
    let p = d.path();
    fails_with(
        &crrg(p, &["train", "selector", "--config", "config.json"], &[]),
        "needs the output of stage",
    );
    fails_with(
        &crrg(p, &["split", "--config", "config.json"], &[]),
        "ingest",
    );
    ok(&crrg(p, &["ingest", "--config", "config.json"], &[]));
    ok(&crrg(p, &["split", "--config", "config.json"], &[]));
    fails_with(
        &crrg(p, &["train", "selector", "--config", "config.json"], &[]),
        "detector",
    );
    fails_with(
        &crrg(p, &["train", "clip", "--config", "config.json"], &[]),
        "detector",
    );
    ok(&crrg(
        p,
        &["train", "detector", "--config", "config.json"],
        &[],
    ));
    ok(&crrg(
        p,
        &["train", "selector", "--config", "config.json"],
        &[],
    ));
    fails_with(
        &crrg(p, &["train", "clip", "--config", "config.json"], &[]),
        "stage generator",
    );
    fails_with(
        &crrg(p, &["classify", "--config", "config.json"], &[]),
        "needs the output of stage",
    );
    assert!(!p.join("out/checkpoints/clip.ckpt").exists());
}

#[test]
fn reference_text_clip_needs_only_the_split() {
    let d = setup("reference");
    let p = d.path();
    ok(&crrg(p, &["ingest", "--config", "config.json"], &[]));
    ok(&crrg(p, &["split", "--config", "config.json"], &[]));
    ok(&crrg(p, &["train", "clip", "--config", "config.json"], &[]));
    ok(&crrg(
        p,
        &["train", "classifier", "--config", "config.json"],
        &[],
    ));
    ok(&crrg(p, &["classify", "--config", "config.json"], &[]));
    let preds = std::fs::read_to_string(p.join("out/predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 1 + 24);
    let m = manifest(p, "out");
    assert_eq!(m["text_source"], "reference");
    assert!(m["stages"]["clip"]["outputs"]["checkpoints/clip.ckpt"].is_string());
}

#[test]
fn run_all_writes_manifest_and_resumes() {
    let d = setup("generated");
    let p = d.path();
    ok(&crrg(p, &["run-all", "--config", "config.json"], &[]));
    let m = manifest(p, "out");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["config_sha256"].as_str().unwrap().len(), 64);
    let stages: Vec<&str> = m["stages"]
        .as_object()
        .unwrap()
        .keys()
        .map(String::as_str)
        .collect();
    assert_eq!(stages.len(), 10, "{stages:?}");
    for s in stages {
        assert_eq!(m["stages"][s]["version"], 1);
    }
    let gen_before = std::fs::read(p.join("out/generated.jsonl")).unwrap();
    ok(&crrg(
        p,
        &["run-all", "--config", "config.json", "--stage", "generate"],
        &[],
    ));
    assert_eq!(
        std::fs::read(p.join("out/generated.jsonl")).unwrap(),
        gen_before
    );
    assert_eq!(manifest(p, "out"), m);
    let csv = std::fs::read_to_string(p.join("out/scores.csv")).unwrap();
    assert!(csv.starts_with("bleu1,bleu2,bleu3,bleu4,meteor,rouge_l,cider,tfidf\n"));
}

#[test]
fn seed_overrides_reach_the_manifest() {
    let d = setup("generated");
    let p = d.path();
    ok(&crrg(
        p,
        &["ingest", "--config", "config.json", "--out", "env"],
        &[("CRRG_SEED", "99")],
    ));
    assert_eq!(manifest(p, "env")["seed"], 99);
    ok(&crrg(
        p,
        &[
            "ingest",
            "--config",
            "config.json",
            "--out",
            "flag",
            "--seed",
            "5",
        ],
        &[("CRRG_SEED", "99")],
    ));
    assert_eq!(manifest(p, "flag")["seed"], 5);
    fails_with(
        &crrg(
            p,
            &["ingest", "--config", "config.json"],
            &[("CRRG_SEED", "abc")],
        ),
        "CRRG_SEED",
    );

    // a different seed gives a different split
    ok(&crrg(
        p,
        &["split", "--config", "config.json", "--out", "env"],
        &[("CRRG_SEED", "99")],
    ));
    ok(&crrg(
        p,
        &["ingest", "--config", "config.json", "--out", "base"],
        &[],
    ));
    ok(&crrg(
        p,
        &["split", "--config", "config.json", "--out", "base"],
        &[],
    ));
    assert_ne!(
        std::fs::read(p.join("env/records.jsonl")).unwrap(),
        std::fs::read(p.join("base/records.jsonl")).unwrap()
    );
}

#[test]
fn score_rejects_orphans_and_scores_identity() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let line = |id: &str, text: &str| {
        json!({"subject_id": "p1", "study_id": "s1", "image_id": id, "report": text}).to_string()
    };
    std::fs::write(
        p.join("ref.jsonl"),
        format!(
            "{}\n{}\n",
            line("a", "lungs are clear."),
            line("b", "small effusion.")
        ),
    )
    .unwrap();
    std::fs::write(
        p.join("gen.jsonl"),
        format!(
            "{}\n{}\n",
            line("a", "lungs are clear."),
            line("c", "small effusion.")
        ),
    )
    .unwrap();
    fails_with(
        &crrg(
            p,
            &[
                "score",
                "--generated",
                "gen.jsonl",
                "--references",
                "ref.jsonl",
            ],
            &[],
        ),
        "do not align",
    );
    assert!(!p.join("scores.csv").exists());

    let out = crrg(
        p,
        &[
            "score",
            "--generated",
            "ref.jsonl",
            "--references",
            "ref.jsonl",
            "--out",
            "s",
        ],
        &[],
    );
    ok(&out);
    let v: Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("s/scores.json")).unwrap()).unwrap();
    for k in ["bleu1", "rouge_l", "tfidf"] {
        assert!((v[k].as_f64().unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn bad_invocations_exit_nonzero() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    fails_with(&crrg(p, &["ingest"], &[]), "--config");
    fails_with(
        &crrg(p, &["ingest", "--config", "missing.json"], &[]),
        "missing.json",
    );
    std::fs::write(p.join("bad.json"), r#"{"seed": 1, "colour": "red"}"#).unwrap();
    fails_with(&crrg(p, &["ingest", "--config", "bad.json"], &[]), "colour");
    assert_eq!(crrg(p, &["no-such-command"], &[]).status.code(), Some(2));
    ok(&crrg(p, &["gradcheck", "--points", "2"], &[]));
}
