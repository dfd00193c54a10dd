use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use spindle_core::denoiser::Checkpoint;
use tempfile::TempDir;

fn spindle(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spindle"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = spindle(args);
    assert!(
        out.status.success(),
        "spindle {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const CORPUS: &str = "the cat sat on the mat\nthe dog sat on the log\na cat and a dog\n";

fn corpus(dir: &TempDir) -> PathBuf {
    let path = dir.path().join("corpus.txt");
    fs::write(&path, CORPUS).unwrap();
    path
}

fn prepared(dir: &TempDir) -> PathBuf {
    let out = dir.path().join("prep");
    ok(&[
        "prepare",
        "--corpus",
        p(&corpus(dir)),
        "--vocab-size",
        "32",
        "--out",
        p(&out),
    ]);
    out
}

fn train_args<'a>(prep: &'a str, out: &'a str, steps: &'a str) -> Vec<&'a str> {
    vec![
        "train",
        "--prepared",
        prep,
        "--out",
        out,
        "--steps",
        steps,
        "--T",
        "4",
        "--layers",
        "1",
        "--d-model",
        "16",
        "--heads",
        "2",
        "--n-max",
        "8",
        "--batch-size",
        "4",
        "--checkpoint-every",
        "5",
        "--log-every",
        "1",
        "--seed",
        "3",
        "--warmup-steps",
        "2",
    ]
}

fn trained(dir: &TempDir) -> PathBuf {
    let prep = prepared(dir);
    let out = dir.path().join("run");
    ok(&train_args(p(&prep), p(&out), "6"));
    out.join("checkpoint-latest.spnd")
}

#[test]
fn prepare_writes_specials_first_and_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let prep = prepared(&dir);
    let vocab = fs::read_to_string(prep.join("vocab.tsv")).unwrap();
    let first: Vec<&str> = vocab.lines().take(3).map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(first, ["[PAD]", "[MASK]", "[CLS]"]);
    let stats = fs::read(prep.join("stats.json")).unwrap();
    let again = dir.path().join("prep2");
    ok(&[
        "prepare",
        "--corpus",
        p(&corpus(&dir)),
        "--vocab-size",
        "32",
        "--out",
        p(&again),
    ]);
    assert_eq!(fs::read_to_string(again.join("vocab.tsv")).unwrap(), vocab);
    assert_eq!(
        fs::read(again.join("surprisal.tsv")).unwrap(),
        fs::read(prep.join("surprisal.tsv")).unwrap()
    );
    assert_eq!(fs::read(again.join("stats.json")).unwrap(), stats);
    let stats: serde_json::Value = serde_json::from_slice(&stats).unwrap();
    assert_eq!(stats["format_version"], 1);
}

#[test]
fn tiny_vocab_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = spindle(&[
        "prepare",
        "--corpus",
        p(&corpus(&dir)),
        "--vocab-size",
        "3",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("vocab too small"));
}

#[test]
fn missing_corpus_fails() {
    let dir = TempDir::new().unwrap();
    let out = spindle(&[
        "prepare",
        "--corpus",
        p(&dir.path().join("nope.txt")),
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn training_writes_metrics_checkpoints_and_config() {
    let dir = TempDir::new().unwrap();
    let ck = trained(&dir);
    let run = ck.parent().unwrap();
    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 6);
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["step", "loss_total", "l_t_kl", "l0", "lT", "lr", "elapsed_s"] {
            assert!(v.get(key).is_some(), "{key} missing in {line}");
        }
    }
    assert!(run.join("checkpoint-00000005.spnd").exists());
    assert!(run.join("checkpoint-00000006.spnd").exists());
    let config: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["format_version"], 1);
    assert_eq!(config["config"]["schedule"]["steps"], 4);
}

fn without_elapsed(metrics: &str) -> Vec<serde_json::Value> {
    metrics
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("elapsed_s");
            v
        })
        .collect()
}

#[test]
fn resumed_run_matches_uninterrupted() {
    let dir = TempDir::new().unwrap();
    let prep = prepared(&dir);
    let full = dir.path().join("full");
    let mut args = train_args(p(&prep), p(&full), "12");
    args.extend(["--mlm-pretrain-steps", "4"]);
    ok(&args);
    let split = dir.path().join("split");
    let mut first = train_args(p(&prep), p(&split), "3");
    first.extend(["--mlm-pretrain-steps", "4"]);
    ok(&first);
    let mut second = train_args(p(&prep), p(&split), "12");
    second.extend(["--mlm-pretrain-steps", "4", "--resume"]);
    ok(&second);
    let a = fs::read_to_string(full.join("metrics.jsonl")).unwrap();
    let b = fs::read_to_string(split.join("metrics.jsonl")).unwrap();
    assert_eq!(without_elapsed(&a), without_elapsed(&b));
    let ca = Checkpoint::load(full.join("checkpoint-00000016.spnd")).unwrap();
    let cb = Checkpoint::load(split.join("checkpoint-00000016.spnd")).unwrap();
    assert_eq!(ca.params, cb.params);
    assert_eq!(ca.extra, cb.extra);
    assert_eq!(ca.meta.optimizer_step, cb.meta.optimizer_step);
}

#[test]
fn resume_with_other_vocab_is_rejected() {
    let dir = TempDir::new().unwrap();
    let ck = trained(&dir);
    let other = dir.path().join("other.txt");
    fs::write(&other, "entirely different words here\n").unwrap();
    let prep2 = dir.path().join("prep-other");
    ok(&[
        "prepare",
        "--corpus",
        p(&other),
        "--vocab-size",
        "32",
        "--out",
        p(&prep2),
    ]);
    let mut args = train_args(p(&prep2), p(ck.parent().unwrap()), "8");
    args.push("--resume");
    let out = spindle(&args);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("does not match vocab"),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn sampling_is_seeded_and_dumps_trajectories() {
    let dir = TempDir::new().unwrap();
    let ck = trained(&dir);
    let a = dir.path().join("a.txt");
    let b = dir.path().join("b.txt");
    let traj = dir.path().join("traj.jsonl");
    for out in [&a, &b] {
        ok(&[
            "sample",
            "--checkpoint",
            p(&ck),
            "--num",
            "2",
            "--seed",
            "7",
            "--length",
            "5",
            "--out",
            p(out),
            "--trajectory",
            p(&traj),
        ]);
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    assert_eq!(text.lines().count(), 2);
    assert!(!text.contains("[MASK]"));
    let first: serde_json::Value =
        serde_json::from_str(fs::read_to_string(&traj).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(first["iteration"], 0);
    assert_eq!(first["t"], 4);
    assert_eq!(first["text_with_masks"], "[MASK] [MASK] [MASK] [MASK] [MASK]");
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("a.txt.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["format_version"], 1);
    assert_eq!(meta["config"]["sample"]["iterations"], 4);
}

#[test]
fn iterations_must_divide_t() {
    let dir = TempDir::new().unwrap();
    let ck = trained(&dir);
    let out = spindle(&[
        "sample",
        "--checkpoint",
        p(&ck),
        "--iterations",
        "3",
        "--out",
        p(&dir.path().join("s.txt")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    ok(&[
        "sample",
        "--checkpoint",
        p(&ck),
        "--iterations",
        "2",
        "--length",
        "4",
        "--out",
        p(&dir.path().join("s.txt")),
    ]);
}

#[test]
fn eval_reports_and_sweeps() {
    let dir = TempDir::new().unwrap();
    let ck = trained(&dir);
    let report = dir.path().join("report.json");
    let sweep = dir.path().join("sweep.csv");
    ok(&[
        "eval",
        "--checkpoint",
        p(&ck),
        "--test",
        p(&corpus(&dir)),
        "--num-gen",
        "4",
        "--length",
        "5",
        "--out",
        p(&report),
        "--sweep",
        p(&sweep),
        "--grid",
        "1:1,3:1,30:2",
    ]);
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let elbo = r["elbo_nats_per_token"].as_f64().unwrap();
    assert!(elbo > 0.0);
    assert!((r["ppl_proxy"].as_f64().unwrap() - elbo.exp()).abs() < 1e-9);
    let bleu = r["bleu4"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&bleu));
    assert_eq!(r["config"]["format_version"], 1);
    let csv = fs::read_to_string(&sweep).unwrap();
    assert_eq!(csv.lines().next(), Some("k,temperature,bleu4,self_bleu4"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn eval_without_test_file_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let ck = trained(&dir);
    let out = spindle(&[
        "eval",
        "--checkpoint",
        p(&ck),
        "--test",
        p(&dir.path().join("missing.txt")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn schedule_prints_curves() {
    let dir = TempDir::new().unwrap();
    let prep = prepared(&dir);
    let out = ok(&[
        "schedule",
        "--prepared",
        p(&prep),
        "--text",
        "the cat sat",
        "--T",
        "4",
        "--lambda",
        "0.3",
    ]);
    let csv = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "t,position,token,surprisal,alpha_bar");
    assert_eq!(lines.len(), 1 + 5 * 3);
    assert!(lines[1].ends_with(",1"));
    assert!(lines.last().unwrap().ends_with(",0"));
}

#[test]
fn config_file_with_flag_override() {
    let dir = TempDir::new().unwrap();
    let prep = prepared(&dir);
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"schedule": {"steps": 8, "lambda": 0.0}, "model": {"layers": 1, "d_model": 16, "heads": 2, "d_ff": 64, "n_max": 8}, "train": {"batch_size": 2, "total_steps": 2}}"#).unwrap();
    let out = dir.path().join("run");
    ok(&[
        "train",
        "--config",
        p(&cfg),
        "--prepared",
        p(&prep),
        "--out",
        p(&out),
        "--T",
        "4",
    ]);
    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["config"]["schedule"]["steps"], 4);
    assert_eq!(resolved["config"]["schedule"]["lambda"], 0.0);
    assert_eq!(resolved["config"]["train"]["batch_size"], 2);
}

#[test]
fn verify_passes() {
    let out = ok(&["verify"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("9 of 9 checks passed"), "{text}");
}
