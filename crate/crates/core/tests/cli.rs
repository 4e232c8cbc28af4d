mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn depformer(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_depformer"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

#[test]
fn train_then_run_every_command() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    common::write_toy_run(d, 30, 6, "");
    let out = depformer(d, &["train", "--config", "run.toml", "--seed", "11", "--alpha", "0", "--beta", "0"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let summary: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(summary["last"]["step"], 6);

    let log = fs::read_to_string(d.join("out/metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 6);
    for line in log.lines() {
        let r: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["step", "L", "L_c", "L_p", "J", "wall_clock"] {
            assert!(r.get(key).is_some(), "{key} missing");
        }
        assert_eq!(r["J"], r["L"]);
    }
    let ckpt = d.join("out/final.ckpt");
    let loaded = depformer::train::load_checkpoint(&ckpt).unwrap();
    assert_eq!(loaded.config.seed, 11);
    assert_eq!(loaded.config.supervision.alpha, 0.0);
    let ckpt = ckpt.to_str().unwrap();

    fs::write(d.join("input.txt"), "det0 noun1 noun2 verb3\nnoun4 verb0\n").unwrap();
    let out = depformer(d, &["translate", "--checkpoint", ckpt, "--input", "input.txt", "--output", "hyp.txt"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(fs::read_to_string(d.join("hyp.txt")).unwrap().lines().count(), 2);

    let out = depformer(d, &["parse-attn", "--checkpoint", ckpt, "--input", "input.txt", "--output", "pred.conllu"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let out = depformer(d, &["eval-uas", "--predicted", "pred.conllu", "--gold", "pred.conllu"]);
    let report: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(report["uas"], 1.0);
    assert_eq!(report["total"], 6);

    let out = depformer(d, &["export-attn", "--checkpoint", ckpt, "--input", "input.txt"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out).lines().count(), 2);

    let out = depformer(d, &["eval-bleu", "--hypothesis", "train.tgt", "--reference", "train.tgt"]);
    let report: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(report["bleu"], 100.0);
}

#[test]
fn bleu_of_the_worked_example() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("h"), "a b c d\n").unwrap();
    fs::write(dir.path().join("r"), "a b c e\n").unwrap();
    let out = depformer(dir.path(), &["eval-bleu", "--hypothesis", "h", "--reference", "r"]);
    let report: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert!((report["bleu"].as_f64().unwrap() - 0.3976).abs() < 5e-5);
}

fn assert_error(out: &Output, category: &str, code: i32) {
    assert_eq!(out.status.code(), Some(code));
    let err = stderr(out);
    let line = err.lines().last().unwrap();
    assert!(line.starts_with(&format!("error[{category}]: ")), "{line}");
}

#[test]
fn failures_report_a_category() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    common::write_toy_run(d, 5, 1, "");
    let text = fs::read_to_string(d.join("run.toml")).unwrap();
    fs::write(d.join("v2.toml"), text.replace("format_version = 1", "format_version = 2")).unwrap();
    assert_error(&depformer(d, &["train", "--config", "v2.toml"]), "config", 1);
    assert_error(&depformer(d, &["train"]), "config", 1);
    assert_error(&depformer(d, &["train", "--config", "run.toml", "--alpha=-1"]), "config", 1);
    assert_error(&depformer(d, &["translate", "--checkpoint", "missing.ckpt", "--input", "train.src"]), "io", 1);
    fs::write(d.join("junk.ckpt"), b"not a checkpoint").unwrap();
    assert_error(&depformer(d, &["translate", "--checkpoint", "junk.ckpt", "--input", "train.src"]), "checkpoint", 1);
    fs::write(d.join("two.txt"), "a\nb\n").unwrap();
    fs::write(d.join("one.txt"), "a\n").unwrap();
    assert_error(&depformer(d, &["eval-bleu", "--hypothesis", "two.txt", "--reference", "one.txt"]), "alignment", 1);
    fs::write(d.join("bad.conllu"), "1\ta\t_\t_\t_\t_\t1\t_\t_\t_\n\n").unwrap();
    assert_error(&depformer(d, &["eval-uas", "--predicted", "bad.conllu", "--gold", "bad.conllu"]), "conllu", 1);
    fs::write(d.join("short.src"), "x\n").unwrap();
    fs::write(d.join("mis.toml"), text.replace("\"train.src\"", "\"short.src\"")).unwrap();
    assert_error(&depformer(d, &["train", "--config", "mis.toml"]), "alignment", 1);
    assert_error(&depformer(d, &["frobnicate"]), "usage", 2);
}
