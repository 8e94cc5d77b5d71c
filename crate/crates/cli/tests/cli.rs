//! Drives the binary end to end on a tiny configuration.

use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

const TINY: [&str; 12] = [
    "--set", "model.dim=16",
    "--set", "model.heads=2",
    "--set", "model.decoder_layers=2",
    "--set", "train.iterations=3",
    "--set", "train.batch_scenes=2",
    "--set", "train.val_every=0",
];

const RED_CIRCLE: &str = "\
# text = the red circle
1\tthe\tthe\tDET\tDT\t_\t3\tdet\t_\t_
2\tred\tred\tADJ\tJJ\t_\t3\tamod\t_\t_
3\tcircle\tcircle\tNOUN\tNN\t_\t0\troot\t_\t_

";

fn refseg(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_refseg"))
        .env("REFSEG_OUTPUT_ROOT", root)
        .args(args)
        .output()
        .unwrap()
}

fn ok(root: &Path, args: &[&str]) -> String {
    let out = refseg(root, args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json(line: &str) -> serde_json::Value {
    serde_json::from_str(line.trim()).unwrap()
}

#[test]
fn full_pipeline_on_a_tiny_run() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    ok(root, &["gen-data", "--scenes", "4", "--val-scenes", "2", "--seed", "3"]);
    for split in ["train", "val"] {
        assert!(root.join("data").join(split).join("scenes.jsonl").exists());
        assert!(root.join("data").join(split).join("images").is_dir());
    }

    let run = root.join("runs/tiny");
    let mut args = vec!["train", "--name", "tiny", "--seed", "1"];
    args.extend(TINY);
    ok(root, &args);
    for f in ["config.toml", "train_log.jsonl", "checkpoint/manifest.json", "val_report.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let ckpt = run.join("checkpoint");
    let ckpt = ckpt.to_str().unwrap();
    ok(root, &["infer", "--checkpoint", ckpt]);
    let preds = root.join("preds.jsonl");
    assert!(preds.exists());
    let summary = json(&ok(root, &["evaluate", "--preds", preds.to_str().unwrap()]));
    let miou = summary["miou"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&miou));
    assert!(root.join("report.json").exists());
    assert!(root.join("samples.csv").exists());

    // single-image mode on one of the generated images
    let conllu = root.join("red_circle.conllu");
    std::fs::write(&conllu, RED_CIRCLE).unwrap();
    let image = std::fs::read_dir(root.join("data/val/images")).unwrap().next().unwrap().unwrap().path();
    let mask = root.join("mask.png");
    let single = json(&ok(
        root,
        &[
            "infer", "--checkpoint", ckpt,
            "--image", image.to_str().unwrap(),
            "--conllu", conllu.to_str().unwrap(),
            "--expression", "the red circle",
            "--mask-out", mask.to_str().unwrap(),
        ],
    ));
    assert_eq!(single["expression"], "the red circle");
    assert!(mask.exists());

    let mismatch = refseg(
        root,
        &["infer", "--checkpoint", ckpt, "--image", image.to_str().unwrap(), "--conllu", conllu.to_str().unwrap(), "--expression", "the blue square"],
    );
    assert!(!mismatch.status.success());
}

#[test]
fn free_text_without_a_parse_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let out = refseg(tmp.path(), &["infer", "--expression", "the red circle", "--checkpoint", "nowhere"]);
    assert!(!out.status.success());
}

#[test]
fn ablation_writes_table_and_curves() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    ok(root, &["gen-data", "--scenes", "3", "--val-scenes", "2"]);
    let mut args = vec!["ablate", "--configs", "baseline,full", "--name", "abl"];
    args.extend(TINY);
    let table = ok(root, &args);
    assert_eq!(table.lines().count(), 3, "{table}");
    for f in ["ablation.csv", "similarity.csv", "similarity.png", "ablation.json"] {
        assert!(root.join("abl").join(f).exists(), "missing {f}");
    }
}

#[test]
fn heatmap_from_dataset_and_from_files() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    ok(root, &["gen-data", "--scenes", "1", "--val-scenes", "2"]);
    let out = root.join("h.png");
    let v = json(&ok(root, &["heatmap", "--expression", "1", "--out", out.to_str().unwrap()]));
    assert!(v["prompt"].as_str().unwrap().starts_with("A Photo of "));
    assert!(out.exists());

    let conllu = root.join("e.conllu");
    std::fs::write(&conllu, RED_CIRCLE).unwrap();
    let image = std::fs::read_dir(root.join("data/val/images")).unwrap().next().unwrap().unwrap().path();
    let v = json(&ok(root, &["heatmap", "--image", image.to_str().unwrap(), "--conllu", conllu.to_str().unwrap()]));
    assert_eq!(v["prompt"], "A Photo of the red circle");
    assert_eq!(v["rolled_back"], false);
    let (y, x) = (v["argmax"][0].as_u64().unwrap(), v["argmax"][1].as_u64().unwrap());
    assert!(y < 4 && x < 4);
}

#[test]
fn extract_object_reads_stdin() {
    let mut child = Command::new(env!("CARGO_BIN_EXE_refseg"))
        .arg("extract-object")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let verb_only = "1\trun\trun\tVERB\tVB\t_\t0\troot\t_\t_\n\n";
    child.stdin.take().unwrap().write_all(format!("{RED_CIRCLE}{verb_only}").as_bytes()).unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let lines: Vec<serde_json::Value> = String::from_utf8(out.stdout).unwrap().lines().map(json).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["phrase"], "the red circle");
    assert_eq!(lines[0]["rolled_back"], false);
    assert_eq!(lines[1]["rolled_back"], true);
}

#[test]
fn unknown_override_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = refseg(tmp.path(), &["gen-data", "--scenes", "1", "--set", "model.nope=3"]);
    assert!(!out.status.success());
}
