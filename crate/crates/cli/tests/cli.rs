use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gecx(args: &[&str], dir: &Path) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_gecx"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "gecx {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY_CONFIG: &str = r#"
name = "tiny"
seeds = [1, 2]
output_dir = "runs"

[corpus]
train = "data/train.jsonl"
dev = "data/dev.jsonl"
labels = "data/labels.txt"

[setting]
setting = "self_rationalization"
order = "post_explaining"

[model]
d_model = 8
encoder_layers = 1
decoder_layers = 1
heads = 2
ff_dim = 8

[training]
epochs = 1
batch_size = 8
lr = 0.003

[decode]
strategy = "greedy"
max_len = 24
"#;

#[test]
fn synth_stats_train_predict_evaluate_report() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    gecx(&["synth-corpus", "--seed", "3", "--size", "30", "-o", "data/train.jsonl"], d);
    gecx(&["synth-corpus", "--seed", "4", "--size", "6", "-o", "data/dev.jsonl"], d);
    assert!(d.join("data/labels.txt").exists());

    let stats = stdout(&gecx(&["stats", "data/train.jsonl", "--json"], d));
    let v: serde_json::Value = serde_json::from_str(&stats).unwrap();
    assert_eq!(v["sentence_count"], 30);
    assert_eq!(v["edits_per_sentence"], 1.0);

    fs::write(d.join("tiny.toml"), TINY_CONFIG).unwrap();
    let train = stdout(&gecx(&["train", "tiny.toml"], d));
    assert!(train.contains("| tiny | 2/2 |"), "{train}");
    let run = d.join("runs/tiny");
    for f in [
        "config.toml",
        "bundle.json",
        "report.md",
        "logs/seed_1.jsonl",
        "checkpoints/seed_2.json",
        "predictions/dev_seed_1.jsonl",
        "reports/dev_seed_2.json",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }

    gecx(
        &["predict", "runs/tiny/checkpoints/seed_1.json", "data/dev.jsonl", "--greedy", "--max-len", "24", "-o", "preds.jsonl"],
        d,
    );
    assert_eq!(fs::read_to_string(d.join("preds.jsonl")).unwrap().lines().count(), 6);
    let eval = stdout(&gecx(&["evaluate", "preds.jsonl", "data/dev.jsonl", "--json"], d));
    let v: serde_json::Value = serde_json::from_str(&eval).unwrap();
    assert!(v["correction"]["f05"].is_number() && v["explanation"]["f1"].is_number());
    // the run's own dev predictions score the same as the bundle says
    let eval = stdout(&gecx(
        &["evaluate", "runs/tiny/predictions/dev_seed_1.jsonl", "data/dev.jsonl", "--checkpoint", "runs/tiny/checkpoints/seed_1.json", "--json"],
        d,
    ));
    let v: serde_json::Value = serde_json::from_str(&eval).unwrap();
    let per_seed: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("reports/dev_seed_1.json")).unwrap()).unwrap();
    assert_eq!(v["correction"]["f05"], per_seed["cor_f05"]);

    let rep = stdout(&gecx(&["report", "runs/tiny", "runs/tiny/bundle.json", "-o", "cmp"], d));
    assert_eq!(rep.lines().count(), 4);
    assert!(d.join("cmp/report.json").exists());
}

#[test]
fn sweep_writes_one_row_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    gecx(&["synth-corpus", "--seed", "3", "--size", "16", "-o", "data/train.jsonl"], d);
    gecx(&["synth-corpus", "--seed", "4", "--size", "4", "-o", "data/dev.jsonl"], d);
    fs::write(d.join("tiny.toml"), TINY_CONFIG.replace("seeds = [1, 2]", "seeds = [1]")).unwrap();
    let out = stdout(&gecx(&["sweep", "tiny.toml", "--param", "lambda", "--values", "0.5,2"], d));
    assert!(out.starts_with("| lambda |"));
    assert_eq!(out.lines().count(), 4);
    assert!(d.join("runs/tiny_lambda_sweep/sweep.json").exists());
}

#[test]
fn denoise_writes_corpus_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("labels.txt"), "punctuation\nconjunction\n").unwrap();
    fs::write(
        d.join("expect.jsonl"),
        concat!(
            r#"{"id":"1","source":["However","I","sometimes","do","skipping","to","fit","myself","."],"target":["However","I","sometimes","do","skipping","to","keep","myself","fit","."],"evidence_indices":[5],"error_type":"punctuation"}"#,
            "\n"
        ),
    )
    .unwrap();
    fs::write(
        d.join("refs.jsonl"),
        concat!(
            r#"{"source":["However","I","sometimes","do","a","skipping","to","fit","myself","."],"target":["However",",","I","sometimes","do","skipping","to","keep","myself","fit","."]}"#,
            "\n"
        ),
    )
    .unwrap();
    let out = stdout(&gecx(&["denoise", "expect.jsonl", "refs.jsonl", "-o", "out/denoised.jsonl"], d));
    assert!(out.contains("changed 1/1"), "{out}");
    let line = fs::read_to_string(d.join("out/denoised.jsonl")).unwrap();
    let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(v["source"][1], ",");
    assert_eq!(v["evidence_indices"][0], 6);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("out/denoise_report.json")).unwrap()).unwrap();
    assert_eq!(report["summary"]["changed"], 1);
}

#[test]
fn bad_config_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.toml"), "seeds = []\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_gecx"))
        .args(["train", "bad.toml"])
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("seeds"));
}
