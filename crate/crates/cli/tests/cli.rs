use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = "\
synth_labels_per_level = [2, 3, 6]
synth_docs = 80
synth_vocab_words = 30
bpe_vocab_size = 128
d_model = 16
heads = 2
d_ff = 32
encoder_layers = 1
decoder_layers = 1
max_title = 16
max_abstract = 32
max_target = 16
epochs = 2
batch_size = 8
warmup_steps = 0
beam_size = 2
max_steps = 12
";

fn hmg(dir: &Path, args: &[&str]) -> Output {
    let config = dir.join("run.toml");
    Command::new(env!("CARGO_BIN_EXE_hmg"))
        .args(args)
        .arg("--config")
        .arg(&config)
        .env("HMG_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = hmg(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    dir
}

#[test]
fn full_pipeline_runs_and_is_reproducible() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["synth"]);
    ok(d, &["build-vocab"]);
    ok(d, &["build-masks"]);
    let losses = ok(d, &["train"]);
    assert_eq!(losses.lines().filter(|l| l.starts_with("epoch")).count(), 2);
    ok(d, &["tag"]);
    let first = std::fs::read_to_string(d.join("predictions.jsonl")).unwrap();
    assert!(first.starts_with("# predictions vocab="));
    assert_eq!(first.lines().count(), 1 + 8);
    ok(d, &["tag"]);
    assert_eq!(std::fs::read_to_string(d.join("predictions.jsonl")).unwrap(), first);

    let table = ok(d, &["eval"]);
    assert!(table.contains("µF1"));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["documents"], 8);

    let placed = ok(d, &["place", "--text", "brand new topic"]);
    assert!(placed.starts_with("brand new topic\tparent "));
    let rows = std::fs::read_to_string(d.join("placements.jsonl")).unwrap();
    let row: serde_json::Value = serde_json::from_str(rows.lines().next().unwrap()).unwrap();
    assert_eq!(row["text"], "brand new topic");
}

#[test]
fn overrides_are_applied() {
    let dir = setup();
    let d = dir.path();
    let out = ok(d, &["synth", "--set", "synth_docs=20", "--set", "holdout_fraction=0.5"]);
    assert_eq!(out.trim_end(), "11 labels, 10 training and 10 held-out documents");
}

#[test]
fn invalid_input_exits_with_two() {
    let dir = setup();
    let d = dir.path();
    assert_eq!(hmg(d, &["synth", "--set", "no_such_key=1"]).status.code(), Some(2));
    assert_eq!(hmg(d, &["synth", "--set", "synth_labels_per_level=[3,2,6]"]).status.code(), Some(2));
    ok(d, &["synth"]);
    ok(d, &["build-vocab"]);
    let out = hmg(d, &["build-masks", "--set", "vocab_hash=deadbeef"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("hash mismatch"));
}

#[test]
fn missing_files_exit_with_three() {
    let dir = setup();
    assert_eq!(hmg(dir.path(), &["build-vocab"]).status.code(), Some(3));
}
