use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set", "data.vocab_size=6",
    "--set", "data.min_len=2",
    "--set", "data.max_len=4",
    "--set", "data.n_train=24",
    "--set", "data.n_dev=6",
    "--set", "data.n_test=6",
];

const MODEL: &[&str] = &[
    "--set", "model.vocab_size=7",
    "--set", "model.d_model=8",
    "--set", "model.n_heads=2",
    "--set", "model.d_ffn=16",
    "--set", "model.n_layers_acoustic=2",
    "--set", "model.n_layers_textual=1",
    "--set", "model.n_layers_decoder=1",
    "--set", "model.ctc_layer_index=2",
    "--set", "train.max_steps=6",
    "--set", "train.eval_interval=2",
    "--set", "train.keep_best=2",
    "--set", "train.batch_frames=200",
    "--set", "train.warmup=2",
];

fn sate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sate")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = sate(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn end_to_end_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&[&["gen-data", "--out", s(&data)], TINY].concat());
    assert!(data.join("manifest.txt").exists());

    ok(&[&["train", "--data", s(&data), "--out", s(&run), "--seed", "3", "--set", "recipe.kind=sate"], MODEL].concat());
    let manifest = std::fs::read_to_string(run.join("manifest.txt")).unwrap();
    assert!(manifest.contains("dataset.sha256="));
    assert!(manifest.contains("train.seed=3"));
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,split,metric,value"));

    // The manifest is a complete config for later commands.
    let cfg = s(&run.join("manifest.txt")).to_string();
    let model = s(&run.join("model.ckpt")).to_string();
    let report = ok(&["evaluate", "--config", &cfg, "--data", s(&data), "--checkpoint", &model, "--beam", "2"]);
    assert!(report.lines().nth(1).unwrap().starts_with("sate,test,2,bleu,"));

    let avg = dir.path().join("avg.ckpt");
    ok(&["average", "--out", s(&avg), &model, &model]);
    assert_eq!(std::fs::read(&avg).unwrap(), std::fs::read(&model).unwrap());

    let csv = ok(&["localness", "--config", &cfg, "--data", s(&data), "--checkpoint", &model]);
    assert!(csv.starts_with("model_tag,layer,group"));
    assert!(csv.contains("below-CTC"));
}

#[test]
fn config_errors_exit_with_two() {
    assert_eq!(sate(&["gen-data", "--out", "/tmp/unused", "--set", "data.bogus=1"]).status.code(), Some(2));
    assert_eq!(sate(&["gen-data", "--out", "/tmp/unused", "--set", "nonsense"]).status.code(), Some(2));
    // --seed is mandatory for train.
    assert_eq!(sate(&["train", "--data", "/nowhere", "--out", "/tmp/unused"]).status.code(), Some(2));
}

#[test]
fn divergence_exits_with_three_and_keeps_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&[&["gen-data", "--out", s(&data)], TINY].concat());
    let out = sate(
        &[
            &["train", "--data", s(&data), "--out", s(&run), "--seed", "1", "--set", "recipe.kind=mt"],
            MODEL,
            &["--set", "train.peak_lr=1e30"],
        ]
        .concat(),
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("checkpoints/last_good.ckpt").exists());
}
