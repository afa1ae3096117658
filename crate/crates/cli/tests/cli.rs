use std::path::Path;
use std::process::{Command, Output};

fn textmask(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_textmask")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&textmask(&["--help"])), 0);
    assert_eq!(code(&textmask(&["--version"])), 0);
    assert_eq!(code(&textmask(&[])), 1);
    assert_eq!(code(&textmask(&["train"])), 1);
    assert_eq!(code(&textmask(&["frobnicate"])), 1);
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let out = textmask(&["train", "--dataset", p(&missing), "--out", p(&dir.path().join("run"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
    let out = textmask(&[
        "sample",
        "--checkpoint",
        p(&missing),
        "--caption",
        "red circle",
        "--mask",
        p(&missing),
        "--out",
        p(&dir.path().join("g.png")),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn dataset_train_sample_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("shapes");
    let run = dir.path().join("run");
    let out = textmask(&["make-dataset", "--out", p(&data), "--per-combination", "1"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("meta.json").is_file());

    let out = textmask(&[
        "--seed",
        "3",
        "train",
        "--dataset",
        p(&data),
        "--out",
        p(&run),
        "--max-steps",
        "2",
        "--set",
        "batch_size=4",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let checkpoint = run.join("checkpoint.safetensors");
    assert!(checkpoint.is_file());
    let losses = std::fs::read_to_string(run.join("losses.jsonl")).unwrap();
    assert!(!losses.is_empty());

    let grid = dir.path().join("grid.png");
    let mask = data.join("masks").join("00000.png");
    let out = textmask(&[
        "sample",
        "--checkpoint",
        p(&checkpoint),
        "--caption",
        "a red circle",
        "--caption",
        "a blue square",
        "--mask",
        p(&mask),
        "--out",
        p(&grid),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let (w, h) = image::image_dimensions(&grid).unwrap();
    assert!(w > h && h > 0);

    let report = dir.path().join("report.json");
    let out = textmask(&[
        "eval",
        "--checkpoint",
        p(&checkpoint),
        "--dataset",
        p(&data),
        "--report",
        p(&report),
        "--pool",
        "10",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    for key in ["inception_score", "r_precision", "controllability", "disentanglement", "config"] {
        assert!(json.get(key).is_some(), "report lacks {key}");
    }
    assert_eq!(json["config"]["eval"]["pool"], 10);
}
