use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn cotforge(args: &[&str], out: &Path) -> Output {
    let config = fixtures().join("config.json");
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cotforge"));
    cmd.arg("-q").args(args);
    if !matches!(args.first(), Some(&"build") | Some(&"evaluate")) {
        cmd.arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(out.join("out"))
            .arg("--cache-dir")
            .arg(out.join("cache"));
    }
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_then_report() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cotforge(&["run"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("Dataset statistics"));
    assert!(text.contains("student (w/o assistant)"));

    let o = cotforge(&["report"], tmp.path());
    assert!(o.status.success());
    assert!(stdout(&o).lines().any(|l| l.starts_with("evaluate\treused")));

    let o = cotforge(&["run", "--transport", "replay"], tmp.path());
    assert!(o.status.success());
    assert!(stdout(&o).lines().filter(|l| l.contains("\t")).all(|l| l.contains("\treused\t")));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(cotforge(&["report"], tmp.path()).status.code(), Some(4));
    assert_eq!(cotforge(&["train"], tmp.path()).status.code(), Some(3));
    assert_eq!(cotforge(&["run", "--stages", "synthesize,polish"], tmp.path()).status.code(), Some(2));
    assert_eq!(cotforge(&["run", "--transport", "carrier-pigeon"], tmp.path()).status.code(), Some(2));
    // Replay needs an existing cache, and an empty one misses on the first request.
    let o = cotforge(&["synthesize", "--transport", "replay"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    std::fs::create_dir(tmp.path().join("cache")).unwrap();
    let o = cotforge(&["synthesize", "--transport", "replay"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cache miss"));
}

#[test]
fn synthesize_in_two_steps_then_build_and_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cotforge(&["synthesize", "--stage", "1"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = cotforge(&["synthesize", "--stage", "2"], tmp.path());
    assert!(o.status.success());
    let synth = PathBuf::from(stdout(&o).trim().rsplit('\t').next().unwrap());
    assert!(synth.join("manifest.json").exists());

    let o = cotforge(&["augment"], tmp.path());
    assert!(o.status.success());
    let aug = PathBuf::from(stdout(&o).trim().rsplit('\t').next().unwrap());

    let full = tmp.path().join("full.jsonl");
    let o = Command::new(env!("CARGO_BIN_EXE_cotforge"))
        .args(["build", "--teacher"])
        .arg(synth.join("teacher_full.jsonl"))
        .arg("--assistant")
        .arg(aug.join("assistant_aug.jsonl"))
        .arg("--out")
        .arg(&full)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(full.exists());

    // Stage-1 teacher labels scored against the test gold, classification only.
    let o = Command::new(env!("CARGO_BIN_EXE_cotforge"))
        .args(["evaluate", "--metrics", "cls", "--name", "teacher", "--pred"])
        .arg(synth.join("teacher_predictions.jsonl"))
        .arg("--gold")
        .arg(synth.join("test_gold.jsonl"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["model"], "teacher");
    assert!(report["scores"]["Acc"].is_number());
    assert_eq!(report["scores"]["Bleu"], "n/a");
}
