//! The binary's commands, output and exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 4

[corpus]
test_utterances = 10

[corpus.toy]
utterances = 50

[aed.schedule]
steps = 3
batch_size = 4

[echo.schedule]
steps = 3
batch_size = 4

[sft1.schedule]
steps = 3
batch_size = 4

[sft2.schedule]
steps = 3
batch_size = 4

[context.schedule]
steps = 3
batch_size = 4
"#;

fn ctxasr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctxasr"))
        .arg("--run-dir")
        .arg(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = ctxasr(dir, args);
    assert!(o.status.success(), "{args:?} failed: {}", stderr(&o));
    stdout(&o)
}

#[test]
fn the_command_sequence_runs_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let run = dir.path().join("run");
    let cfg = cfg.to_str().unwrap();
    assert!(ok(&run, &["--config", cfg, "prepare-data"]).contains("done"));
    for args in [
        &["train-aed"][..],
        &["pretrain-decoder"],
        &["train-sft", "--stage", "1"],
        &["train-sft", "--stage", "2"],
        &["forge-context"],
        &["train-context"],
    ] {
        assert!(ok(&run, args).contains("done"), "{args:?}");
    }
    assert!(ok(&run, &["train-sft", "--stage", "1"]).contains("already complete"));
    assert!(ok(&run, &["--force", "train-sft", "--stage", "1"]).contains("done"));

    let table = ok(&run, &["evaluate", "--context", "both"]);
    assert!(table.contains("w/o context WER"), "{table}");
    assert!(table.contains("w/ context WER"), "{table}");
    assert!(table.contains("w/ context vs w/o context"), "{table}");
    assert!(run.join("eval/report.jsonl").exists());

    let off = ok(&run, &["evaluate", "--context", "off", "--stage", "sft2"]);
    assert!(!off.contains("w/ context WER"), "{off}");

    let out = ok(&run, &["transcribe", "--utterance", "test-00000", "--hotwords", "zorvex,quillan"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 3, "{out}");
    assert!(lines[1].starts_with("termination: "));
    assert!(lines[2].starts_with("flags: "));
    let feat = run.join("data/features/test-00001.feat");
    let out = ok(&run, &["transcribe", "--features", feat.to_str().unwrap(), "--stage", "sft1"]);
    assert!(out.contains("flags: "));
}

#[test]
fn failures_report_a_category_and_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");

    let o = ctxasr(&run, &["train-sft", "--stage", "1"]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert!(err.contains("error[missing-prerequisite]") && err.contains("pretrain-decoder"), "{err}");

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[model.decoder]\nwidth = 3\n").unwrap();
    let o = ctxasr(&run, &["--config", bad.to_str().unwrap(), "prepare-data"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("error[config]"));

    let o = ctxasr(&run, &["evaluate", "--context", "sometimes"]);
    assert!(!o.status.success());

    let o = ctxasr(&run, &["transcribe"]);
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr(&o).contains("error[invalid-input]"));

    let o = ctxasr(&run, &["forge-context", "--online"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn a_changed_configuration_is_refused_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let a = dir.path().join("a.toml");
    let b = dir.path().join("b.toml");
    fs::write(&a, TINY).unwrap();
    fs::write(&b, TINY.replace("seed = 4", "seed = 5")).unwrap();
    ok(&run, &["--config", a.to_str().unwrap(), "prepare-data"]);
    let o = ctxasr(&run, &["--config", b.to_str().unwrap(), "prepare-data"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--force"));
    ok(&run, &["--config", b.to_str().unwrap(), "--force", "prepare-data"]);
    assert!(fs::read_to_string(run.join("config.toml")).unwrap().contains("seed = 5"));
}

/// Trains the default configuration and checks that a hotword spoken in a
/// test utterance comes out when it is named in the prompt.
#[test]
fn a_trained_model_transcribes_a_prompted_hotword() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    ok(&run, &["run-all"]);
    let test = fs::read_to_string(run.join("context/test.jsonl")).unwrap();
    let mut tried = 0;
    let mut hits = 0;
    for line in test.lines().skip(1) {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let Some(hot) = v["hotwords"].as_array().and_then(|h| h.first()).and_then(|h| h.as_str()) else {
            continue;
        };
        let id = v["id"].as_str().unwrap();
        let out = ok(&run, &["transcribe", "--utterance", id, "--hotwords", hot]);
        tried += 1;
        hits += usize::from(out.lines().next().unwrap().split(' ').any(|w| w == hot));
        if tried == 10 {
            break;
        }
    }
    assert_eq!(tried, 10);
    assert!(hits >= 9, "{hits}/10 prompted hotwords transcribed");
}
