//! End-to-end behavior of run directories on a tiny configuration.

use std::fs;
use std::path::Path;

use ctxasr::checkpoint;
use ctxasr::contextforge::{ContextBundle, LlmClient};
use ctxasr::evalsuite::Condition;
use ctxasr::pipeline::{ContextMode, Run, RunConfig, Status};
use ctxasr::trainer::Stage;
use ctxasr::{Error, Result};

fn tiny() -> RunConfig {
    let mut cfg = RunConfig {
        seed: 3,
        ..RunConfig::default()
    };
    cfg.corpus.toy.utterances = 60;
    cfg.corpus.test_utterances = 12;
    for s in [
        &mut cfg.aed.schedule,
        &mut cfg.echo.schedule,
        &mut cfg.sft1.schedule,
        &mut cfg.sft2.schedule,
        &mut cfg.context.schedule,
    ] {
        s.steps = 4;
        s.batch_size = 4;
        s.warmup_steps = 1;
    }
    cfg
}

fn commands(run: &Run) -> Vec<Result<Status>> {
    vec![
        run.prepare_data(),
        run.train_aed(),
        run.pretrain_decoder(),
        run.train_sft(Stage::Sft1),
        run.train_sft(Stage::Sft2),
        run.forge_context(None),
        run.train_context(),
    ]
}

#[test]
fn every_command_completes_then_skips_then_redoes_when_forced() {
    let dir = tempfile::tempdir().unwrap();
    let run = Run::open(dir.path(), tiny(), false).unwrap();
    for r in commands(&run) {
        assert_eq!(r.unwrap(), Status::Done);
    }
    let report = run.evaluate(ContextMode::Both, None).unwrap();
    assert!(report.average(Condition::WithoutContext).is_some());
    assert!(report.average(Condition::WithContext).is_some());
    assert!(report.delta(Condition::WithContext).is_some());
    let table = fs::read_to_string(dir.path().join("eval/report.txt")).unwrap();
    assert!(table.contains("w/o context") && table.contains("w/ context vs w/o context"));

    let again = Run::open(dir.path(), tiny(), false).unwrap();
    for r in commands(&again) {
        assert_eq!(r.unwrap(), Status::Skipped);
    }
    let forced = Run::open(dir.path(), tiny(), true).unwrap();
    assert_eq!(forced.train_sft(Stage::Sft1).unwrap(), Status::Done);
}

fn config_hash_of(path: &Path) -> String {
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    v["config_hash"].as_str().unwrap().to_owned()
}

#[test]
fn artifacts_carry_the_configuration_hash_and_numeric_loss_logs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.eval.distractors = 1;
    let run = Run::open(dir.path(), cfg, false).unwrap();
    let report = run.run_all(None).unwrap();
    assert!(report.average(Condition::WithDistractors).is_some());
    let hash = run.config_hash().to_owned();
    assert_eq!(fs::read_to_string(dir.path().join("config.sha256")).unwrap().trim(), hash);
    for stage in ["aed", "echo", "sft1", "sft2", "context"] {
        assert_eq!(config_hash_of(&dir.path().join(format!("{stage}/run.json"))), hash, "{stage}");
        let log = fs::read_to_string(dir.path().join(format!("{stage}/loss.log"))).unwrap();
        assert_eq!(log.lines().count(), 4, "{stage}");
        for line in log.lines() {
            let fields: Vec<&str> = line.split(' ').collect();
            assert_eq!(fields.len(), 2, "{line}");
            fields[0].parse::<usize>().unwrap();
            assert!(fields[1].parse::<f64>().unwrap().is_finite());
        }
    }
    for ckpt in ["echo/model.ckpt", "sft1/model.ckpt", "sft2/model.ckpt", "context/model.ckpt"] {
        let c = checkpoint::load(&dir.path().join(ckpt), "model").unwrap();
        assert_eq!(c.meta["config_hash"].as_str().unwrap(), hash, "{ckpt}");
    }
    for ckpt in [("aed/aed.ckpt", "aed"), ("aed/encoder.ckpt", "encoder")] {
        let c = checkpoint::load(&dir.path().join(ckpt.0), ckpt.1).unwrap();
        assert_eq!(c.meta["config_hash"].as_str().unwrap(), hash);
    }
    assert_eq!(config_hash_of(&dir.path().join("context/forge.json")), hash);
}

#[test]
fn stages_can_be_evaluated_individually() {
    let dir = tempfile::tempdir().unwrap();
    let run = Run::open(dir.path(), tiny(), false).unwrap();
    run.prepare_data().unwrap();
    run.train_aed().unwrap();
    run.pretrain_decoder().unwrap();
    run.train_sft(Stage::Sft1).unwrap();
    let off = run.evaluate(ContextMode::Off, Some(Stage::Sft1)).unwrap();
    assert_eq!(off.rows.len(), 1);
    assert!(off.deltas.is_empty());
    assert!(matches!(
        run.evaluate(ContextMode::On, Some(Stage::Sft2)),
        Err(Error::MissingPrerequisite { .. })
    ));
    let test = run.test_manifest().unwrap();
    let u = &test.entries()[0];
    let bundle = ContextBundle::new(["zorvex"], Some("a short note"));
    let (t, _) = run.transcribe(&u.features, Some(&bundle), None).unwrap();
    assert!(t.tokens.len() <= run.config().model.generation.max_new_tokens);
}

/// Always fails, so every extraction falls back to the offline path.
struct Down;

impl LlmClient for Down {
    fn complete(&self, _prompt: &str) -> Result<String> {
        Err(Error::Client("unreachable".into()))
    }
}

#[test]
fn a_failing_client_falls_back_to_offline_extraction() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let offline = Run::open(a.path(), cfg.clone(), false).unwrap();
    let failing = Run::open(b.path(), cfg, false).unwrap();
    for run in [&offline, &failing] {
        run.prepare_data().unwrap();
    }
    offline.forge_context(None).unwrap();
    failing.forge_context(Some(&Down)).unwrap();
    for f in ["context/train.jsonl", "context/test.jsonl"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(b.path().join("context/forge.json")).unwrap()).unwrap();
    assert!(report["train"].to_string().contains("fallback"), "{report}");
}
