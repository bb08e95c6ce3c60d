//! Run directories and the end-to-end commands.
//!
//! A run directory holds everything one configuration produces:
//!
//! ```text
//! config.toml       resolved configuration snapshot
//! config.sha256     hash of the snapshot, stamped into every artifact
//! data/             train.jsonl, test.jsonl and their feature files
//! aed/              aed.ckpt, encoder.ckpt, run.json, loss.log
//! echo/ sft1/ sft2/ model.ckpt, run.json, loss.log
//! context/          train.jsonl, test.jsonl, forge.json, model.ckpt, run.json, loss.log
//! eval/             report.jsonl, report.txt
//! ```
//!
//! Each command skips work whose output already exists unless forced.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, hex};
use crate::contextforge::{
    add_distractors, forge_manifest, ClientConfig, ContextBundle, DocumentFrequencies, ForgeConfig, LlmClient,
};
use crate::corpus::{synth_toy_corpus, FeatureMatrix, Manifest, ToyCorpusConfig};
use crate::adapter::AdapterConfig;
use crate::decoder::{DecoderConfig, LoraSpec, Termination};
use crate::encoder::{export_encoder, train_aed, AedConfig, EncoderConfig, EncoderExport};
use crate::error::{Error, Result};
use crate::evalsuite::{
    aggregate, hallucination_flags, normalize_and_tokenize, pooled_errors, recall_counts, Condition, EvalReport,
    Flag, FlagCounts, HallucinationConfig, SetRow,
};
use crate::model::{build_tokenizer, ModelBundle, ModelConfig, Transcript};
use crate::optim::Schedule;
use crate::parallel::Exec;
use crate::trainer::{mix_datasets, pretrain_decoder, run_stage, EchoConfig, Stage, StagePlan, TrainRun, DONE_AED};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSettings {
    /// Synthetic corpus; `utterances` sizes the training split.
    pub toy: ToyCorpusConfig,
    pub test_utterances: usize,
    /// Existing manifests used instead of the synthetic corpus.
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
}

impl Default for CorpusSettings {
    fn default() -> Self {
        Self {
            toy: ToyCorpusConfig::default(),
            test_utterances: 100,
            train_manifest: None,
            test_manifest: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AedSettings {
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub ffn_expansion: usize,
    pub max_target_len: usize,
    pub schedule: Schedule,
}

impl Default for AedSettings {
    fn default() -> Self {
        let d = AedConfig::default();
        Self {
            decoder_layers: d.decoder_layers,
            decoder_heads: d.decoder_heads,
            ffn_expansion: d.ffn_expansion,
            max_target_len: d.max_target_len,
            schedule: Schedule::default(),
        }
    }
}

impl AedSettings {
    pub fn config(&self, encoder: &EncoderConfig) -> AedConfig {
        AedConfig {
            encoder: encoder.clone(),
            decoder_layers: self.decoder_layers,
            decoder_heads: self.decoder_heads,
            ffn_expansion: self.ffn_expansion,
            max_target_len: self.max_target_len,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftSettings {
    pub schedule: Schedule,
    pub lora: LoraSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContextSettings {
    pub schedule: Schedule,
    pub plain_fraction: f64,
    pub forge: ForgeConfig,
    /// Distractors added to each training bundle.
    pub train_distractors: usize,
}

impl Default for ContextSettings {
    fn default() -> Self {
        Self {
            schedule: Schedule::default(),
            plain_fraction: 0.5,
            forge: ForgeConfig::default(),
            train_distractors: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub set_name: String,
    pub hallucination: HallucinationConfig,
    /// Distractors per bundle for the extra distractor condition; 0 skips it.
    pub distractors: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            set_name: "toy-test".into(),
            hallucination: HallucinationConfig::default(),
            distractors: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Run directory used when the command line does not name one. It is
    /// left out of the configuration hash.
    pub output_dir: PathBuf,
    pub exec: Exec,
    pub corpus: CorpusSettings,
    pub model: ModelConfig,
    pub aed: AedSettings,
    pub echo: EchoConfig,
    pub sft1: SftSettings,
    pub sft2: SftSettings,
    pub context: ContextSettings,
    pub client: ClientConfig,
    pub eval: EvalSettings,
}

fn steps(steps: usize) -> Schedule {
    Schedule {
        steps,
        ..Schedule::default()
    }
}

/// Desk-scale defaults: a 16-dimensional toy corpus with confusable hotword
/// groups and 32-dimensional encoder and decoder. The whole pipeline runs
/// in a few minutes on one CPU core.
impl Default for RunConfig {
    fn default() -> Self {
        let feature_dim = 16;
        let dim = 32;
        let model = ModelConfig {
            encoder: EncoderConfig {
                input_dim: feature_dim,
                model_dim: dim,
                layers: 1,
                heads: 4,
                ..EncoderConfig::default()
            },
            adapter: AdapterConfig {
                input_dim: dim,
                hidden_dim: 2 * dim,
                output_dim: dim,
                ..AdapterConfig::default()
            },
            decoder: DecoderConfig {
                embed_dim: dim,
                layers: 2,
                heads: 4,
                ..DecoderConfig::default()
            },
            ..ModelConfig::default()
        };
        Self {
            seed: 1,
            output_dir: PathBuf::from("runs/default"),
            exec: Exec::Parallel,
            corpus: CorpusSettings {
                toy: ToyCorpusConfig {
                    utterances: 4000,
                    feature_dim,
                    ..ToyCorpusConfig::default()
                },
                ..CorpusSettings::default()
            },
            model,
            aed: AedSettings {
                schedule: steps(800),
                ..AedSettings::default()
            },
            echo: EchoConfig {
                schedule: steps(2000),
                ..EchoConfig::default()
            },
            sft1: SftSettings {
                schedule: steps(600),
                ..SftSettings::default()
            },
            sft2: SftSettings {
                schedule: steps(600),
                ..SftSettings::default()
            },
            context: ContextSettings {
                schedule: steps(600),
                ..ContextSettings::default()
            },
            client: ClientConfig::default(),
            eval: EvalSettings::default(),
        }
    }
}

impl RunConfig {
    /// Parses a configuration file. Keys it leaves out keep the values of
    /// [`RunConfig::default`], at any depth; unknown keys are rejected.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut merged = toml::Table::try_from(Self::default()).expect("defaults serialize");
        overlay(&mut merged, user);
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// SHA-256 of the resolved snapshot, ignoring `output_dir`.
    pub fn hash(&self) -> String {
        let anchored = Self {
            output_dir: PathBuf::new(),
            ..self.clone()
        };
        hex(&Sha256::digest(anchored.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.corpus.train_manifest.is_none() {
            self.corpus.toy.validate()?;
            if self.corpus.toy.feature_dim != self.model.encoder.input_dim {
                return Err(Error::Config(format!(
                    "toy feature_dim {} must equal encoder input_dim {}",
                    self.corpus.toy.feature_dim, self.model.encoder.input_dim
                )));
            }
            if self.corpus.test_utterances == 0 {
                return Err(Error::Config("test_utterances must be positive".into()));
            }
        }
        if self.corpus.train_manifest.is_some() != self.corpus.test_manifest.is_some() {
            return Err(Error::Config("train_manifest and test_manifest go together".into()));
        }
        let aed = self.aed.config(&self.model.encoder);
        if aed.decoder_heads == 0 || self.model.encoder.model_dim % aed.decoder_heads != 0 {
            return Err(Error::Config("aed decoder_heads must divide encoder model_dim".into()));
        }
        self.aed.schedule.validate()?;
        self.echo.validate()?;
        self.sft1.schedule.validate()?;
        self.sft2.schedule.validate()?;
        self.context.schedule.validate()?;
        self.context.forge.validate()?;
        if !(0.0..=1.0).contains(&self.context.plain_fraction) {
            return Err(Error::Config("context.plain_fraction must lie in [0, 1]".into()));
        }
        if self.client.max_in_flight == 0 {
            return Err(Error::Config("client.max_in_flight must be positive".into()));
        }
        Ok(())
    }
}

fn overlay(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => overlay(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Whether a command did its work or found it already done.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Done,
    Skipped,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContextMode {
    Off,
    On,
    Both,
}

impl std::str::FromStr for ContextMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(ContextMode::Off),
            "on" => Ok(ContextMode::On),
            "both" => Ok(ContextMode::Both),
            _ => Err(Error::InvalidInput(format!("context mode `{s}` is not on, off or both"))),
        }
    }
}

#[derive(Serialize)]
struct Stamped<'a, T> {
    config_hash: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

#[derive(Serialize, Deserialize)]
struct AedMeta {
    config: AedConfig,
    tokenizer: crate::decoder::Tokenizer,
    config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct EncoderMeta {
    config: EncoderConfig,
    config_hash: String,
}

/// One utterance scored under one condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredUtterance {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
    pub termination: Termination,
    pub flags: Vec<Flag>,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Scores `set` under `condition`. Recall is always measured against the
/// bundles stored in `set`, whether or not they were shown to the model.
pub fn score_set(
    model: &ModelBundle,
    name: &str,
    set: &Manifest,
    condition: Condition,
    hall: &HallucinationConfig,
    exec: Exec,
) -> Result<(SetRow, Vec<ScoredUtterance>)> {
    let use_context = condition != Condition::WithoutContext;
    let outs: Vec<Transcript> = model.transcribe_all(set.entries(), use_context, exec)?;
    let refs: Vec<&str> = set.entries().iter().map(|u| u.transcript.as_str()).collect();
    let hyps: Vec<&str> = outs.iter().map(|t| t.text.as_str()).collect();
    let bundles: Vec<Option<&ContextBundle>> = set.entries().iter().map(|u| u.context.as_ref()).collect();
    let errors = pooled_errors(&refs, &hyps)?;
    let recall = recall_counts(&refs, &hyps, &bundles)?;
    let mut flags = FlagCounts::default();
    let mut scored = Vec::with_capacity(outs.len());
    for ((u, t), r) in set.entries().iter().zip(&outs).zip(&refs) {
        let f = hallucination_flags(&normalize_and_tokenize(r), &normalize_and_tokenize(&t.text), Some(t.termination), hall);
        flags.repetition += usize::from(f.contains(&Flag::Repetition));
        flags.length += usize::from(f.contains(&Flag::Length));
        flags.flagged += usize::from(!f.is_empty());
        scored.push(ScoredUtterance {
            id: u.id.clone(),
            reference: u.transcript.clone(),
            hypothesis: t.text.clone(),
            termination: t.termination,
            flags: f.into_iter().collect(),
        });
    }
    let row = SetRow::from_counts(name, condition, set.len(), errors, recall, flags)?;
    Ok((row, scored))
}

/// A run directory bound to its configuration.
pub struct Run {
    dir: PathBuf,
    config: RunConfig,
    hash: String,
    force: bool,
}

impl Run {
    /// Creates or reopens `dir` for `config`. A directory created with a
    /// different configuration is refused unless `force` is set.
    pub fn open(dir: &Path, config: RunConfig, force: bool) -> Result<Self> {
        config.validate()?;
        let hash = config.hash();
        let stamp = dir.join("config.sha256");
        if let Ok(existing) = fs::read_to_string(&stamp) {
            if existing.trim() != hash && !force {
                return Err(Error::Config(format!(
                    "{} was created with a different configuration; pass --force to overwrite it",
                    dir.display()
                )));
            }
        }
        write(&dir.join("config.toml"), config.to_toml())?;
        write(&stamp, format!("{hash}\n"))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            config,
            hash,
            force,
        })
    }

    /// Reopens a run directory from its own snapshot.
    pub fn resume(dir: &Path, force: bool) -> Result<Self> {
        let path = dir.join("config.toml");
        if !path.exists() {
            return Err(Error::MissingPrerequisite {
                what: format!("{} has no config.toml", dir.display()),
                upstream: "prepare-data".into(),
            });
        }
        Self::open(dir, RunConfig::load(&path)?, force)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn skip(&self, output: &str) -> bool {
        let done = self.path(output).exists() && !self.force;
        if done {
            log::info!("{} exists; skipping (use --force to redo)", self.path(output).display());
        }
        done
    }

    fn require(&self, rel: &str, upstream: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingPrerequisite {
                what: format!("{} not found", p.display()),
                upstream: upstream.into(),
            })
        }
    }

    fn manifest(&self, rel: &str, upstream: &str) -> Result<Manifest> {
        Manifest::read(&self.require(rel, upstream)?)
    }

    pub fn train_manifest(&self) -> Result<Manifest> {
        self.manifest("data/train.jsonl", "prepare-data")
    }

    pub fn test_manifest(&self) -> Result<Manifest> {
        self.manifest("data/test.jsonl", "prepare-data")
    }

    fn save_run(&self, stage_dir: &str, run: &TrainRun) -> Result<()> {
        let stamped = Stamped {
            config_hash: &self.hash,
            body: run,
        };
        let json = serde_json::to_string_pretty(&stamped).expect("run serializes");
        write(&self.path(&format!("{stage_dir}/run.json")), json + "\n")?;
        write(&self.path(&format!("{stage_dir}/loss.log")), run.loss_log())
    }

    pub fn prepare_data(&self) -> Result<Status> {
        if self.skip("data/test.jsonl") {
            return Ok(Status::Skipped);
        }
        let c = &self.config.corpus;
        let (train, test) = match (&c.train_manifest, &c.test_manifest) {
            (Some(tr), Some(te)) => (Manifest::read(tr)?, Manifest::read(te)?),
            _ => {
                let train_cfg = ToyCorpusConfig {
                    id_prefix: "train".into(),
                    ..c.toy.clone()
                };
                let test_cfg = ToyCorpusConfig {
                    id_prefix: "test".into(),
                    utterances: c.test_utterances,
                    ..c.toy.clone()
                };
                (
                    synth_toy_corpus(&train_cfg, self.config.seed)?,
                    synth_toy_corpus(&test_cfg, self.config.seed.wrapping_add(1_000_003))?,
                )
            }
        };
        train.write(&self.path("data/train.jsonl"))?;
        test.write(&self.path("data/test.jsonl"))?;
        Ok(Status::Done)
    }

    fn tokenizer(&self, train: &Manifest) -> Result<crate::decoder::Tokenizer> {
        build_tokenizer(&[train], &self.config.model.prompt)
    }

    pub fn train_aed(&self) -> Result<Status> {
        if self.skip("aed/encoder.ckpt") {
            return Ok(Status::Skipped);
        }
        let train = self.train_manifest()?;
        let tok = self.tokenizer(&train)?;
        let cfg = self.config.aed.config(&self.config.model.encoder);
        let (model, log) = train_aed(&train, None, tok, cfg, &self.config.aed.schedule, self.config.seed, self.config.exec)?;
        let meta = AedMeta {
            config: model.config.clone(),
            tokenizer: model.tokenizer.clone(),
            config_hash: self.hash.clone(),
        };
        checkpoint::save(&self.path("aed/aed.ckpt"), "aed", &meta, &model.params)?;
        let export = export_encoder(&model);
        let run = TrainRun {
            stage: DONE_AED.into(),
            seed: self.config.seed,
            schedule: self.config.aed.schedule.clone(),
            steps: log.losses.len(),
            losses: log.losses,
            trainable_scalars: model.params.scalar_count(),
            frozen_scalars: 0,
            initial_hash: String::new(),
            final_hash: checkpoint::param_hash(&model.params),
        };
        self.save_run("aed", &run)?;
        let meta = EncoderMeta {
            config: export.config.clone(),
            config_hash: self.hash.clone(),
        };
        checkpoint::save(&self.path("aed/encoder.ckpt"), "encoder", &meta, &export.params)?;
        Ok(Status::Done)
    }

    pub fn load_encoder_export(&self) -> Result<EncoderExport> {
        let c = checkpoint::load(&self.require("aed/encoder.ckpt", "train-aed")?, "encoder")?;
        let meta: EncoderMeta = c.meta_as()?;
        Ok(EncoderExport {
            config: meta.config,
            params: c.params,
        })
    }

    /// Builds the recognizer around the pretrained encoder and pretrains
    /// its decoder.
    pub fn pretrain_decoder(&self) -> Result<Status> {
        if self.skip("echo/model.ckpt") {
            return Ok(Status::Skipped);
        }
        let export = self.load_encoder_export()?;
        let train = self.train_manifest()?;
        let tok = self.tokenizer(&train)?;
        let mut model = ModelBundle::new(self.config.model.clone(), tok, self.config.seed)?;
        model.load_encoder(&export)?;
        model.history.push(DONE_AED.into());
        let run = pretrain_decoder(&mut model, &train, &self.config.echo, self.config.seed, self.config.exec, None)?;
        self.save_run("echo", &run)?;
        model.save(&self.path("echo/model.ckpt"), Some(&self.hash))?;
        Ok(Status::Done)
    }

    fn stage_input(&self, stage: Stage) -> Result<ModelBundle> {
        let (rel, upstream) = match stage {
            Stage::Sft1 => ("echo/model.ckpt", "pretrain-decoder"),
            Stage::Sft2 => ("sft1/model.ckpt", "train-sft --stage 1"),
            Stage::ContextSft => ("sft2/model.ckpt", "train-sft --stage 2"),
        };
        ModelBundle::load(&self.require(rel, upstream)?)
    }

    fn plan(&self, stage: Stage) -> StagePlan {
        let (schedule, lora) = match stage {
            Stage::Sft1 => (&self.config.sft1.schedule, &self.config.sft2.lora),
            Stage::Sft2 => (&self.config.sft2.schedule, &self.config.sft2.lora),
            Stage::ContextSft => (&self.config.context.schedule, &self.config.sft2.lora),
        };
        StagePlan {
            lora: lora.clone(),
            plain_fraction: self.config.context.plain_fraction,
            ..StagePlan::new(stage, schedule.clone())
        }
    }

    /// Runs `sft1` or `sft2` on the training split.
    pub fn train_sft(&self, stage: Stage) -> Result<Status> {
        if stage == Stage::ContextSft {
            return Err(Error::InvalidInput("contextual training runs through train-context".into()));
        }
        let out = format!("{}/model.ckpt", stage.tag());
        if self.skip(&out) {
            return Ok(Status::Skipped);
        }
        let mut model = self.stage_input(stage)?;
        let train = self.train_manifest()?;
        let run = run_stage(&self.plan(stage), &mut model, &train, self.config.seed, self.config.exec, None)?;
        self.save_run(stage.tag(), &run)?;
        model.save(&self.path(&out), Some(&self.hash))?;
        Ok(Status::Done)
    }

    /// Attaches context bundles to both splits. Document frequencies come
    /// from the training split.
    pub fn forge_context(&self, client: Option<&dyn LlmClient>) -> Result<Status> {
        if self.skip("context/test.jsonl") {
            return Ok(Status::Skipped);
        }
        let train = self.train_manifest()?;
        let test = self.test_manifest()?;
        let df = DocumentFrequencies::from_manifest(&train);
        let forge = &self.config.context.forge;
        let in_flight = self.config.client.max_in_flight;
        let (train_ctx, train_report) = forge_manifest(&train, client, &df, &[], forge, in_flight)?;
        let mut pool: Vec<String> = Vec::new();
        for u in train_ctx.entries() {
            for h in u.context.iter().flat_map(|c| c.hotwords()) {
                if !pool.contains(h) {
                    pool.push(h.clone());
                }
            }
        }
        pool.sort();
        let train_ctx = if self.config.context.train_distractors > 0 {
            let forge_d = ForgeConfig {
                distractors: self.config.context.train_distractors,
                ..forge.clone()
            };
            let base = train_ctx.into_entries();
            let mut out = Vec::with_capacity(base.len());
            for (i, mut u) in base.into_iter().enumerate() {
                let own: Vec<String> = normalize_and_tokenize(&u.transcript).units;
                let usable: Vec<String> = pool.iter().filter(|p| !own.contains(p)).cloned().collect();
                if let Some(b) = &u.context {
                    if usable.len() >= forge_d.distractors {
                        u.context = Some(add_distractors(b, &usable, forge_d.distractors, forge.seed ^ i as u64)?);
                    }
                }
                out.push(u);
            }
            Manifest::new(out)?
        } else {
            train_ctx
        };
        let (test_ctx, test_report) = forge_manifest(&test, client, &df, &[], forge, in_flight)?;
        train_ctx.write(&self.path("context/train.jsonl"))?;
        write(&self.path("context/pool.json"), serde_json::to_string(&pool).expect("pool serializes") + "\n")?;
        let report = serde_json::json!({
            "config_hash": self.hash,
            "train": train_report,
            "test": test_report,
        });
        write(&self.path("context/forge.json"), serde_json::to_string_pretty(&report).expect("json") + "\n")?;
        test_ctx.write(&self.path("context/test.jsonl"))?;
        Ok(Status::Done)
    }

    pub fn train_context(&self) -> Result<Status> {
        if self.skip("context/model.ckpt") {
            return Ok(Status::Skipped);
        }
        let mut model = self.stage_input(Stage::ContextSft)?;
        let ctx = self.manifest("context/train.jsonl", "forge-context")?;
        let plain = self.train_manifest()?;
        let mixed = mix_datasets(&ctx, &plain, self.config.context.plain_fraction, self.config.seed)?;
        let plan = self.plan(Stage::ContextSft);
        let run = run_stage(&plan, &mut model, &mixed, self.config.seed, self.config.exec, None)?;
        self.save_run("context", &run)?;
        model.save(&self.path("context/model.ckpt"), Some(&self.hash))?;
        Ok(Status::Done)
    }

    /// The most trained model available, or the one named by `stage`.
    pub fn latest_model(&self, stage: Option<Stage>) -> Result<ModelBundle> {
        if let Some(s) = stage {
            return ModelBundle::load(&self.require(&format!("{}/model.ckpt", s.tag()), s.command())?);
        }
        for rel in ["context/model.ckpt", "sft2/model.ckpt", "sft1/model.ckpt"] {
            let p = self.path(rel);
            if p.exists() {
                return ModelBundle::load(&p);
            }
        }
        Err(Error::MissingPrerequisite {
            what: "no fine-tuned model in the run directory".into(),
            upstream: "train-sft --stage 1".into(),
        })
    }

    /// The test split with its context bundles: forged ones when
    /// available, otherwise whatever the manifest carries.
    pub fn eval_set(&self) -> Result<Manifest> {
        let forged = self.path("context/test.jsonl");
        if forged.exists() {
            Manifest::read(&forged)
        } else {
            self.test_manifest()
        }
    }

    /// Writes `eval/report.jsonl`, `eval/report.txt` and per-utterance
    /// transcripts, and returns the report.
    pub fn evaluate(&self, mode: ContextMode, stage: Option<Stage>) -> Result<EvalReport> {
        let model = self.latest_model(stage)?;
        let set = self.eval_set()?;
        let e = &self.config.eval;
        let mut conditions = Vec::new();
        if mode != ContextMode::On {
            conditions.push(Condition::WithoutContext);
        }
        if mode != ContextMode::Off {
            conditions.push(Condition::WithContext);
            if e.distractors > 0 {
                conditions.push(Condition::WithDistractors);
            }
        }
        let mut rows = Vec::new();
        let mut details = String::new();
        for c in conditions {
            let s = if c == Condition::WithDistractors { self.with_distractors(&set)? } else { set.clone() };
            let (row, scored) = score_set(&model, &e.set_name, &s, c, &e.hallucination, self.config.exec)?;
            for u in &scored {
                let line = serde_json::json!({"condition": c, "utterance": u});
                details.push_str(&serde_json::to_string(&line).expect("json"));
                details.push('\n');
            }
            rows.push(row);
        }
        let report = aggregate(rows)?;
        write(&self.path("eval/report.jsonl"), report.to_jsonl())?;
        write(&self.path("eval/report.txt"), report.to_table())?;
        write(&self.path("eval/transcripts.jsonl"), details)?;
        write(&self.path("eval/config.sha256"), format!("{}\n", self.hash))?;
        Ok(report)
    }

    fn with_distractors(&self, set: &Manifest) -> Result<Manifest> {
        let pool_path = self.require("context/pool.json", "forge-context")?;
        let text = fs::read_to_string(&pool_path).map_err(|e| Error::io(&pool_path, e))?;
        let pool: Vec<String> = serde_json::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))?;
        let k = self.config.eval.distractors;
        let mut out = Vec::with_capacity(set.len());
        for (i, u) in set.entries().iter().enumerate() {
            let own = normalize_and_tokenize(&u.transcript).units;
            let usable: Vec<String> = pool.iter().filter(|p| !own.contains(p)).cloned().collect();
            let base = u.context.clone().unwrap_or_default();
            let mut v = u.clone();
            v.context = Some(add_distractors(&base, &usable, k, self.config.seed ^ i as u64)?);
            out.push(v);
        }
        Manifest::new(out)
    }

    /// Transcribes one feature file or test utterance.
    pub fn transcribe(&self, features: &FeatureMatrix, bundle: Option<&ContextBundle>, stage: Option<Stage>) -> Result<(Transcript, Vec<Flag>)> {
        let model = self.latest_model(stage)?;
        let t = model.transcribe(features, bundle)?;
        let h = normalize_and_tokenize(&t.text);
        let hall = &self.config.eval.hallucination;
        // No reference is available, so the length flag is left to the decoder.
        let unlimited = HallucinationConfig {
            length_ratio: f64::INFINITY,
            ..hall.clone()
        };
        let flags = hallucination_flags(&h, &h, Some(t.termination), &unlimited).into_iter().collect();
        Ok((t, flags))
    }

    /// Every command in order, without an LLM client.
    pub fn run_all(&self, client: Option<&dyn LlmClient>) -> Result<EvalReport> {
        self.prepare_data()?;
        self.train_aed()?;
        self.pretrain_decoder()?;
        self.train_sft(Stage::Sft1)?;
        self.train_sft(Stage::Sft2)?;
        self.forge_context(client)?;
        self.train_context()?;
        self.evaluate(ContextMode::Both, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trips() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_files_keep_the_defaults() {
        let cfg = RunConfig::from_toml("seed = 9\n[corpus.toy]\nutterances = 50\n").unwrap();
        let d = RunConfig::default();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.corpus.toy.utterances, 50);
        assert_eq!(cfg.corpus.toy.feature_dim, d.corpus.toy.feature_dim);
        assert_eq!(cfg.model, d.model);
    }

    #[test]
    fn unknown_and_inconsistent_keys_are_rejected() {
        for text in ["colour = 1\n", "[sft1]\nrate = 2\n", "[corpus.toy]\nfeature_dim = 80\n", "[context]\nplain_fraction = 1.5\n"] {
            assert!(matches!(RunConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn hash_ignores_the_output_directory() {
        let a = RunConfig::default();
        let b = RunConfig {
            output_dir: "elsewhere".into(),
            ..a.clone()
        };
        let c = RunConfig { seed: 2, ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn a_changed_configuration_needs_force() {
        let dir = tempfile::tempdir().unwrap();
        Run::open(dir.path(), RunConfig::default(), false).unwrap();
        Run::open(dir.path(), RunConfig::default(), false).unwrap();
        let other = RunConfig { seed: 5, ..RunConfig::default() };
        assert!(matches!(Run::open(dir.path(), other.clone(), false), Err(Error::Config(_))));
        let run = Run::open(dir.path(), other, true).unwrap();
        assert_eq!(Run::resume(dir.path(), false).unwrap().config_hash(), run.config_hash());
    }

    #[test]
    fn missing_inputs_name_the_upstream_command() {
        let dir = tempfile::tempdir().unwrap();
        let run = Run::open(dir.path(), RunConfig::default(), false).unwrap();
        let upstream = |r: Result<Status>| match r {
            Err(Error::MissingPrerequisite { upstream, .. }) => upstream,
            other => panic!("{other:?}"),
        };
        assert_eq!(upstream(run.train_aed()), "prepare-data");
        assert_eq!(upstream(run.pretrain_decoder()), "train-aed");
        assert_eq!(upstream(run.train_sft(Stage::Sft1)), "pretrain-decoder");
        assert_eq!(upstream(run.train_sft(Stage::Sft2)), "train-sft --stage 1");
        assert_eq!(upstream(run.forge_context(None)), "prepare-data");
        assert_eq!(upstream(run.train_context()), "train-sft --stage 2");
        assert!(matches!(run.evaluate(ContextMode::Both, None), Err(Error::MissingPrerequisite { .. })));
        assert!(Run::resume(&dir.path().join("nothing"), false).is_err());
    }

    #[test]
    fn context_mode_parses() {
        assert_eq!("both".parse::<ContextMode>().unwrap(), ContextMode::Both);
        assert!("maybe".parse::<ContextMode>().is_err());
    }
}
