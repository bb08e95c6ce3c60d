//! Staged fine-tuning with an explicit freeze plan.
//!
//! | stage     | encoder | adapter | decoder |
//! |-----------|---------|---------|---------|
//! | `sft1`    | frozen  | full    | frozen  |
//! | `sft2`    | full    | full    | LoRA    |
//! | `context` | full    | full    | LoRA    |
//!
//! Frozen parameters never receive a gradient, so the optimizer cannot
//! touch them. `sft2` injects LoRA factors when the decoder has none;
//! `context` resumes the factors trained in `sft2`.

mod echo;

pub use echo::{pretrain_decoder, EchoConfig};

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::param_hash;
use crate::corpus::{Manifest, Utterance};
use crate::decoder::{inject_lora, is_adapted, LoraSpec};
use crate::error::{Error, Result};
use crate::graph::Trainable;
use crate::model::ModelBundle;
use crate::optim::{self, Adam, BatchSampler, ExampleGrad, Schedule};
use crate::parallel::Exec;

/// History tags written by each step of the pipeline.
pub const DONE_AED: &str = "aed";
pub const DONE_ECHO: &str = "echo";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Sft1,
    Sft2,
    #[serde(alias = "context")]
    ContextSft,
}

impl Stage {
    pub fn tag(self) -> &'static str {
        match self {
            Stage::Sft1 => "sft1",
            Stage::Sft2 => "sft2",
            Stage::ContextSft => "context",
        }
    }

    /// The command that produces this stage's output.
    pub fn command(self) -> &'static str {
        match self {
            Stage::Sft1 => "train-sft --stage 1",
            Stage::Sft2 => "train-sft --stage 2",
            Stage::ContextSft => "train-context",
        }
    }

    /// `(history tag, upstream command)` pairs that must precede the stage.
    pub fn prerequisites(self) -> &'static [(&'static str, &'static str)] {
        match self {
            Stage::Sft1 => &[(DONE_AED, "train-aed"), (DONE_ECHO, "pretrain-decoder")],
            Stage::Sft2 => &[("sft1", "train-sft --stage 1")],
            Stage::ContextSft => &[("sft2", "train-sft --stage 2")],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sft1" | "1" => Ok(Stage::Sft1),
            "sft2" | "2" => Ok(Stage::Sft2),
            "context" | "context_sft" => Ok(Stage::ContextSft),
            _ => Err(Error::InvalidInput(format!("unknown stage `{s}` (expected sft1, sft2 or context)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Frozen,
    Full,
    Lora,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage: Stage,
    pub encoder: Mode,
    pub adapter: Mode,
    pub decoder: Mode,
    pub schedule: Schedule,
    pub lora: LoraSpec,
    /// Share of context-free samples mixed into contextual training.
    pub plain_fraction: f64,
}

impl StagePlan {
    pub fn new(stage: Stage, schedule: Schedule) -> Self {
        let (encoder, adapter, decoder) = Self::modes(stage);
        Self {
            stage,
            encoder,
            adapter,
            decoder,
            schedule,
            lora: LoraSpec::default(),
            plain_fraction: 0.5,
        }
    }

    fn modes(stage: Stage) -> (Mode, Mode, Mode) {
        match stage {
            Stage::Sft1 => (Mode::Frozen, Mode::Full, Mode::Frozen),
            Stage::Sft2 | Stage::ContextSft => (Mode::Full, Mode::Full, Mode::Lora),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if (self.encoder, self.adapter, self.decoder) != Self::modes(self.stage) {
            return Err(Error::Config(format!(
                "{} must train encoder/adapter/decoder as {:?}",
                self.stage,
                Self::modes(self.stage)
            )));
        }
        if !(0.0..=1.0).contains(&self.plain_fraction) {
            return Err(Error::Config("plain_fraction must lie in [0, 1]".into()));
        }
        self.schedule.validate()
    }
}

fn is_lora(name: &str) -> bool {
    name.ends_with(".lora_a") || name.ends_with(".lora_b")
}

/// Names of the parameters `plan` updates; everything else is frozen.
pub fn trainable_set(plan: &StagePlan, model: &ModelBundle) -> Result<BTreeSet<String>> {
    plan.validate()?;
    if plan.decoder == Mode::Lora && !is_adapted(&model.params) {
        return Err(Error::InvalidInput(format!(
            "{} trains the decoder through LoRA but the model has no LoRA factors",
            plan.stage
        )));
    }
    let take = |name: &str| -> bool {
        let module_mode = if name.starts_with("encoder.") {
            plan.encoder
        } else if name.starts_with("adapter.") {
            plan.adapter
        } else if name.starts_with("decoder.") {
            plan.decoder
        } else {
            Mode::Frozen
        };
        match module_mode {
            Mode::Frozen => false,
            Mode::Full => true,
            Mode::Lora => is_lora(name),
        }
    };
    Ok(model.params.names().filter(|n| take(n)).cloned().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub stage: String,
    pub seed: u64,
    pub schedule: Schedule,
    pub steps: usize,
    pub losses: Vec<f64>,
    pub trainable_scalars: usize,
    pub frozen_scalars: usize,
    pub initial_hash: String,
    pub final_hash: String,
}

impl TrainRun {
    /// One `step loss` record per line.
    pub fn loss_log(&self) -> String {
        self.losses.iter().enumerate().map(|(i, l)| format!("{i} {l}\n")).collect()
    }
}

/// Called after every optimizer step with the step index and model.
pub type Observer<'a> = &'a mut dyn FnMut(usize, &ModelBundle);

/// Shared optimizer loop. `example` builds one example's gradient from
/// `(model, trainable, step, item index)`.
pub(crate) fn optimize<F>(
    model: &mut ModelBundle,
    trainable: &BTreeSet<String>,
    schedule: &Schedule,
    items: usize,
    seed: u64,
    exec: Exec,
    example: F,
    observer: Option<Observer>,
) -> Result<Vec<f64>>
where
    F: Fn(&ModelBundle, Trainable, usize, usize) -> Result<ExampleGrad> + Sync + Send,
{
    schedule.validate()?;
    let mut losses = Vec::with_capacity(schedule.steps);
    if schedule.steps == 0 {
        return Ok(losses);
    }
    let mut sampler = BatchSampler::new(items, schedule.batch_size, seed)?;
    let mut opt = Adam::new();
    let mut observer = observer;
    for step in 0..schedule.steps {
        let batch = sampler.next_batch();
        let m: &ModelBundle = model;
        let (loss, mut grads) =
            optim::batch_gradients(&batch, exec, |&i| example(m, Trainable::Only(trainable), step, i))?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        optim::clip_global_norm(&mut grads, schedule.grad_clip);
        opt.step(&mut model.params, &grads, schedule.lr_at(step));
        if !model.params.all_finite() {
            return Err(Error::Diverged { step, loss: f64::NAN });
        }
        if step % 50 == 0 {
            log::debug!("step {step} loss {loss:.4}");
        }
        losses.push(loss);
        if let Some(o) = observer.as_mut() {
            o(step, model);
        }
    }
    Ok(losses)
}

pub(crate) fn check_prerequisites(model: &ModelBundle, needs: &[(&str, &str)], what: &str) -> Result<()> {
    for (tag, upstream) in needs {
        if !model.has_completed(tag) {
            return Err(Error::MissingPrerequisite {
                what: format!("{what} needs a model that completed `{tag}`"),
                upstream: (*upstream).to_owned(),
            });
        }
    }
    Ok(())
}

/// Runs one stage in place. Training data carries its context bundles
/// into the prompt only in the contextual stage.
pub fn run_stage(
    plan: &StagePlan,
    model: &mut ModelBundle,
    train: &Manifest,
    seed: u64,
    exec: Exec,
    observer: Option<Observer>,
) -> Result<TrainRun> {
    plan.validate()?;
    check_prerequisites(model, plan.stage.prerequisites(), plan.stage.tag())?;
    if train.is_empty() {
        return Err(Error::InvalidInput(format!("{} has no training data", plan.stage)));
    }
    if plan.stage == Stage::Sft2 && !is_adapted(&model.params) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x10ba);
        inject_lora(&mut model.params, &model.config.decoder, &plan.lora, &mut rng)?;
        model.lora = Some(plan.lora.clone());
    }
    let trainable = trainable_set(plan, model)?;
    let initial_hash = param_hash(&model.params);
    let trainable_scalars = model.params.scalar_count_where(|n| trainable.contains(n));
    let frozen_scalars = model.params.scalar_count() - trainable_scalars;
    let use_context = plan.stage == Stage::ContextSft;
    let entries: &[Utterance] = train.entries();
    let losses = optimize(
        model,
        &trainable,
        &plan.schedule,
        entries.len(),
        seed,
        exec,
        |m, t, _, i| m.example_grad(t, &entries[i], use_context),
        observer,
    )?;
    if !model.has_completed(plan.stage.tag()) {
        model.history.push(plan.stage.tag().to_owned());
    }
    Ok(TrainRun {
        stage: plan.stage.tag().to_owned(),
        seed,
        schedule: plan.schedule.clone(),
        steps: losses.len(),
        losses,
        trainable_scalars,
        frozen_scalars,
        initial_hash,
        final_hash: param_hash(&model.params),
    })
}

/// Interleaves contextual and plain samples. The output has as many
/// entries as `context` (or `plain` when `context` is empty), of which
/// `round(plain_fraction · N)` come from `plain` with their context
/// stripped. Plain entries whose id also occurs in `context` get a
/// `.plain` suffix.
pub fn mix_datasets(context: &Manifest, plain: &Manifest, plain_fraction: f64, seed: u64) -> Result<Manifest> {
    if !(0.0..=1.0).contains(&plain_fraction) {
        return Err(Error::InvalidInput("plain_fraction must lie in [0, 1]".into()));
    }
    if context.is_empty() && plain.is_empty() {
        return Err(Error::InvalidInput("both manifests are empty".into()));
    }
    let n = if context.is_empty() { plain.len() } else { context.len() };
    let n_plain = (plain_fraction * n as f64).round() as usize;
    let n_ctx = n - n_plain;
    if n_plain > plain.len() || n_ctx > context.len() {
        return Err(Error::InvalidInput(format!(
            "mix needs {n_ctx} contextual and {n_plain} plain entries, have {} and {}",
            context.len(),
            plain.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ctx: Vec<&Utterance> = context.entries().iter().collect();
    ctx.shuffle(&mut rng);
    let mut pl: Vec<&Utterance> = plain.entries().iter().collect();
    pl.shuffle(&mut rng);
    let mut out: Vec<Utterance> = ctx[..n_ctx].iter().map(|u| (*u).clone()).collect();
    for u in &pl[..n_plain] {
        let mut v = u.without_context();
        if context.get(&v.id).is_some() {
            v.id.push_str(".plain");
        }
        out.push(v);
    }
    out.shuffle(&mut rng);
    Manifest::new(out)
}
