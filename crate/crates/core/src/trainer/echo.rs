//! Decoder pretraining on text alone.
//!
//! The decoder starts from random weights, so before it can be bridged to
//! audio it is taught to transcribe "ideal" soft tokens: the audio segment
//! holds the decoder's own embedding of each transcript word, plus noise.
//! Some words are presented as an even blend of their embedding and a few
//! other words' embeddings, which leaves the token ambiguous. A hotword
//! prompt sometimes names the blended word (alongside unrelated
//! distractors), so the decoder learns to resolve an ambiguous sound from
//! the prompt and to fall back to a guess without one.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{optimize, Observer, TrainRun, DONE_ECHO};
use crate::checkpoint::param_hash;
use crate::contextforge::ContextBundle;
use crate::corpus::Manifest;
use crate::decoder::{self, is_adapted, Layout};
use crate::error::{Error, Result};
use crate::graph::{Graph, Trainable};
use crate::model::ModelBundle;
use crate::optim::{ExampleGrad, Schedule};
use crate::parallel::Exec;
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EchoConfig {
    pub schedule: Schedule,
    /// Chance that one word of an example is blended.
    pub blend_prob: f64,
    /// Other words mixed into a blended soft token.
    pub blend_partners: usize,
    /// Chance that an example carries a hotword prompt.
    pub prompt_prob: f64,
    /// Chance that the prompt names the blended word.
    pub hint_prob: f64,
    pub max_distractors: usize,
    /// Soft-token noise relative to the embedding scale.
    pub noise: f64,
}

impl Default for EchoConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule {
                steps: 400,
                ..Schedule::default()
            },
            blend_prob: 0.5,
            blend_partners: 2,
            prompt_prob: 0.6,
            hint_prob: 0.8,
            max_distractors: 2,
            noise: 0.3,
        }
    }
}

impl EchoConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("blend_prob", self.blend_prob), ("prompt_prob", self.prompt_prob), ("hint_prob", self.hint_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("noise must be finite and non-negative".into()));
        }
        self.schedule.validate()
    }
}

struct Sample {
    layout: Layout,
    /// Embedding rows mixed into the audio segment.
    components: Vec<usize>,
    mixing: Mat,
    noise: Mat,
}

fn example_seed(seed: u64, step: usize, item: usize) -> u64 {
    seed ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (item as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f)
}

fn build(model: &ModelBundle, cfg: &EchoConfig, content: &[usize], transcript: &str, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let tok = &model.tokenizer;
    let targets = model.target_ids(transcript);
    let words = &targets[..targets.len() - 1];
    if words.is_empty() {
        return Err(Error::InvalidInput("empty transcript".into()));
    }
    let s = words.len();
    let mut components: Vec<usize> = words.to_vec();
    let mut rows: Vec<Vec<(usize, f64)>> = (0..s).map(|i| vec![(i, 1.0)]).collect();
    let mut blended: Option<usize> = None;
    let mut partners: Vec<usize> = Vec::new();
    if rng.random_bool(cfg.blend_prob) && cfg.blend_partners > 0 {
        let pos = rng.random_range(0..s);
        let pool: Vec<usize> = content.iter().copied().filter(|&c| c != words[pos]).collect();
        partners = pool.choose_multiple(rng, cfg.blend_partners).copied().collect();
        let w = 1.0 / (partners.len() + 1) as f64;
        rows[pos] = vec![(pos, w)];
        for &p in &partners {
            rows[pos].push((components.len(), w));
            components.push(p);
        }
        blended = Some(pos);
    }
    let mut prompt_words: Vec<usize> = Vec::new();
    let with_prompt = rng.random_bool(cfg.prompt_prob);
    if with_prompt {
        match blended {
            Some(pos) if rng.random_bool(cfg.hint_prob) => prompt_words.push(words[pos]),
            None if rng.random_bool(0.5) => prompt_words.push(*words.choose(rng).expect("non-empty")),
            _ => {}
        }
        let k = rng.random_range(0..=cfg.max_distractors);
        let excluded: BTreeSet<usize> = words.iter().chain(&partners).copied().collect();
        let pool: Vec<usize> = content.iter().copied().filter(|c| !excluded.contains(c)).collect();
        prompt_words.extend(pool.choose_multiple(rng, k).copied());
        prompt_words.shuffle(rng);
    }
    let prompt = if with_prompt {
        let names: Vec<&str> = prompt_words.iter().filter_map(|&i| tok.token(i)).collect();
        model.prompt_ids(Some(&ContextBundle::new(names, None)))
    } else {
        model.prompt_ids(None)
    };
    let mut mixing = Mat::zeros(s, components.len());
    for (r, entries) in rows.iter().enumerate() {
        for &(c, w) in entries {
            mixing.set(r, c, w);
        }
    }
    let d = model.config.decoder.embed_dim;
    let normal = Normal::new(0.0, cfg.noise / (d as f64).sqrt()).expect("finite std");
    let noise = Mat::from_vec(s, d, (0..s * d).map(|_| normal.sample(rng)).collect());
    let layout = Layout::training(&prompt, s, tok.bos(), &targets, model.config.decoder.max_sequence)?;
    Ok(Sample {
        layout,
        components,
        mixing,
        noise,
    })
}

fn example_grad(model: &ModelBundle, trainable: Trainable, sample: &Sample) -> ExampleGrad {
    let mut g = Graph::new(&model.params, trainable);
    let table = g.param("decoder.embed");
    let rows = g.gather(table, &sample.components);
    let mix = g.constant(sample.mixing.clone());
    let audio = g.matmul(mix, rows);
    let noise = g.constant(sample.noise.clone());
    let audio = g.add(audio, noise);
    let logits = decoder::forward(&mut g, &sample.layout, audio, &model.config.decoder, None);
    let ce = g.cross_entropy_sum(logits, &sample.layout.labels);
    ExampleGrad {
        loss_sum: g.value(ce).get(0, 0),
        tokens: sample.layout.target_count(),
        grads: g.backward(ce),
    }
}

/// Trains every base decoder parameter on the echo task over the
/// transcripts of `train`.
pub fn pretrain_decoder(
    model: &mut ModelBundle,
    train: &Manifest,
    cfg: &EchoConfig,
    seed: u64,
    exec: Exec,
    observer: Option<Observer>,
) -> Result<TrainRun> {
    cfg.validate()?;
    if is_adapted(&model.params) {
        return Err(Error::InvalidInput("decoder pretraining must precede LoRA injection".into()));
    }
    let transcripts: Vec<&str> = train
        .entries()
        .iter()
        .map(|u| u.transcript.as_str())
        .filter(|t| !t.trim().is_empty())
        .collect();
    if transcripts.is_empty() {
        return Err(Error::InvalidInput("no transcripts to pretrain on".into()));
    }
    let content: Vec<usize> = transcripts
        .iter()
        .flat_map(|t| model.tokenizer.encode(t))
        .collect::<BTreeSet<usize>>()
        .into_iter()
        .collect();
    let trainable: BTreeSet<String> = model.params.names().filter(|n| n.starts_with("decoder.")).cloned().collect();
    let initial_hash = param_hash(&model.params);
    let trainable_scalars = model.params.scalar_count_where(|n| trainable.contains(n));
    let frozen_scalars = model.params.scalar_count() - trainable_scalars;
    let losses = optimize(
        model,
        &trainable,
        &cfg.schedule,
        transcripts.len(),
        seed,
        exec,
        |m, t, step, i| {
            let mut rng = ChaCha8Rng::seed_from_u64(example_seed(seed, step, i));
            let sample = build(m, cfg, &content, transcripts[i], &mut rng)?;
            Ok(example_grad(m, t, &sample))
        },
        observer,
    )?;
    if !model.has_completed(DONE_ECHO) {
        model.history.push(DONE_ECHO.to_owned());
    }
    Ok(TrainRun {
        stage: DONE_ECHO.to_owned(),
        seed,
        schedule: cfg.schedule.clone(),
        steps: losses.len(),
        losses,
        trainable_scalars,
        frozen_scalars,
        initial_hash,
        final_hash: param_hash(&model.params),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::micro;

    #[test]
    fn only_the_decoder_trains_and_loss_falls() {
        let (mut m, data) = micro();
        let before = m.params.clone();
        let cfg = EchoConfig {
            schedule: Schedule {
                steps: 30,
                batch_size: 4,
                learning_rate: 1e-2,
                warmup_steps: 2,
                ..Schedule::default()
            },
            ..EchoConfig::default()
        };
        let run = pretrain_decoder(&mut m, &data, &cfg, 2, Exec::Parallel, None).unwrap();
        for (n, v) in before.iter() {
            if !n.starts_with("decoder.") {
                assert_eq!(m.params.get(n).unwrap(), v, "{n}");
            }
        }
        for n in ["decoder.embed", "decoder.lm_head.weight"] {
            assert_ne!(m.params.get(n), before.get(n), "{n}");
        }
        let head: f64 = run.losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = run.losses[25..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "{head} -> {tail}");
        assert!(m.has_completed(DONE_ECHO));
    }

    #[test]
    fn blends_mix_the_right_rows() {
        let (m, data) = micro();
        let cfg = EchoConfig {
            blend_prob: 1.0,
            prompt_prob: 1.0,
            hint_prob: 1.0,
            ..EchoConfig::default()
        };
        let content: Vec<usize> = (5..m.tokenizer.len()).collect();
        let t = &data.entries()[0].transcript;
        let s = build(&m, &cfg, &content, t, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let words = m.tokenizer.encode(t);
        assert_eq!(s.mixing.rows(), words.len());
        assert_eq!(s.components.len(), words.len() + 2);
        for r in 0..s.mixing.rows() {
            assert!((s.mixing.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let blended = (0..words.len()).find(|&r| s.mixing.get(r, r) < 1.0).unwrap();
        assert!(s.layout.prompt.contains(&words[blended]));
    }
}
