//! Attention encoder-decoder used to pretrain the encoder.
//!
//! A small transformer decoder (causal self-attention, cross-attention over
//! the encoder output, GELU feed-forward) is trained jointly with the
//! encoder on teacher-forced cross-entropy. Afterwards only the encoder is
//! kept.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_features, EncoderConfig, PREFIX as ENC};
use crate::corpus::{FeatureMatrix, Manifest};
use crate::decoder::Tokenizer;
use crate::error::{Error, Result};
use crate::graph::{Graph, Trainable, Var};
use crate::nn::{self, Activation, AttentionSpec};
use crate::optim::{self, Adam, BatchSampler, ExampleGrad, Schedule};
use crate::parallel::Exec;
use crate::params::{init_linear, ParamStore};
use crate::tensor::Mat;

const P: &str = "aed";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AedConfig {
    pub encoder: EncoderConfig,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub ffn_expansion: usize,
    pub max_target_len: usize,
}

impl Default for AedConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder_layers: 1,
            decoder_heads: 4,
            ffn_expansion: 4,
            max_target_len: 64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AedModel {
    pub config: AedConfig,
    pub tokenizer: Tokenizer,
    pub params: ParamStore,
}

/// One training example: features plus target ids (no `<bos>`/`<eos>`).
#[derive(Clone, Debug)]
pub struct AedBatchItem<'a> {
    pub features: &'a FeatureMatrix,
    pub targets: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AedTrainLog {
    pub losses: Vec<f64>,
    /// Teacher-forced next-token accuracy on the dev set, if one was given.
    pub dev_token_accuracy: Option<f64>,
}

/// Encoder weights and the configuration they were trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderExport {
    pub config: EncoderConfig,
    pub params: ParamStore,
}

impl AedModel {
    pub fn new(config: AedConfig, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        config.encoder.validate()?;
        let d = config.encoder.model_dim;
        if config.decoder_heads == 0 || d % config.decoder_heads != 0 {
            return Err(Error::Config(format!(
                "aed decoder heads {} must divide model_dim {d}",
                config.decoder_heads
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = super::init_params(&config.encoder, &mut rng)?;
        let v = tokenizer.len();
        params.insert(format!("{P}.embed"), Mat::randn(v, d, 1.0 / (d as f64).sqrt(), &mut rng));
        params.insert(format!("{P}.pos"), Mat::randn(config.max_target_len + 1, d, 0.02, &mut rng));
        for l in 0..config.decoder_layers {
            let p = format!("{P}.layers.{l}");
            nn::init_norm(&mut params, &format!("{p}.self_norm"), d);
            nn::init_attention(&mut params, &format!("{p}.self_attn"), d, config.decoder_heads, None, &mut rng);
            nn::init_norm(&mut params, &format!("{p}.cross_norm"), d);
            nn::init_attention(&mut params, &format!("{p}.cross_attn"), d, config.decoder_heads, None, &mut rng);
            nn::init_norm(&mut params, &format!("{p}.ffn_norm"), d);
            nn::init_feed_forward(&mut params, &format!("{p}.ffn"), d, d * config.ffn_expansion, &mut rng);
        }
        nn::init_norm(&mut params, &format!("{P}.final_norm"), d);
        init_linear(&mut params, &format!("{P}.out"), d, v, &mut rng);
        Ok(Self {
            config,
            tokenizer,
            params,
        })
    }

    fn decode_logits(&self, g: &mut Graph, memory: Var, input_ids: &[usize]) -> Var {
        let heads = self.config.decoder_heads;
        let table = g.param(&format!("{P}.embed"));
        let tok = g.gather(table, input_ids);
        let pos_table = g.param(&format!("{P}.pos"));
        let positions: Vec<usize> = (0..input_ids.len()).collect();
        let pos = g.gather(pos_table, &positions);
        let mut x = g.add(tok, pos);
        for l in 0..self.config.decoder_layers {
            let p = format!("{P}.layers.{l}");
            let h = nn::layer_norm(g, x, &format!("{p}.self_norm"));
            let name = format!("{p}.self_attn");
            let h = nn::attention(g, h, h, AttentionSpec { heads, causal: true, rel_clip: None, lora_scale: None, prefix: &name });
            x = g.add(x, h);
            let h = nn::layer_norm(g, x, &format!("{p}.cross_norm"));
            let name = format!("{p}.cross_attn");
            let h = nn::attention(g, h, memory, AttentionSpec { heads, causal: false, rel_clip: None, lora_scale: None, prefix: &name });
            x = g.add(x, h);
            let h = nn::layer_norm(g, x, &format!("{p}.ffn_norm"));
            let h = nn::feed_forward(g, h, &format!("{p}.ffn"), Activation::Gelu);
            x = g.add(x, h);
        }
        let x = nn::layer_norm(g, x, &format!("{P}.final_norm"));
        nn::linear(g, x, &format!("{P}.out"), None)
    }

    fn check_item(&self, item: &AedBatchItem) -> Result<()> {
        check_features(item.features, &self.config.encoder)?;
        if item.targets.is_empty() {
            return Err(Error::InvalidInput("empty target sequence".into()));
        }
        if item.targets.len() + 1 > self.config.max_target_len + 1 {
            return Err(Error::InvalidInput(format!(
                "target of {} tokens exceeds max_target_len {}",
                item.targets.len(),
                self.config.max_target_len
            )));
        }
        Ok(())
    }

    /// Builds the teacher-forced graph; returns `(summed CE, token count,
    /// logits)`.
    fn forward<'g>(&self, g: &mut Graph<'g>, item: &AedBatchItem) -> (Var, usize, Var) {
        let x = g.constant(item.features.to_mat());
        let memory = super::forward(g, x, &self.config.encoder);
        let mut input = vec![self.tokenizer.bos()];
        input.extend_from_slice(&item.targets);
        let mut labels: Vec<Option<usize>> = item.targets.iter().copied().map(Some).collect();
        labels.push(Some(self.tokenizer.eos()));
        let logits = self.decode_logits(g, memory, &input);
        let ce = g.cross_entropy_sum(logits, &labels);
        (ce, labels.len(), logits)
    }

    /// Summed loss and gradients for one example.
    pub fn example_grad(&self, item: &AedBatchItem) -> Result<ExampleGrad> {
        self.check_item(item)?;
        let mut g = Graph::new(&self.params, Trainable::All);
        let (ce, tokens, _) = self.forward(&mut g, item);
        Ok(ExampleGrad {
            loss_sum: g.value(ce).get(0, 0),
            tokens,
            grads: g.backward(ce),
        })
    }

    /// Teacher-forced `(correct, total)` next-token predictions.
    pub fn token_hits(&self, item: &AedBatchItem) -> Result<(usize, usize)> {
        self.check_item(item)?;
        let mut g = Graph::inference(&self.params);
        let (_, tokens, logits) = self.forward(&mut g, item);
        let lv = g.value(logits);
        let mut expected = item.targets.clone();
        expected.push(self.tokenizer.eos());
        let hits = expected.iter().enumerate().filter(|(i, &t)| lv.argmax_row(*i) == t).count();
        Ok((hits, tokens))
    }

    pub fn token_accuracy(&self, items: &[AedBatchItem], exec: Exec) -> Result<f64> {
        let per = exec.map(items, |it| self.token_hits(it));
        let (mut hit, mut tot) = (0, 0);
        for r in per {
            let (h, t) = r?;
            hit += h;
            tot += t;
        }
        if tot == 0 {
            return Err(Error::InvalidInput("no tokens to score".into()));
        }
        Ok(hit as f64 / tot as f64)
    }
}

/// Mean per-token cross-entropy of `items` under `model`.
pub fn aed_loss(model: &AedModel, items: &[AedBatchItem], exec: Exec) -> Result<f64> {
    let per = exec.map(items, |it| -> Result<(f64, usize)> {
        model.check_item(it)?;
        let mut g = Graph::inference(&model.params);
        let (ce, n, _) = model.forward(&mut g, it);
        Ok((g.value(ce).get(0, 0), n))
    });
    let (mut sum, mut n) = (0.0, 0);
    for r in per {
        let (s, k) = r?;
        sum += s;
        n += k;
    }
    if n == 0 {
        return Err(Error::InvalidInput("no tokens to score".into()));
    }
    Ok(sum / n as f64)
}

fn items<'m>(manifest: &'m Manifest, tok: &Tokenizer) -> Vec<AedBatchItem<'m>> {
    manifest
        .entries()
        .iter()
        .map(|u| AedBatchItem {
            features: &u.features,
            targets: tok.encode(&u.transcript),
        })
        .collect()
}

/// Trains an encoder-decoder from scratch on `train`.
pub fn train_aed(
    train: &Manifest,
    dev: Option<&Manifest>,
    tokenizer: Tokenizer,
    config: AedConfig,
    schedule: &Schedule,
    seed: u64,
    exec: Exec,
) -> Result<(AedModel, AedTrainLog)> {
    schedule.validate()?;
    let mut model = AedModel::new(config, tokenizer, seed)?;
    let train_items = items(train, &model.tokenizer);
    let mut sampler = BatchSampler::new(train_items.len(), schedule.batch_size, seed ^ 0x5eed)?;
    let mut opt = Adam::new();
    let mut log = AedTrainLog::default();
    for step in 0..schedule.steps {
        let batch: Vec<&AedBatchItem> = sampler.next_batch().into_iter().map(|i| &train_items[i]).collect();
        let (loss, mut grads) = optim::batch_gradients(&batch, exec, |it| model.example_grad(it))?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        optim::clip_global_norm(&mut grads, schedule.grad_clip);
        opt.step(&mut model.params, &grads, schedule.lr_at(step));
        log.losses.push(loss);
        if step % 50 == 0 {
            log::debug!("aed step {step} loss {loss:.4}");
        }
    }
    if let Some(dev) = dev {
        let dev_items = items(dev, &model.tokenizer);
        log.dev_token_accuracy = Some(model.token_accuracy(&dev_items, exec)?);
    }
    Ok((model, log))
}

/// Keeps the encoder half of a trained model.
pub fn export_encoder(model: &AedModel) -> EncoderExport {
    EncoderExport {
        config: model.config.encoder.clone(),
        params: model.params.subset(&format!("{ENC}.")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_toy_corpus, ToyCorpusConfig};

    fn small() -> (Manifest, Tokenizer, AedConfig) {
        let cfg = ToyCorpusConfig {
            utterances: 24,
            feature_dim: 16,
            ..ToyCorpusConfig::default()
        };
        let m = synth_toy_corpus(&cfg, 1).unwrap();
        let words: Vec<String> = m
            .entries()
            .iter()
            .flat_map(|u| u.transcript.split(' ').map(str::to_owned).collect::<Vec<_>>())
            .collect();
        let tok = Tokenizer::new(words).unwrap();
        let aed = AedConfig {
            encoder: EncoderConfig {
                input_dim: 16,
                layers: 1,
                model_dim: 32,
                heads: 2,
                conv_kernel: 3,
                subsample_factor: 4,
                ffn_expansion: 2,
                rel_pos_clip: 4,
            },
            decoder_layers: 1,
            decoder_heads: 2,
            ffn_expansion: 2,
            max_target_len: 16,
        };
        (m, tok, aed)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (m, tok, mut cfg) = small();
        cfg.encoder.layers = 2;
        cfg.decoder_layers = 2;
        let model = AedModel::new(cfg, tok.clone(), 3).unwrap();
        let u = &m.entries()[0];
        let item = AedBatchItem {
            features: &u.features,
            targets: tok.encode(&u.transcript),
        };
        let g = model.example_grad(&item).unwrap();
        let loss_at = |p: &ParamStore| {
            let probe = AedModel { params: p.clone(), ..model.clone() };
            aed_loss(&probe, std::slice::from_ref(&item), Exec::Sequential).unwrap() * g_tokens(&item)
        };
        let names = [
            "encoder.subsample.0.weight",
            "encoder.layers.0.attn.rel_bias.1",
            "encoder.layers.0.conv.dw.weight",
            "encoder.layers.1.ffn2.up.weight",
            "aed.layers.0.cross_attn.k.weight",
            "aed.layers.1.self_attn.q.weight",
            "aed.embed",
        ];
        for name in names {
            let analytic = g.grads.get(name).unwrap();
            let shape = analytic.shape();
            for &idx in &[0, shape.0 * shape.1 / 2, shape.0 * shape.1 - 1] {
                let h = 1e-5;
                let mut plus = model.params.clone();
                plus.get_mut(name).unwrap().data_mut()[idx] += h;
                let mut minus = model.params.clone();
                minus.get_mut(name).unwrap().data_mut()[idx] -= h;
                let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                let a = analytic.data()[idx];
                assert!(
                    (fd - a).abs() <= 1e-3 * fd.abs().max(a.abs()).max(1e-4),
                    "{name}[{idx}]: fd {fd} vs analytic {a}"
                );
            }
        }
    }

    fn g_tokens(item: &AedBatchItem) -> f64 {
        (item.targets.len() + 1) as f64
    }

    #[test]
    fn short_training_reduces_loss() {
        let (m, tok, cfg) = small();
        let sched = Schedule {
            steps: 30,
            batch_size: 8,
            learning_rate: 3e-3,
            warmup_steps: 5,
            ..Schedule::default()
        };
        let (model, log) = train_aed(&m, Some(&m), tok, cfg, &sched, 0, Exec::Parallel).unwrap();
        let first: f64 = log.losses[..5].iter().sum::<f64>() / 5.0;
        let last: f64 = log.losses[25..].iter().sum::<f64>() / 5.0;
        assert!(last < first, "{first} -> {last}");
        assert!(log.dev_token_accuracy.unwrap() > 0.0);
        let export = export_encoder(&model);
        assert!(export.params.names().all(|n| n.starts_with("encoder.")));
        assert_eq!(export.config, model.config.encoder);
    }

    #[test]
    fn training_is_identical_across_execution_modes() {
        let (m, tok, cfg) = small();
        let sched = Schedule { steps: 3, batch_size: 4, ..Schedule::default() };
        let (a, _) = train_aed(&m, None, tok.clone(), cfg.clone(), &sched, 7, Exec::Parallel).unwrap();
        let (b, _) = train_aed(&m, None, tok, cfg, &sched, 7, Exec::Sequential).unwrap();
        assert_eq!(a.params, b.params);
    }

    fn item_for<'m>(m: &'m Manifest, tok: &Tokenizer, i: usize) -> AedBatchItem<'m> {
        let u = &m.entries()[i];
        AedBatchItem {
            features: &u.features,
            targets: tok.encode(&u.transcript),
        }
    }

    #[test]
    fn uniform_output_costs_log_vocab() {
        let (m, tok, cfg) = small();
        let mut model = AedModel::new(cfg, tok.clone(), 1).unwrap();
        for n in ["aed.out.weight", "aed.out.bias"] {
            model.params.get_mut(n).unwrap().data_mut().fill(0.0);
        }
        let batch: Vec<AedBatchItem> = (0..4).map(|i| item_for(&m, &tok, i)).collect();
        let loss = aed_loss(&model, &batch, Exec::Sequential).unwrap();
        assert!((loss - (tok.len() as f64).ln()).abs() < 1e-6, "{loss}");
    }

    #[test]
    fn batch_loss_is_the_length_weighted_mean() {
        let (m, tok, cfg) = small();
        let model = AedModel::new(cfg, tok.clone(), 2).unwrap();
        let batch: Vec<AedBatchItem> = (0..5).map(|i| item_for(&m, &tok, i)).collect();
        let (mut sum, mut n) = (0.0, 0.0);
        for it in &batch {
            let k = g_tokens(it);
            sum += aed_loss(&model, std::slice::from_ref(it), Exec::Sequential).unwrap() * k;
            n += k;
        }
        let pooled = aed_loss(&model, &batch, Exec::Parallel).unwrap();
        assert!((pooled - sum / n).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_cost_nothing() {
        let store = ParamStore::new();
        let mut g = Graph::inference(&store);
        let labels = [2usize, 0, 1];
        let mut logits = Mat::zeros(3, 4);
        for (r, &l) in labels.iter().enumerate() {
            logits.set(r, l, 60.0);
        }
        let x = g.constant(logits);
        let ce = g.cross_entropy_sum(x, &labels.map(Some));
        assert!(g.value(ce).get(0, 0) < 1e-20);
    }

    #[test]
    fn empty_targets_are_rejected() {
        let (m, tok, cfg) = small();
        let model = AedModel::new(cfg, tok, 1).unwrap();
        let item = AedBatchItem {
            features: &m.entries()[0].features,
            targets: vec![],
        };
        assert!(matches!(aed_loss(&model, &[item], Exec::Sequential), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn zero_steps_return_the_initialization() {
        let (m, tok, cfg) = small();
        let init = AedModel::new(cfg.clone(), tok.clone(), 9).unwrap();
        let sched = Schedule { steps: 0, ..Schedule::default() };
        let (model, log) = train_aed(&m, None, tok, cfg, &sched, 9, Exec::Parallel).unwrap();
        assert!(log.losses.is_empty());
        assert_eq!(model.params, init.params);
    }

    #[test]
    fn same_seed_gives_the_same_final_loss() {
        let (m, tok, cfg) = small();
        let sched = Schedule { steps: 4, batch_size: 4, ..Schedule::default() };
        let (_, a) = train_aed(&m, None, tok.clone(), cfg.clone(), &sched, 5, Exec::Parallel).unwrap();
        let (_, b) = train_aed(&m, None, tok, cfg, &sched, 5, Exec::Parallel).unwrap();
        assert_eq!(a.losses.last().unwrap().to_bits(), b.losses.last().unwrap().to_bits());
    }

    #[test]
    fn exported_encoder_reproduces_the_internal_one() {
        let (m, tok, cfg) = small();
        let model = AedModel::new(cfg.clone(), tok, 4).unwrap();
        let export = export_encoder(&model);
        let expected = crate::encoder::init_params(&cfg.encoder, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(export.params.scalar_count(), expected.scalar_count());
        assert_eq!(export.params.names().collect::<Vec<_>>(), expected.names().collect::<Vec<_>>());
        for u in m.entries().iter().take(3) {
            let a = crate::encoder::encode(&u.features, &cfg.encoder, &model.params).unwrap();
            let b = crate::encoder::encode(&u.features, &export.config, &export.params).unwrap();
            assert_eq!(a.valid(), b.valid());
        }
    }

    #[test]
    fn thirty_word_toy_corpus_is_learned() {
        let corpus = |utterances, seed| {
            let c = ToyCorpusConfig {
                utterances,
                feature_dim: 16,
                hotword_groups: 10,
                hotwords_per_group: 1,
                ..ToyCorpusConfig::default()
            };
            synth_toy_corpus(&c, seed).unwrap()
        };
        let (train, dev) = (corpus(2000, 1), corpus(200, 2));
        let words: Vec<String> = train
            .entries()
            .iter()
            .flat_map(|u| u.transcript.split(' ').map(str::to_owned).collect::<Vec<_>>())
            .collect();
        let tok = Tokenizer::new(words).unwrap();
        assert_eq!(tok.len() - 5, 30);
        let mut cfg = small().2;
        cfg.decoder_heads = 4;
        cfg.encoder.heads = 4;
        let sched = Schedule { steps: 1200, ..Schedule::default() };
        let (_, log) = train_aed(&train, Some(&dev), tok, cfg, &sched, 1, Exec::Parallel).unwrap();
        let acc = log.dev_token_accuracy.unwrap();
        assert!(acc > 0.95, "held-out token accuracy {acc}");
    }
}
