//! The assembled recognizer: encoder, adapter and decoder parameters with
//! their configuration, tokenizer and training history.

use std::collections::BTreeSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{self, AdapterConfig};
use crate::checkpoint;
use crate::contextforge::{ContextBundle, PromptTemplate};
use crate::corpus::{FeatureMatrix, Manifest, Utterance};
use crate::decoder::{self, DecoderConfig, GenerationConfig, Layout, LoraSpec, Termination, Tokenizer};
use crate::encoder::{self, EncoderConfig, EncoderExport};
use crate::error::{Error, Result};
use crate::graph::{Graph, Trainable, Var};
use crate::optim::ExampleGrad;
use crate::parallel::Exec;
use crate::params::ParamStore;
use crate::tensor::Mat;

pub const CHECKPOINT_KIND: &str = "model";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    pub decoder: DecoderConfig,
    pub prompt: PromptTemplate,
    pub generation: GenerationConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.adapter.validate()?;
        self.decoder.validate()?;
        self.prompt.validate()?;
        self.generation.validate()?;
        if self.adapter.input_dim != self.encoder.model_dim {
            return Err(Error::Config(format!(
                "adapter input_dim {} must equal encoder model_dim {}",
                self.adapter.input_dim, self.encoder.model_dim
            )));
        }
        if self.adapter.output_dim != self.decoder.embed_dim {
            return Err(Error::Config(format!(
                "adapter output_dim {} must equal decoder embed_dim {}",
                self.adapter.output_dim, self.decoder.embed_dim
            )));
        }
        Ok(())
    }
}

/// Tokenizer over the prompt vocabulary plus every transcript and context
/// word of `manifests`, in first-seen order.
pub fn build_tokenizer(manifests: &[&Manifest], prompt: &PromptTemplate) -> Result<Tokenizer> {
    let mut words: Vec<String> = prompt.vocabulary();
    for m in manifests {
        for u in m.entries() {
            words.extend(Tokenizer::pieces(&u.transcript).into_iter().map(str::to_owned));
            if let Some(c) = &u.context {
                for h in c.hotwords() {
                    words.extend(Tokenizer::pieces(h).into_iter().map(str::to_owned));
                }
            }
        }
    }
    Tokenizer::new(words)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub text: String,
    pub tokens: Vec<usize>,
    pub termination: Termination,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    config: ModelConfig,
    tokenizer: Tokenizer,
    lora: Option<LoraSpec>,
    history: Vec<String>,
    config_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub tokenizer: Tokenizer,
    pub params: ParamStore,
    /// Set once LoRA factors are injected into the decoder.
    pub lora: Option<LoraSpec>,
    /// Completed stages, oldest first.
    pub history: Vec<String>,
}

impl ModelBundle {
    pub fn new(config: ModelConfig, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = encoder::init_params(&config.encoder, &mut rng)?;
        params.extend(adapter::init_params(&config.adapter, &mut rng)?);
        params.extend(decoder::init_params(&config.decoder, tokenizer.len(), &mut rng)?);
        Ok(Self {
            config,
            tokenizer,
            params,
            lora: None,
            history: Vec::new(),
        })
    }

    pub fn has_completed(&self, stage: &str) -> bool {
        self.history.iter().any(|h| h == stage)
    }

    /// Replaces the encoder with a pretrained export of identical shape.
    pub fn load_encoder(&mut self, export: &EncoderExport) -> Result<()> {
        if export.config != self.config.encoder {
            return Err(Error::Config(format!(
                "exported encoder config {:?} differs from model encoder config {:?}",
                export.config, self.config.encoder
            )));
        }
        let ours: BTreeSet<&String> = self.params.names().filter(|n| n.starts_with("encoder.")).collect();
        let theirs: BTreeSet<&String> = export.params.names().collect();
        if ours != theirs {
            return Err(Error::Checkpoint("exported encoder parameter names differ".into()));
        }
        for (name, m) in export.params.iter() {
            if self.params.get(name).map(Mat::shape) != Some(m.shape()) {
                return Err(Error::Checkpoint(format!("exported `{name}` has shape {:?}", m.shape())));
            }
            self.params.insert(name.clone(), m.clone());
        }
        Ok(())
    }

    pub fn lora_scale(&self) -> Option<f64> {
        self.lora.as_ref().map(LoraSpec::scale)
    }

    /// Encoder and adapter as graph nodes; returns the `S × d` soft tokens.
    pub fn audio_graph(&self, g: &mut Graph, features: &FeatureMatrix) -> Result<Var> {
        encoder::check_features(features, &self.config.encoder)?;
        if features.frames() == 0 {
            return Err(Error::InvalidInput("utterance has no frames".into()));
        }
        let x = g.constant(features.to_mat());
        let enc = encoder::forward(g, x, &self.config.encoder);
        Ok(adapter::forward(g, enc, &self.config.adapter))
    }

    pub fn audio_embeddings(&self, features: &FeatureMatrix) -> Result<Mat> {
        let mut g = Graph::inference(&self.params);
        let a = self.audio_graph(&mut g, features)?;
        Ok(g.value(a).clone())
    }

    /// Number of soft tokens `features` turns into.
    pub fn audio_length(&self, frames: usize) -> Result<usize> {
        let t = encoder::subsampled_length(frames, self.config.encoder.subsample_factor)?;
        Ok(self.config.adapter.output_length(t))
    }

    pub fn prompt_ids(&self, bundle: Option<&ContextBundle>) -> Vec<usize> {
        self.tokenizer.encode(&self.config.prompt.render(bundle))
    }

    pub fn target_ids(&self, transcript: &str) -> Vec<usize> {
        let mut t = self.tokenizer.encode(transcript);
        t.push(self.tokenizer.eos());
        t
    }

    fn layout(&self, u: &Utterance, use_context: bool) -> Result<Layout> {
        let prompt = self.prompt_ids(if use_context { u.context.as_ref() } else { None });
        let s = self.audio_length(u.features.frames())?;
        Layout::training(&prompt, s, self.tokenizer.bos(), &self.target_ids(&u.transcript), self.config.decoder.max_sequence)
            .map_err(|e| Error::InvalidInput(format!("{}: {e}", u.id)))
    }

    /// Summed token loss and gradients for one utterance. The prompt
    /// carries the utterance's context bundle when `use_context` is set.
    pub fn example_grad(&self, trainable: Trainable, u: &Utterance, use_context: bool) -> Result<ExampleGrad> {
        let layout = self.layout(u, use_context)?;
        let mut g = Graph::new(&self.params, trainable);
        let audio = self.audio_graph(&mut g, &u.features)?;
        let logits = decoder::forward(&mut g, &layout, audio, &self.config.decoder, self.lora_scale());
        let ce = g.cross_entropy_sum(logits, &layout.labels);
        Ok(ExampleGrad {
            loss_sum: g.value(ce).get(0, 0),
            tokens: layout.target_count(),
            grads: g.backward(ce),
        })
    }

    /// Mean per-token loss over `entries`.
    pub fn loss(&self, entries: &[Utterance], use_context: bool, exec: Exec) -> Result<f64> {
        let per = exec.map(entries, |u| -> Result<(f64, usize)> {
            let layout = self.layout(u, use_context)?;
            let mut g = Graph::inference(&self.params);
            let audio = self.audio_graph(&mut g, &u.features)?;
            let logits = decoder::forward(&mut g, &layout, audio, &self.config.decoder, self.lora_scale());
            let ce = g.cross_entropy_sum(logits, &layout.labels);
            Ok((g.value(ce).get(0, 0), layout.target_count()))
        });
        let (mut sum, mut n) = (0.0, 0usize);
        for r in per {
            let (s, k) = r?;
            sum += s;
            n += k;
        }
        if n == 0 {
            return Err(Error::InvalidInput("nothing to score".into()));
        }
        Ok(sum / n as f64)
    }

    /// Greedy transcription with an optional context prompt.
    pub fn transcribe(&self, features: &FeatureMatrix, bundle: Option<&ContextBundle>) -> Result<Transcript> {
        let audio = self.audio_embeddings(features)?;
        let prompt = self.prompt_ids(bundle);
        let out = decoder::generate(
            &self.params,
            &self.config.decoder,
            self.lora_scale(),
            &self.tokenizer,
            &prompt,
            &audio,
            &self.config.generation,
        )?;
        Ok(Transcript {
            text: self.tokenizer.decode(&out.tokens),
            tokens: out.tokens,
            termination: out.termination,
        })
    }

    /// Transcribes every entry, in order.
    pub fn transcribe_all(&self, entries: &[Utterance], use_context: bool, exec: Exec) -> Result<Vec<Transcript>> {
        exec.map(entries, |u| {
            self.transcribe(&u.features, if use_context { u.context.as_ref() } else { None })
        })
        .into_iter()
        .collect()
    }

    pub fn save(&self, path: &Path, config_hash: Option<&str>) -> Result<()> {
        let meta = Meta {
            config: self.config.clone(),
            tokenizer: self.tokenizer.clone(),
            lora: self.lora.clone(),
            history: self.history.clone(),
            config_hash: config_hash.map(str::to_owned),
        };
        checkpoint::save(path, CHECKPOINT_KIND, &meta, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = checkpoint::load(path, CHECKPOINT_KIND)?;
        let meta: Meta = c.meta_as()?;
        meta.config.validate()?;
        let model = Self {
            config: meta.config,
            tokenizer: meta.tokenizer,
            params: c.params,
            lora: meta.lora,
            history: meta.history,
        };
        let expected = Self::new(model.config.clone(), model.tokenizer.clone(), 0)?;
        for (name, m) in expected.params.iter() {
            match model.params.get(name) {
                Some(p) if p.shape() == m.shape() => {}
                _ => return Err(Error::Checkpoint(format!("`{name}` missing or misshapen in {}", path.display()))),
            }
        }
        Ok(model)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::corpus::{synth_toy_corpus, ToyCorpusConfig};
    use crate::decoder::inject_lora;

    pub(crate) fn micro_config(feature_dim: usize) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                input_dim: feature_dim,
                layers: 1,
                model_dim: 8,
                heads: 2,
                conv_kernel: 3,
                subsample_factor: 4,
                ffn_expansion: 2,
                rel_pos_clip: 4,
            },
            adapter: AdapterConfig {
                stack_factor: 2,
                input_dim: 8,
                hidden_dim: 12,
                output_dim: 8,
            },
            decoder: DecoderConfig {
                layers: 1,
                embed_dim: 8,
                heads: 2,
                ffn_expansion: 2,
                max_sequence: 64,
            },
            ..ModelConfig::default()
        }
    }

    pub(crate) fn micro() -> (ModelBundle, Manifest) {
        let cfg = ToyCorpusConfig {
            utterances: 6,
            feature_dim: 6,
            frames_per_word: 4,
            max_words: 4,
            ..ToyCorpusConfig::default()
        };
        let m = synth_toy_corpus(&cfg, 3).unwrap();
        let mc = micro_config(6);
        let tok = build_tokenizer(&[&m], &mc.prompt).unwrap();
        (ModelBundle::new(mc, tok, 5).unwrap(), m)
    }

    #[test]
    fn mismatched_dimensions_are_rejected() {
        let mut c = micro_config(6);
        c.adapter.output_dim = 9;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let (mut m, _) = micro();
        inject_lora(&mut m.params, &m.config.decoder, &LoraSpec { rank: 2, ..LoraSpec::default() }, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        m.lora = Some(LoraSpec { rank: 2, ..LoraSpec::default() });
        m.history.push("sft2".into());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        m.save(&p, Some("abc")).unwrap();
        let back = ModelBundle::load(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(checkpoint::param_hash(&back.params), checkpoint::param_hash(&m.params));
    }

    #[test]
    fn encoder_export_must_match_config() {
        let (mut m, _) = micro();
        let mut export = EncoderExport {
            config: m.config.encoder.clone(),
            params: m.params.subset("encoder."),
        };
        for (_, v) in export.params.iter() {
            assert!(v.is_finite());
        }
        m.load_encoder(&export).unwrap();
        export.config.ffn_expansion = 3;
        assert!(matches!(m.load_encoder(&export), Err(Error::Config(_))));
    }

    #[test]
    fn soft_token_count_follows_the_downsampling() {
        let (m, data) = micro();
        for u in data.entries() {
            let a = m.audio_embeddings(&u.features).unwrap();
            let expect = u.features.frames().div_ceil(4).div_ceil(2);
            assert_eq!(a.rows(), expect);
            assert_eq!(m.audio_length(u.features.frames()).unwrap(), expect);
        }
    }

    #[test]
    fn context_lengthens_the_prompt_only_when_used() {
        let (m, data) = micro();
        let u = data.entries().iter().find(|u| u.context.is_some()).unwrap();
        let plain = m.layout(u, false).unwrap();
        let ctx = m.layout(u, true).unwrap();
        assert!(ctx.prompt.len() > plain.prompt.len());
        assert_eq!(ctx.target_count(), plain.target_count());
    }
}
