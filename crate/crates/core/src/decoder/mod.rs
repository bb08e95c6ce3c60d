//! LLM-style decoder with spliced audio embeddings.
//!
//! The input sequence is three segments laid end to end:
//!
//! ```text
//! [prompt tokens] [audio soft tokens] [<bos> t1 … tL]
//! ```
//!
//! Every row receives a learned segment embedding and a learned position
//! that restarts at zero in each segment, so the audio and transcript
//! segments see the same positions whatever the prompt length. The model
//! is a pre-norm causal transformer with a separate output head.

mod generate;
mod lora;
pub mod tokenizer;

pub use generate::{
    find_repetition, generate_with, GenerationConfig, GenerationOutput, LogitSource, Termination,
};
pub use lora::{inject_lora, is_adapted, lora_parameter_count, merge_lora, LoraSpec};
pub use tokenizer::Tokenizer;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Trainable, Var};
use crate::nn::{self, Activation, AttentionSpec};
use crate::params::{init_linear, Gradients, ParamStore};
use crate::tensor::Mat;

pub const PREFIX: &str = "decoder";

const SEG_PROMPT: usize = 0;
const SEG_AUDIO: usize = 1;
const SEG_TEXT: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub layers: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
    pub max_sequence: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            embed_dim: 64,
            heads: 4,
            ffn_expansion: 4,
            max_sequence: 128,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.embed_dim == 0 || self.heads == 0 || self.ffn_expansion == 0 {
            return Err(Error::Config("decoder dimensions must be positive".into()));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "decoder embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.max_sequence < 2 {
            return Err(Error::Config("max_sequence must be at least 2".into()));
        }
        Ok(())
    }
}

pub fn init_params<R: Rng + ?Sized>(cfg: &DecoderConfig, vocab: usize, rng: &mut R) -> Result<ParamStore> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    let mut s = ParamStore::new();
    s.insert(format!("{PREFIX}.embed"), Mat::randn(vocab, d, 1.0 / (d as f64).sqrt(), rng));
    s.insert(format!("{PREFIX}.segment"), Mat::randn(3, d, 0.02, rng));
    s.insert(format!("{PREFIX}.pos"), Mat::randn(cfg.max_sequence, d, 0.02, rng));
    for l in 0..cfg.layers {
        let p = format!("{PREFIX}.layers.{l}");
        nn::init_norm(&mut s, &format!("{p}.attn_norm"), d);
        nn::init_attention(&mut s, &format!("{p}.attn"), d, cfg.heads, None, rng);
        nn::init_norm(&mut s, &format!("{p}.ffn_norm"), d);
        nn::init_feed_forward(&mut s, &format!("{p}.ffn"), d, d * cfg.ffn_expansion, rng);
    }
    nn::init_norm(&mut s, &format!("{PREFIX}.final_norm"), d);
    init_linear(&mut s, &format!("{PREFIX}.lm_head"), d, vocab, rng);
    Ok(s)
}

/// Token ids and lengths of one assembled sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub prompt: Vec<usize>,
    pub audio_len: usize,
    /// `<bos>` followed by the teacher-forced targets.
    pub text: Vec<usize>,
    /// Next-token label per sequence position; `None` outside the targets.
    pub labels: Vec<Option<usize>>,
}

impl Layout {
    /// Training layout: text segment `<bos> targets…`. `targets` should end
    /// with `<eos>`. Position `i` of the text segment is trained to predict
    /// `targets[i]`, so exactly `targets.len()` positions are masked in and
    /// the final position (which has nothing left to predict) is not.
    pub fn training(prompt: &[usize], audio_len: usize, bos: usize, targets: &[usize], max_sequence: usize) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::InvalidInput("training layout needs at least one target".into()));
        }
        let mut text = Vec::with_capacity(targets.len() + 1);
        text.push(bos);
        text.extend_from_slice(targets);
        let mut labels = vec![None; prompt.len() + audio_len];
        labels.extend(targets.iter().copied().map(Some));
        labels.push(None);
        let layout = Self {
            prompt: prompt.to_vec(),
            audio_len,
            text,
            labels,
        };
        layout.check(max_sequence, 0)?;
        Ok(layout)
    }

    /// Inference layout ending in `<bos>` plus any tokens generated so far.
    pub fn inference(prompt: &[usize], audio_len: usize, bos: usize, generated: &[usize]) -> Self {
        let mut text = vec![bos];
        text.extend_from_slice(generated);
        let n = prompt.len() + audio_len + text.len();
        Self {
            prompt: prompt.to_vec(),
            audio_len,
            text,
            labels: vec![None; n],
        }
    }

    pub fn len(&self) -> usize {
        self.prompt.len() + self.audio_len + self.text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mask(&self) -> Vec<bool> {
        self.labels.iter().map(Option::is_some).collect()
    }

    pub fn target_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }

    pub(crate) fn check(&self, max_sequence: usize, extra: usize) -> Result<()> {
        if self.audio_len == 0 {
            return Err(Error::InvalidInput("audio segment is empty".into()));
        }
        if self.len() + extra > max_sequence {
            return Err(Error::InvalidInput(format!(
                "sequence of {} prompt + {} audio + {} text tokens exceeds max_sequence {max_sequence}",
                self.prompt.len(),
                self.audio_len,
                self.text.len() + extra
            )));
        }
        Ok(())
    }
}

fn segment(g: &mut Graph, rows: Var, seg: usize, len: usize) -> Var {
    let seg_table = g.param(&format!("{PREFIX}.segment"));
    let s = g.gather(seg_table, &vec![seg; len]);
    let pos_table = g.param(&format!("{PREFIX}.pos"));
    let positions: Vec<usize> = (0..len).collect();
    let p = g.gather(pos_table, &positions);
    let x = g.add(rows, s);
    g.add(x, p)
}

/// Builds the `N × d` input embedding sequence for `layout`.
pub fn embed_sequence(g: &mut Graph, layout: &Layout, audio: Var) -> Var {
    let table = g.param(&format!("{PREFIX}.embed"));
    let mut parts = Vec::with_capacity(3);
    if !layout.prompt.is_empty() {
        let t = g.gather(table, &layout.prompt);
        parts.push(segment(g, t, SEG_PROMPT, layout.prompt.len()));
    }
    parts.push(segment(g, audio, SEG_AUDIO, layout.audio_len));
    let t = g.gather(table, &layout.text);
    parts.push(segment(g, t, SEG_TEXT, layout.text.len()));
    g.concat_rows(&parts)
}

/// Transformer stack plus output head over an embedded sequence.
pub fn logits_from_embeddings(g: &mut Graph, x: Var, cfg: &DecoderConfig, lora_scale: Option<f64>) -> Var {
    let mut x = x;
    for l in 0..cfg.layers {
        let p = format!("{PREFIX}.layers.{l}");
        let h = nn::layer_norm(g, x, &format!("{p}.attn_norm"));
        let name = format!("{p}.attn");
        let h = nn::attention(
            g,
            h,
            h,
            AttentionSpec {
                heads: cfg.heads,
                causal: true,
                rel_clip: None,
                lora_scale,
                prefix: &name,
            },
        );
        x = g.add(x, h);
        let h = nn::layer_norm(g, x, &format!("{p}.ffn_norm"));
        let up = nn::linear(g, h, &format!("{p}.ffn.up"), lora_scale);
        let up = nn::activate(g, up, Activation::Gelu);
        let h = nn::linear(g, up, &format!("{p}.ffn.down"), lora_scale);
        x = g.add(x, h);
    }
    let x = nn::layer_norm(g, x, &format!("{PREFIX}.final_norm"));
    nn::linear(g, x, &format!("{PREFIX}.lm_head"), lora_scale)
}

pub fn forward(g: &mut Graph, layout: &Layout, audio: Var, cfg: &DecoderConfig, lora_scale: Option<f64>) -> Var {
    let x = embed_sequence(g, layout, audio);
    logits_from_embeddings(g, x, cfg, lora_scale)
}

fn check_audio(audio: &Mat, cfg: &DecoderConfig, layout: &Layout) -> Result<()> {
    if audio.cols() != cfg.embed_dim {
        return Err(Error::Shape(format!(
            "audio embeddings have width {}, decoder embed_dim is {}",
            audio.cols(),
            cfg.embed_dim
        )));
    }
    if audio.rows() != layout.audio_len {
        return Err(Error::Shape(format!(
            "layout expects {} audio rows, got {}",
            layout.audio_len,
            audio.rows()
        )));
    }
    Ok(())
}

/// Materializes the embedding sequence and loss mask for one example.
pub fn assemble_input(
    params: &ParamStore,
    cfg: &DecoderConfig,
    tokenizer: &Tokenizer,
    prompt: &[usize],
    audio: &Mat,
    targets: Option<&[usize]>,
) -> Result<(Mat, Vec<bool>)> {
    let layout = match targets {
        Some(t) => Layout::training(prompt, audio.rows(), tokenizer.bos(), t, cfg.max_sequence)?,
        None => {
            let l = Layout::inference(prompt, audio.rows(), tokenizer.bos(), &[]);
            l.check(cfg.max_sequence, 0)?;
            l
        }
    };
    check_audio(audio, cfg, &layout)?;
    let mut g = Graph::inference(params);
    let a = g.constant(audio.clone());
    let x = embed_sequence(&mut g, &layout, a);
    Ok((g.value(x).clone(), layout.mask()))
}

/// One decoder-level training example with fixed audio embeddings.
#[derive(Clone, Debug)]
pub struct DecoderExample {
    pub layout: Layout,
    pub audio: Mat,
}

fn example_graph<'p>(
    params: &'p ParamStore,
    trainable: Trainable<'p>,
    cfg: &DecoderConfig,
    lora_scale: Option<f64>,
    ex: &DecoderExample,
) -> Result<(Graph<'p>, Var, usize)> {
    check_audio(&ex.audio, cfg, &ex.layout)?;
    let n = ex.layout.target_count();
    if n == 0 {
        return Err(Error::InvalidInput("loss mask is all zero".into()));
    }
    let mut g = Graph::new(params, trainable);
    let a = g.constant(ex.audio.clone());
    let logits = forward(&mut g, &ex.layout, a, cfg, lora_scale);
    let ce = g.cross_entropy_sum(logits, &ex.layout.labels);
    Ok((g, ce, n))
}

/// Mean cross-entropy over every masked-in position of the batch.
pub fn sft_loss(params: &ParamStore, cfg: &DecoderConfig, lora_scale: Option<f64>, batch: &[DecoderExample]) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0);
    for ex in batch {
        let (g, ce, k) = example_graph(params, Trainable::Nothing, cfg, lora_scale, ex)?;
        sum += g.value(ce).get(0, 0);
        n += k;
    }
    if n == 0 {
        return Err(Error::InvalidInput("batch has no masked-in positions".into()));
    }
    Ok(sum / n as f64)
}

/// Summed loss, target count and gradients for one example.
pub fn sft_example_grad(
    params: &ParamStore,
    trainable: Trainable,
    cfg: &DecoderConfig,
    lora_scale: Option<f64>,
    ex: &DecoderExample,
) -> Result<(f64, usize, Gradients)> {
    let (g, ce, n) = example_graph(params, trainable, cfg, lora_scale, ex)?;
    Ok((g.value(ce).get(0, 0), n, g.backward(ce)))
}

/// Logits for every position of an inference layout.
pub fn logits(params: &ParamStore, cfg: &DecoderConfig, lora_scale: Option<f64>, layout: &Layout, audio: &Mat) -> Result<Mat> {
    check_audio(audio, cfg, layout)?;
    layout.check(cfg.max_sequence, 0)?;
    let mut g = Graph::inference(params);
    let a = g.constant(audio.clone());
    let y = forward(&mut g, layout, a, cfg, lora_scale);
    Ok(g.value(y).clone())
}

struct DecoderSource<'a> {
    params: &'a ParamStore,
    cfg: &'a DecoderConfig,
    lora_scale: Option<f64>,
    prompt: &'a [usize],
    audio: &'a Mat,
    bos: usize,
}

impl LogitSource for DecoderSource<'_> {
    fn next_logits(&self, generated: &[usize]) -> Vec<f64> {
        let layout = Layout::inference(self.prompt, self.audio.rows(), self.bos, generated);
        let mut g = Graph::inference(self.params);
        let a = g.constant(self.audio.clone());
        let y = forward(&mut g, &layout, a, self.cfg, self.lora_scale);
        let v = g.value(y);
        v.row(v.rows() - 1).to_vec()
    }
}

/// Greedy decoding. The token budget is clipped to the room left in
/// `max_sequence`; hitting either limit ends with [`Termination::Length`].
pub fn generate(
    params: &ParamStore,
    cfg: &DecoderConfig,
    lora_scale: Option<f64>,
    tokenizer: &Tokenizer,
    prompt: &[usize],
    audio: &Mat,
    gen: &GenerationConfig,
) -> Result<GenerationOutput> {
    gen.validate()?;
    let layout = Layout::inference(prompt, audio.rows(), tokenizer.bos(), &[]);
    check_audio(audio, cfg, &layout)?;
    layout.check(cfg.max_sequence, 0)?;
    let room = cfg.max_sequence - layout.len();
    let budget = GenerationConfig {
        max_new_tokens: gen.max_new_tokens.min(room + 1),
        ..gen.clone()
    };
    let src = DecoderSource {
        params,
        cfg,
        lora_scale,
        prompt,
        audio,
        bos: tokenizer.bos(),
    };
    Ok(generate_with(&src, tokenizer.eos(), &budget))
}
