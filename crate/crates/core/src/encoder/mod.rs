//! Conformer-style acoustic encoder.
//!
//! Front end: `log2(subsample_factor)` stride-2 convolutions (kernel 3,
//! ReLU), a linear projection and a fixed sinusoidal position table. Each
//! convolution pads on the right only, so `T` input frames always produce
//! `ceil(T / factor)` output frames and no trailing frame is dropped.
//!
//! Block layout (pre-norm):
//!
//! ```text
//! x = x + ½·FFN(LN(x))
//! x = x + MHSA(LN(x))          relative-position bias per head
//! x = x + Conv(LN(x))          pointwise → GLU → depthwise → LN → swish → pointwise
//! x = x + ½·FFN(LN(x))
//! x = LN(x)
//! ```

mod aed;

pub use aed::{
    aed_loss, export_encoder, train_aed, AedBatchItem, AedConfig, AedModel,
    AedTrainLog, EncoderExport,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::FeatureMatrix;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{self, Activation, AttentionSpec};
use crate::parallel::Exec;
use crate::params::{init_linear, ParamStore};
use crate::tensor::Mat;

pub const PREFIX: &str = "encoder";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub conv_kernel: usize,
    pub subsample_factor: usize,
    pub ffn_expansion: usize,
    #[serde(default = "default_rel_clip")]
    pub rel_pos_clip: usize,
}

fn default_rel_clip() -> usize {
    16
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 80,
            layers: 2,
            model_dim: 64,
            heads: 4,
            conv_kernel: 7,
            subsample_factor: 4,
            ffn_expansion: 4,
            rel_pos_clip: 16,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.model_dim == 0 || self.heads == 0 || self.ffn_expansion == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "encoder model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::Config(format!("conv_kernel {} must be odd", self.conv_kernel)));
        }
        if !self.subsample_factor.is_power_of_two() {
            return Err(Error::Config(format!(
                "subsample_factor {} must be a power of two (stacked stride-2 convolutions)",
                self.subsample_factor
            )));
        }
        Ok(())
    }

    fn subsample_stages(&self) -> usize {
        self.subsample_factor.trailing_zeros() as usize
    }
}

/// `ceil(t / factor)`: frames left after the right-padded front end.
pub fn subsampled_length(t: usize, factor: usize) -> Result<usize> {
    if t == 0 || factor == 0 {
        return Err(Error::InvalidInput(format!(
            "subsampled_length needs positive inputs, got T={t}, factor={factor}"
        )));
    }
    Ok(t.div_ceil(factor))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    /// `rows ≥ length`; rows past `length` are padding.
    pub embeddings: Mat,
    pub length: usize,
}

impl EncoderOutput {
    pub fn valid(&self) -> Mat {
        self.embeddings.slice_rows(0, self.length)
    }
}

pub fn init_params<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Result<ParamStore> {
    cfg.validate()?;
    let d = cfg.model_dim;
    let mut s = ParamStore::new();
    let stages = cfg.subsample_stages();
    if stages == 0 {
        init_linear(&mut s, &format!("{PREFIX}.subsample.0"), cfg.input_dim, d, rng);
    }
    for i in 0..stages {
        let c_in = if i == 0 { cfg.input_dim } else { d };
        init_linear(&mut s, &format!("{PREFIX}.subsample.{i}"), 3 * c_in, d, rng);
    }
    init_linear(&mut s, &format!("{PREFIX}.embed_out"), d, d, rng);
    let hidden = d * cfg.ffn_expansion;
    for l in 0..cfg.layers {
        let p = format!("{PREFIX}.layers.{l}");
        nn::init_norm(&mut s, &format!("{p}.ffn1_norm"), d);
        nn::init_feed_forward(&mut s, &format!("{p}.ffn1"), d, hidden, rng);
        nn::init_norm(&mut s, &format!("{p}.attn_norm"), d);
        nn::init_attention(&mut s, &format!("{p}.attn"), d, cfg.heads, Some(cfg.rel_pos_clip), rng);
        nn::init_norm(&mut s, &format!("{p}.conv_norm"), d);
        init_linear(&mut s, &format!("{p}.conv.pw1"), d, 2 * d, rng);
        let dw_std = 1.0 / (cfg.conv_kernel as f64).sqrt();
        s.insert(format!("{p}.conv.dw.weight"), Mat::randn(cfg.conv_kernel, d, dw_std, rng));
        s.insert(format!("{p}.conv.dw.bias"), Mat::zeros(1, d));
        nn::init_norm(&mut s, &format!("{p}.conv.dw_norm"), d);
        init_linear(&mut s, &format!("{p}.conv.pw2"), d, d, rng);
        nn::init_norm(&mut s, &format!("{p}.ffn2_norm"), d);
        nn::init_feed_forward(&mut s, &format!("{p}.ffn2"), d, hidden, rng);
        nn::init_norm(&mut s, &format!("{p}.final_norm"), d);
    }
    Ok(s)
}

/// Convolutional subsampling, projection and position table: `T' × d`.
pub fn embed(g: &mut Graph, feats: Var, cfg: &EncoderConfig) -> Var {
    let stages = cfg.subsample_stages();
    let mut x = feats;
    if stages == 0 {
        x = nn::linear(g, x, &format!("{PREFIX}.subsample.0"), None);
        x = g.relu(x);
    }
    for i in 0..stages {
        let cols = g.im2col(x, 3, 2, 0);
        x = nn::linear(g, cols, &format!("{PREFIX}.subsample.{i}"), None);
        x = g.relu(x);
    }
    x = nn::linear(g, x, &format!("{PREFIX}.embed_out"), None);
    let t = g.shape(x).0;
    let pe = g.constant(nn::sinusoidal_positions(t, cfg.model_dim));
    g.add(x, pe)
}

fn conv_module(g: &mut Graph, x: Var, p: &str) -> Var {
    let h = nn::linear(g, x, &format!("{p}.pw1"), None);
    let h = g.glu(h);
    let w = g.param(&format!("{p}.dw.weight"));
    let h = g.depthwise_conv(h, w);
    let b = g.param(&format!("{p}.dw.bias"));
    let h = g.add_row(h, b);
    let h = nn::layer_norm(g, h, &format!("{p}.dw_norm"));
    let h = g.silu(h);
    nn::linear(g, h, &format!("{p}.pw2"), None)
}

pub fn block(g: &mut Graph, x: Var, cfg: &EncoderConfig, layer: usize) -> Var {
    let p = format!("{PREFIX}.layers.{layer}");
    let h = nn::layer_norm(g, x, &format!("{p}.ffn1_norm"));
    let h = nn::feed_forward(g, h, &format!("{p}.ffn1"), Activation::Silu);
    let h = g.scale(h, 0.5);
    let x = g.add(x, h);

    let h = nn::layer_norm(g, x, &format!("{p}.attn_norm"));
    let attn = format!("{p}.attn");
    let h = nn::attention(
        g,
        h,
        h,
        AttentionSpec {
            heads: cfg.heads,
            causal: false,
            rel_clip: Some(cfg.rel_pos_clip),
            lora_scale: None,
            prefix: &attn,
        },
    );
    let x = g.add(x, h);

    let h = nn::layer_norm(g, x, &format!("{p}.conv_norm"));
    let h = conv_module(g, h, &format!("{p}.conv"));
    let x = g.add(x, h);

    let h = nn::layer_norm(g, x, &format!("{p}.ffn2_norm"));
    let h = nn::feed_forward(g, h, &format!("{p}.ffn2"), Activation::Silu);
    let h = g.scale(h, 0.5);
    let x = g.add(x, h);
    nn::layer_norm(g, x, &format!("{p}.final_norm"))
}

/// Full encoder forward on one utterance's `T × F` features.
pub fn forward(g: &mut Graph, feats: Var, cfg: &EncoderConfig) -> Var {
    let mut x = embed(g, feats, cfg);
    for l in 0..cfg.layers {
        x = block(g, x, cfg, l);
    }
    x
}

pub(crate) fn check_features(features: &FeatureMatrix, cfg: &EncoderConfig) -> Result<()> {
    if features.dim() != cfg.input_dim {
        return Err(Error::Shape(format!(
            "features have {} bins, encoder expects {}",
            features.dim(),
            cfg.input_dim
        )));
    }
    Ok(())
}

/// Inference-mode encoding of one utterance.
pub fn encode(features: &FeatureMatrix, cfg: &EncoderConfig, params: &ParamStore) -> Result<EncoderOutput> {
    check_features(features, cfg)?;
    let mut g = Graph::inference(params);
    let x = g.constant(features.to_mat());
    let y = forward(&mut g, x, cfg);
    let embeddings = g.value(y).clone();
    let length = embeddings.rows();
    debug_assert_eq!(length, features.frames().div_ceil(cfg.subsample_factor));
    Ok(EncoderOutput { embeddings, length })
}

/// Encodes a zero-padded batch. Row `i` of `lengths` gives the valid frame
/// count of `batch[i]`; frames past it are ignored. Outputs are padded to
/// the longest subsampled length.
pub fn encode_padded(
    batch: &[Mat],
    lengths: &[usize],
    cfg: &EncoderConfig,
    params: &ParamStore,
    exec: Exec,
) -> Result<Vec<EncoderOutput>> {
    if batch.len() != lengths.len() {
        return Err(Error::Shape("one length per batch entry".into()));
    }
    for (m, &len) in batch.iter().zip(lengths) {
        if m.cols() != cfg.input_dim || len == 0 || len > m.rows() {
            return Err(Error::Shape(format!(
                "batch entry {}x{} with length {len} does not fit input_dim {}",
                m.rows(),
                m.cols(),
                cfg.input_dim
            )));
        }
    }
    let items: Vec<(&Mat, usize)> = batch.iter().zip(lengths.iter().copied()).collect();
    let outs: Vec<Mat> = exec.map(&items, |(m, len)| {
        let mut g = Graph::inference(params);
        let x = g.constant(m.slice_rows(0, *len));
        let y = forward(&mut g, x, cfg);
        g.value(y).clone()
    });
    let max_len = outs.iter().map(Mat::rows).max().unwrap_or(0);
    Ok(outs
        .into_iter()
        .map(|m| {
            let length = m.rows();
            let mut data = m.into_vec();
            data.resize(max_len * cfg.model_dim, 0.0);
            EncoderOutput {
                embeddings: Mat::from_vec(max_len, cfg.model_dim, data),
                length,
            }
        })
        .collect())
}
