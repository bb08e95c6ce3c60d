//! Layer building blocks shared by the encoder, adapter and decoders.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{init_layer_norm, init_linear, ParamStore};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Silu,
}

pub fn activate(g: &mut Graph, x: Var, act: Activation) -> Var {
    match act {
        Activation::Gelu => g.gelu(x),
        Activation::Silu => g.silu(x),
    }
}

/// `x · W + b`, plus the low-rank update `scale · (x · A) · B` when the
/// store holds `{prefix}.lora_a` / `{prefix}.lora_b` and a scale is given.
pub fn linear(g: &mut Graph, x: Var, prefix: &str, lora_scale: Option<f64>) -> Var {
    let w = g.param(&format!("{prefix}.weight"));
    let b = g.param(&format!("{prefix}.bias"));
    let xw = g.matmul(x, w);
    let mut y = g.add_row(xw, b);
    if let Some(scale) = lora_scale {
        let a_name = format!("{prefix}.lora_a");
        if g.has_param(&a_name) {
            let a = g.param(&a_name);
            let bm = g.param(&format!("{prefix}.lora_b"));
            let xa = g.matmul(x, a);
            let xab = g.matmul(xa, bm);
            let delta = g.scale(xab, scale);
            y = g.add(y, delta);
        }
    }
    y
}

pub fn layer_norm(g: &mut Graph, x: Var, prefix: &str) -> Var {
    let gamma = g.param(&format!("{prefix}.gamma"));
    let beta = g.param(&format!("{prefix}.beta"));
    g.layer_norm(x, gamma, beta)
}

/// Two-layer position-wise feed-forward block.
pub fn feed_forward(g: &mut Graph, x: Var, prefix: &str, act: Activation) -> Var {
    let h = linear(g, x, &format!("{prefix}.up"), None);
    let h = activate(g, h, act);
    linear(g, h, &format!("{prefix}.down"), None)
}

pub fn init_feed_forward<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    dim: usize,
    hidden: usize,
    rng: &mut R,
) {
    init_linear(store, &format!("{prefix}.up"), dim, hidden, rng);
    init_linear(store, &format!("{prefix}.down"), hidden, dim, rng);
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionSpec<'p> {
    pub heads: usize,
    pub causal: bool,
    /// Relative-position bias tables `{prefix}.rel_bias.{h}` with this clip.
    pub rel_clip: Option<usize>,
    pub lora_scale: Option<f64>,
    pub prefix: &'p str,
}

/// Multi-head scaled dot-product attention with projections `q, k, v, o`.
pub fn attention(g: &mut Graph, query: Var, memory: Var, spec: AttentionSpec) -> Var {
    let p = spec.prefix;
    let q = linear(g, query, &format!("{p}.q"), spec.lora_scale);
    let k = linear(g, memory, &format!("{p}.k"), spec.lora_scale);
    let v = linear(g, memory, &format!("{p}.v"), spec.lora_scale);
    let dim = g.shape(q).1;
    let head_dim = dim / spec.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(spec.heads);
    for h in 0..spec.heads {
        let qh = g.slice_cols(q, h * head_dim, head_dim);
        let kh = g.slice_cols(k, h * head_dim, head_dim);
        let vh = g.slice_cols(v, h * head_dim, head_dim);
        let scores = g.matmul_bt(qh, kh);
        let mut scores = g.scale(scores, scale);
        if let Some(clip) = spec.rel_clip {
            let table = g.param(&format!("{p}.rel_bias.{h}"));
            scores = g.rel_pos_bias(scores, table, clip);
        }
        let probs = g.softmax(scores, spec.causal);
        outs.push(g.matmul(probs, vh));
    }
    let merged = if outs.len() == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)
    };
    linear(g, merged, &format!("{p}.o"), spec.lora_scale)
}

pub fn init_attention<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    dim: usize,
    heads: usize,
    rel_clip: Option<usize>,
    rng: &mut R,
) {
    for name in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{prefix}.{name}"), dim, dim, rng);
    }
    if let Some(clip) = rel_clip {
        for h in 0..heads {
            store.insert(format!("{prefix}.rel_bias.{h}"), Mat::zeros(1, 2 * clip + 1));
        }
    }
}

pub fn init_norm(store: &mut ParamStore, prefix: &str, dim: usize) {
    init_layer_norm(store, prefix, dim);
}

/// Fixed sinusoidal position table, `len × dim`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Mat {
    let mut m = Mat::zeros(len, dim);
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            m.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    m
}
