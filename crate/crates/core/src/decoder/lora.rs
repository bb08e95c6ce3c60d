//! Low-rank adapters on the decoder's linear maps.
//!
//! A target `W` (`d_in × d_out`) gains `{prefix}.lora_a` (`d_in × r`, small
//! random) and `{prefix}.lora_b` (`r × d_out`, zeros). The forward pass
//! computes `x·W + b + (alpha/r)·(x·A)·B`, so a fresh injection leaves the
//! function unchanged.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DecoderConfig, PREFIX};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
    /// Sub-layer names matched against the end of each linear prefix, such
    /// as `attn.q` or `ffn.up`. A bare `q` matches every `….q`.
    pub targets: Vec<String>,
}

impl Default for LoraSpec {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            targets: ["attn.q", "attn.k", "attn.v", "attn.o"].map(String::from).to_vec(),
        }
    }
}

impl LoraSpec {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Every linear prefix of the decoder that can carry an adapter.
fn linear_prefixes(cfg: &DecoderConfig) -> Vec<String> {
    let mut out = Vec::new();
    for l in 0..cfg.layers {
        for name in ["attn.q", "attn.k", "attn.v", "attn.o", "ffn.up", "ffn.down"] {
            out.push(format!("{PREFIX}.layers.{l}.{name}"));
        }
    }
    out.push(format!("{PREFIX}.lm_head"));
    out
}

fn resolve(cfg: &DecoderConfig, spec: &LoraSpec) -> Result<Vec<String>> {
    let all = linear_prefixes(cfg);
    let mut chosen = BTreeSet::new();
    for t in &spec.targets {
        let suffix = format!(".{t}");
        let hits: Vec<&String> = all.iter().filter(|p| p.ends_with(&suffix)).collect();
        if hits.is_empty() {
            return Err(Error::InvalidInput(format!("LoRA target `{t}` matches no decoder linear layer")));
        }
        chosen.extend(hits.into_iter().cloned());
    }
    if chosen.is_empty() {
        return Err(Error::InvalidInput("LoRA spec has no targets".into()));
    }
    Ok(chosen.into_iter().collect())
}

pub fn is_adapted(params: &ParamStore) -> bool {
    params.names().any(|n| n.starts_with(PREFIX) && n.ends_with(".lora_a"))
}

/// `Σ r·(d_in + d_out)` over the resolved targets.
pub fn lora_parameter_count(params: &ParamStore, cfg: &DecoderConfig, spec: &LoraSpec) -> Result<usize> {
    let mut total = 0;
    for p in resolve(cfg, spec)? {
        let w = weight(params, &p)?;
        total += spec.rank * (w.rows() + w.cols());
    }
    Ok(total)
}

fn weight<'a>(params: &'a ParamStore, prefix: &str) -> Result<&'a Mat> {
    params
        .get(&format!("{prefix}.weight"))
        .ok_or_else(|| Error::InvalidInput(format!("decoder has no linear layer `{prefix}`")))
}

/// Adds adapters to every target. Returns the number of scalars added.
pub fn inject_lora<R: Rng + ?Sized>(
    params: &mut ParamStore,
    cfg: &DecoderConfig,
    spec: &LoraSpec,
    rng: &mut R,
) -> Result<usize> {
    if is_adapted(params) {
        return Err(Error::InvalidInput("decoder already carries LoRA adapters".into()));
    }
    if spec.rank == 0 || !spec.alpha.is_finite() {
        return Err(Error::Config("LoRA rank must be ≥ 1 and alpha finite".into()));
    }
    let targets = resolve(cfg, spec)?;
    let mut shapes = Vec::with_capacity(targets.len());
    for p in &targets {
        let (d_in, d_out) = weight(params, p)?.shape();
        if spec.rank >= d_in.min(d_out) {
            return Err(Error::Config(format!(
                "LoRA rank {} is not below min({d_in}, {d_out}) for `{p}`",
                spec.rank
            )));
        }
        shapes.push((d_in, d_out));
    }
    let mut added = 0;
    for (p, (d_in, d_out)) in targets.iter().zip(shapes) {
        let a = Mat::randn(d_in, spec.rank, 1.0 / (d_in as f64).sqrt(), rng);
        params.insert(format!("{p}.lora_a"), a);
        params.insert(format!("{p}.lora_b"), Mat::zeros(spec.rank, d_out));
        added += spec.rank * (d_in + d_out);
    }
    Ok(added)
}

/// Folds `scale·A·B` into each base weight and removes the adapters.
pub fn merge_lora(params: &mut ParamStore, spec: &LoraSpec) -> Result<()> {
    let prefixes: Vec<String> = params
        .names()
        .filter(|n| n.starts_with(PREFIX))
        .filter_map(|n| n.strip_suffix(".lora_a").map(str::to_owned))
        .collect();
    if prefixes.is_empty() {
        return Err(Error::InvalidInput("no LoRA adapters to merge".into()));
    }
    let scale = spec.scale();
    for p in prefixes {
        let a = params.remove(&format!("{p}.lora_a")).expect("listed above");
        let b = params
            .remove(&format!("{p}.lora_b"))
            .ok_or_else(|| Error::Checkpoint(format!("`{p}` has lora_a without lora_b")))?;
        let delta = a.matmul(&b);
        let w = params
            .get_mut(&format!("{p}.weight"))
            .ok_or_else(|| Error::Checkpoint(format!("`{p}` has adapters but no base weight")))?;
        w.scaled_add_assign(&delta, scale);
    }
    Ok(())
}
