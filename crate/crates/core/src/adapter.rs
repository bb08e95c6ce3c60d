//! Frame-stacking projector from encoder space into decoder embedding space.
//!
//! `k` consecutive encoder frames are concatenated (the last group zero
//! padded), then mapped through `Linear → GELU → Linear`. A valid length of
//! `T'` frames yields `ceil(T'/k)` soft tokens.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderOutput;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn;
use crate::params::{init_linear, ParamStore};
use crate::tensor::Mat;

pub const PREFIX: &str = "adapter";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub stack_factor: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            stack_factor: 2,
            input_dim: 64,
            hidden_dim: 128,
            output_dim: 64,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stack_factor == 0 || self.input_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("adapter dimensions and stack_factor must be positive".into()));
        }
        Ok(())
    }

    /// `k·in·hidden + hidden + hidden·out + out`.
    pub fn parameter_count(&self) -> usize {
        self.stack_factor * self.input_dim * self.hidden_dim
            + self.hidden_dim
            + self.hidden_dim * self.output_dim
            + self.output_dim
    }

    pub fn output_length(&self, valid_frames: usize) -> usize {
        valid_frames.div_ceil(self.stack_factor)
    }
}

pub fn init_params<R: Rng + ?Sized>(cfg: &AdapterConfig, rng: &mut R) -> Result<ParamStore> {
    cfg.validate()?;
    let mut s = ParamStore::new();
    init_linear(&mut s, &format!("{PREFIX}.proj1"), cfg.stack_factor * cfg.input_dim, cfg.hidden_dim, rng);
    init_linear(&mut s, &format!("{PREFIX}.proj2"), cfg.hidden_dim, cfg.output_dim, rng);
    Ok(s)
}

/// Graph form: `frames` holds exactly the valid encoder rows.
pub fn forward(g: &mut Graph, frames: Var, cfg: &AdapterConfig) -> Var {
    let stacked = g.stack_frames(frames, cfg.stack_factor);
    let h = nn::linear(g, stacked, &format!("{PREFIX}.proj1"), None);
    let h = g.gelu(h);
    nn::linear(g, h, &format!("{PREFIX}.proj2"), None)
}

pub(crate) fn check_input(enc: &EncoderOutput, cfg: &AdapterConfig) -> Result<()> {
    if enc.embeddings.cols() != cfg.input_dim {
        return Err(Error::Shape(format!(
            "encoder output width {} does not match adapter input_dim {}",
            enc.embeddings.cols(),
            cfg.input_dim
        )));
    }
    if enc.length == 0 || enc.length > enc.embeddings.rows() {
        return Err(Error::Shape(format!(
            "valid length {} outside 1..={}",
            enc.length,
            enc.embeddings.rows()
        )));
    }
    Ok(())
}

/// Projects the valid prefix of `enc`; padding rows never reach the output.
pub fn adapt(enc: &EncoderOutput, cfg: &AdapterConfig, params: &ParamStore) -> Result<Mat> {
    check_input(enc, cfg)?;
    let mut g = Graph::inference(params);
    let x = g.constant(enc.valid());
    let y = forward(&mut g, x, cfg);
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Trainable;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(k: usize) -> AdapterConfig {
        AdapterConfig {
            stack_factor: k,
            input_dim: 6,
            hidden_dim: 10,
            output_dim: 5,
        }
    }

    fn enc(t: usize, pad: usize, seed: u64) -> EncoderOutput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Mat::randn(t, 6, 1.0, &mut rng).into_vec();
        data.extend(std::iter::repeat(99.0).take(pad * 6));
        EncoderOutput {
            embeddings: Mat::from_vec(t + pad, 6, data),
            length: t,
        }
    }

    #[test]
    fn ten_frames_stacked_by_four_give_three_tokens() {
        let c = cfg(4);
        let p = init_params(&c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(adapt(&enc(10, 0, 1), &c, &p).unwrap().shape(), (3, 5));
    }

    #[test]
    fn unit_stacking_keeps_length_and_changes_width_only() {
        let c = cfg(1);
        let p = init_params(&c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(adapt(&enc(7, 0, 1), &c, &p).unwrap().shape(), (7, 5));
    }

    #[test]
    fn padding_rows_are_ignored() {
        let c = cfg(3);
        let p = init_params(&c, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let clean = adapt(&enc(8, 0, 5), &c, &p).unwrap();
        let padded = adapt(&enc(8, 4, 5), &c, &p).unwrap();
        assert_eq!(clean, padded);
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for k in 1..5 {
            let c = cfg(k);
            let p = init_params(&c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(p.scalar_count(), c.parameter_count());
            assert_eq!(c.parameter_count(), k * 6 * 10 + 10 + 10 * 5 + 5);
        }
    }

    #[test]
    fn wrong_width_and_bad_length_are_shape_errors() {
        let c = cfg(2);
        let p = init_params(&c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut e = enc(4, 0, 0);
        e.length = 5;
        assert!(matches!(adapt(&e, &c, &p), Err(Error::Shape(_))));
        let wide = EncoderOutput { embeddings: Mat::zeros(4, 7), length: 4 };
        assert!(matches!(adapt(&wide, &c, &p), Err(Error::Shape(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let c = cfg(3);
        let p = init_params(&c, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let x = enc(8, 0, 6).embeddings;
        let target = Mat::randn(3, 5, 1.0, &mut ChaCha8Rng::seed_from_u64(7));
        let loss = |store: &ParamStore, xin: &Mat| -> (f64, crate::params::Gradients) {
            let mut g = Graph::new(store, Trainable::All);
            let xv = g.constant(xin.clone());
            let y = forward(&mut g, xv, &c);
            let t = g.constant(target.clone());
            let prod = g.mul(y, t);
            let l = g.sum(prod);
            (g.value(l).get(0, 0), g.backward(l))
        };
        let (_, grads) = loss(&p, &x);
        for name in ["adapter.proj1.weight", "adapter.proj1.bias", "adapter.proj2.weight"] {
            let a = grads.get(name).unwrap();
            for idx in [0, a.len() / 3, a.len() - 1] {
                let h = 1e-6;
                let mut plus = p.clone();
                plus.get_mut(name).unwrap().data_mut()[idx] += h;
                let mut minus = p.clone();
                minus.get_mut(name).unwrap().data_mut()[idx] -= h;
                let fd = (loss(&plus, &x).0 - loss(&minus, &x).0) / (2.0 * h);
                let an = a.data()[idx];
                assert!((fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1e-6), "{name}[{idx}] {fd} vs {an}");
            }
        }
    }

    proptest! {
        #[test]
        fn output_length_is_ceiling(t in 1usize..60, k in 1usize..8) {
            let c = cfg(k);
            let p = init_params(&c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let y = adapt(&enc(t, 0, 0), &c, &p).unwrap();
            prop_assert_eq!(y.rows(), t.div_ceil(k));
            prop_assert_eq!(y.rows(), c.output_length(t));
        }
    }
}
