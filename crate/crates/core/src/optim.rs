//! Adam with linear warmup, cosine decay and global-norm clipping, plus the
//! batch-gradient helper every training loop shares.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::Exec;
use crate::params::{Gradients, ParamStore};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// Final learning rate as a fraction of the peak.
    pub min_lr_ratio: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 16,
            learning_rate: 2e-3,
            warmup_steps: 20,
            min_lr_ratio: 0.05,
            grad_clip: 1.0,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(Error::Config("min_lr_ratio must lie in [0, 1]".into()));
        }
        if self.grad_clip < 0.0 {
            return Err(Error::Config("grad_clip must be non-negative".into()));
        }
        Ok(())
    }

    /// Learning rate for 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let peak = self.learning_rate;
        if step < self.warmup_steps {
            return peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let decay_steps = self.steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / decay_steps as f64).min(1.0);
        let floor = peak * self.min_lr_ratio;
        floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: BTreeMap<String, Mat>,
    v: BTreeMap<String, Mat>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

impl Adam {
    pub fn new() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Updates every parameter that has a gradient. Names without a
    /// gradient are untouched, which is how frozen parameters stay frozen.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads.iter() {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Mat::zeros(g.rows(), g.cols()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Mat::zeros(g.rows(), g.cols()));
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *w -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
            }
        }
    }
}

/// Rescales `grads` so the global norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Per-example contribution to a batch loss.
pub struct ExampleGrad {
    pub loss_sum: f64,
    pub tokens: usize,
    pub grads: Gradients,
}

/// Runs `f` over `items` (in parallel when `exec` allows), merges the
/// gradients in input order and normalizes by the total token count.
/// Returns the mean per-token loss.
pub fn batch_gradients<T, F>(items: &[T], exec: Exec, f: F) -> Result<(f64, Gradients)>
where
    T: Sync,
    F: Fn(&T) -> Result<ExampleGrad> + Sync + Send,
{
    let results = exec.map(items, f);
    let mut total = Gradients::new();
    let mut loss = 0.0;
    let mut tokens = 0usize;
    for r in results {
        let r = r?;
        loss += r.loss_sum;
        tokens += r.tokens;
        total.merge(r.grads);
    }
    if tokens == 0 {
        return Err(Error::InvalidInput("batch has no target tokens".into()));
    }
    total.scale(1.0 / tokens as f64);
    Ok((loss / tokens as f64, total))
}

/// Endless seeded stream of index batches, reshuffled each epoch.
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, batch: usize, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::InvalidInput("cannot sample batches from an empty dataset".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Ok(Self {
            order,
            pos: 0,
            batch: batch.min(len).max(1),
            rng,
        })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}
