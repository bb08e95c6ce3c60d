//! Greedy decoding with a repetition guard.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub max_new_tokens: usize,
    /// Largest n-gram size the guard watches; every size `1..=n` is checked.
    pub repetition_window: usize,
    /// Consecutive copies of one n-gram that stop decoding.
    pub repetition_limit: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 48,
            repetition_window: 4,
            repetition_limit: 4,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be at least 1".into()));
        }
        if self.repetition_window == 0 {
            return Err(Error::Config("repetition_window must be at least 1".into()));
        }
        if self.repetition_limit < 2 {
            return Err(Error::Config("repetition_limit must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Termination {
    /// The model emitted `<eos>`.
    End,
    /// The token budget ran out.
    Length,
    /// The repetition guard fired.
    Repetition,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationOutput {
    /// Emitted tokens, `<eos>` excluded.
    pub tokens: Vec<usize>,
    pub termination: Termination,
}

/// Anything that scores the next token given what has been emitted.
pub trait LogitSource {
    fn next_logits(&self, generated: &[usize]) -> Vec<f64>;
}

/// Size of an n-gram (`1..=max_n`, smallest first) that occurs `copies`
/// times back to back at the end of `tokens`.
pub fn find_repetition<T: PartialEq>(tokens: &[T], max_n: usize, copies: usize) -> Option<usize> {
    (1..=max_n).find(|&n| {
        let span = n * copies;
        span <= tokens.len() && {
            let tail = &tokens[tokens.len() - span..];
            (n..span).all(|i| tail[i] == tail[i - n])
        }
    })
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding until `<eos>`, the token budget, or the guard. When the
/// guard fires, decoding stops right after the repeat that completed the
/// run, so the output holds exactly `repetition_limit` copies.
pub fn generate_with(src: &dyn LogitSource, eos: usize, gen: &GenerationConfig) -> GenerationOutput {
    let mut tokens = Vec::new();
    while tokens.len() < gen.max_new_tokens {
        let next = argmax(&src.next_logits(&tokens));
        if next == eos {
            return GenerationOutput {
                tokens,
                termination: Termination::End,
            };
        }
        tokens.push(next);
        if find_repetition(&tokens, gen.repetition_window, gen.repetition_limit).is_some() {
            return GenerationOutput {
                tokens,
                termination: Termination::Repetition,
            };
        }
    }
    GenerationOutput {
        tokens,
        termination: Termination::Length,
    }
}
