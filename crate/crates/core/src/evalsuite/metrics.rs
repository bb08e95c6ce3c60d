//! Error rates, hotword recall and hallucination flags.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::align::align;
use super::text::{normalize_and_tokenize, ScoringTokens};
use crate::contextforge::ContextBundle;
use crate::decoder::{find_repetition, Termination};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_units: usize,
}

impl ErrorCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// Fraction of reference units in error; `None` for an empty reference.
    pub fn rate(&self) -> Option<f64> {
        (self.ref_units > 0).then(|| self.errors() as f64 / self.ref_units as f64)
    }

    pub fn add(&mut self, other: &ErrorCounts) {
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.ref_units += other.ref_units;
    }
}

pub fn utterance_errors(reference: &str, hypothesis: &str) -> ErrorCounts {
    let r = normalize_and_tokenize(reference);
    let h = normalize_and_tokenize(hypothesis);
    let a = align(&r.units, &h.units);
    ErrorCounts {
        substitutions: a.substitutions,
        deletions: a.deletions,
        insertions: a.insertions,
        ref_units: r.len(),
    }
}

fn check_pairs(refs: usize, hyps: usize) -> Result<()> {
    if refs != hyps {
        return Err(Error::InvalidInput(format!("{refs} references but {hyps} hypotheses")));
    }
    Ok(())
}

/// Corpus-pooled counts: errors and reference units summed over all pairs.
pub fn pooled_errors<R: AsRef<str>, H: AsRef<str>>(refs: &[R], hyps: &[H]) -> Result<ErrorCounts> {
    check_pairs(refs.len(), hyps.len())?;
    let mut total = ErrorCounts::default();
    for (r, h) in refs.iter().zip(hyps) {
        total.add(&utterance_errors(r.as_ref(), h.as_ref()));
    }
    Ok(total)
}

/// Corpus-pooled error rate as a fraction. All-empty references are
/// rejected.
pub fn wer<R: AsRef<str>, H: AsRef<str>>(refs: &[R], hyps: &[H]) -> Result<f64> {
    pooled_errors(refs, hyps)?
        .rate()
        .ok_or_else(|| Error::InvalidInput("every reference is empty".into()))
}

/// Mean of per-utterance rates over non-empty references. Exposed for
/// comparison; the pooled rate is the reported one.
pub fn mean_utterance_wer<R: AsRef<str>, H: AsRef<str>>(refs: &[R], hyps: &[H]) -> Result<f64> {
    check_pairs(refs.len(), hyps.len())?;
    let rates: Vec<f64> = refs
        .iter()
        .zip(hyps)
        .filter_map(|(r, h)| utterance_errors(r.as_ref(), h.as_ref()).rate())
        .collect();
    if rates.is_empty() {
        return Err(Error::InvalidInput("every reference is empty".into()));
    }
    Ok(rates.iter().sum::<f64>() / rates.len() as f64)
}

/// Non-overlapping occurrences of `term` (as a unit sequence) in `units`.
pub fn count_occurrences(units: &[String], term: &[String]) -> usize {
    if term.is_empty() || term.len() > units.len() {
        return 0;
    }
    let mut count = 0;
    let mut i = 0;
    while i + term.len() <= units.len() {
        if units[i..i + term.len()] == *term {
            count += 1;
            i += term.len();
        } else {
            i += 1;
        }
    }
    count
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecallCounts {
    /// Σ min(ref count, hyp count) over (utterance, hotword).
    pub hits: usize,
    /// Σ ref count over (utterance, hotword).
    pub occurrences: usize,
    /// (utterance, hotword) pairs with at least one reference occurrence.
    pub types: usize,
    /// Of those, pairs where the hypothesis has the hotword at least once.
    pub types_found: usize,
}

impl RecallCounts {
    /// Per-occurrence recall; `None` when no hotword occurs in any reference.
    pub fn rate(&self) -> Option<f64> {
        (self.occurrences > 0).then(|| self.hits as f64 / self.occurrences as f64)
    }

    pub fn type_rate(&self) -> Option<f64> {
        (self.types > 0).then(|| self.types_found as f64 / self.types as f64)
    }

    pub fn add(&mut self, o: &RecallCounts) {
        self.hits += o.hits;
        self.occurrences += o.occurrences;
        self.types += o.types;
        self.types_found += o.types_found;
    }
}

/// Hotword recall for one utterance. A listed term that never occurs in the
/// reference (a distractor) adds nothing to either count.
pub fn utterance_recall(reference: &str, hypothesis: &str, hotwords: &[String]) -> RecallCounts {
    let r = normalize_and_tokenize(reference);
    let h = normalize_and_tokenize(hypothesis);
    let mut out = RecallCounts::default();
    let mut seen = BTreeSet::new();
    for term in hotwords {
        let t = normalize_and_tokenize(term).units;
        if t.is_empty() || !seen.insert(t.clone()) {
            continue;
        }
        let in_ref = count_occurrences(&r.units, &t);
        if in_ref == 0 {
            continue;
        }
        let in_hyp = count_occurrences(&h.units, &t);
        out.hits += in_ref.min(in_hyp);
        out.occurrences += in_ref;
        out.types += 1;
        out.types_found += usize::from(in_hyp > 0);
    }
    out
}

pub fn recall_counts<R: AsRef<str>, H: AsRef<str>>(
    refs: &[R],
    hyps: &[H],
    bundles: &[Option<&ContextBundle>],
) -> Result<RecallCounts> {
    check_pairs(refs.len(), hyps.len())?;
    if bundles.len() != refs.len() {
        return Err(Error::InvalidInput(format!(
            "{} bundles for {} utterances",
            bundles.len(),
            refs.len()
        )));
    }
    let mut total = RecallCounts::default();
    for ((r, h), b) in refs.iter().zip(hyps).zip(bundles) {
        if let Some(b) = b {
            total.add(&utterance_recall(r.as_ref(), h.as_ref(), b.hotwords()));
        }
    }
    Ok(total)
}

/// Per-occurrence hotword recall; `Ok(None)` when undefined.
pub fn hotword_recall<R: AsRef<str>, H: AsRef<str>>(
    refs: &[R],
    hyps: &[H],
    bundles: &[Option<&ContextBundle>],
) -> Result<Option<f64>> {
    Ok(recall_counts(refs, hyps, bundles)?.rate())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HallucinationConfig {
    pub repetition_window: usize,
    pub repetition_limit: usize,
    pub length_ratio: f64,
}

impl Default for HallucinationConfig {
    fn default() -> Self {
        Self {
            repetition_window: 4,
            repetition_limit: 4,
            length_ratio: 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flag {
    Repetition,
    Length,
}

/// True when some n-gram (`1..=window`) appears `limit` times back to back
/// anywhere in `units`.
pub fn has_repetition<T: PartialEq>(units: &[T], window: usize, limit: usize) -> bool {
    (1..=units.len()).any(|end| find_repetition(&units[..end], window, limit).is_some())
}

/// Flags for one hypothesis, merged with the decoder's termination reason:
/// a guard stop implies `repetition`, a budget stop implies `length`.
pub fn hallucination_flags(
    reference: &ScoringTokens,
    hypothesis: &ScoringTokens,
    decoder: Option<Termination>,
    cfg: &HallucinationConfig,
) -> BTreeSet<Flag> {
    let mut flags = BTreeSet::new();
    if has_repetition(&hypothesis.units, cfg.repetition_window, cfg.repetition_limit) {
        flags.insert(Flag::Repetition);
    }
    if hypothesis.len() as f64 > cfg.length_ratio * reference.len() as f64 {
        flags.insert(Flag::Length);
    }
    match decoder {
        Some(Termination::Repetition) => {
            flags.insert(Flag::Repetition);
        }
        Some(Termination::Length) => {
            flags.insert(Flag::Length);
        }
        Some(Termination::End) | None => {}
    }
    flags
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_hypotheses_score_zero() {
        assert_eq!(wer(&["a b", "c"], &["a b", "c"]).unwrap(), 0.0);
    }

    #[test]
    fn pooled_and_mean_differ_on_uneven_lengths() {
        // 1 error in a 1-unit ref and 0 in a 3-unit ref:
        // pooled = 1/4, mean = (1 + 0) / 2.
        let refs = ["a", "b c d"];
        let hyps = ["x", "b c d"];
        assert_eq!(wer(&refs, &hyps).unwrap(), 0.25);
        assert_eq!(mean_utterance_wer(&refs, &hyps).unwrap(), 0.5);
    }

    #[test]
    fn empty_references_are_rejected() {
        assert!(wer(&["", " "], &["a", ""]).is_err());
        assert!(wer(&["a"], &["a", "b"]).is_err());
    }

    #[test]
    fn recall_by_hand() {
        let b = ContextBundle::new(["zorvex"], None);
        let r = hotword_recall(&["zorvex and more"], &["zorvex and more"], &[Some(&b)]).unwrap();
        assert_eq!(r, Some(1.0));
        let refs = ["zorvex a zorvex b zorvex c zorvex"];
        let hyps = ["zorvex a b zorvex c"];
        assert_eq!(hotword_recall(&refs, &hyps, &[Some(&b)]).unwrap(), Some(0.5));
        assert_eq!(hotword_recall(&["plain"], &["plain"], &[Some(&b)]).unwrap(), None);
        assert_eq!(hotword_recall(&["zorvex"], &["zorvex"], &[None]).unwrap(), None);
    }

    #[test]
    fn multi_unit_terms_count_as_sequences() {
        let b = ContextBundle::new(["New York"], None);
        let c = utterance_recall("new york and york new", "new york new york", b.hotwords());
        assert_eq!((c.hits, c.occurrences), (1, 1));
    }

    #[test]
    fn flags_by_hand() {
        let cfg = HallucinationConfig { repetition_window: 1, ..HallucinationConfig::default() };
        let r = normalize_and_tokenize("ok then");
        let same = hallucination_flags(&r, &r, Some(Termination::End), &cfg);
        assert!(same.is_empty());
        let rep = hallucination_flags(&r, &normalize_and_tokenize("ok ok ok ok ok"), None, &cfg);
        assert!(rep.contains(&Flag::Repetition));
        let long = hallucination_flags(
            &normalize_and_tokenize("a b"),
            &normalize_and_tokenize("a b c d e f"),
            None,
            &HallucinationConfig::default(),
        );
        assert_eq!(long.into_iter().collect::<Vec<_>>(), [Flag::Length]);
        let guard = hallucination_flags(&r, &r, Some(Termination::Repetition), &cfg);
        assert!(guard.contains(&Flag::Repetition));
    }

    proptest! {
        #[test]
        fn wer_ignores_utterance_order(
            pairs in proptest::collection::vec(("[abc ]{1,8}", "[abc ]{0,8}"), 1..6),
            rot in 0usize..6,
        ) {
            let refs: Vec<String> = pairs.iter().map(|p| format!("{} a", p.0)).collect();
            let hyps: Vec<String> = pairs.iter().map(|p| p.1.clone()).collect();
            let base = pooled_errors(&refs, &hyps).unwrap();
            let k = rot % refs.len();
            let mut r2 = refs.clone();
            let mut h2 = hyps.clone();
            r2.rotate_left(k);
            h2.rotate_left(k);
            prop_assert_eq!(pooled_errors(&r2, &h2).unwrap(), base);
        }

        #[test]
        fn distractors_never_change_recall(
            words in proptest::collection::vec(0usize..5, 1..10),
            hyp in proptest::collection::vec(0usize..5, 0..10),
        ) {
            let vocab = ["ka", "lo", "mi", "nu", "po"];
            let r: Vec<&str> = words.iter().map(|&i| vocab[i]).collect();
            let h: Vec<&str> = hyp.iter().map(|&i| vocab[i]).collect();
            let (r, h) = (r.join(" "), h.join(" "));
            let plain = ContextBundle::new(["ka", "mi"], None);
            let with = ContextBundle::new(["ka", "zz", "mi", "qq"], None);
            let a = hotword_recall(&[&r], &[&h], &[Some(&plain)]).unwrap();
            let b = hotword_recall(&[&r], &[&h], &[Some(&with)]).unwrap();
            prop_assert_eq!(a, b);
            if let Some(x) = a {
                prop_assert!((0.0..=1.0).contains(&x));
            }
        }
    }
}
