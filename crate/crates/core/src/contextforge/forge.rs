//! Hotword extraction, summaries and distractors.
//!
//! The offline hotword extractor ranks a transcript's distinct units by
//! ascending corpus document frequency (ties: earlier first occurrence),
//! skipping stopwords and units present in more than `max_doc_fraction` of
//! documents, and keeps the top `max_hotwords`. The offline summary is
//! extractive: the group's sentences in manifest order, cut at
//! `summary_max_tokens` units.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bundle::{normalize_term, ContextBundle};
use super::client::LlmClient;
use crate::corpus::{Manifest, Utterance};
use crate::error::{Error, Result};
use crate::evalsuite::{count_occurrences, normalize_and_tokenize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForgeConfig {
    pub max_hotwords: usize,
    /// Units found in more than this fraction of documents are never
    /// hotword candidates.
    pub max_doc_fraction: f64,
    pub stopwords: Vec<String>,
    pub summary_max_tokens: usize,
    /// Fraction of bundles that carry their group summary.
    pub summary_fraction: f64,
    pub distractors: usize,
    pub seed: u64,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        Self {
            max_hotwords: 2,
            max_doc_fraction: 0.1,
            stopwords: Vec::new(),
            summary_max_tokens: 24,
            summary_fraction: 0.0,
            distractors: 0,
            seed: 0,
        }
    }
}

impl ForgeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.max_doc_fraction) || !(0.0..=1.0).contains(&self.summary_fraction) {
            return Err(Error::Config("forge fractions must lie in [0, 1]".into()));
        }
        if self.summary_max_tokens == 0 {
            return Err(Error::Config("summary_max_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Client,
    /// No client configured.
    Offline,
    /// The client failed after its retries.
    Fallback,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Extraction {
    pub terms: Vec<String>,
    pub provenance: Provenance,
}

/// Per-unit document counts over a corpus.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DocumentFrequencies {
    counts: HashMap<String, usize>,
    docs: usize,
}

impl DocumentFrequencies {
    pub fn from_texts<S: AsRef<str>>(texts: &[S]) -> Self {
        let mut counts = HashMap::new();
        for t in texts {
            let units: HashSet<String> = normalize_and_tokenize(t.as_ref()).units.into_iter().collect();
            for u in units {
                *counts.entry(u).or_insert(0) += 1;
            }
        }
        Self { counts, docs: texts.len() }
    }

    pub fn from_manifest(m: &Manifest) -> Self {
        let texts: Vec<&str> = m.entries().iter().map(|u| u.transcript.as_str()).collect();
        Self::from_texts(&texts)
    }

    pub fn get(&self, unit: &str) -> usize {
        self.counts.get(unit).copied().unwrap_or(0)
    }

    pub fn docs(&self) -> usize {
        self.docs
    }
}

pub fn offline_hotwords(transcript: &str, df: &DocumentFrequencies, cfg: &ForgeConfig) -> Vec<String> {
    let units = normalize_and_tokenize(transcript).units;
    let stop: HashSet<String> = cfg.stopwords.iter().flat_map(|s| normalize_and_tokenize(s).units).collect();
    let limit = cfg.max_doc_fraction * df.docs().max(1) as f64;
    let mut seen = HashSet::new();
    let mut candidates: Vec<(usize, usize, &String)> = Vec::new();
    for (pos, u) in units.iter().enumerate() {
        if stop.contains(u) || !seen.insert(u) {
            continue;
        }
        let d = df.get(u);
        if d as f64 <= limit {
            candidates.push((d, pos, u));
        }
    }
    candidates.sort();
    candidates.into_iter().take(cfg.max_hotwords).map(|(_, _, u)| u.clone()).collect()
}

fn keyword_request(transcript: &str, k: usize) -> String {
    format!(
        "List up to {k} keywords or domain-specific terms that appear verbatim in the transcript below. \
         Reply with the terms only, separated by commas.\n\nTranscript: {transcript}"
    )
}

fn summary_request(text: &str, cap: usize) -> String {
    format!("Summarize the following transcripts in at most {cap} words. Reply with the summary only.\n\n{text}")
}

/// Keeps terms whose normalized units occur contiguously in the transcript,
/// deduplicated in order and capped.
pub fn filter_terms(raw: &[String], transcript: &str, cap: usize) -> Vec<String> {
    let units = normalize_and_tokenize(transcript).units;
    let mut out: Vec<String> = Vec::new();
    for t in raw {
        let n = normalize_term(t);
        let tu = normalize_and_tokenize(&n).units;
        if tu.is_empty() || count_occurrences(&units, &tu) == 0 {
            continue;
        }
        let joined = tu.join(" ");
        if !out.contains(&joined) {
            out.push(joined);
        }
        if out.len() == cap {
            break;
        }
    }
    out
}

/// Hotwords for one utterance. Client output is post-filtered like any
/// other source; a failing client drops to the offline extractor.
pub fn extract_hotwords(
    u: &Utterance,
    client: Option<&dyn LlmClient>,
    df: &DocumentFrequencies,
    cfg: &ForgeConfig,
) -> Extraction {
    if normalize_and_tokenize(&u.transcript).is_empty() {
        return Extraction {
            terms: Vec::new(),
            provenance: if client.is_some() { Provenance::Client } else { Provenance::Offline },
        };
    }
    if let Some(c) = client {
        match c.complete(&keyword_request(&u.transcript, cfg.max_hotwords)) {
            Ok(text) => {
                let raw: Vec<String> = text.split([',', '\n']).map(str::to_owned).collect();
                return Extraction {
                    terms: filter_terms(&raw, &u.transcript, cfg.max_hotwords),
                    provenance: Provenance::Client,
                };
            }
            Err(e) => log::warn!("hotword client failed for {}: {e}; using offline extractor", u.id),
        }
        return Extraction {
            terms: offline_hotwords(&u.transcript, df, cfg),
            provenance: Provenance::Fallback,
        };
    }
    Extraction {
        terms: offline_hotwords(&u.transcript, df, cfg),
        provenance: Provenance::Offline,
    }
}

fn sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        cur.push(c);
        if matches!(c, '.' | '!' | '?' | '。' | '！' | '？') {
            out.push(std::mem::take(&mut cur));
        }
    }
    out.push(cur);
    out.into_iter().map(|s| s.trim().to_owned()).filter(|s| !s.is_empty()).collect()
}

/// First sentences of the group, in order, cut at `cap` units.
pub fn extractive_summary(group: &[&Utterance], cap: usize) -> String {
    let mut words: Vec<String> = Vec::new();
    'outer: for u in group {
        for s in sentences(&u.transcript) {
            for w in s.split_whitespace() {
                if words.len() == cap {
                    break 'outer;
                }
                words.push(w.to_owned());
            }
        }
    }
    normalize_term(&words.join(" "))
}

fn cap_words(text: &str, cap: usize) -> String {
    let words: Vec<&str> = text.split_whitespace().take(cap).collect();
    normalize_term(&words.join(" "))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Summary {
    pub text: String,
    pub provenance: Provenance,
}

pub fn build_summary(group: &[&Utterance], client: Option<&dyn LlmClient>, cfg: &ForgeConfig) -> Result<Summary> {
    let first = group
        .first()
        .ok_or_else(|| Error::InvalidInput("cannot summarize an empty group".into()))?;
    if group.iter().any(|u| u.group_id != first.group_id) {
        return Err(Error::InvalidInput("summary group mixes group ids".into()));
    }
    if let Some(c) = client {
        let joined: Vec<&str> = group.iter().map(|u| u.transcript.as_str()).collect();
        match c.complete(&summary_request(&joined.join("\n"), cfg.summary_max_tokens)) {
            Ok(text) => {
                return Ok(Summary {
                    text: cap_words(&text, cfg.summary_max_tokens),
                    provenance: Provenance::Client,
                })
            }
            Err(e) => log::warn!("summary client failed: {e}; using extractive summary"),
        }
        return Ok(Summary {
            text: extractive_summary(group, cfg.summary_max_tokens),
            provenance: Provenance::Fallback,
        });
    }
    Ok(Summary {
        text: extractive_summary(group, cfg.summary_max_tokens),
        provenance: Provenance::Offline,
    })
}

/// Adds `count` terms drawn from `pool` (terms already in the bundle are
/// skipped), then shuffles the list. Deterministic per seed.
pub fn add_distractors(bundle: &ContextBundle, pool: &[String], count: usize, seed: u64) -> Result<ContextBundle> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let existing: HashSet<String> = bundle.hotwords().iter().cloned().collect();
    let mut candidates: Vec<String> = Vec::new();
    for p in pool {
        let n = normalize_term(p);
        if !n.is_empty() && !existing.contains(&n) && !candidates.contains(&n) {
            candidates.push(n);
        }
    }
    if candidates.len() < count {
        return Err(Error::InvalidInput(format!(
            "distractor pool has {} usable terms, {count} requested",
            candidates.len()
        )));
    }
    let picked: Vec<String> = candidates.choose_multiple(&mut rng, count).cloned().collect();
    let mut all: Vec<String> = bundle.hotwords().to_vec();
    all.extend(picked);
    all.shuffle(&mut rng);
    Ok(ContextBundle::from_parts_unchecked(
        all,
        bundle.summary().map(str::to_owned),
        bundle.distractor_count() + count,
    ))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForgeReport {
    pub utterances: usize,
    pub with_hotwords: usize,
    pub with_summary: usize,
    pub provenance: BTreeMap<String, usize>,
}

fn seed_for(base: u64, id: &str) -> u64 {
    // FNV-1a over the id keeps per-utterance draws independent of order.
    id.bytes().fold(0xcbf2_9ce4_8422_2325 ^ base, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn bounded_map<T: Sync, U: Send>(items: &[T], max_in_flight: usize, f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(max_in_flight.max(1)).build() {
            return pool.install(|| items.par_iter().map(&f).collect());
        }
    }
    let _ = max_in_flight;
    items.iter().map(f).collect()
}

/// Attaches a context bundle to every utterance of `manifest`. The
/// distractor pool, when distractors are requested, is `pool` minus the
/// utterance's own transcript units. At most `max_in_flight` client calls
/// run at once; results do not depend on that bound.
pub fn forge_manifest(
    manifest: &Manifest,
    client: Option<&dyn LlmClient>,
    df: &DocumentFrequencies,
    pool: &[String],
    cfg: &ForgeConfig,
    max_in_flight: usize,
) -> Result<(Manifest, ForgeReport)> {
    cfg.validate()?;
    let entries = manifest.entries();
    let extractions = bounded_map(entries, max_in_flight, |u| extract_hotwords(u, client, df, cfg));

    let mut groups: BTreeMap<&str, Vec<&Utterance>> = BTreeMap::new();
    if cfg.summary_fraction > 0.0 {
        for u in entries {
            if let Some(g) = &u.group_id {
                groups.entry(g.as_str()).or_default().push(u);
            }
        }
    }
    let group_list: Vec<(&str, Vec<&Utterance>)> = groups.into_iter().collect();
    let summaries = bounded_map(&group_list, max_in_flight, |(_, members)| build_summary(members, client, cfg));
    let mut summary_of: HashMap<&str, Summary> = HashMap::new();
    for ((g, _), s) in group_list.iter().zip(summaries) {
        summary_of.insert(g, s?);
    }

    let mut report = ForgeReport {
        utterances: entries.len(),
        ..ForgeReport::default()
    };
    let mut out = Vec::with_capacity(entries.len());
    for (u, ex) in entries.iter().zip(extractions) {
        *report.provenance.entry(format!("hotwords_{:?}", ex.provenance).to_lowercase()).or_insert(0) += 1;
        let seed = seed_for(cfg.seed, &u.id);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let summary = u
            .group_id
            .as_deref()
            .and_then(|g| summary_of.get(g))
            .filter(|_| rand::Rng::random_bool(&mut rng, cfg.summary_fraction));
        let mut bundle = ContextBundle::new(&ex.terms, summary.map(|s| s.text.as_str()));
        if cfg.distractors > 0 {
            let own: HashSet<String> = normalize_and_tokenize(&u.transcript).units.into_iter().collect();
            let usable: Vec<String> = pool.iter().filter(|p| !own.contains(*p)).cloned().collect();
            bundle = add_distractors(&bundle, &usable, cfg.distractors, seed)?;
        }
        report.with_hotwords += usize::from(!ex.terms.is_empty());
        report.with_summary += usize::from(bundle.summary().is_some());
        let mut v = u.clone();
        v.context = Some(bundle);
        out.push(v);
    }
    Ok((Manifest::new(out)?, report))
}
