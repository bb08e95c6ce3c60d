//! Synthetic corpus for desk-scale training.
//!
//! Features are generated directly instead of going through a waveform.
//! Every word owns an acoustic class; each class has a fixed
//! `frames_per_word × feature_dim` template drawn once from the lexicon
//! seed, and an utterance is the concatenation of its words' templates
//! plus Gaussian frame noise.
//!
//! Hotwords come in confusable groups: all members of one group share a
//! single acoustic class, so audio alone identifies the group but not the
//! member. Only a context prompt naming the right member can resolve it.
//! With `hotwords_per_group = 1` every word is acoustically distinct.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::features::FeatureMatrix;
use super::manifest::{Manifest, Utterance};
use crate::contextforge::ContextBundle;
use crate::error::{Error, Result};

const COMMON_WORDS: [&str; 40] = [
    "apple", "river", "stone", "cloud", "light", "table", "green", "music", "paper", "water",
    "house", "north", "quiet", "bread", "glass", "horse", "night", "sugar", "train", "voice",
    "metal", "dream", "field", "piano", "ocean", "chair", "smile", "tiger", "lemon", "heart",
    "plant", "brick", "storm", "candle", "forest", "silver", "window", "garden", "pocket", "ladder",
];

const HOTWORDS: [&str; 30] = [
    "zorvex", "quillan", "marthos", "velquin", "drakmor", "sylphid", "korrigan", "tessaly",
    "obrenth", "pyxalor", "wendrith", "calyxa", "nimbrel", "thraxos", "yevanti", "ulmaris",
    "brezhal", "fenwick", "gorlath", "ivraine", "jostrel", "lumivar", "morvask", "orrinth",
    "quenzil", "ravolek", "skarneth", "trevalyn", "vorlique", "xandrel",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyCorpusConfig {
    pub common_words: usize,
    pub hotword_groups: usize,
    pub hotwords_per_group: usize,
    pub utterances: usize,
    /// Fraction of utterances carrying exactly one hotword.
    pub hotword_fraction: f64,
    pub min_words: usize,
    pub max_words: usize,
    pub frames_per_word: usize,
    pub feature_dim: usize,
    pub template_std: f64,
    pub noise_std: f64,
    /// Utterances per group id (a stand-in for one source video).
    pub group_size: usize,
    pub lexicon_seed: u64,
    pub id_prefix: String,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            common_words: 20,
            hotword_groups: 4,
            hotwords_per_group: 3,
            utterances: 1000,
            hotword_fraction: 0.3,
            min_words: 3,
            max_words: 7,
            frames_per_word: 8,
            feature_dim: 80,
            template_std: 1.0,
            noise_std: 0.3,
            group_size: 5,
            lexicon_seed: 1234,
            id_prefix: "utt".into(),
        }
    }
}

impl ToyCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let vocab = self.common_words + self.hotword_groups * self.hotwords_per_group;
        if vocab < 2 || self.common_words < 2 {
            return Err(Error::InvalidInput(format!(
                "toy vocabulary needs at least 2 common words, got {} of {vocab}",
                self.common_words
            )));
        }
        if self.common_words > COMMON_WORDS.len() {
            return Err(Error::Config(format!(
                "at most {} common words are available",
                COMMON_WORDS.len()
            )));
        }
        if self.hotword_groups * self.hotwords_per_group > HOTWORDS.len() {
            return Err(Error::Config(format!("at most {} hotwords are available", HOTWORDS.len())));
        }
        if self.hotword_groups > 0 && self.hotwords_per_group == 0 {
            return Err(Error::Config("hotword groups need at least one member".into()));
        }
        if !(0.0..=1.0).contains(&self.hotword_fraction) {
            return Err(Error::Config("hotword_fraction must lie in [0, 1]".into()));
        }
        if self.hotword_fraction > 0.0 && self.hotword_groups == 0 {
            return Err(Error::Config("hotword_fraction > 0 requires hotword groups".into()));
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return Err(Error::Config("need 1 <= min_words <= max_words".into()));
        }
        if self.frames_per_word == 0 || self.feature_dim == 0 || self.group_size == 0 {
            return Err(Error::Config("frames_per_word, feature_dim and group_size must be positive".into()));
        }
        Ok(())
    }
}

/// Words, their acoustic classes and the class templates.
#[derive(Clone, Debug)]
pub struct ToyLexicon {
    common: Vec<String>,
    hotword_groups: Vec<Vec<String>>,
    templates: Vec<Vec<f32>>,
    frames_per_word: usize,
    feature_dim: usize,
}

impl ToyLexicon {
    pub fn new(cfg: &ToyCorpusConfig) -> Result<Self> {
        cfg.validate()?;
        let common: Vec<String> = COMMON_WORDS[..cfg.common_words].iter().map(|s| s.to_string()).collect();
        let hotword_groups: Vec<Vec<String>> = (0..cfg.hotword_groups)
            .map(|g| {
                (0..cfg.hotwords_per_group)
                    .map(|m| HOTWORDS[g * cfg.hotwords_per_group + m].to_string())
                    .collect()
            })
            .collect();
        let classes = cfg.common_words + cfg.hotword_groups;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.lexicon_seed);
        let normal = Normal::new(0.0, cfg.template_std).expect("finite template std");
        let templates = (0..classes)
            .map(|_| {
                (0..cfg.frames_per_word * cfg.feature_dim)
                    .map(|_| normal.sample(&mut rng) as f32)
                    .collect()
            })
            .collect();
        Ok(Self {
            common,
            hotword_groups,
            templates,
            frames_per_word: cfg.frames_per_word,
            feature_dim: cfg.feature_dim,
        })
    }

    pub fn common_words(&self) -> &[String] {
        &self.common
    }

    pub fn hotword_groups(&self) -> &[Vec<String>] {
        &self.hotword_groups
    }

    pub fn hotwords(&self) -> impl Iterator<Item = &String> {
        self.hotword_groups.iter().flatten()
    }

    /// Every word, common words first.
    pub fn words(&self) -> Vec<String> {
        self.common.iter().chain(self.hotwords()).cloned().collect()
    }

    pub fn is_hotword(&self, word: &str) -> bool {
        self.hotwords().any(|h| h == word)
    }

    /// Acoustic class of `word`, if it belongs to the lexicon.
    pub fn class_of(&self, word: &str) -> Option<usize> {
        if let Some(i) = self.common.iter().position(|w| w == word) {
            return Some(i);
        }
        self.hotword_groups
            .iter()
            .position(|g| g.iter().any(|w| w == word))
            .map(|g| self.common.len() + g)
    }

    pub fn class_count(&self) -> usize {
        self.templates.len()
    }

    /// `frames_per_word × feature_dim` template of a class, row-major.
    pub fn template(&self, class: usize) -> &[f32] {
        &self.templates[class]
    }

    pub fn frames_per_word(&self) -> usize {
        self.frames_per_word
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }
}

fn sample_words(lex: &ToyLexicon, cfg: &ToyCorpusConfig, with_hotword: bool, rng: &mut ChaCha8Rng) -> Vec<String> {
    let n = rng.random_range(cfg.min_words..=cfg.max_words);
    let mut words: Vec<String> = Vec::with_capacity(n);
    for _ in 0..n {
        loop {
            let w = lex.common.choose(rng).expect("non-empty common words");
            if words.last() != Some(w) {
                words.push(w.clone());
                break;
            }
        }
    }
    if with_hotword {
        let group = lex.hotword_groups.choose(rng).expect("hotword groups exist");
        let h = group.choose(rng).expect("non-empty group");
        let pos = rng.random_range(0..n);
        words[pos] = h.clone();
    }
    words
}

fn render_features(lex: &ToyLexicon, cfg: &ToyCorpusConfig, words: &[String], rng: &mut ChaCha8Rng) -> FeatureMatrix {
    let noise = Normal::new(0.0, cfg.noise_std).expect("finite noise std");
    let frames = words.len() * cfg.frames_per_word;
    let mut data = Vec::with_capacity(frames * cfg.feature_dim);
    for w in words {
        let class = lex.class_of(w).expect("word from lexicon");
        for &v in lex.template(class) {
            data.push(v + noise.sample(rng) as f32);
        }
    }
    FeatureMatrix::new(frames, cfg.feature_dim, data, 10.0).expect("valid synthesized features")
}

/// Generates a manifest. Exactly `round(hotword_fraction · utterances)`
/// utterances contain a hotword; those carry a context bundle naming it.
pub fn synth_toy_corpus(cfg: &ToyCorpusConfig, seed: u64) -> Result<Manifest> {
    let lex = ToyLexicon::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_hot = (cfg.hotword_fraction * cfg.utterances as f64).round() as usize;
    let mut flags: Vec<bool> = (0..cfg.utterances).map(|i| i < n_hot).collect();
    flags.shuffle(&mut rng);
    let mut entries = Vec::with_capacity(cfg.utterances);
    for (i, &hot) in flags.iter().enumerate() {
        let words = sample_words(&lex, cfg, hot, &mut rng);
        let features = render_features(&lex, cfg, &words, &mut rng);
        let mut u = Utterance::new(format!("{}-{i:05}", cfg.id_prefix), features, words.join(" "));
        u.group_id = Some(format!("{}-g{:04}", cfg.id_prefix, i / cfg.group_size));
        if hot {
            let tagged: Vec<&String> = words.iter().filter(|w| lex.is_hotword(w)).collect();
            u.context = Some(ContextBundle::new(tagged, None));
        }
        entries.push(u);
    }
    Manifest::new(entries)
}
