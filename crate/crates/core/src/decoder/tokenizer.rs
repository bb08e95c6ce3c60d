//! Word-level tokenizer shared by the decoders and the prompt renderer.
//!
//! Text is split on whitespace and commas become standalone tokens, so the
//! rendered context prompt `a, b` tokenizes as `a` `,` `b`. Out-of-vocabulary
//! words map to `<unk>`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const AUDIO: &str = "<audio>";
pub const UNK: &str = "<unk>";

const SPECIALS: [&str; 5] = [PAD, BOS, EOS, AUDIO, UNK];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "Vec<String>", try_from = "Vec<String>")]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
}

impl Tokenizer {
    /// Specials first (`<pad>`=0, `<bos>`=1, `<eos>`=2, `<audio>`=3,
    /// `<unk>`=4), then `words` in order with duplicates dropped.
    pub fn new(words: impl IntoIterator<Item = impl AsRef<str>>) -> Result<Self> {
        let mut vocab: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> =
            vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        for w in words {
            let w = w.as_ref();
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::InvalidInput(format!("`{w}` is not a single token")));
            }
            if w.contains(',') && w != "," {
                return Err(Error::InvalidInput(format!("`{w}` embeds a comma")));
            }
            if !index.contains_key(w) {
                index.insert(w.to_owned(), vocab.len());
                vocab.push(w.to_owned());
            }
        }
        Ok(Self { vocab, index })
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn pad(&self) -> usize {
        0
    }

    pub fn bos(&self) -> usize {
        1
    }

    pub fn eos(&self) -> usize {
        2
    }

    pub fn audio(&self) -> usize {
        3
    }

    pub fn unk(&self) -> usize {
        4
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < SPECIALS.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.vocab.get(id).map(String::as_str)
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub(crate) fn pieces(text: &str) -> Vec<&str> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            let mut rest = word;
            while let Some(i) = rest.find(',') {
                if i > 0 {
                    out.push(&rest[..i]);
                }
                out.push(",");
                rest = &rest[i + 1..];
            }
            if !rest.is_empty() {
                out.push(rest);
            }
        }
        out
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        Self::pieces(text)
            .into_iter()
            .map(|p| self.id(p).unwrap_or(self.unk()))
            .collect()
    }

    /// Joins non-special tokens with single spaces; a comma attaches to
    /// the token before it.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if self.is_special(id) && id != self.unk() {
                continue;
            }
            let tok = self.token(id).unwrap_or(UNK);
            if tok == "," {
                out.push(',');
                continue;
            }
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(tok);
        }
        out
    }
}

impl From<Tokenizer> for Vec<String> {
    fn from(t: Tokenizer) -> Self {
        t.vocab
    }
}

impl TryFrom<Vec<String>> for Tokenizer {
    type Error = Error;

    fn try_from(v: Vec<String>) -> Result<Self> {
        if v.len() < SPECIALS.len() || v[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Checkpoint("vocabulary does not start with the special tokens".into()));
        }
        let t = Tokenizer::new(&v[SPECIALS.len()..])?;
        if t.vocab != v {
            return Err(Error::Checkpoint("vocabulary has duplicate entries".into()));
        }
        Ok(t)
    }
}
