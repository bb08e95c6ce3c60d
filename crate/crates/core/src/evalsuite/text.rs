//! Scoring-unit normalization.
//!
//! Rules, applied in order:
//!
//! | input                                  | result                      |
//! |----------------------------------------|-----------------------------|
//! | any letter                             | lowercased                  |
//! | whitespace                             | unit boundary               |
//! | Han, kana or Hangul character          | one unit by itself          |
//! | other alphanumeric character           | joins the current word run  |
//! | anything else (punctuation, symbols)   | deleted, not a boundary     |
//!
//! So `"Hello, WORLD"` gives `hello world`, `"don't"` gives `dont` and
//! `"我爱ASR"` gives `我 爱 asr`.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoringTokens {
    pub units: Vec<String>,
    /// Characters deleted as punctuation or symbols.
    pub removed: usize,
}

impl ScoringTokens {
    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn joined(&self) -> String {
        self.units.join(" ")
    }
}

pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3040..=0x30FF      // hiragana, katakana
        | 0x3400..=0x4DBF    // CJK extension A
        | 0x4E00..=0x9FFF    // CJK unified ideographs
        | 0xAC00..=0xD7AF    // Hangul syllables
        | 0xF900..=0xFAFF    // CJK compatibility ideographs
        | 0x20000..=0x2FA1F) // CJK extensions B and later
}

pub fn normalize_and_tokenize(text: &str) -> ScoringTokens {
    let mut units = Vec::new();
    let mut word = String::new();
    let mut removed = 0;
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_whitespace() {
            if !word.is_empty() {
                units.push(std::mem::take(&mut word));
            }
        } else if is_cjk(c) {
            if !word.is_empty() {
                units.push(std::mem::take(&mut word));
            }
            units.push(c.to_string());
        } else if c.is_alphanumeric() {
            word.push(c);
        } else {
            removed += 1;
        }
    }
    if !word.is_empty() {
        units.push(word);
    }
    ScoringTokens { units, removed }
}
