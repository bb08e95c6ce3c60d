use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Characters that carry meaning in the rendered prompt and are therefore
/// removed from hotwords and summaries.
const RESERVED: [char; 3] = [',', '<', '>'];

/// Normalizes one context term: reserved characters dropped, whitespace
/// collapsed to single spaces, trimmed.
pub fn normalize_term(term: &str) -> String {
    let cleaned: String = term.chars().filter(|c| !RESERVED.contains(c)).collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Hotwords and/or a summary attached to an utterance.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextBundle {
    hotwords: Vec<String>,
    summary: Option<String>,
    distractor_count: usize,
}

impl ContextBundle {
    /// Normalizes and deduplicates `hotwords` (first occurrence wins) and
    /// normalizes the summary. An empty summary becomes `None`.
    pub fn new(hotwords: impl IntoIterator<Item = impl AsRef<str>>, summary: Option<&str>) -> Self {
        let mut out: Vec<String> = Vec::new();
        for h in hotwords {
            let n = normalize_term(h.as_ref());
            if !n.is_empty() && !out.contains(&n) {
                out.push(n);
            }
        }
        let summary = summary.map(normalize_term).filter(|s| !s.is_empty());
        Self {
            hotwords: out,
            summary,
            distractor_count: 0,
        }
    }

    pub fn with_distractor_count(mut self, count: usize) -> Result<Self> {
        if count > self.hotwords.len() {
            return Err(Error::InvalidInput(format!(
                "distractor count {count} exceeds {} hotwords",
                self.hotwords.len()
            )));
        }
        self.distractor_count = count;
        Ok(self)
    }

    pub fn hotwords(&self) -> &[String] {
        &self.hotwords
    }

    pub fn summary(&self) -> Option<&str> {
        self.summary.as_deref()
    }

    pub fn distractor_count(&self) -> usize {
        self.distractor_count
    }

    pub fn with_summary(mut self, summary: Option<&str>) -> Self {
        self.summary = summary.map(normalize_term).filter(|s| !s.is_empty());
        self
    }

    pub(crate) fn from_parts_unchecked(
        hotwords: Vec<String>,
        summary: Option<String>,
        distractor_count: usize,
    ) -> Self {
        Self {
            hotwords,
            summary,
            distractor_count,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.hotwords.is_empty() && self.summary.is_none()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hotwords_are_normalized_and_deduplicated() {
        let b = ContextBundle::new(["  alpha ", "beta", "alpha", "", "ga,mma", "<x>"], Some("  "));
        assert_eq!(b.hotwords(), ["alpha", "beta", "gamma", "x"]);
        assert_eq!(b.summary(), None);
    }

    #[test]
    fn distractor_count_is_bounded() {
        let b = ContextBundle::new(["a", "b"], None);
        assert!(b.clone().with_distractor_count(2).is_ok());
        assert!(b.with_distractor_count(3).is_err());
    }
}
