//! Levenshtein alignment with unit costs.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Edit {
    Match { r: usize, h: usize },
    Sub { r: usize, h: usize },
    Del { r: usize },
    Ins { h: usize },
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    pub hits: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub pairs: Vec<Edit>,
}

impl Alignment {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

/// Minimal-cost alignment. Among equal-cost paths the backtrace prefers a
/// diagonal step (match or substitution), then a deletion, then an
/// insertion.
pub fn align<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Alignment {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut out = Alignment::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if d[(i - 1) * w + j - 1] + usize::from(!same) == here {
                i -= 1;
                j -= 1;
                if same {
                    out.hits += 1;
                    out.pairs.push(Edit::Match { r: i, h: j });
                } else {
                    out.substitutions += 1;
                    out.pairs.push(Edit::Sub { r: i, h: j });
                }
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            i -= 1;
            out.deletions += 1;
            out.pairs.push(Edit::Del { r: i });
        } else {
            j -= 1;
            out.insertions += 1;
            out.pairs.push(Edit::Ins { h: j });
        }
    }
    out.pairs.reverse();
    out
}
