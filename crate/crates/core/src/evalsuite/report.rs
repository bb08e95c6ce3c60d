//! Per-set rows, condition averages and with/without-context deltas.
//!
//! Averages are unweighted means over sets of the per-set percentages,
//! rounded to two decimals. Relative deltas are computed from the unrounded
//! means and rounded to a whole percent: `(a − b) / a` for error rate,
//! `(b − a) / a` for recall, where `a` is the no-context baseline.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{ErrorCounts, RecallCounts};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    WithoutContext,
    WithContext,
    /// Context lists padded with hotwords absent from the audio.
    WithDistractors,
}

impl Condition {
    pub fn label(self) -> &'static str {
        match self {
            Condition::WithoutContext => "w/o context",
            Condition::WithContext => "w/ context",
            Condition::WithDistractors => "w/ context+distractors",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlagCounts {
    pub repetition: usize,
    pub length: usize,
    /// Utterances with at least one flag.
    pub flagged: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetRow {
    pub set: String,
    pub condition: Condition,
    pub utterances: usize,
    /// Percent, two decimals.
    pub wer: f64,
    /// Percent, two decimals; absent when no hotword occurs in the set.
    pub recall: Option<f64>,
    pub type_recall: Option<f64>,
    pub errors: ErrorCounts,
    pub recall_counts: RecallCounts,
    pub flags: FlagCounts,
}

pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

impl SetRow {
    pub fn from_counts(
        set: impl Into<String>,
        condition: Condition,
        utterances: usize,
        errors: ErrorCounts,
        recall_counts: RecallCounts,
        flags: FlagCounts,
    ) -> Result<Self> {
        let rate = errors
            .rate()
            .ok_or_else(|| Error::InvalidInput("set has no reference units".into()))?;
        Ok(Self {
            set: set.into(),
            condition,
            utterances,
            wer: round2(rate * 100.0),
            recall: recall_counts.rate().map(|r| round2(r * 100.0)),
            type_recall: recall_counts.type_rate().map(|r| round2(r * 100.0)),
            errors,
            recall_counts,
            flags,
        })
    }

    /// A row known only by its published percentages.
    pub fn from_rates(set: impl Into<String>, condition: Condition, wer: f64, recall: Option<f64>) -> Self {
        Self {
            set: set.into(),
            condition,
            utterances: 0,
            wer,
            recall,
            type_recall: None,
            errors: ErrorCounts::default(),
            recall_counts: RecallCounts::default(),
            flags: FlagCounts::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionAverage {
    pub condition: Condition,
    pub sets: usize,
    pub wer: f64,
    pub recall: Option<f64>,
    pub wer_unrounded: f64,
    pub recall_unrounded: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub baseline: Condition,
    pub treatment: Condition,
    /// Relative error-rate reduction, whole percent.
    pub wer_reduction_pct: Option<f64>,
    /// Relative recall improvement, whole percent.
    pub recall_gain_pct: Option<f64>,
    /// Absolute recall difference in points, two decimals.
    pub recall_gain_points: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<SetRow>,
    pub averages: Vec<ConditionAverage>,
    pub deltas: Vec<Delta>,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Line<'a> {
    Row(&'a SetRow),
    Average(&'a ConditionAverage),
    Delta(&'a Delta),
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Builds averages for each condition and deltas of every other condition
/// against [`Condition::WithoutContext`] when it is present.
pub fn aggregate(rows: Vec<SetRow>) -> Result<EvalReport> {
    if rows.is_empty() {
        return Err(Error::InvalidInput("no report rows".into()));
    }
    let conditions: BTreeSet<Condition> = rows.iter().map(|r| r.condition).collect();
    let mut reference_sets: Option<(Condition, Vec<&str>)> = None;
    for &c in &conditions {
        let mut sets: Vec<&str> = rows.iter().filter(|r| r.condition == c).map(|r| r.set.as_str()).collect();
        sets.sort_unstable();
        if sets.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidInput(format!("duplicate set under {}", c.label())));
        }
        match &reference_sets {
            None => reference_sets = Some((c, sets)),
            Some((c0, s0)) if *s0 != sets => {
                return Err(Error::InvalidInput(format!(
                    "set lists differ between {} ({s0:?}) and {} ({sets:?})",
                    c0.label(),
                    c.label()
                )));
            }
            Some(_) => {}
        }
    }
    let averages: Vec<ConditionAverage> = conditions
        .iter()
        .map(|&c| {
            let sel: Vec<&SetRow> = rows.iter().filter(|r| r.condition == c).collect();
            let wers: Vec<f64> = sel.iter().map(|r| r.wer).collect();
            let recalls: Option<Vec<f64>> = sel.iter().map(|r| r.recall).collect();
            let w = mean(&wers);
            let r = recalls.map(|v| mean(&v));
            ConditionAverage {
                condition: c,
                sets: sel.len(),
                wer: round2(w),
                recall: r.map(round2),
                wer_unrounded: w,
                recall_unrounded: r,
            }
        })
        .collect();
    let mut deltas = Vec::new();
    if let Some(base) = averages.iter().find(|a| a.condition == Condition::WithoutContext) {
        for t in averages.iter().filter(|a| a.condition != Condition::WithoutContext) {
            let a = base.wer_unrounded;
            let wer_reduction_pct = (a > 0.0).then(|| ((a - t.wer_unrounded) / a * 100.0).round());
            let (recall_gain_pct, recall_gain_points) = match (base.recall_unrounded, t.recall_unrounded) {
                (Some(a), Some(b)) => ((a > 0.0).then(|| ((b - a) / a * 100.0).round()), Some(round2(b - a))),
                _ => (None, None),
            };
            deltas.push(Delta {
                baseline: Condition::WithoutContext,
                treatment: t.condition,
                wer_reduction_pct,
                recall_gain_pct,
                recall_gain_points,
            });
        }
    }
    Ok(EvalReport { rows, averages, deltas })
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_owned(), |v| format!("{v:.2}"))
}

impl EvalReport {
    pub fn average(&self, c: Condition) -> Option<&ConditionAverage> {
        self.averages.iter().find(|a| a.condition == c)
    }

    pub fn delta(&self, treatment: Condition) -> Option<&Delta> {
        self.deltas.iter().find(|d| d.treatment == treatment)
    }

    /// One JSON object per line: rows, then averages, then deltas.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let lines = self
            .rows
            .iter()
            .map(Line::Row)
            .chain(self.averages.iter().map(Line::Average))
            .chain(self.deltas.iter().map(Line::Delta));
        for l in lines {
            out.push_str(&serde_json::to_string(&l).expect("report serializes"));
            out.push('\n');
        }
        out
    }

    /// Sets down the side, one WER/recall column pair per condition.
    pub fn to_table(&self) -> String {
        let conds: Vec<Condition> = self.averages.iter().map(|a| a.condition).collect();
        let mut sets: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !sets.contains(&r.set.as_str()) {
                sets.push(&r.set);
            }
        }
        let mut out = String::new();
        let _ = write!(out, "{:<16}", "set");
        for c in &conds {
            let _ = write!(out, " | {:>24} {:>8}", format!("{} WER", c.label()), "Recall");
        }
        out.push('\n');
        for s in &sets {
            let _ = write!(out, "{s:<16}");
            for c in &conds {
                let row = self.rows.iter().find(|r| r.set == *s && r.condition == *c);
                let (w, rc) = row.map_or((None, None), |r| (Some(r.wer), r.recall));
                let _ = write!(out, " | {:>24} {:>8}", opt(w), opt(rc));
            }
            out.push('\n');
        }
        let _ = write!(out, "{:<16}", "Average");
        for a in &self.averages {
            let _ = write!(out, " | {:>24} {:>8}", format!("{:.2}", a.wer), opt(a.recall));
        }
        out.push('\n');
        for d in &self.deltas {
            let pct = |x: Option<f64>| x.map_or_else(|| "-".to_owned(), |v| format!("{v:.0}%"));
            let _ = writeln!(
                out,
                "{} vs {}: WER reduced by {}, recall improved by {} ({} points)",
                d.treatment.label(),
                d.baseline.label(),
                pct(d.wer_reduction_pct),
                pct(d.recall_gain_pct),
                opt(d.recall_gain_points),
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Vec<SetRow> {
        let sets = ["a", "b", "c"];
        let without = [(8.82, 39.90), (4.60, 81.74), (3.68, 81.21)];
        let with = [(2.99, 88.08), (3.52, 95.33), (3.25, 86.39)];
        let mut rows = Vec::new();
        for (s, (w, r)) in sets.iter().zip(without) {
            rows.push(SetRow::from_rates(*s, Condition::WithoutContext, w, Some(r)));
        }
        for (s, (w, r)) in sets.iter().zip(with) {
            rows.push(SetRow::from_rates(*s, Condition::WithContext, w, Some(r)));
        }
        rows
    }

    #[test]
    fn identical_rows_give_zero_delta() {
        let rows = vec![
            SetRow::from_rates("x", Condition::WithoutContext, 5.0, Some(50.0)),
            SetRow::from_rates("x", Condition::WithContext, 5.0, Some(50.0)),
        ];
        let r = aggregate(rows).unwrap();
        assert_eq!(r.deltas[0].wer_reduction_pct, Some(0.0));
        assert_eq!(r.deltas[0].recall_gain_pct, Some(0.0));
    }

    #[test]
    fn mismatched_sets_are_rejected() {
        let mut rows = fixture();
        rows[0].set = "z".into();
        assert!(aggregate(rows).is_err());
        assert!(aggregate(Vec::new()).is_err());
    }

    #[test]
    fn jsonl_and_table_carry_both_conditions() {
        let r = aggregate(fixture()).unwrap();
        let jsonl = r.to_jsonl();
        assert_eq!(jsonl.lines().count(), 6 + 2 + 1);
        assert!(jsonl.lines().all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));
        let table = r.to_table();
        assert!(table.contains("w/o context WER") && table.contains("w/ context WER"));
        assert!(table.contains("WER reduced by 43%"));
    }
}
