//! Scoring: text normalization, alignment, error rate, hotword recall,
//! hallucination flags and the with/without-context report.

mod align;
mod metrics;
mod report;
mod text;

pub use align::{align, Alignment, Edit};
pub use metrics::{
    count_occurrences, hallucination_flags, has_repetition, hotword_recall, mean_utterance_wer,
    pooled_errors, recall_counts, utterance_errors, utterance_recall, wer, ErrorCounts, Flag,
    HallucinationConfig, RecallCounts,
};
pub use report::{aggregate, round2, Condition, ConditionAverage, Delta, EvalReport, FlagCounts, SetRow};
pub use text::{is_cjk, normalize_and_tokenize, ScoringTokens};
