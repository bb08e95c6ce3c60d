//! Context generation: hotword extraction, summaries, distractors and
//! prompt rendering.

mod bundle;
mod client;
mod forge;
mod prompt;

pub use bundle::{normalize_term, ContextBundle};
pub use client::{with_retries, Attempt, ClientConfig, HttpClient, LlmClient, RetryPolicy};
pub use forge::{
    add_distractors, build_summary, extract_hotwords, extractive_summary, filter_terms, forge_manifest,
    offline_hotwords, DocumentFrequencies, Extraction, ForgeConfig, ForgeReport, Provenance, Summary,
};
pub use prompt::{
    render_prompt, PromptTemplate, HOTWORDS_CLOSE, HOTWORDS_OPEN, SUMMARY_CLOSE, SUMMARY_OPEN, TEMPLATE_ID,
};
