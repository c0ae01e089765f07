//! Corpus handling, prompt templates, summarization metrics, evaluation
//! statistics and Deauville-score scoring for report impression generation.

pub mod corpus;
pub mod deauville;
pub mod metrics;
pub mod prompt;
pub mod stats;
pub mod synth;
pub mod tokenizer;

pub use corpus::{CohortTag, CorpusSplit, Report};
pub use prompt::{Arch, FormattedExample, PromptMode, StyleTokenRegistry};
