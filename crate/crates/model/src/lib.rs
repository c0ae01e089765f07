//! Toy-scale transformers for findings-to-impression generation: training
//! with teacher forcing (full or LoRA), beam-search decoding, and
//! likelihood scoring for the generation-likelihood metrics.

pub mod config;
pub mod generate;
pub mod model;
pub mod params;
pub mod scorer;
pub mod train;

use std::path::{Path, PathBuf};

use impress_core::prompt::{Arch, PromptError};
use thiserror::Error;

pub use config::{Adaptation, DecodeConfig, LoraConfig, ModelConfig, TrainConfig};
pub use generate::{batch_generate, generate_impression, Generation};
pub use model::{Seq2SeqModel, VocabDelta};
pub use scorer::{adapt_scorer, AdaptConfig, ModelScorer, ModelTokenEncoder};
pub use train::{train, TrainRun};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("example {report_id:?} is {found:?} but the run is {expected:?}")]
    ExampleArch { report_id: String, expected: Arch, found: Arch },
    #[error("model is {found:?} but {expected:?} was requested")]
    ArchMismatch { expected: Arch, found: Arch },
    #[error("style token {0} is not in the model vocabulary; add the registry first")]
    MissingStyleToken(String),
    #[error("sequence of {len} tokens exceeds the model limit of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("training diverged at step {step} (non-finite loss); last good checkpoint: {last_good:?}")]
    Diverged { step: usize, last_good: Option<PathBuf> },
    #[error("no training examples")]
    NoExamples,
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl ModelError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        ModelError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
