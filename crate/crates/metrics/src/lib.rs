//! Caption evaluation metrics.
//!
//! All metrics operate on a [`TokenizedCorpus`]: one candidate and at least
//! one reference per image, tokenized with [`tokenize`]. Metrics are exposed
//! both as free functions and behind the [`CaptionMetric`] trait so callers
//! can select them by name from a [`MetricRegistry`].

mod bleu;
mod cider;
mod corpus;
mod registry;
mod rouge;
mod tokenize;

pub use bleu::{bleu, BleuScores};
pub use cider::{cider_d, CiderScores, CiderStats, DEFAULT_SIGMA};
pub use corpus::{CorpusEntry, CorpusRecord, TokenizedCorpus};
pub use registry::{Bleu, CaptionMetric, CiderD, MetricRegistry, RougeL};
pub use rouge::{lcs_len, rouge_l, RougeScores, ROUGE_BETA};
pub use tokenize::{tokenize, TOKENIZER_VERSION};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("corpus has no images")]
    EmptyCorpus,
    #[error("image `{0}` has no references")]
    NoReferences(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// All contiguous n-grams of order `n`.
pub(crate) fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> impl Iterator<Item = Vec<&str>> {
    tokens
        .windows(n)
        .map(|w| w.iter().map(AsRef::as_ref).collect::<Vec<&str>>())
}
