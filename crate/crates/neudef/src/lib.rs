//! Kernel-pooling neural ranking with click-feedback document expansion.
//!
//! The crate implements a desk-scale learning-to-rank pipeline: corpus
//! ingestion, expansion-term harvesting from click logs, a kernel-pooling
//! ranker with an attention-weighted expansion field, pairwise hinge
//! training with finite-difference gradient verification, and an
//! evaluation / analysis toolkit. Everything is deterministic given a seed.
//!
//! Modules:
//! - [`corpus`]: vocabulary, documents, queries, click logs, split checks
//! - [`expansion`]: clicked-query sets, candidate expansion terms, overlap
//! - [`numeric`]: parameter tensors, Adam, gradient checking
//! - [`kernels`]: the RBF kernel-pooling scorer
//! - [`attention`]: the encoder layer and expansion-term weighting
//! - [`ranker`]: the joint scoring function and ranking
//! - [`training`]: pair generation, hinge loss, the epoch loop, checkpoints
//! - [`eval`]: metrics, significance testing, analyses, synthetic data
//! - [`config`] / [`pipeline`]: configuration and end-to-end commands

pub mod attention;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod expansion;
pub mod kernels;
pub mod numeric;
pub mod pipeline;
pub mod ranker;
pub mod training;

use std::path::Path;

/// Crate-wide error type.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {msg}")]
    Malformed {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub(crate) fn malformed(file: &Path, line: usize, msg: impl Into<String>) -> Self {
        Error::Malformed {
            file: file.display().to_string(),
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}

pub use attention::{ExpansionWeights, Variant};
pub use corpus::{ClickLog, ClickRecord, Corpus, Document, Query, QueryBucket, Split, Vocabulary};
pub use expansion::{ExpansionIndex, Overlap};
pub use kernels::KernelBank;
pub use numeric::{AdamState, ParamSet, ParamTensor};
pub use ranker::{NeuDefModel, ScoredDocument, ScoringContext};
pub use training::{TrainConfig, TrainingPair};
