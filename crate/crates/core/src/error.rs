use thiserror::Error;

use crate::clustering::ClusterError;
use crate::config::ConfigError;
use crate::corpus::CorpusError;
use crate::embedding::EmbeddingError;
use crate::eval::EvalError;
use crate::losses::LossError;
use crate::miner::MinerError;
use crate::prompts::PromptError;
use crate::scorer::ScoreError;

/// Any error raised by the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Miner(#[from] MinerError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

impl Error {
    /// Stable machine-readable name of the underlying error.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Embedding(e) => e.kind(),
            Self::Cluster(e) => e.kind(),
            Self::Prompt(e) => e.kind(),
            Self::Miner(e) => e.kind(),
            Self::Score(e) => e.kind(),
            Self::Loss(e) => e.kind(),
            Self::Eval(e) => e.kind(),
            Self::Corpus(e) => e.kind(),
            Self::Config(_) => "InvalidConfig",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
