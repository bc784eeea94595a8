//! Hierarchical relation-prediction scoring engine for open-vocabulary
//! scene graph generation.
//!
//! Entity categories are clustered into super entities, every
//! (super subject, predicate, super object) triplet gets an entity-aware
//! text prompt plus optional region-aware prompts, and relation proposals
//! are scored by blending their similarity to both.

pub mod clustering;
pub mod config;
pub mod corpus;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod inference;
pub mod losses;
pub mod miner;
pub mod presets;
pub mod prompts;
pub mod scorer;
pub mod selftest;
pub mod synth;

pub use clustering::{build_super_map, kmeans, KMeansParams, KMeansResult, PrePartition, SuperEntityMap};
pub use config::EngineConfig;
pub use embedding::{
    cosine, load_embeddings, save_embeddings, similarity_matrix, EmbeddingFormat, EmbeddingMatrix, ScoreTensor,
};
pub use error::{Error, Result};
pub use eval::{evaluate_corpus, EvalOptions, EvalReport, GroundTruthScene, Protocol};
pub use inference::{InferOptions, SceneGraphOut, ScoredTriplet};
pub use losses::{BBox, LossWeights};
pub use prompts::{index_hierarchy, PromptHierarchy, RegionDescriptionSet, Vocabulary};
pub use scorer::{score_batch, ProposalBatch, ScorerConfig};
