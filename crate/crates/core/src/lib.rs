//! Knowledge-graph completion with entities and relations as single tokens.
//!
//! Each entity and relation token is embedded from a textual and a
//! structural feature row through a relation-guided gate, a small decoder
//! produces the last hidden state, and two prediction heads score every
//! entity against frozen feature matrices plus low-rank corrections.

pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod evaluator;
pub mod feature_bank;
pub mod gradcheck;
pub mod kg_store;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod predictor;
pub mod specialized_embedding;
pub mod struct_embedder;
pub mod synthetic;
pub mod trainer;

pub use backbone::{PromptMode, TransformerConfig, Vocabulary};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use error::{KgtError, Result};
pub use evaluator::{evaluate, filtered_rank, Metrics, RankReport, RankSummary};
pub use feature_bank::{FeatureBank, FeatureMatrix};
pub use kg_store::{
    load_dataset, DatasetLayout, EntityId, FilterIndex, FilterPolicy, KnowledgeGraph, RelationId, Split, Triple,
};
pub use model::{AblationSetting, KgtModel, ModelConfig};
pub use predictor::ScalerMode;
pub use struct_embedder::{train_kge, KgeConfig, KgeKind, KgeModel};
pub use trainer::{train, TrainConfig, TrainLog};
