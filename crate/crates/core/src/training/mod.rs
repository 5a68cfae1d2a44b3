//! Models, datasets and the canonical hashing of training state.

mod data;
mod digest;
mod idx;
mod model;

pub use data::{
    dirichlet_partition, synth_dataset, DatasetSplits, LabeledDataset, PartitionPlan, SynthSpec,
};
pub use digest::{canonical_state_bytes, state_digest};
pub use idx::{load_idx, parse_idx};
pub use model::{
    evaluate_metric, local_update, utility, Activation, MetricId, MetricSpec, ModelSpec,
    ModelWeights, TrainingConfig,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainingError {
    #[error("shard is empty")]
    EmptyShard,
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error("state contains a non-finite value")]
    NonFiniteState,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("bad IDX magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { found: u32, expected: u32 },
    #[error("truncated IDX file: {0}")]
    TruncatedFile(String),
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
