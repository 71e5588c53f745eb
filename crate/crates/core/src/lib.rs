//! Interest-aware generative recommendation.
//!
//! Items are described by interests mined from their metadata, the interest
//! texts are embedded and discretized into hierarchical semantic IDs, and a
//! small autoregressive model learns to generate the next item's ID from a
//! user's history. Supervised training is followed by group-relative policy
//! optimization under an interest-aware reward.

pub mod corpus;
pub mod embed;
pub mod error;
pub mod eval;
pub mod genmodel;
pub mod io;
pub mod mining;
pub mod pipeline;
pub mod rl;
pub mod tokenizer;

pub use corpus::{Example, Interaction, ItemMeta, SplitDataset, UserSequence};
pub use embed::{cosine, Embedder, EmbeddingVector, LocalEmbedder};
pub use error::{Error, Result};
pub use eval::MetricsReport;
pub use genmodel::{GenModel, ModelConfig, TokenSequence, Vocab};
pub use mining::{AggregatedInterests, Interest, InterestSet};
pub use pipeline::{Arm, PipelineConfig, ProviderMode};
pub use rl::{ItemLabels, RewardKind, RewardStrategy, RlConfig};
pub use tokenizer::{Codebooks, Sid, SidTable, SidTrie};
