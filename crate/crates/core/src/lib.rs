//! Column schema matching: serialize columns, embed them, retrieve the top-k
//! target candidates per source column and optionally rerank them.

pub mod ablation;
pub mod augment;
pub mod bipartite;
pub mod embedding;
pub mod error;
pub mod finetune;
pub mod hashing;
pub mod llm;
pub mod llm_rerank;
pub mod metrics;
pub mod pipeline;
pub mod retrieval;
pub mod sampling;
pub mod serialize;
pub mod table;

pub use error::{Error, Result};
