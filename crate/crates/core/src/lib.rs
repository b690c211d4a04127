//! Single-node semantic retrieval: chunk store, encoders, graph and IVFPQ
//! indexes, exact and MMR reranking, and the query pipeline tying them
//! together.

pub mod api;
pub mod bench;
pub mod corpus;
pub mod embed;
pub mod engine;
pub mod error;
pub mod graph;
pub mod ivfpq;
pub mod kmeans;
pub mod pipeline;
pub mod rerank;
pub mod synth;
pub mod vectors;

pub use error::{Error, Result};
pub use rerank::top_k;
