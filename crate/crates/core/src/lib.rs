//! Knowledge-graph world state, set-of-sequences codec, metrics, corpus
//! ingestion and a synthetic world generator.

pub mod data;
pub mod kg;
pub mod metrics;
pub mod sos;
pub mod text;
pub mod worldgen;
