//! Graph-based few-shot event filtering.
//!
//! Pipeline: fuse per-modality embeddings, build an ε-similarity graph over
//! the unlabeled pool, cluster it with Leiden, pick representatives per
//! cluster by centrality, and propagate the few collected labels with a
//! graph classifier trained over a KNN graph.

pub mod centrality;
pub mod community;
pub mod dataset;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod harness;
pub mod metrics;
pub mod neural;
pub mod pipeline;
pub mod propagation;
pub mod selection;

pub use error::{Error, Result};
