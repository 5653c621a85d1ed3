//! Semi-asynchronous federated graph learning.
//!
//! Clients hold induced subgraphs of a global graph and train a two-layer GCN.
//! The server clusters clients by the cosine similarity of their soft-label
//! feature matrices, aggregates personalized models weighted by local
//! smoothness confidence and staleness, and pushes each cluster model to
//! similar clients that did not upload. Synchronous, buffered and fully
//! asynchronous baselines share the same simulator.

pub mod config;
pub mod error;
pub mod experiment;
pub mod fgl;
pub mod gcn;
pub mod graph;
pub mod matrix;
pub mod partition;
pub mod protocol;
pub mod rng;
pub mod sim;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
