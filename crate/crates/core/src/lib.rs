//! Relevance-based forensic feature analysis for CNN image classifiers.
//!
//! A model is a small DAG of convolutional layers loaded from a JSON manifest
//! plus a flat weight blob. Relevance is propagated back from the logit with
//! layer-wise rules, aggregated into per-feature-map scores, and used to
//! select, visualize and ablate the maps a detector depends on.

pub mod ablation;
pub mod error;
pub mod ffrs;
pub mod graph;
pub mod imageio;
pub mod lrp;
pub mod lrpmax;
pub mod report;
pub mod stats;
pub mod synthfix;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{FeatureMapId, ModelGraph};
pub use tensor::Tensor;
