//! Graph pre-training toolkit: personalized-PageRank sequence sampling, a
//! masked graph-transformer autoencoder with feature- and structure-
//! reconstruction objectives, decoder-reuse feature augmentation, and
//! downstream node-classification / link-prediction evaluation.

pub mod downstream;
pub mod error;
pub mod features;
pub mod graph;
pub mod model;
pub mod nn;
pub mod posenc;
pub mod ppr;
pub mod pretrain;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
pub use features::FeatureMatrix;
pub use graph::{Graph, NodeId};
pub use model::{CheckpointMeta, Model, ModelDims};
pub use ppr::{NodeSequence, PprConfig, PprVector};
pub use pretrain::PretrainConfig;
