//! Mutual learning of place descriptors and per-grid view clusters.
//!
//! Images are grouped into `M`-meter UTM grid cells, each cell is split into
//! view clusters by K-means over learned descriptors, and the resulting
//! place labels supervise a large-margin cosine classifier. Training
//! alternates between fitting the encoder to the current labels and
//! re-clustering a fraction of cells with the improved descriptors.
//!
//! Modules, bottom-up:
//! - [`geogrid`]: grid-cell arithmetic and the positive radius test
//! - [`synthworld`]: procedural panoramic world and manifest ingestion
//! - [`diffcore`]: tensors, primitives with analytic gradients, Adam
//! - [`encoder`]: adapter-augmented transformer block, GeM, projection
//! - [`clusterer`]: K-means, place labels, purity, reassignment tracking
//! - [`lmcl`]: large-margin cosine classifier
//! - [`trainer`]: the alternating training loop
//! - [`retrieval`]: exact k-NN, Recall@K, inter-class distance analysis
//! - [`persist`], [`config`], [`commands`]: file formats and CLI plumbing

pub mod clusterer;
pub mod commands;
pub mod config;
pub mod diffcore;
pub mod encoder;
pub mod error;
pub mod geogrid;
pub mod lmcl;
pub mod persist;
pub mod retrieval;
pub mod synthworld;
pub mod trainer;

pub use error::{Error, Result};
