//! Algorithmic core for urban point-cloud semantic segmentation.
//!
//! Everything in this crate is deterministic and free of I/O: point-cloud
//! domain types and label remapping, an exact KD-tree, batch preprocessing,
//! a small trainable point-segmentation network with reverse-mode autodiff,
//! transfer-learning head remapping, label/geometry cleanup filters,
//! confusion-matrix metrics, and a synthetic urban scene generator.
//!
//! The crate is `no_std` (with `alloc`); file formats and the command-line
//! front end live in the companion `urbanseg` crate.

#![no_std]

extern crate alloc;

pub mod cloud;
pub mod error;
pub mod kdtree;
pub mod metrics;
pub mod network;
pub mod postprocess;
pub mod preprocess;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod transfer;

pub use cloud::{ClassMap, ClassSchema, PointCloud};
pub use error::{Error, Result};
pub use kdtree::{KdTree, NeighborGraph};
pub use metrics::{ConfusionMatrix, MetricsReport};
pub use network::{LayerConfig, ModelParams};
pub use preprocess::Batch;
