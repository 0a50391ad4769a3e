//! Kernel-level merging of two convolutional backbones for transfer to a
//! small target task.
//!
//! The crate contains a small CPU CNN engine ([`nn`]), an architecture zoo
//! ([`zoo`]), the merge itself ([`merge`]) and the training, checkpoint and
//! data plumbing around it.

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod merge;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod zoo;

pub use checkpoint::{Checkpoint, Manifest, Stage};
pub use data::LabeledDataset;
pub use error::{Error, Result};
pub use merge::{MergePair, MergeWeights};
pub use metrics::MetricsReport;
pub use params::ParamTree;
pub use tensor::{AnyTensor, DType, Scalar, Tensor};
pub use zoo::{KernelAddress, ModelSpec};
