//! Semi-supervised image classification for data with fuzzy labels.
//!
//! Each network carries two families of heads on a shared backbone: normal
//! heads with one output per class, trained with cross-entropy on certain
//! labels, and overclustering heads with more outputs than classes, trained
//! with an inverse cross-entropy against examples of other classes. Both are
//! regularized by the mutual information between predictions on two
//! augmentations of the same image, which also lets unlabeled data take part.
//!
//! Modules follow the pipeline: [`data`] reads manifests and partitions
//! samples, [`synce`] generates a synthetic benchmark, [`sampler`] builds
//! training triples, [`losses`] and [`network`] define the objective and
//! the model, [`trainer`] runs the phases, [`evaluator`] scores checkpoints
//! and [`plot`] draws figures. [`cli`] ties them together.

pub mod cli;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod image;
pub mod losses;
pub mod network;
pub mod plot;
pub mod sampler;
pub mod seeding;
pub mod synce;
pub mod trainer;

pub use error::{Error, Result};
