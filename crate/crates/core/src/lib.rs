//! Continual generalized category discovery over feature vectors.
//!
//! The crate trains an MLP encoder with contrastive objectives, adapts it to
//! a stream of unlabeled sessions that mix known and novel classes, and
//! scores each session by k-means clustering accuracy under the optimal
//! cluster-to-class matching.

pub mod cluster_eval;
pub mod data;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod protocol;
pub mod report;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
