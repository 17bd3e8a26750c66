//! Core library for studying spurious correlations through mid-range logits.
//!
//! * [`synthgen`] renders sprite images and samples position-biased datasets.
//! * [`nncore`] trains the small CNN and exports embeddings and logits.
//! * [`analysis`] ranks logits, selects maximal and intercept windows,
//!   computes similarity matrices, clusters and projects embeddings.
//! * [`mitigation`] filters disputed labels, triages clusters, retrains the
//!   last layer with L1-regularized logistic regression and reports group
//!   metrics.
//! * [`midt`] is the binary tensor container used for every array on disk.

pub mod analysis;
pub mod error;
pub mod midt;
pub mod mitigation;
pub mod nncore;
pub mod synthgen;

pub use error::{Error, Result};
