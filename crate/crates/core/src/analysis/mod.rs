//! Embedding analysis: logit rankings, representational similarity, and
//! clustering.

mod kmeans;
mod pca;
mod ranking;
mod rsm;

pub use kmeans::*;
pub use pca::*;
pub use ranking::*;
pub use rsm::*;
