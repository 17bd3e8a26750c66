//! Label-dispute filtering, cluster triage, L1 last-layer retraining and
//! group metrics.

mod logreg;
mod metrics;
mod oracle;
mod retrain;
mod triage;

pub use logreg::*;
pub use metrics::*;
pub use oracle::*;
pub use retrain::*;
pub use triage::*;
