//! Run store, stage orchestration, reports and the triage API around `mid-core`.

pub mod api;
pub mod config;
pub mod digest;
pub mod reports;
pub mod stages;
pub mod store;
pub mod sweep;

/// Store root used when `--store` is not given.
pub const ENV_STORE: &str = "MID_STORE";
/// Address the API server binds to.
pub const ENV_BIND: &str = "MID_BIND";
/// Endpoint of the external VQA oracle.
pub const ENV_ORACLE_URL: &str = "MID_ORACLE_URL";
