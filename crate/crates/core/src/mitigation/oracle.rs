use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthgen::{Dataset, LabeledSample, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Agree,
    Dispute,
}

/// Judges whether a sample's label is plausible.
pub trait DisputeOracle {
    fn judge(&self, sample: &LabeledSample) -> Result<Verdict>;
}

/// Disputes exactly the samples whose label differs from the rendered shape.
#[derive(Debug, Clone, Copy, Default)]
pub struct GroundTruthOracle;

impl DisputeOracle for GroundTruthOracle {
    fn judge(&self, sample: &LabeledSample) -> Result<Verdict> {
        Ok(if sample.label == sample.latents.shape.index() { Verdict::Agree } else { Verdict::Dispute })
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AlwaysAgree;

impl DisputeOracle for AlwaysAgree {
    fn judge(&self, _sample: &LabeledSample) -> Result<Verdict> {
        Ok(Verdict::Agree)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VqaClientConfig {
    /// Full URL receiving the POST.
    pub endpoint: String,
    /// `{class}` is replaced by the lower-case class name.
    #[serde(default = "default_question")]
    pub question_template: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Extra attempts after the first failure.
    #[serde(default = "default_retries")]
    pub retries: u32,
}

fn default_question() -> String {
    "Is this a {class}?".into()
}

fn default_timeout_ms() -> u64 {
    10_000
}

fn default_retries() -> u32 {
    2
}

impl VqaClientConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self { endpoint: endpoint.into(), question_template: default_question(), timeout_ms: default_timeout_ms(), retries: default_retries() }
    }
}

#[derive(Serialize)]
struct VqaRequest<'a> {
    image: String,
    question: &'a str,
}

#[derive(Deserialize)]
struct VqaResponse {
    answer: String,
}

/// Asks a remote visual question answering service about each image.
/// "yes" agrees with the label, "no" disputes it.
pub struct ExternalVqaClient {
    config: VqaClientConfig,
    agent: ureq::Agent,
}

impl ExternalVqaClient {
    pub fn new(config: VqaClientConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(true)
            .build()
            .into();
        Self { config, agent }
    }

    pub fn question_for(&self, label: usize) -> String {
        let class = Shape::from_index(label).map(|s| s.name().to_string()).unwrap_or_else(|_| format!("class {label}"));
        self.config.question_template.replace("{class}", &class)
    }

    fn ask_once(&self, body: &VqaRequest<'_>) -> std::result::Result<Verdict, String> {
        let mut resp = self.agent.post(&self.config.endpoint).send_json(body).map_err(|e| e.to_string())?;
        let parsed: VqaResponse = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        match parsed.answer.trim().to_ascii_lowercase().as_str() {
            "yes" => Ok(Verdict::Agree),
            "no" => Ok(Verdict::Dispute),
            other => Err(format!("unexpected answer {other:?}")),
        }
    }
}

impl DisputeOracle for ExternalVqaClient {
    fn judge(&self, sample: &LabeledSample) -> Result<Verdict> {
        let question = self.question_for(sample.label);
        let body = VqaRequest { image: base64::engine::general_purpose::STANDARD.encode(sample.image.to_png()), question: &question };
        let mut last = String::new();
        for _ in 0..=self.config.retries {
            match self.ask_once(&body) {
                Ok(v) => return Ok(v),
                Err(e) => last = e,
            }
        }
        Err(Error::Oracle { id: sample.id, reason: last })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisputeOutcome {
    pub kept: Vec<u64>,
    pub disputed: Vec<u64>,
}

/// Splits `ids` by oracle verdict, preserving input order.
pub fn dispute_labels(oracle: &dyn DisputeOracle, dataset: &Dataset, ids: &[u64]) -> Result<DisputeOutcome> {
    let index = dataset.index_by_id();
    let mut out = DisputeOutcome { kept: Vec::new(), disputed: Vec::new() };
    for &id in ids {
        let &i = index.get(&id).ok_or_else(|| Error::Oracle { id, reason: "unknown sample id".into() })?;
        match oracle.judge(&dataset.samples[i])? {
            Verdict::Agree => out.kept.push(id),
            Verdict::Dispute => out.disputed.push(id),
        }
    }
    Ok(out)
}
