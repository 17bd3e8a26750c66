use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use anyhow::anyhow;
use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use log::{info, warn};
use mid_core::analysis::{project_2d, ClusterComposition};
use mid_core::mitigation::{triage_from_entries, GroupMetricsReport, HeadlessTriage, TriageSource};
use mid_core::nncore::EmbeddingRecord;
use mid_core::synthgen::{render_sprite, Dataset, LatentPoint};
use serde::{Deserialize, Serialize};
use tokio::sync::mpsc;

use crate::config::{ExperimentConfig, TriagePolicy};
use crate::digest::sha256_hex;
use crate::stages::{files, ClusterArtifact, MidSummary, Pipeline, SELECTION_FILE, SELECTION_SOURCE_FILE};
use crate::store::{atomic_write, RunManifest, RunStore, StageState};

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn not_found(message: impl Into<String>) -> Self {
        Self { status: StatusCode::NOT_FOUND, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self { status: StatusCode::BAD_REQUEST, message: message.into() }
    }
}

impl From<anyhow::Error> for ApiError {
    fn from(e: anyhow::Error) -> Self {
        Self { status: StatusCode::INTERNAL_SERVER_ERROR, message: format!("{e:#}") }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Pending,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub job_id: String,
    pub run_id: String,
    pub state: JobState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<MidSummary>,
}

pub struct AppState {
    store: RunStore,
    cfg: ExperimentConfig,
    jobs: Mutex<HashMap<String, JobStatus>>,
    queues: Mutex<HashMap<String, mpsc::UnboundedSender<String>>>,
    next_job: AtomicU64,
    latents: Mutex<HashMap<String, (String, Arc<HashMap<u64, LatentPoint>>)>>,
}

impl AppState {
    /// `cfg` is used for runs whose manifest has no config snapshot.
    pub fn new(store: RunStore, cfg: ExperimentConfig) -> Arc<Self> {
        Arc::new(Self {
            store,
            cfg,
            jobs: Mutex::new(HashMap::new()),
            queues: Mutex::new(HashMap::new()),
            next_job: AtomicU64::new(1),
            latents: Mutex::new(HashMap::new()),
        })
    }

    fn manifest(&self, run_id: &str) -> ApiResult<RunManifest> {
        if !self.store.has_run(run_id) {
            return Err(ApiError::not_found(format!("unknown run {run_id}")));
        }
        Ok(self.store.load_manifest(run_id)?)
    }

    fn run_config(&self, m: &RunManifest) -> ExperimentConfig {
        m.config.clone().and_then(|v| serde_json::from_value(v).ok()).unwrap_or_else(|| self.cfg.clone())
    }

    fn clusters(&self, m: &RunManifest) -> ApiResult<ClusterArtifact> {
        if !m.is_done("cluster") {
            return Err(ApiError::not_found(format!("run {} has no clusters yet", m.run_id)));
        }
        Ok(self.store.read_json(m, "cluster", files::CLUSTERS)?)
    }

    fn embeddings(&self, m: &RunManifest) -> ApiResult<Vec<EmbeddingRecord>> {
        Ok(Pipeline::new(&self.store, &self.cfg).load_embeddings(m)?)
    }

    /// Latents by sample id from the run's training manifest, cached per
    /// file digest.
    fn latents(&self, m: &RunManifest) -> ApiResult<Arc<HashMap<u64, LatentPoint>>> {
        let digest = m
            .artifact_digest("data", files::TRAIN_DATA)
            .ok_or_else(|| ApiError::not_found(format!("run {} has no training data", m.run_id)))?
            .to_string();
        if let Some((d, map)) = self.latents.lock().expect("latents lock").get(&m.run_id) {
            if *d == digest {
                return Ok(map.clone());
            }
        }
        let bytes = self.store.read_verified(m, "data", files::TRAIN_DATA)?;
        let text = String::from_utf8(bytes).map_err(|_| anyhow!("training manifest is not UTF-8"))?;
        let mut map = HashMap::new();
        for r in Dataset::parse_manifest(&text).map_err(anyhow::Error::from)? {
            let lp = LatentPoint::new(r.shape, r.scale_idx, r.orientation_idx, r.pos_x_idx, r.pos_y_idx).map_err(anyhow::Error::from)?;
            map.insert(r.id, lp);
        }
        let map = Arc::new(map);
        self.latents.lock().expect("latents lock").insert(m.run_id.clone(), (digest, map.clone()));
        Ok(map)
    }

    fn set_job(&self, job_id: &str, update: impl FnOnce(&mut JobStatus)) {
        if let Some(j) = self.jobs.lock().expect("jobs lock").get_mut(job_id) {
            update(j);
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/runs", get(list_runs))
        .route("/api/runs/{id}/clusters", get(clusters))
        .route("/api/runs/{id}/clusters/{k}/samples", get(cluster_samples))
        .route("/api/images/{file}", get(image))
        .route("/api/runs/{id}/selection", get(get_selection).post(post_selection))
        .route("/api/runs/{id}/retrain", post(post_retrain))
        .route("/api/jobs/{job_id}", get(get_job))
        .route("/api/runs/{id}/metrics", get(metrics))
        .route("/api/runs/{id}/projection", get(projection))
        .with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(state: Arc<AppState>, addr: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::from(anyhow!("worker panicked: {e}")))?
}

#[derive(Serialize)]
struct RunSummary {
    run_id: String,
    bias: Option<f64>,
    seed: Option<u64>,
    stages: HashMap<String, StageState>,
}

async fn list_runs(State(st): State<Arc<AppState>>) -> ApiResult<Json<Vec<RunSummary>>> {
    blocking(move || {
        let mut out = Vec::new();
        for id in st.store.list_runs()? {
            let m = st.store.load_manifest(&id)?;
            out.push(RunSummary {
                run_id: id,
                bias: m.bias,
                seed: m.seed,
                stages: m.stages.iter().map(|(k, v)| (k.clone(), v.state)).collect(),
            });
        }
        Ok(Json(out))
    })
    .await
}

#[derive(Serialize)]
struct ClusterSummary {
    cluster: usize,
    size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    composition: Option<ClusterComposition>,
}

#[derive(Serialize)]
struct ClustersResponse {
    run_id: String,
    k: usize,
    n_samples: usize,
    clusters: Vec<ClusterSummary>,
}

async fn clusters(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<ClustersResponse>> {
    blocking(move || {
        let m = st.manifest(&id)?;
        let c = st.clusters(&m)?;
        let sizes = c.sizes();
        let clusters = (0..c.k)
            .map(|i| ClusterSummary { cluster: i, size: sizes[i], composition: c.composition.as_ref().and_then(|v| v.get(i).cloned()) })
            .collect();
        Ok(Json(ClustersResponse { run_id: id, k: c.k, n_samples: c.assignments.len(), clusters }))
    })
    .await
}

#[derive(Deserialize)]
struct SamplesQuery {
    limit: Option<usize>,
    #[serde(default)]
    offset: usize,
}

#[derive(Serialize)]
struct SampleView {
    id: u64,
    label: usize,
    logits: Vec<f32>,
    image: String,
}

#[derive(Serialize)]
struct SamplesResponse {
    cluster: usize,
    total: usize,
    offset: usize,
    samples: Vec<SampleView>,
}

async fn cluster_samples(
    State(st): State<Arc<AppState>>,
    Path((id, k)): Path<(String, usize)>,
    Query(q): Query<SamplesQuery>,
) -> ApiResult<Json<SamplesResponse>> {
    blocking(move || {
        let m = st.manifest(&id)?;
        let c = st.clusters(&m)?;
        if k >= c.k {
            return Err(ApiError::not_found(format!("run {id} has no cluster {k}")));
        }
        let members = c.members(k);
        let records = st.embeddings(&m)?;
        let by_id: HashMap<u64, &EmbeddingRecord> = records.iter().map(|r| (r.sample_id, r)).collect();
        let latents = st.latents(&m)?;
        let samples = members
            .iter()
            .skip(q.offset)
            .take(q.limit.unwrap_or(50))
            .map(|sid| {
                let r = by_id.get(sid).ok_or_else(|| anyhow!("no embedding for sample {sid}"))?;
                let lp = latents.get(sid).ok_or_else(|| anyhow!("no latents for sample {sid}"))?;
                Ok(SampleView { id: *sid, label: lp.shape.index(), logits: r.logits.clone(), image: format!("/api/images/{sid}.png?run={id}") })
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        Ok(Json(SamplesResponse { cluster: k, total: members.len(), offset: q.offset, samples }))
    })
    .await
}

#[derive(Deserialize)]
struct ImageQuery {
    run: Option<String>,
}

async fn image(State(st): State<Arc<AppState>>, Path(file): Path<String>, Query(q): Query<ImageQuery>) -> ApiResult<Response> {
    let sid: u64 = file
        .strip_suffix(".png")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| ApiError::not_found(format!("no image {file}")))?;
    blocking(move || {
        let run = match q.run {
            Some(r) => r,
            None => st.store.list_runs()?.into_iter().next().ok_or_else(|| ApiError::not_found("store has no runs"))?,
        };
        let m = st.manifest(&run)?;
        let latents = st.latents(&m)?;
        let lp = latents.get(&sid).ok_or_else(|| ApiError::not_found(format!("run {run} has no sample {sid}")))?;
        let png = render_sprite(lp).to_png();
        Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
    })
    .await
}

async fn get_selection(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    blocking(move || {
        st.manifest(&id)?;
        let path = st.store.artifact_path(&id, SELECTION_FILE);
        let bytes = std::fs::read(&path).map_err(|_| ApiError::not_found(format!("run {id} has no selection")))?;
        Ok(([(header::CONTENT_TYPE, "application/json")], bytes).into_response())
    })
    .await
}

/// Stores the body verbatim after checking it tags every cluster exactly once.
async fn post_selection(State(st): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<StatusCode> {
    blocking(move || {
        let m = st.manifest(&id)?;
        let c = st.clusters(&m)?;
        let h: HeadlessTriage = serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("invalid selection: {e}")))?;
        if h.run_id != id {
            return Err(ApiError::bad_request(format!("selection is for run {}, not {id}", h.run_id)));
        }
        triage_from_entries(&h.decisions, c.k, TriageSource::Interactive).map_err(|e| ApiError::bad_request(e.to_string()))?;
        atomic_write(&st.store.artifact_path(&id, SELECTION_FILE), &body)?;
        atomic_write(&st.store.artifact_path(&id, SELECTION_SOURCE_FILE), b"interactive\n")?;
        info!("{id}: selection saved ({})", sha256_hex(&body));
        Ok(StatusCode::NO_CONTENT)
    })
    .await
}

fn run_retrain_job(st: &AppState, run_id: &str) -> anyhow::Result<MidSummary> {
    let m = st.store.load_manifest(run_id)?;
    let mut cfg = st.run_config(&m);
    cfg.triage.policy = TriagePolicy::Manual;
    let p = Pipeline::new(&st.store, &cfg);
    p.stage_triage(run_id)?;
    p.stage_retrain(run_id)?;
    p.stage_metrics(run_id)?;
    let m = st.store.load_manifest(run_id)?;
    st.store.read_json(&m, "metrics", files::SUMMARY)
}

/// Worker draining one run's queue in arrival order.
async fn run_queue(st: Arc<AppState>, run_id: String, mut rx: mpsc::UnboundedReceiver<String>) {
    while let Some(job_id) = rx.recv().await {
        st.set_job(&job_id, |j| j.state = JobState::Running);
        let (s, r) = (st.clone(), run_id.clone());
        let result = tokio::task::spawn_blocking(move || run_retrain_job(&s, &r)).await;
        let result = result.map_err(|e| anyhow!("job panicked: {e}")).and_then(|r| r);
        match result {
            Ok(summary) => st.set_job(&job_id, |j| {
                j.state = JobState::Done;
                j.summary = Some(summary);
            }),
            Err(e) => {
                warn!("{run_id}: job {job_id} failed: {e:#}");
                st.set_job(&job_id, |j| {
                    j.state = JobState::Failed;
                    j.error = Some(format!("{e:#}"));
                })
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
pub struct JobCreated {
    pub job_id: String,
}

async fn post_retrain(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<(StatusCode, Json<JobCreated>)> {
    let s = st.clone();
    let rid = id.clone();
    blocking(move || {
        let m = s.manifest(&rid)?;
        s.clusters(&m)?;
        if !s.store.artifact_path(&rid, SELECTION_FILE).is_file() {
            return Err(ApiError::bad_request(format!("run {rid} has no saved selection")));
        }
        Ok(())
    })
    .await?;
    let job_id = format!("job-{}", st.next_job.fetch_add(1, Ordering::SeqCst));
    st.jobs
        .lock()
        .expect("jobs lock")
        .insert(job_id.clone(), JobStatus { job_id: job_id.clone(), run_id: id.clone(), state: JobState::Pending, error: None, summary: None });
    let mut queues = st.queues.lock().expect("queues lock");
    let tx = queues.entry(id.clone()).or_insert_with(|| {
        let (tx, rx) = mpsc::unbounded_channel();
        tokio::spawn(run_queue(st.clone(), id.clone(), rx));
        tx
    });
    tx.send(job_id.clone()).map_err(|_| anyhow!("job queue for run {id} is closed"))?;
    Ok((StatusCode::ACCEPTED, Json(JobCreated { job_id })))
}

async fn get_job(State(st): State<Arc<AppState>>, Path(job_id): Path<String>) -> ApiResult<Json<JobStatus>> {
    st.jobs.lock().expect("jobs lock").get(&job_id).cloned().map(Json).ok_or_else(|| ApiError::not_found(format!("unknown job {job_id}")))
}

#[derive(Serialize, Deserialize)]
pub struct MetricsResponse {
    pub before: Option<GroupMetricsReport>,
    pub after: Option<GroupMetricsReport>,
    pub summary: Option<MidSummary>,
}

async fn metrics(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<MetricsResponse>> {
    blocking(move || {
        let m = st.manifest(&id)?;
        let before = if m.is_done("eval") { Some(st.store.read_json(&m, "eval", files::REPORT_BEFORE)?) } else { None };
        let (after, summary) = if m.is_done("metrics") {
            (Some(st.store.read_json(&m, "metrics", files::REPORT_AFTER)?), Some(st.store.read_json(&m, "metrics", files::SUMMARY)?))
        } else {
            (None, None)
        };
        Ok(Json(MetricsResponse { before, after, summary }))
    })
    .await
}

#[derive(Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub id: u64,
    pub cluster: usize,
    pub x: f64,
    pub y: f64,
}

/// PCA of the clustered embeddings onto two components.
async fn projection(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Vec<ProjectedPoint>>> {
    blocking(move || {
        let m = st.manifest(&id)?;
        let c = st.clusters(&m)?;
        let records = st.embeddings(&m)?;
        let by_id: HashMap<u64, &EmbeddingRecord> = records.iter().map(|r| (r.sample_id, r)).collect();
        let emb = c
            .assignments
            .iter()
            .map(|a| by_id.get(&a.id).map(|r| r.embedding.as_slice()).ok_or_else(|| anyhow!("no embedding for sample {}", a.id)))
            .collect::<anyhow::Result<Vec<&[f32]>>>()?;
        let xy = project_2d(&emb).map_err(anyhow::Error::from)?;
        Ok(Json(c.assignments.iter().zip(xy).map(|(a, [x, y])| ProjectedPoint { id: a.id, cluster: a.cluster, x, y }).collect()))
    })
    .await
}
