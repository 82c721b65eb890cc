//! HTTP front end. Predictions and simulations run as polled jobs on the
//! blocking pool; finished results live in the on-disk [`Store`].

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::{DefaultBodyLimit, Path as UrlPath, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use uavrel_core::dem::DemGrid;
use uavrel_core::hazard::analyze;
use uavrel_core::mde::ReliabilityMap;
use uavrel_core::monte_carlo::McConfig;
use uavrel_core::report::KeyValueReport;
use uavrel_core::scenario::{parse_scenario, synth_dem, Scenario, SynthDemSpec, TerrainKind};

use crate::commands::{predict_to_dir, simulate_to_dir, MAP_JSON, MC_SUMMARY_TXT, RELIABILITY_CSV, SUMMARY_TXT};
use crate::store::{result_id, ResultMeta, Store};

const MAX_BODY: usize = 256 * 1024 * 1024;
/// Cell size of the flat terrain used when a simulation names no DEM.
const FLAT_CELL: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Predict,
    Simulate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub kind: JobKind,
    pub state: JobState,
    /// Fraction of sample points or trials finished.
    pub progress: f64,
    pub result_id: Option<String>,
    pub error: Option<String>,
}

struct JobSlot {
    job: Job,
    done_units: Arc<AtomicUsize>,
    total_units: usize,
}

pub struct AppState {
    store: Store,
    jobs: Mutex<HashMap<String, JobSlot>>,
    next_job: AtomicU64,
}

impl AppState {
    pub fn new(store: Store) -> Arc<Self> {
        Arc::new(Self { store, jobs: Mutex::new(HashMap::new()), next_job: AtomicU64::new(1) })
    }

    fn new_job(&self, kind: JobKind, total_units: usize) -> (String, Arc<AtomicUsize>) {
        let id = format!("job-{}", self.next_job.fetch_add(1, Ordering::Relaxed));
        let done_units = Arc::new(AtomicUsize::new(0));
        let job = Job { id: id.clone(), kind, state: JobState::Queued, progress: 0.0, result_id: None, error: None };
        let slot = JobSlot { job, done_units: done_units.clone(), total_units: total_units.max(1) };
        self.jobs.lock().expect("job table").insert(id.clone(), slot);
        (id, done_units)
    }

    fn advance(&self, id: &str, state: JobState, result: Option<String>, error: Option<String>) {
        let mut jobs = self.jobs.lock().expect("job table");
        if let Some(slot) = jobs.get_mut(id) {
            // states only move forward
            if (slot.job.state as u8) < (state as u8) {
                slot.job.state = state;
            }
            if state == JobState::Done {
                slot.job.progress = 1.0;
                slot.job.result_id = result;
            }
            if error.is_some() {
                slot.job.error = error;
            }
        }
    }

    fn job(&self, id: &str) -> Option<Job> {
        let jobs = self.jobs.lock().expect("job table");
        jobs.get(id).map(|slot| {
            let mut job = slot.job.clone();
            if job.state == JobState::Running {
                let done = slot.done_units.load(Ordering::Relaxed).min(slot.total_units);
                job.progress = done as f64 / slot.total_units as f64;
            }
            job
        })
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("{what} {id} not found"))
    }

    fn invalid(err: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, format!("{err:#}"))
    }
}

impl From<anyhow::Error> for ApiError {
    fn from(e: anyhow::Error) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, format!("{e:#}"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn wants(headers: &HeaderMap, mime: &str) -> bool {
    headers.get(header::ACCEPT).and_then(|v| v.to_str().ok()).is_some_and(|v| v.contains(mime))
}

fn text(content_type: &'static str, body: String) -> Response {
    ([(header::CONTENT_TYPE, content_type)], body).into_response()
}

fn scenario_value(s: &Scenario) -> Value {
    serde_json::from_str(&s.to_json()).expect("scenario JSON is valid")
}

fn load_scenario(state: &AppState, id: &str) -> ApiResult<Scenario> {
    state.store.scenario(id)?.ok_or_else(|| ApiError::not_found("scenario", id))
}

fn load_dem(state: &AppState, id: &str) -> ApiResult<DemGrid> {
    state.store.dem(id)?.ok_or_else(|| ApiError::not_found("DEM", id))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/scenarios", post(create_scenario))
        .route("/api/scenarios/{id}", get(get_scenario).put(put_scenario))
        .route("/api/scenarios/{id}/sp_angles", put(put_sp_angles))
        .route("/api/dems", post(upload_dem))
        .route("/api/predict", post(start_predict))
        .route("/api/simulate", post(start_simulate))
        .route("/api/jobs/{id}", get(get_job))
        .route("/api/results/{id}", get(get_result))
        .route("/api/results/{id}/heatmap", get(get_heatmap))
        .route("/api/vote", post(vote))
        .layer(DefaultBodyLimit::max(MAX_BODY))
        .with_state(state)
}

pub async fn serve(bind: SocketAddr, store_root: &Path) -> anyhow::Result<()> {
    let state = AppState::new(Store::open(store_root)?);
    let listener = tokio::net::TcpListener::bind(bind).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}

async fn create_scenario(State(state): State<Arc<AppState>>, body: String) -> ApiResult<Response> {
    let scenario = parse_scenario(&body).map_err(ApiError::invalid)?;
    scenario.validate().map_err(ApiError::invalid)?;
    let id = state.store.create_scenario(&scenario)?;
    Ok((StatusCode::CREATED, Json(json!({ "id": id, "scenario": scenario_value(&scenario) }))).into_response())
}

async fn get_scenario(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let s = load_scenario(&state, &id)?;
    Ok(text("application/json", s.to_json()))
}

fn replace(state: &AppState, id: &str, scenario: &Scenario) -> ApiResult<Json<Value>> {
    scenario.validate().map_err(ApiError::invalid)?;
    if !state.store.replace_scenario(id, scenario)? {
        return Err(ApiError::not_found("scenario", id));
    }
    Ok(Json(json!({
        "id": id,
        "content_hash": scenario.content_hash(),
        "scenario": scenario_value(scenario),
    })))
}

async fn put_scenario(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: String,
) -> ApiResult<Json<Value>> {
    load_scenario(&state, &id)?;
    let scenario = parse_scenario(&body).map_err(ApiError::invalid)?;
    replace(&state, &id, &scenario)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpAngles {
    sp_angles_deg: Vec<f64>,
}

async fn put_sp_angles(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<SpAngles>,
) -> ApiResult<Json<Value>> {
    let mut scenario = load_scenario(&state, &id)?;
    scenario.sp_angles_deg = req.sp_angles_deg;
    replace(&state, &id, &scenario)
}

async fn upload_dem(State(state): State<Arc<AppState>>, body: String) -> ApiResult<Response> {
    let (id, grid) = state.store.put_dem(&body).map_err(ApiError::invalid)?;
    let hull = grid.hull();
    Ok((
        StatusCode::CREATED,
        Json(json!({
            "id": id,
            "rows": grid.n_rows(),
            "cols": grid.n_cols(),
            "cell_size": grid.cell_size(),
            "hull": [hull.min_x, hull.min_y, hull.max_x, hull.max_y],
        })),
    )
        .into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictRequest {
    scenario_id: String,
    dem_id: String,
}

fn meta(kind: &str, scenario: &Scenario, dem_id: Option<&str>) -> ResultMeta {
    ResultMeta {
        kind: kind.into(),
        scenario_hash: scenario.content_hash(),
        dem_id: dem_id.map(str::to_string),
        scenario: scenario_value(scenario),
    }
}

/// Runs `work` on the blocking pool unless the result already exists.
fn launch(
    state: Arc<AppState>,
    kind: JobKind,
    total_units: usize,
    rid: String,
    meta: ResultMeta,
    work: impl FnOnce(&Path, &AtomicUsize) -> anyhow::Result<()> + Send + 'static,
) -> Json<Value> {
    let (job_id, counter) = state.new_job(kind, total_units);
    let jid = job_id.clone();
    tokio::task::spawn_blocking(move || {
        state.advance(&jid, JobState::Running, None, None);
        let outcome = if state.store.has_result(&rid) {
            Ok(())
        } else {
            state.store.commit_result(&rid, &meta, |dir| work(dir, &counter))
        };
        match outcome {
            Ok(()) => state.advance(&jid, JobState::Done, Some(rid), None),
            Err(e) => {
                log::warn!("job {jid} failed: {e:#}");
                state.advance(&jid, JobState::Failed, None, Some(format!("{e:#}")));
            }
        }
    });
    Json(json!({ "job_id": job_id }))
}

async fn start_predict(State(state): State<Arc<AppState>>, Json(req): Json<PredictRequest>) -> ApiResult<Json<Value>> {
    let scenario = load_scenario(&state, &req.scenario_id)?;
    let dem = load_dem(&state, &req.dem_id)?;
    scenario.validate().map_err(ApiError::invalid)?;
    dem.check_extent(&scenario.required_extent(0.0)).map_err(ApiError::invalid)?;
    let rid = result_id("predict", &[&scenario.content_hash(), &req.dem_id]);
    let meta = meta("predict", &scenario, Some(&req.dem_id));
    let total = scenario.sample_grid().len();
    Ok(launch(state.clone(), JobKind::Predict, total, rid, meta, move |dir, counter| {
        predict_to_dir(&scenario, &dem, dir, Some(counter)).map(|_| ())
    }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateRequest {
    scenario_id: String,
    #[serde(default)]
    dem_id: Option<String>,
    #[serde(default)]
    mc_config: McConfig,
}

async fn start_simulate(
    State(state): State<Arc<AppState>>,
    Json(req): Json<SimulateRequest>,
) -> ApiResult<Json<Value>> {
    let scenario = load_scenario(&state, &req.scenario_id)?;
    scenario.validate().map_err(ApiError::invalid)?;
    req.mc_config.validate(scenario.num_sps()).map_err(ApiError::invalid)?;
    let dem = match &req.dem_id {
        Some(id) => load_dem(&state, id)?,
        None => synth_dem(&SynthDemSpec::for_scenario(TerrainKind::Flat { height: 0.0 }, &scenario, FLAT_CELL))
            .map_err(ApiError::invalid)?,
    };
    let config_json = serde_json::to_string(&req.mc_config).map_err(anyhow::Error::from)?;
    let dem_key = req.dem_id.clone().unwrap_or_else(|| "flat".into());
    let rid = result_id("simulate", &[&scenario.content_hash(), &dem_key, &config_json]);
    let meta = meta("simulate", &scenario, req.dem_id.as_deref());
    let config = req.mc_config;
    Ok(launch(state.clone(), JobKind::Simulate, 1, rid, meta, move |dir, _| {
        simulate_to_dir(&scenario, &dem, &config, dir).map(|_| ())
    }))
}

async fn get_job(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Job>> {
    state.job(&id).map(Json).ok_or_else(|| ApiError::not_found("job", &id))
}

fn result_meta(state: &AppState, id: &str) -> ApiResult<ResultMeta> {
    state.store.result_meta(id)?.ok_or_else(|| ApiError::not_found("result", id))
}

fn result_text(state: &AppState, id: &str, name: &str) -> ApiResult<String> {
    state.store.result_file(id, name)?.ok_or_else(|| ApiError::not_found("result file", name))
}

async fn get_result(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let meta = result_meta(&state, &id)?;
    let name = if meta.kind == "simulate" { MC_SUMMARY_TXT } else { SUMMARY_TXT };
    let summary = result_text(&state, &id, name)?;
    if wants(&headers, "text/plain") {
        return Ok(text("text/plain; charset=utf-8", summary));
    }
    let fields: serde_json::Map<String, Value> = KeyValueReport::parse(&summary)
        .entries()
        .iter()
        .map(|(k, v)| (k.clone(), Value::String(v.clone())))
        .collect();
    Ok(Json(json!({
        "id": id,
        "kind": meta.kind,
        "scenario_hash": meta.scenario_hash,
        "dem_id": meta.dem_id,
        "summary": fields,
    }))
    .into_response())
}

fn load_map(state: &AppState, id: &str) -> ApiResult<ReliabilityMap> {
    let meta = result_meta(state, id)?;
    if meta.kind != "predict" {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, format!("result {id} is not a prediction")));
    }
    ReliabilityMap::from_signed_json(&result_text(state, id, MAP_JSON)?).map_err(ApiError::invalid)
}

async fn get_heatmap(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    if wants(&headers, "application/json") {
        let map = load_map(&state, &id)?;
        return Ok(Json(map.points).into_response());
    }
    load_map(&state, &id)?;
    Ok(text("text/csv", result_text(&state, &id, RELIABILITY_CSV)?))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct VoteRequest {
    result_id: String,
}

async fn vote(State(state): State<Arc<AppState>>, Json(req): Json<VoteRequest>) -> ApiResult<Response> {
    let map = load_map(&state, &req.result_id)?;
    let meta = result_meta(&state, &req.result_id)?;
    let scenario = parse_scenario(&meta.scenario.to_string()).map_err(ApiError::invalid)?;
    let dem_id = meta.dem_id.ok_or_else(|| ApiError::invalid("result has no DEM"))?;
    let dem = load_dem(&state, &dem_id)?;
    let report = tokio::task::spawn_blocking(move || analyze(&scenario, &dem, &map))
        .await
        .map_err(|e| ApiError::from(anyhow::Error::from(e)))?
        .map_err(ApiError::invalid)?;
    Ok(Json(report).into_response())
}
