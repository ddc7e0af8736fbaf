//! HTTP API over the job store.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use loosekey_core::{infill_linear, place_on_timeline, KeyframeSet, Motion, ObservationSignal, Skeleton};
use loosekey_model::longform::SpliceLayout;
use loosekey_model::{Denoiser, SamplerConfig};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::Semaphore;

use crate::config::RunConfig;
use crate::error::Error;
use crate::jobs::{JobKind, JobRecord, JobStore};
use crate::pipeline::{self, Selector};

pub const API_VERSION: u32 = 1;
/// Upper bound on samples per request.
pub const MAX_SAMPLES: usize = 64;

/// Shared server state. The network is loaded once and only read.
#[derive(Clone)]
pub struct AppState {
    pub config: Arc<RunConfig>,
    pub skeleton: Arc<Skeleton>,
    pub net: Option<Arc<Denoiser>>,
    pub checkpoint: Option<String>,
    pub checkpoint_hash: Option<String>,
    pub store: Arc<JobStore>,
    workers: Arc<Semaphore>,
}

impl AppState {
    pub fn new(config: RunConfig, net: Option<Denoiser>, checkpoint: Option<String>, checkpoint_hash: Option<String>, store: JobStore) -> Self {
        let workers = Arc::new(Semaphore::new(config.serve.workers.max(1)));
        AppState {
            skeleton: Arc::new(config.skeleton.skeleton()),
            config: Arc::new(config),
            net: net.map(Arc::new),
            checkpoint,
            checkpoint_hash,
            store: Arc::new(store),
            workers,
        }
    }
}

pub struct ApiError(pub Error);

impl<E: Into<Error>> From<E> for ApiError {
    fn from(e: E) -> Self {
        ApiError(e.into())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Busy(_) => StatusCode::CONFLICT,
            e if e.is_client_error() => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            tracing::error!(error = %self.0, "request failed");
        }
        (status, Json(self.0.to_json())).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/skeleton", get(skeleton))
        .route("/generate", post(generate))
        .route("/edit", post(edit))
        .route("/eval", post(eval))
        .route("/jobs", get(list_jobs))
        .route("/jobs/{id}", get(get_job))
        .route("/motions/{id}", get(get_motion))
        .route("/metrics/{id}", get(get_metrics))
        .with_state(state)
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, Error> {
    serde_json::from_slice(body).map_err(|e| Error::json("request body", e))
}

async fn health(State(s): State<AppState>) -> Json<Value> {
    Json(json!({
        "status": "ok",
        "version": API_VERSION,
        "checkpoint": s.checkpoint,
        "mode": s.net.as_ref().map(|n| n.config().mode.to_string()),
        "frames": s.net.as_ref().map(|n| n.config().frames),
        "config_hash": s.config.hash(),
    }))
}

async fn skeleton(State(s): State<AppState>) -> Json<Value> {
    let layout = s.config.layout();
    Json(json!({
        "version": API_VERSION,
        "skeleton": &*s.skeleton,
        "layout": layout,
        "dim": layout.dim(),
        "rest_positions": s.skeleton.rest_positions(),
    }))
}

struct SampleOptions {
    num_samples: usize,
    seed: u64,
    mode: Option<String>,
    imputation: Option<usize>,
    /// Forces an inline (true) or queued (false) answer.
    inline: Option<bool>,
}

fn one() -> usize {
    1
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateRequest {
    keyframes: Value,
    #[serde(rename = "F_total")]
    total: Option<usize>,
    #[serde(default = "one")]
    num_samples: usize,
    #[serde(default)]
    seed: u64,
    mode: Option<String>,
    #[serde(rename = "imputation_C")]
    imputation: Option<usize>,
    inline: Option<bool>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EditRequest {
    base_motion_id: String,
    #[serde(default)]
    keep_ranges: Vec<(usize, usize)>,
    keyframes: Option<Value>,
    #[serde(default = "one")]
    num_samples: usize,
    #[serde(default)]
    seed: u64,
    mode: Option<String>,
    #[serde(rename = "imputation_C")]
    imputation: Option<usize>,
    inline: Option<bool>,
}

/// What a generation job runs, validated up front.
enum Plan {
    Interp,
    Model(Arc<Denoiser>, SamplerConfig),
}

fn plan(s: &AppState, opts: &SampleOptions, frames: usize) -> Result<Plan, Error> {
    let mut problems = Vec::new();
    if opts.num_samples == 0 || opts.num_samples > MAX_SAMPLES {
        problems.push(format!("num_samples: must lie in [1, {MAX_SAMPLES}], got {}", opts.num_samples));
    }
    let selector = match &opts.mode {
        Some(m) => match m.parse::<Selector>() {
            Ok(sel) => Some(sel),
            Err(e) => {
                problems.push(format!("mode: {e}"));
                None
            }
        },
        None if s.net.is_some() => s.net.as_ref().map(|n| Selector::Model(n.config().mode)),
        None => Some(Selector::Interp),
    };
    let mut imputation = opts.imputation;
    let result = match (selector, &s.net) {
        (None, _) => None,
        (Some(Selector::Interp), _) => Some(Plan::Interp),
        (Some(Selector::GroundTruth), _) => {
            problems.push("mode: gt is only available for evaluation".into());
            None
        }
        (Some(sel), None) => {
            problems.push(format!("mode: {sel} needs a checkpoint and the server has none"));
            None
        }
        (Some(sel), Some(net)) => {
            let nc = net.config();
            match sel {
                Selector::Model(m) if m != nc.mode => {
                    problems.push(format!("mode: the loaded checkpoint is {}, got {m}", nc.mode));
                }
                Selector::Imp(Some(c)) => imputation = Some(c),
                Selector::Imp(None) if imputation.is_none() => {
                    problems.push("imputation_C: required for mode IMP".into());
                }
                _ => {}
            }
            if let Some(c) = imputation {
                if c > nc.diffusion_steps + 1 {
                    problems.push(format!("imputation_C: must lie in [0, {}], got {c}", nc.diffusion_steps + 1));
                }
            }
            if frames < nc.frames {
                problems.push(format!("F_total: must be at least the model window of {} frames, got {frames}", nc.frames));
            }
            Some(Plan::Model(
                net.clone(),
                SamplerConfig {
                    imputation,
                    seed: opts.seed,
                    num_samples: opts.num_samples,
                },
            ))
        }
    };
    if problems.is_empty() {
        Ok(result.expect("a plan exists when nothing failed"))
    } else {
        Err(Error::Request(problems))
    }
}

fn run_plan(plan: &Plan, obs: &ObservationSignal, num_samples: usize) -> Result<Vec<Motion>, Error> {
    match plan {
        Plan::Interp => Ok(vec![infill_linear(obs)?; num_samples]),
        Plan::Model(net, cfg) => pipeline::generate(net, obs, cfg),
    }
}

fn windows(plan: &Plan, frames: usize) -> usize {
    match plan {
        Plan::Interp => 0,
        Plan::Model(net, cfg) => {
            SpliceLayout::new(frames, net.config().frames).map_or(usize::MAX, |l| l.len()) * cfg.num_samples
        }
    }
}

fn finish_generate(s: &AppState, job: &str, motions: Vec<Motion>) -> Result<(JobRecord, Vec<Value>), Error> {
    let mut ids = Vec::new();
    let mut docs = Vec::new();
    for (i, m) in motions.iter().enumerate() {
        let id = s.store.save_motion(job, i, m, &s.skeleton)?;
        docs.push(json!({"id": id, "motion": s.store.motion_json(&id)?}));
        ids.push(id);
    }
    let first = ids.first().map(|id| format!("/motions/{id}")).unwrap_or_default();
    Ok((s.store.finish(job, first, ids)?, docs))
}

/// Runs `work` on the blocking pool under a worker permit, recording the
/// outcome on the job.
async fn execute<T: Send + 'static>(
    s: &AppState,
    job: &str,
    work: impl FnOnce() -> Result<T, Error> + Send + 'static,
) -> Result<T, Error> {
    let _permit = s.workers.clone().acquire_owned().await.map_err(|e| Error::Invalid(e.to_string()))?;
    s.store.start(job)?;
    let out = tokio::task::spawn_blocking(work)
        .await
        .unwrap_or_else(|e| Err(Error::Invalid(format!("worker panicked: {e}"))));
    if let Err(e) = &out {
        s.store.fail(job, e)?;
    }
    out
}

async fn submit(s: AppState, obs: ObservationSignal, opts: SampleOptions) -> ApiResult<Response> {
    let frames = obs.len();
    let plan = Arc::new(plan(&s, &opts, frames)?);
    let job = s.store.create(JobKind::Generate, opts.seed, s.config.serve.queue_depth)?;
    let inline = opts
        .inline
        .unwrap_or_else(|| windows(&plan, frames) <= s.config.serve.inline_max_windows);
    let n = opts.num_samples;
    tracing::info!(job = %job.id, frames, samples = n, seed = opts.seed, inline, "generate");
    let work = {
        let plan = plan.clone();
        move || run_plan(&plan, &obs, n)
    };
    if inline {
        let motions = execute(&s, &job.id, work).await?;
        let (record, docs) = finish_generate(&s, &job.id, motions)?;
        return Ok(Json(json!({
            "job_id": record.id,
            "status": record.status,
            "motions": docs,
        }))
        .into_response());
    }
    let id = job.id.clone();
    tokio::spawn(async move {
        if let Ok(motions) = execute(&s, &id, work).await {
            if let Err(e) = finish_generate(&s, &id, motions) {
                tracing::error!(job = %id, error = %e, "storing results failed");
                let _ = s.store.fail(&id, &e);
            }
        }
    });
    Ok((StatusCode::ACCEPTED, Json(json!({"job_id": job.id, "status": job.status}))).into_response())
}

async fn generate(State(s): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let req: GenerateRequest = parse_body(&body)?;
    let keyframes = KeyframeSet::from_json(req.keyframes, s.config.layout())?;
    let total = req.total.unwrap_or(keyframes.len());
    let obs = place_on_timeline(&keyframes, total)?;
    let opts = SampleOptions {
        num_samples: req.num_samples,
        seed: req.seed,
        mode: req.mode,
        imputation: req.imputation,
        inline: req.inline,
    };
    submit(s, obs, opts).await
}

async fn edit(State(s): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let req: EditRequest = parse_body(&body)?;
    let base = s.store.load_motion(&req.base_motion_id)?;
    let keyframes = req
        .keyframes
        .map(|v| KeyframeSet::from_json(v, s.config.layout()))
        .transpose()?;
    let obs = pipeline::edit_observation(&base, &req.keep_ranges, keyframes.as_ref())?;
    let opts = SampleOptions {
        num_samples: req.num_samples,
        seed: req.seed,
        mode: req.mode,
        imputation: req.imputation,
        inline: req.inline,
    };
    submit(s, obs, opts).await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalRequest {
    generator: Selector,
    #[serde(rename = "imputation_C")]
    imputation: Option<usize>,
    test_pairs: Option<usize>,
    num_samples: Option<usize>,
    seed: Option<u64>,
}

async fn eval(State(s): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let req: EvalRequest = parse_body(&body)?;
    let mut cfg = (*s.config).clone();
    if let Some(n) = req.test_pairs {
        cfg.eval.test_pairs = n;
    }
    if let Some(n) = req.num_samples {
        cfg.eval.num_samples = n;
    }
    if let Some(seed) = req.seed {
        cfg.eval.seed = seed;
    }
    cfg.validate()?;
    if cfg.eval.test_pairs == 0 {
        return Err(Error::Request(vec!["test_pairs: must be >= 1".into()]).into());
    }
    // Resolve once up front so bad selectors fail the request, not the job.
    pipeline::generator(req.generator, req.imputation, s.net.as_deref())?;
    let job = s.store.create(JobKind::Eval, cfg.eval.seed, s.config.serve.queue_depth)?;
    let id = job.id.clone();
    let state = s.clone();
    tokio::spawn(async move {
        let net = state.net.clone();
        let hash = state.checkpoint_hash.clone();
        let work = move || {
            let generator = pipeline::generator(req.generator, req.imputation, net.as_deref())?;
            let pairs = pipeline::test_pairs(&cfg)?;
            let ev = pipeline::run_eval(&cfg, &generator, &pairs)?;
            Ok(pipeline::report_doc(&cfg, &generator, hash, ev))
        };
        if let Ok(doc) = execute(&state, &id, work).await {
            let stored = state
                .store
                .save_report(&id, &doc)
                .and_then(|_| state.store.finish(&id, format!("/metrics/{id}"), vec![]));
            if let Err(e) = stored {
                let _ = state.store.fail(&id, &e);
            }
        }
    });
    Ok((StatusCode::ACCEPTED, Json(json!({"job_id": job.id, "status": job.status}))).into_response())
}

async fn list_jobs(State(s): State<AppState>) -> Json<Value> {
    Json(json!({"version": API_VERSION, "jobs": s.store.list()}))
}

async fn get_job(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<JobRecord>> {
    Ok(Json(s.store.get(&id)?))
}

async fn get_motion(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    Ok(Json(s.store.motion_json(&id)?))
}

async fn get_metrics(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let doc = s.store.load_report(&id)?;
    Ok(Json(serde_json::to_value(doc).map_err(|e| Error::json("report", e))?))
}

/// Serves until the process is stopped.
pub async fn serve(state: AppState, addr: &str) -> Result<(), Error> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::io(addr, e))?;
    let local = listener.local_addr().map_err(|e| Error::io(addr, e))?;
    tracing::info!(addr = %local, "listening");
    axum::serve(listener, router(state))
        .await
        .map_err(|e| Error::io(addr, e))
}
