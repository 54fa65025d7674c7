//! HTTP routes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path as UrlPath, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use trapkit::backends::{Classifier, Detector};
use trapkit::evalboard::{EvalError, FeedbackSubmission, Leaderboard};
use trapkit::export::{annotate, MdDocument, RenderConfig};
use trapkit::pipeline::{run_image, PipelineConfig, PipelineResult};

use crate::config::Settings;
use crate::jobs::{JobError, JobKind, JobManager};
use crate::ops::{self, ModelError, ModelRegistry};

pub const OPERATOR_TOKEN_HEADER: &str = "x-operator-token";

pub struct AppState {
    pub settings: Settings,
    pub models: ModelRegistry,
    pub jobs: JobManager,
    pub board: Leaderboard,
}

impl AppState {
    pub fn new(settings: Settings) -> anyhow::Result<Self> {
        let models = ModelRegistry::open(&settings.model_dir)?;
        let board = Leaderboard::open(&settings.leaderboard_dir(), settings.operator_token.clone())?;
        for m in models.list()? {
            board.register_model(&m.model_id);
        }
        std::fs::create_dir_all(settings.upload_dir())?;
        let jobs = JobManager::new(settings.job_workers, settings.queue_capacity);
        Ok(Self { settings, models, jobs, board })
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "malformed_request", message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: ErrorDetail<'a>,
}

#[derive(Serialize)]
struct ErrorDetail<'a> {
    code: &'a str,
    message: &'a str,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody { error: ErrorDetail { code: self.code, message: &self.message } };
        (self.status, Json(body)).into_response()
    }
}

impl From<ModelError> for ApiError {
    fn from(e: ModelError) -> Self {
        let status = match e {
            ModelError::Unknown(_) => StatusCode::NOT_FOUND,
            ModelError::NotLoaded { .. } => StatusCode::SERVICE_UNAVAILABLE,
            ModelError::WrongTask { .. } => StatusCode::BAD_REQUEST,
        };
        let code = match e {
            ModelError::Unknown(_) => "unknown_model",
            ModelError::NotLoaded { .. } => "backend_not_loaded",
            ModelError::WrongTask { .. } => "wrong_model_task",
        };
        Self::new(status, code, e.to_string())
    }
}

impl From<JobError> for ApiError {
    fn from(e: JobError) -> Self {
        let (status, code) = match e {
            JobError::UnknownJob(_) => (StatusCode::NOT_FOUND, "unknown_job"),
            JobError::QueueFull(_) => (StatusCode::SERVICE_UNAVAILABLE, "queue_full"),
            JobError::NotFinished { .. } => (StatusCode::CONFLICT, "job_not_finished"),
            JobError::Failed { .. } => (StatusCode::CONFLICT, "job_failed"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl From<EvalError> for ApiError {
    fn from(e: EvalError) -> Self {
        let (status, code) = match e {
            EvalError::UnknownTestSet(_) => (StatusCode::NOT_FOUND, "unknown_test_set"),
            EvalError::UnknownModel(_) => (StatusCode::NOT_FOUND, "unknown_model"),
            EvalError::MalformedSubmission(_) => (StatusCode::BAD_REQUEST, "malformed_submission"),
            EvalError::InvalidRating(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_rating"),
            EvalError::InvalidRecord(_) | EvalError::InvalidTestSet(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_record"),
            EvalError::Io { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self::new(status, code, e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;
type Shared = Arc<AppState>;

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> ApiResult<T> {
    payload.map(|Json(v)| v).map_err(|e| ApiError::bad_request(e.body_text()))
}

fn check_threshold(name: &str, v: f64) -> ApiResult<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_threshold", format!("{name} {v} is outside [0, 1]")))
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(e.to_string()))?
}

/// Per-request overrides of the pipeline settings.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub detector_id: Option<String>,
    pub classifier_id: Option<String>,
    pub det_threshold: Option<f64>,
    pub clf_threshold: Option<f64>,
    pub crop_size_px: Option<u32>,
    pub workers: Option<usize>,
    pub target_fps: Option<f64>,
}

struct Resolved {
    detector: Arc<dyn Detector>,
    classifier: Option<Arc<dyn Classifier>>,
    pipeline: PipelineConfig,
    target_fps: f64,
}

fn resolve(state: &AppState, rc: &RunConfig) -> ApiResult<Resolved> {
    let s = &state.settings;
    let mut pipeline = s.pipeline();
    if let Some(v) = rc.det_threshold {
        check_threshold("det_threshold", v)?;
        pipeline.det_threshold = v;
    }
    if let Some(v) = rc.clf_threshold {
        check_threshold("clf_threshold", v)?;
        pipeline.clf_threshold = v;
    }
    if let Some(v) = rc.crop_size_px {
        pipeline.crop_size_px = v;
    }
    if let Some(v) = rc.workers {
        pipeline.workers = v;
    }
    pipeline.validate().map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_config", e.to_string()))?;
    let target_fps = rc.target_fps.unwrap_or(s.target_fps);
    if !(target_fps > 0.0 && target_fps.is_finite()) {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_config", format!("target_fps {target_fps}")));
    }
    let detector = state.models.detector(rc.detector_id.as_deref().unwrap_or(&s.detector_id))?;
    let classifier = match rc.classifier_id.as_deref().or(s.classifier_id.as_deref()) {
        Some(id) => Some(state.models.classifier(id)?),
        None => None,
    };
    Ok(Resolved { detector, classifier, pipeline, target_fps })
}

pub fn router(state: Shared) -> Router {
    let image_limit = (state.settings.max_image_upload_mb as usize).saturating_mul(1 << 20);
    let video_limit = (state.settings.max_video_upload_mb as usize).saturating_mul(1 << 20);
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/models", get(list_models))
        .route("/models/{model_id}/rating", get(model_rating))
        .route("/detect", post(detect).layer(DefaultBodyLimit::max(image_limit)))
        .route("/jobs/batch", post(submit_batch))
        .route("/jobs/video", post(submit_video).layer(DefaultBodyLimit::max(video_limit)))
        .route("/jobs/{id}", get(get_job))
        .route("/jobs/{id}/result", get(job_result))
        .route("/triage", post(triage).layer(DefaultBodyLimit::max(image_limit)))
        .route("/test_sets", get(list_test_sets))
        .route("/leaderboard/{test_set_id}", get(leaderboard))
        .route("/leaderboard/{test_set_id}/submissions", post(submit_scores).layer(DefaultBodyLimit::max(image_limit)))
        .route("/feedback", post(feedback))
        .with_state(state)
}

async fn list_models(State(state): State<Shared>) -> ApiResult<Response> {
    let models = state.models.list().map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(Json(models).into_response())
}

async fn model_rating(State(state): State<Shared>, UrlPath(model_id): UrlPath<String>) -> ApiResult<Response> {
    if !state.board.has_model(&model_id) {
        return Err(EvalError::UnknownModel(model_id).into());
    }
    Ok(Json(state.board.rating_summary(&model_id)).into_response())
}

#[derive(Serialize)]
struct DetectResponse {
    result: PipelineResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    annotated_png_base64: Option<String>,
}

fn upload_extension(name: &str) -> ApiResult<String> {
    let ext = Path::new(name).extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).unwrap_or_default();
    match ext.as_str() {
        "png" | "jpg" | "jpeg" => Ok(ext),
        _ => Err(ApiError::bad_request(format!("unsupported image file {name:?}"))),
    }
}

fn parse_field<T: std::str::FromStr>(name: &str, text: &str) -> ApiResult<T> {
    text.trim().parse().map_err(|_| ApiError::bad_request(format!("field {name}: cannot parse {text:?}")))
}

/// Multipart fields: `image` (file) or `image_path` (server-side path),
/// optional `sidecar` (ground truth for the synthetic oracle backend),
/// `det_threshold`, `clf_threshold`, `detector_id`, `classifier_id`,
/// `annotate`.
async fn detect(State(state): State<Shared>, mut form: Multipart) -> ApiResult<Response> {
    let mut rc = RunConfig::default();
    let mut upload: Option<(String, Bytes)> = None;
    let mut image_path: Option<PathBuf> = None;
    let mut sidecar: Option<Bytes> = None;
    let mut want_annotation = false;
    while let Some(field) = form.next_field().await.map_err(|e| ApiError::bad_request(e.body_text()))? {
        let name = field.name().unwrap_or_default().to_string();
        match name.as_str() {
            "image" => {
                let file_name = field.file_name().unwrap_or("upload.png").to_string();
                let data = field.bytes().await.map_err(|e| ApiError::bad_request(e.body_text()))?;
                upload = Some((file_name, data));
            }
            "sidecar" => sidecar = Some(field.bytes().await.map_err(|e| ApiError::bad_request(e.body_text()))?),
            _ => {
                let text = field.text().await.map_err(|e| ApiError::bad_request(e.body_text()))?;
                match name.as_str() {
                    "image_path" => image_path = Some(PathBuf::from(text)),
                    "det_threshold" => rc.det_threshold = Some(parse_field(&name, &text)?),
                    "clf_threshold" => rc.clf_threshold = Some(parse_field(&name, &text)?),
                    "detector_id" if !text.is_empty() => rc.detector_id = Some(text),
                    "classifier_id" if !text.is_empty() => rc.classifier_id = Some(text),
                    "detector_id" | "classifier_id" => {}
                    "annotate" => want_annotation = parse_field(&name, &text)?,
                    other => return Err(ApiError::bad_request(format!("unexpected field {other:?}"))),
                }
            }
        }
    }
    let resolved = resolve(&state, &rc)?;
    let path = match (upload, image_path) {
        (Some((name, data)), None) => {
            let ext = upload_extension(&name)?;
            let path = state.settings.upload_dir().join(format!("{}.{ext}", uuid::Uuid::new_v4().simple()));
            tokio::fs::write(&path, &data).await.map_err(|e| ApiError::internal(e.to_string()))?;
            if let Some(s) = &sidecar {
                tokio::fs::write(trapkit::backends::sidecar_path(&path), s).await.map_err(|e| ApiError::internal(e.to_string()))?;
            }
            path
        }
        (None, Some(p)) => {
            if !p.is_file() {
                return Err(ApiError::bad_request(format!("no such image {}", p.display())));
            }
            p
        }
        _ => return Err(ApiError::bad_request("send exactly one of `image` or `image_path`")),
    };
    let response = blocking(move || {
        let image = trapkit::ImageRef::probe(&path).map_err(|e| ApiError::bad_request(format!("cannot decode image: {e}")))?;
        let result = run_image(&image, resolved.detector.as_ref(), resolved.classifier.as_deref(), &resolved.pipeline)
            .map_err(|e| ApiError::bad_request(e.to_string()))?;
        let annotated_png_base64 = if want_annotation {
            let pixels = image::open(&path).map_err(|e| ApiError::bad_request(e.to_string()))?.to_rgb8();
            let drawn = annotate(&pixels, &result, &RenderConfig::default());
            let mut png = std::io::Cursor::new(Vec::new());
            drawn.write_to(&mut png, image::ImageFormat::Png).map_err(|e| ApiError::internal(e.to_string()))?;
            Some(base64::engine::general_purpose::STANDARD.encode(png.into_inner()))
        } else {
            None
        };
        Ok(DetectResponse { result, annotated_png_base64 })
    })
    .await?;
    Ok(Json(response).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchRequest {
    /// Server-side directory; every image below it is processed.
    pub image_dir: PathBuf,
    #[serde(default)]
    pub config: RunConfig,
}

#[derive(Serialize)]
struct Submitted {
    job_id: String,
    state: crate::jobs::JobState,
}

async fn submit_batch(State(state): State<Shared>, payload: Result<Json<BatchRequest>, JsonRejection>) -> ApiResult<Response> {
    let req = body(payload)?;
    let resolved = resolve(&state, &req.config)?;
    if !req.image_dir.is_dir() {
        return Err(ApiError::bad_request(format!("{} is not a directory", req.image_dir.display())));
    }
    let images = ops::collect_images(&req.image_dir).map_err(|e| ApiError::bad_request(e.to_string()))?;
    if images.is_empty() {
        return Err(ApiError::bad_request(format!("no images under {}", req.image_dir.display())));
    }
    let total = images.len();
    let root = req.image_dir.clone();
    let job = state.jobs.submit(
        JobKind::Batch,
        total,
        Box::new(move |progress| {
            ops::batch_document(&images, &root, resolved.detector.as_ref(), resolved.classifier.as_deref(), &resolved.pipeline, progress)
                .map_err(|e| e.to_string())
        }),
    )?;
    Ok((StatusCode::ACCEPTED, Json(Submitted { job_id: job.job_id, state: job.state })).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoRequest {
    /// Server-side video file or frame-sequence directory.
    pub video_path: PathBuf,
    #[serde(default)]
    pub config: RunConfig,
}

/// JSON `{video_path, config}`, or a multipart upload with a `video` file
/// and optional `config` JSON field.
async fn submit_video(State(state): State<Shared>, request: Request) -> ApiResult<Response> {
    let is_multipart = request
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    let (path, rc) = if is_multipart {
        let mut form = Multipart::from_request(request, &()).await.map_err(|e| ApiError::bad_request(e.body_text()))?;
        let mut rc = RunConfig::default();
        let mut path = None;
        while let Some(field) = form.next_field().await.map_err(|e| ApiError::bad_request(e.body_text()))? {
            match field.name().unwrap_or_default() {
                "video" => {
                    let ext = field
                        .file_name()
                        .and_then(|n| Path::new(n).extension())
                        .and_then(|e| e.to_str())
                        .unwrap_or("mp4")
                        .to_ascii_lowercase();
                    let data = field.bytes().await.map_err(|e| ApiError::bad_request(e.body_text()))?;
                    let p = state.settings.upload_dir().join(format!("{}.{ext}", uuid::Uuid::new_v4().simple()));
                    tokio::fs::write(&p, &data).await.map_err(|e| ApiError::internal(e.to_string()))?;
                    path = Some(p);
                }
                "config" => {
                    let text = field.text().await.map_err(|e| ApiError::bad_request(e.body_text()))?;
                    rc = serde_json::from_str(&text).map_err(|e| ApiError::bad_request(format!("config: {e}")))?;
                }
                other => return Err(ApiError::bad_request(format!("unexpected field {other:?}"))),
            }
        }
        (path.ok_or_else(|| ApiError::bad_request("missing `video` file"))?, rc)
    } else {
        let payload = Json::<VideoRequest>::from_request(request, &()).await;
        let req = body(payload)?;
        (req.video_path, req.config)
    };
    let resolved = resolve(&state, &rc)?;
    let total = ops::video_frame_count(&path, resolved.target_fps).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let job = state.jobs.submit(
        JobKind::Video,
        total,
        Box::new(move |progress| {
            let r = ops::video_result(&path, resolved.detector.as_ref(), resolved.classifier.as_deref(), &resolved.pipeline, resolved.target_fps, progress)
                .map_err(|e| e.to_string())?;
            Ok(serde_json::to_string_pretty(&r).expect("video result serializes") + "\n")
        }),
    )?;
    Ok((StatusCode::ACCEPTED, Json(Submitted { job_id: job.job_id, state: job.state })).into_response())
}

async fn get_job(State(state): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let job = state.jobs.get(&id).ok_or(JobError::UnknownJob(id))?;
    Ok(Json(job).into_response())
}

async fn job_result(State(state): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let doc = state.jobs.result(&id)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], doc.as_str().to_owned()).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriageRequest {
    /// Finished batch job whose results are triaged.
    #[serde(default)]
    pub job_id: Option<String>,
    /// Inline MegaDetector-batch document.
    #[serde(default)]
    pub results: Option<serde_json::Value>,
    /// Server-side results file.
    #[serde(default)]
    pub results_path: Option<PathBuf>,
    #[serde(default)]
    pub threshold: Option<f64>,
}

async fn triage(State(state): State<Shared>, payload: Result<Json<TriageRequest>, JsonRejection>) -> ApiResult<Response> {
    let req = body(payload)?;
    let threshold = req.threshold.unwrap_or(state.settings.clf_threshold);
    check_threshold("threshold", threshold)?;
    let text = match (req.job_id, req.results, req.results_path) {
        (Some(id), None, None) => state.jobs.result(&id)?.as_str().to_owned(),
        (None, Some(v), None) => v.to_string(),
        (None, None, Some(p)) => std::fs::read_to_string(&p).map_err(|e| ApiError::bad_request(format!("{}: {e}", p.display())))?,
        _ => return Err(ApiError::bad_request("send exactly one of job_id, results or results_path")),
    };
    let doc = MdDocument::parse(&text).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let summary = ops::triage_document(&doc, threshold).map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(Json(summary).into_response())
}

async fn list_test_sets(State(state): State<Shared>) -> Response {
    Json(state.board.test_sets()).into_response()
}

async fn leaderboard(State(state): State<Shared>, UrlPath(test_set_id): UrlPath<String>) -> Response {
    Json(state.board.leaderboard(&test_set_id)).into_response()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRequest {
    pub model_id: String,
    pub parameter_count: u64,
    /// MegaDetector-batch document, inline.
    pub submission: serde_json::Value,
}

async fn submit_scores(
    State(state): State<Shared>,
    UrlPath(test_set_id): UrlPath<String>,
    payload: Result<Json<ScoreRequest>, JsonRejection>,
) -> ApiResult<Response> {
    let req = body(payload)?;
    let record = blocking(move || {
        let text = req.submission.to_string();
        Ok(state.board.evaluate_submission(&text, &test_set_id, &req.model_id, req.parameter_count)?)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(record)).into_response())
}

async fn feedback(
    State(state): State<Shared>,
    headers: HeaderMap,
    payload: Result<Json<FeedbackSubmission>, JsonRejection>,
) -> ApiResult<Response> {
    let mut sub = body(payload)?;
    if sub.operator_token.is_none() {
        sub.operator_token = headers.get(OPERATOR_TOKEN_HEADER).and_then(|v| v.to_str().ok()).map(String::from);
    }
    if !state.board.has_model(&sub.model_id) && state.models.zoo().get(&sub.model_id).is_ok() {
        state.board.register_model(&sub.model_id);
    }
    let entry = state.board.add_feedback(sub)?;
    Ok((StatusCode::CREATED, Json(entry)).into_response())
}

/// Serves until ctrl-c.
pub async fn serve(state: Shared) -> anyhow::Result<()> {
    let addr = format!("{}:{}", state.settings.host, state.settings.port);
    let listener = tokio::net::TcpListener::bind(&addr).await?;
    tracing::info!("listening on http://{}", listener.local_addr()?);
    let jobs = state.jobs.clone();
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    jobs.shutdown();
    Ok(())
}

/// `{status_code: count}` helper used in logs.
pub fn status_histogram(codes: &[StatusCode]) -> BTreeMap<u16, usize> {
    let mut m = BTreeMap::new();
    for c in codes {
        *m.entry(c.as_u16()).or_insert(0) += 1;
    }
    m
}
