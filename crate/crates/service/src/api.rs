//! HTTP routes, shared state and the JSON wire types.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use mcar::corpus::{Corpus, Label, Phrase};
use mcar::evaluation::DEFAULT_THRESHOLD;
use mcar::feedback::{append_ledger, read_ledger, FeedbackRecord, FeedbackSource};
use mcar::model::ModelConfig;
use mcar::evaluation::ComparisonSection;
use mcar::pipeline::{self, EvalRecord, MetricsFile, PipelineError};
use mcar::rating::{rate, score_dimensions, DimensionSuite, RatingRecord, RatingTier, ThresholdTable};
use mcar::store::DataDir;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use crate::jobs::{JobKind, JobStatus, Jobs, Trainer};
use crate::reviews::{DecisionForm, FlagReason, NewReview, QueueFilter, ReviewError, ReviewItem, ReviewStore};
use crate::snapshot::{Snapshot, SnapshotCell};

/// Response header naming the snapshot that served the request.
pub const SNAPSHOT_HEADER: &str = "x-model-snapshot";

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("review store: {0}")]
    Reviews(std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data: DataDir,
    /// Bearer token for moderator endpoints; `None` disables them.
    pub token: Option<String>,
    pub threshold: f64,
    pub static_dir: Option<PathBuf>,
}

impl ServiceConfig {
    pub fn new(data: DataDir) -> Self {
        ServiceConfig {
            data,
            token: None,
            threshold: DEFAULT_THRESHOLD,
            static_dir: None,
        }
    }
}

pub struct AppState {
    pub data: DataDir,
    pub snapshots: Arc<SnapshotCell>,
    pub corpus: Option<Corpus>,
    pub reviews: Mutex<ReviewStore>,
    pub jobs: Arc<Jobs>,
    pub token: Option<String>,
    pub threshold: f64,
    pub thresholds: ThresholdTable,
}

impl AppState {
    /// Load whatever the data directory holds: model, corpus, thresholds
    /// and review queue. A missing model or corpus is tolerated.
    pub fn open(cfg: &ServiceConfig, trainer: Arc<dyn Trainer>) -> Result<Arc<Self>, ServiceError> {
        let initial = if cfg.data.model().exists() {
            let (model, hash) = pipeline::load_model(&cfg.data)?;
            Some(Snapshot::from_model(model, hash))
        } else {
            None
        };
        let corpus = if cfg.data.corpus().exists() {
            Some(pipeline::load_corpus(&cfg.data)?)
        } else {
            None
        };
        let thresholds = pipeline::load_thresholds(&cfg.data)?;
        Self::assemble(cfg, initial, corpus, thresholds, trainer)
    }

    /// Build state from explicit parts.
    pub fn assemble(
        cfg: &ServiceConfig,
        initial: Option<Snapshot>,
        corpus: Option<Corpus>,
        thresholds: ThresholdTable,
        trainer: Arc<dyn Trainer>,
    ) -> Result<Arc<Self>, ServiceError> {
        let reviews = ReviewStore::load(&cfg.data.reviews()).map_err(ServiceError::Reviews)?;
        let snapshots = Arc::new(SnapshotCell::new(initial));
        let jobs = Jobs::start(trainer, snapshots.clone());
        Ok(Arc::new(AppState {
            data: cfg.data.clone(),
            snapshots,
            corpus,
            reviews: Mutex::new(reviews),
            jobs,
            token: cfg.token.clone(),
            threshold: cfg.threshold,
            thresholds,
        }))
    }

    fn snapshot(&self) -> Result<Arc<Snapshot>, ApiError> {
        self.snapshots
            .current()
            .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no model loaded; train one first"))
    }

    fn phrases(&self, song_id: &str) -> Vec<Phrase> {
        self.corpus
            .as_ref()
            .and_then(|c| c.get(song_id))
            .map(|s| s.annotation.phrases.clone())
            .unwrap_or_default()
    }

    fn open_review(&self, new: NewReview) -> Result<ReviewItem, ApiError> {
        let mut reviews = self.reviews.lock();
        let (item, created) = reviews.enqueue(new, Utc::now());
        if created {
            reviews.save(&self.data.reviews()).map_err(ApiError::internal)?;
        }
        Ok(item)
    }

    fn authorize(&self, headers: &HeaderMap) -> Result<(), ApiError> {
        let Some(expected) = &self.token else {
            return Err(ApiError::new(StatusCode::UNAUTHORIZED, "moderator endpoints are disabled: no token configured"));
        };
        let presented = headers
            .get(axum::http::header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        match presented {
            Some(t) if constant_time_eq(t.as_bytes(), expected.as_bytes()) => Ok(()),
            _ => Err(ApiError::new(StatusCode::UNAUTHORIZED, "missing or invalid bearer token")),
        }
    }
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }

    fn bad_request(e: impl std::fmt::Display) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, e.to_string())
    }
}

impl From<ReviewError> for ApiError {
    fn from(e: ReviewError) -> Self {
        let status = match e {
            ReviewError::UnknownItem(_) => StatusCode::NOT_FOUND,
            ReviewError::NotPending(_) => StatusCode::CONFLICT,
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

fn stamped<T: Serialize>(hash: &str, status: StatusCode, body: T) -> Response {
    let mut res = (status, Json(body)).into_response();
    if let Ok(v) = HeaderValue::from_str(hash) {
        res.headers_mut().insert(SNAPSHOT_HEADER, v);
    }
    res
}

/// Stamp the current snapshot on responses whose handler did not name one.
async fn stamp_snapshot(State(st): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    let mut res = next.run(req).await;
    if !res.headers().contains_key(SNAPSHOT_HEADER) {
        if let Ok(v) = HeaderValue::from_str(&st.snapshots.hash()) {
            res.headers_mut().insert(SNAPSHOT_HEADER, v);
        }
    }
    res
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifyRequest {
    pub lyrics: String,
    #[serde(default)]
    pub song_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub probability: f64,
    pub label: Label,
    pub snapshot: String,
    pub song_id: Option<String>,
}

async fn score(snap: Arc<Snapshot>, lyrics: String) -> Result<f64, ApiError> {
    let p = tokio::task::spawn_blocking(move || snap.classifier.probability(&lyrics))
        .await
        .map_err(ApiError::internal)?
        .map_err(|e| ApiError::new(StatusCode::BAD_GATEWAY, e.to_string()))?;
    if !(0.0..=1.0).contains(&p) {
        return Err(ApiError::internal(format!("classifier returned {p}")));
    }
    Ok(p)
}

async fn classify(State(st): State<Arc<AppState>>, Json(req): Json<ClassifyRequest>) -> Result<Response, ApiError> {
    if req.lyrics.trim().is_empty() {
        return Err(ApiError::bad_request("lyrics must not be empty"));
    }
    let snap = st.snapshot()?;
    let hash = snap.hash.clone();
    let probability = score(snap, req.lyrics).await?;
    let body = ClassifyResponse {
        probability,
        label: Label::from_explicit(probability >= st.threshold),
        snapshot: hash.clone(),
        song_id: req.song_id,
    };
    Ok(stamped(&hash, StatusCode::OK, body))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RateRequest {
    /// Lyrics to rate; when absent the stored lyrics of `song_id` are used.
    pub lyrics: Option<String>,
    pub song_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateResponse {
    pub record: RatingRecord,
    pub probability: f64,
    pub label: Label,
    pub warnings: Vec<String>,
    pub snapshot: String,
    /// The review opened for a boundary-flagged known song.
    pub review: Option<ReviewItem>,
}

struct Rated {
    record: RatingRecord,
    probability: f64,
    label: Label,
    warnings: Vec<String>,
    snapshot: String,
}

async fn rate_lyrics(st: &AppState, snap: Arc<Snapshot>, song_id: String, lyrics: String) -> Result<Rated, ApiError> {
    let thresholds = st.thresholds;
    let hash = snap.hash.clone();
    let (record, warnings) = tokio::task::spawn_blocking(move || {
        let suite = DimensionSuite::sexual_only(snap.classifier.as_ref());
        score_dimensions(&lyrics, &suite).map(|(scores, warnings)| (rate(song_id, &scores, &thresholds), warnings))
    })
    .await
    .map_err(ApiError::internal)?
    .map_err(|e| ApiError::new(StatusCode::BAD_GATEWAY, e.to_string()))?;
    let probability = record.scores.sexual;
    Ok(Rated {
        label: Label::from_explicit(probability >= st.threshold),
        probability,
        record,
        warnings,
        snapshot: hash,
    })
}

fn new_review(rated: &Rated, reason: FlagReason) -> NewReview {
    NewReview {
        song_id: rated.record.song_id.clone(),
        scores: rated.record.scores,
        provisional_tier: RatingTier {
            tier: rated.record.tier,
            descriptors: rated.record.descriptors.clone(),
        },
        probability: rated.probability,
        predicted: rated.label,
        near_cutoffs: rated.record.near_cutoffs.clone(),
        reason,
        snapshot: rated.snapshot.clone(),
    }
}

async fn rate_handler(State(st): State<Arc<AppState>>, Json(req): Json<RateRequest>) -> Result<Response, ApiError> {
    let known = req
        .song_id
        .as_deref()
        .and_then(|id| st.corpus.as_ref().and_then(|c| c.get(id)));
    let lyrics = match (&req.lyrics, known) {
        (Some(l), _) if !l.trim().is_empty() => l.clone(),
        (None, Some(song)) => song.song.lyrics.clone(),
        _ => return Err(ApiError::bad_request("provide non-empty lyrics or a known song_id")),
    };
    let snap = st.snapshot()?;
    let song_id = req.song_id.clone().unwrap_or_default();
    let rated = rate_lyrics(&st, snap, song_id, lyrics).await?;
    let review = if rated.record.flagged && known.is_some() {
        Some(st.open_review(new_review(&rated, FlagReason::Boundary))?)
    } else {
        None
    };
    let hash = rated.snapshot.clone();
    let body = RateResponse {
        record: rated.record,
        probability: rated.probability,
        label: rated.label,
        warnings: rated.warnings,
        snapshot: hash.clone(),
        review,
    };
    Ok(stamped(&hash, StatusCode::OK, body))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRequest {
    pub song_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewResponse {
    pub item: ReviewItem,
    pub snapshot: String,
}

/// A user report: rate the stored song and queue it for review.
async fn report(State(st): State<Arc<AppState>>, Json(req): Json<ReportRequest>) -> Result<Response, ApiError> {
    let song = st
        .corpus
        .as_ref()
        .and_then(|c| c.get(&req.song_id))
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown song {}", req.song_id)))?;
    let snap = st.snapshot()?;
    let rated = rate_lyrics(&st, snap, req.song_id.clone(), song.song.lyrics.clone()).await?;
    let item = st.open_review(new_review(&rated, FlagReason::UserReport))?;
    let hash = rated.snapshot;
    Ok(stamped(&hash, StatusCode::OK, ReviewResponse { item, snapshot: hash.clone() }))
}

/// A queue row with the song context a moderator needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewView {
    #[serde(flatten)]
    pub item: ReviewItem,
    pub title: Option<String>,
    pub artist: Option<String>,
    pub lyrics: Option<String>,
    pub phrases: Vec<Phrase>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueResponse {
    pub items: Vec<ReviewView>,
    pub next_cursor: Option<u64>,
    pub pending_count: usize,
    pub snapshot: String,
}

async fn review_queue(State(st): State<Arc<AppState>>, Query(filter): Query<QueueFilter>) -> Json<QueueResponse> {
    let (items, next_cursor, pending_count) = {
        let reviews = st.reviews.lock();
        let (items, next) = reviews.list(&filter);
        (items, next, reviews.pending_count())
    };
    let items = items
        .into_iter()
        .map(|item| {
            let song = st.corpus.as_ref().and_then(|c| c.get(&item.song_id));
            ReviewView {
                title: song.map(|s| s.song.title.clone()),
                artist: song.map(|s| s.song.artist.clone()),
                lyrics: song.map(|s| s.song.lyrics.clone()),
                phrases: st.phrases(&item.song_id),
                item,
            }
        })
        .collect();
    Json(QueueResponse {
        items,
        next_cursor,
        pending_count,
        snapshot: st.snapshots.hash(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionResponse {
    pub item: ReviewItem,
    pub feedback: Option<FeedbackRecord>,
    pub snapshot: String,
}

/// Decide a pending item. The status check, ledger append and status change
/// happen under one lock, so concurrent decisions on an item cannot both win.
async fn decide(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<u64>,
    headers: HeaderMap,
    Json(form): Json<DecisionForm>,
) -> Result<Json<DecisionResponse>, ApiError> {
    st.authorize(&headers)?;
    let mut reviews = st.reviews.lock();
    let item = reviews.pending(id)?.clone();
    let feedback = match form.corrected_label {
        Some(expert) if item.contradicts_model(&form) => {
            let phrases = if expert.is_explicit() {
                st.phrases(&item.song_id)
            } else {
                Vec::new()
            };
            let record = FeedbackRecord::new(&item.song_id, item.predicted, expert, phrases, 1.0, FeedbackSource::Moderator)
                .map_err(ApiError::internal)?;
            append_ledger(&st.data.feedback_ledger(), std::slice::from_ref(&record)).map_err(ApiError::internal)?;
            Some(record)
        }
        _ => None,
    };
    let item = reviews.decide(id, form, Utc::now())?;
    reviews.save(&st.data.reviews()).map_err(ApiError::internal)?;
    Ok(Json(DecisionResponse {
        item,
        feedback,
        snapshot: st.snapshots.hash(),
    }))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RetrainRequest {
    pub kind: JobKind,
}

async fn retrain(State(st): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> Result<Response, ApiError> {
    st.authorize(&headers)?;
    let kind = if body.iter().all(u8::is_ascii_whitespace) {
        JobKind::Retrain
    } else {
        serde_json::from_slice::<RetrainRequest>(&body)
            .map_err(ApiError::bad_request)?
            .kind
    };
    let status = st.jobs.submit(kind);
    Ok(stamped(&st.snapshots.hash(), StatusCode::ACCEPTED, status))
}

async fn job(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<u64>) -> Result<Json<JobStatus>, ApiError> {
    st.jobs
        .get(id)
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown job {id}")))
}

async fn jobs(State(st): State<Arc<AppState>>) -> Json<Vec<JobStatus>> {
    Json(st.jobs.list())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsResponse {
    pub pre: Option<EvalRecord>,
    pub post: Option<EvalRecord>,
    pub comparison: Option<ComparisonSection>,
    pub last_run: Option<PathBuf>,
    pub feedback_count: usize,
    pub pending_reviews: usize,
    pub snapshot: String,
}

async fn metrics(State(st): State<Arc<AppState>>) -> Result<Json<MetricsResponse>, ApiError> {
    let file = MetricsFile::load(&st.data.metrics()).map_err(ApiError::internal)?;
    let feedback_count = read_ledger(&st.data.feedback_ledger()).map_err(ApiError::internal)?.len();
    Ok(Json(MetricsResponse {
        pre: file.pre,
        post: file.post,
        comparison: file.comparison,
        last_run: file.last_run,
        feedback_count,
        pending_reviews: st.reviews.lock().pending_count(),
        snapshot: st.snapshots.hash(),
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub snapshot: String,
    pub config: Option<ModelConfig>,
    pub num_params: Option<usize>,
    pub threshold: f64,
    pub thresholds: ThresholdTable,
}

async fn model_info(State(st): State<Arc<AppState>>) -> Json<ModelInfo> {
    let snap = st.snapshots.current();
    Json(ModelInfo {
        snapshot: st.snapshots.hash(),
        config: snap.as_ref().and_then(|s| s.config),
        num_params: snap.as_ref().and_then(|s| s.num_params),
        threshold: st.threshold,
        thresholds: st.thresholds,
    })
}

async fn health(State(st): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "snapshot": st.snapshots.hash() }))
}

/// The API router; static assets, when given, are served for every other
/// path.
pub fn router(state: Arc<AppState>, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/classify", post(classify))
        .route("/rate", post(rate_handler))
        .route("/report", post(report))
        .route("/review-queue", get(review_queue))
        .route("/review/{id}/decision", post(decide))
        .route("/retrain", post(retrain))
        .route("/jobs", get(jobs))
        .route("/jobs/{id}", get(job))
        .route("/metrics", get(metrics))
        .route("/model/info", get(model_info))
        .layer(middleware::from_fn_with_state(state.clone(), stamp_snapshot))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serve until ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> std::io::Result<()> {
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
