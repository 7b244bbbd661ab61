use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use mcar::corpus::{generate_synthetic_corpus_with, Corpus, SyntheticOptions};
use mcar::evaluation::{Classifier, ScoreError};
use mcar::feedback::{read_ledger, ErrorKind, FeedbackSource};
use mcar::rating::ThresholdTable;
use mcar::store::DataDir;
use mcar::training::TrainReport;
use mcar_service::{router, AppState, JobKind, ServiceConfig, Snapshot, TrainOutput, Trainer, SNAPSHOT_HEADER};
use serde_json::{json, Value};
use tower::ServiceExt;

const TOKEN: &str = "s3cret";

/// Sits just above the 0.4 sexual-content cutoff, inside the review band,
/// and below the 0.5 decision threshold.
fn near_boundary() -> Arc<dyn Classifier + Send + Sync> {
    Arc::new(|_: &str| -> Result<f64, ScoreError> { Ok(0.42) })
}

struct StubTrainer;

impl Trainer for StubTrainer {
    fn run(&self, kind: JobKind) -> Result<TrainOutput, String> {
        let hash = match kind {
            JobKind::Retrain => "retrained",
            JobKind::Refine => "refined",
        };
        let report = TrainReport {
            best_epoch: Some(1),
            ..TrainReport::default()
        };
        Ok(TrainOutput {
            snapshot: Snapshot::from_classifier(hash, Arc::new(|_: &str| -> Result<f64, ScoreError> { Ok(0.9) })),
            report,
            run_dir: None,
        })
    }
}

struct Fixture {
    _dir: tempfile::TempDir,
    data: DataDir,
    state: Arc<AppState>,
    app: Router,
    corpus: Corpus,
}

fn corpus() -> Corpus {
    let (songs, anns) = generate_synthetic_corpus_with(&SyntheticOptions::new(6, 6, 3));
    Corpus::new(songs, anns).unwrap()
}

fn fixture(with_model: bool) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let data = DataDir::new(dir.path());
    let mut cfg = ServiceConfig::new(data.clone());
    cfg.token = Some(TOKEN.into());
    let initial = with_model.then(|| Snapshot::from_classifier("snap-a", near_boundary()));
    let corpus = corpus();
    let state = AppState::assemble(
        &cfg,
        initial,
        Some(corpus.clone()),
        ThresholdTable::default(),
        Arc::new(StubTrainer),
    )
    .unwrap();
    let app = router(state.clone(), None);
    Fixture {
        _dir: dir,
        data,
        state,
        app,
        corpus,
    }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>, token: Option<&str>) -> (StatusCode, String, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header("authorization", format!("Bearer {t}"));
    }
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let hash = res
        .headers()
        .get(SNAPSHOT_HEADER)
        .expect("every response carries the snapshot header")
        .to_str()
        .unwrap()
        .to_string();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or(Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, hash, value)
}

fn first_song(f: &Fixture) -> String {
    f.corpus.items()[0].id().to_string()
}

#[tokio::test]
async fn classify_reports_probability_label_and_snapshot() {
    let f = fixture(true);
    let (status, hash, body) = call(&f.app, "POST", "/classify", Some(json!({"lyrics": "la la"})), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(hash, "snap-a");
    assert_eq!(body["snapshot"], "snap-a");
    assert_eq!(body["probability"], 0.42);
    assert_eq!(body["label"], "non_explicit");
}

#[tokio::test]
async fn classify_rejects_empty_lyrics_and_missing_model() {
    let f = fixture(true);
    let (status, _, _) = call(&f.app, "POST", "/classify", Some(json!({"lyrics": "  "})), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let empty = fixture(false);
    let (status, hash, _) = call(&empty.app, "POST", "/classify", Some(json!({"lyrics": "x"})), None).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(hash, "none");
}

#[tokio::test]
async fn boundary_rating_enqueues_once_per_pending_song() {
    let f = fixture(true);
    let song = first_song(&f);
    let (status, _, body) = call(&f.app, "POST", "/rate", Some(json!({"song_id": song})), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["record"]["flagged"], true);
    assert_eq!(body["record"]["tier"], "Plus12");
    let first_id = body["review"]["id"].clone();
    assert_eq!(body["review"]["flagged_reason"], "boundary");

    let (_, _, again) = call(&f.app, "POST", "/rate", Some(json!({"song_id": song})), None).await;
    assert_eq!(again["review"]["id"], first_id);

    let (_, _, q) = call(&f.app, "GET", "/review-queue?status=pending", None, None).await;
    assert_eq!(q["items"].as_array().unwrap().len(), 1);
    assert_eq!(q["pending_count"], 1);
    let row = &q["items"][0];
    assert_eq!(row["song_id"], song.as_str());
    let stored = f.corpus.get(&song).unwrap();
    assert_eq!(row["title"], stored.song.title.as_str());
    assert_eq!(row["lyrics"], stored.song.lyrics.as_str());
    assert_eq!(row["phrases"].as_array().unwrap().len(), stored.annotation.phrases.len());
}

#[tokio::test]
async fn free_text_and_unknown_songs_are_rated_but_not_queued() {
    let f = fixture(true);
    let (status, _, body) = call(&f.app, "POST", "/rate", Some(json!({"lyrics": "hola", "song_id": "nope"})), None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(body["review"].is_null());
    let (status, _, _) = call(&f.app, "POST", "/rate", Some(json!({"song_id": "nope"})), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(f.state.reviews.lock().len(), 0);
}

#[tokio::test]
async fn decisions_require_the_bearer_token() {
    let f = fixture(true);
    let song = first_song(&f);
    let (_, _, body) = call(&f.app, "POST", "/rate", Some(json!({"song_id": song})), None).await;
    let id = body["review"]["id"].as_u64().unwrap();
    let uri = format!("/review/{id}/decision");
    let (status, _, _) = call(&f.app, "POST", &uri, Some(json!({"note": "ok"})), None).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    let (status, _, _) = call(&f.app, "POST", &uri, Some(json!({"note": "ok"})), Some("wrong")).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    let (status, _, _) = call(&f.app, "POST", "/retrain", None, Some("wrong")).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    assert_eq!(f.state.reviews.lock().pending_count(), 1);
}

#[tokio::test]
async fn approval_writes_no_feedback() {
    let f = fixture(true);
    let song = first_song(&f);
    let (_, _, body) = call(&f.app, "POST", "/rate", Some(json!({"song_id": song})), None).await;
    let id = body["review"]["id"].as_u64().unwrap();
    let (status, _, d) = call(&f.app, "POST", &format!("/review/{id}/decision"), Some(json!({"note": "fine"})), Some(TOKEN)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(d["item"]["status"], "approved");
    assert!(d["feedback"].is_null());
    assert!(read_ledger(&f.data.feedback_ledger()).unwrap().is_empty());
}

#[tokio::test]
async fn override_to_explicit_records_moderator_false_negative() {
    let f = fixture(true);
    let song = first_song(&f);
    let (_, _, body) = call(&f.app, "POST", "/rate", Some(json!({"song_id": song})), None).await;
    let id = body["review"]["id"].as_u64().unwrap();
    let uri = format!("/review/{id}/decision");
    let form = json!({"corrected_label": "explicit", "note": "clear references"});
    let (status, _, d) = call(&f.app, "POST", &uri, Some(form), Some(TOKEN)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(d["item"]["status"], "overridden");
    assert_eq!(d["feedback"]["error_kind"], "false_negative");

    let ledger = read_ledger(&f.data.feedback_ledger()).unwrap();
    assert_eq!(ledger.len(), 1);
    assert_eq!(ledger[0].song_id, song);
    assert_eq!(ledger[0].error_kind, ErrorKind::FalseNegative);
    assert_eq!(ledger[0].source, FeedbackSource::Moderator);

    let (status, _, _) = call(&f.app, "POST", &uri, Some(json!({"note": "again"})), Some(TOKEN)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let item = f.state.reviews.lock().get(id).cloned().unwrap();
    assert_eq!(item.decision.unwrap().note, "clear references");
    assert_eq!(read_ledger(&f.data.feedback_ledger()).unwrap().len(), 1);

    let (status, _, _) = call(&f.app, "POST", "/review/999/decision", Some(json!({})), Some(TOKEN)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (_, _, m) = call(&f.app, "GET", "/metrics", None, None).await;
    assert_eq!(m["feedback_count"], 1);
}

#[tokio::test]
async fn user_reports_reopen_decided_songs() {
    let f = fixture(true);
    let song = first_song(&f);
    let (status, _, _) = call(&f.app, "POST", "/report", Some(json!({"song_id": "ghost"})), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (_, _, a) = call(&f.app, "POST", "/report", Some(json!({"song_id": song})), None).await;
    assert_eq!(a["item"]["flagged_reason"], "user_report");
    let id = a["item"]["id"].as_u64().unwrap();
    call(&f.app, "POST", &format!("/review/{id}/decision"), Some(json!({})), Some(TOKEN)).await;
    let (_, _, b) = call(&f.app, "POST", "/report", Some(json!({"song_id": song})), None).await;
    assert_ne!(b["item"]["id"].as_u64().unwrap(), id);
    assert_eq!(f.state.reviews.lock().len(), 2);
}

#[tokio::test]
async fn queue_filters_by_status_tier_and_dimension() {
    let f = fixture(true);
    for item in f.corpus.items().iter().take(4) {
        call(&f.app, "POST", "/report", Some(json!({"song_id": item.id()})), None).await;
    }
    call(&f.app, "POST", "/review/1/decision", Some(json!({})), Some(TOKEN)).await;
    let (_, _, approved) = call(&f.app, "GET", "/review-queue?status=approved", None, None).await;
    assert_eq!(approved["items"].as_array().unwrap().len(), 1);
    let (_, _, tier) = call(&f.app, "GET", "/review-queue?tier=Plus12", None, None).await;
    assert_eq!(tier["items"].as_array().unwrap().len(), 4);
    let (_, _, none) = call(&f.app, "GET", "/review-queue?tier=Plus18", None, None).await;
    assert!(none["items"].as_array().unwrap().is_empty());
    let (_, _, dim) = call(&f.app, "GET", "/review-queue?dimension=sexual", None, None).await;
    assert_eq!(dim["items"].as_array().unwrap().len(), 4);
    let (_, _, page) = call(&f.app, "GET", "/review-queue?limit=3", None, None).await;
    assert_eq!(page["items"].as_array().unwrap().len(), 3);
    assert_eq!(page["next_cursor"], 3);
    let (_, _, rest) = call(&f.app, "GET", "/review-queue?limit=3&cursor=3", None, None).await;
    assert_eq!(rest["items"].as_array().unwrap().len(), 1);
    assert!(rest["next_cursor"].is_null());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_decisions_conserve_the_queue() {
    let f = fixture(true);
    let ids: Vec<String> = f.corpus.items().iter().map(|s| s.id().to_string()).collect();
    for id in &ids {
        call(&f.app, "POST", "/report", Some(json!({"song_id": id})), None).await;
    }
    let enqueued = ids.len();
    let to_decide = enqueued - 3;
    let mut handles = Vec::new();
    for round in 0..3 {
        for item in 1..=to_decide as u64 {
            let app = f.app.clone();
            handles.push(tokio::spawn(async move {
                let label = if round == 0 { json!("explicit") } else { Value::Null };
                let body = json!({"corrected_label": label, "note": format!("r{round}")});
                call(&app, "POST", &format!("/review/{item}/decision"), Some(body), Some(TOKEN)).await.0
            }));
        }
    }
    let mut ok = 0;
    let mut conflict = 0;
    for h in handles {
        match h.await.unwrap() {
            StatusCode::OK => ok += 1,
            StatusCode::CONFLICT => conflict += 1,
            other => panic!("unexpected status {other}"),
        }
    }
    assert_eq!(ok, to_decide);
    assert_eq!(conflict, 2 * to_decide);
    let reviews = f.state.reviews.lock();
    assert_eq!(reviews.pending_count(), enqueued - to_decide);
    let feedback = read_ledger(&f.data.feedback_ledger()).unwrap();
    let overridden = (1..=to_decide as u64)
        .filter(|id| reviews.get(*id).unwrap().decision.as_ref().unwrap().corrected_label.is_some())
        .count();
    assert_eq!(feedback.len(), overridden);
}

#[tokio::test]
async fn retrain_job_swaps_snapshot_and_reports() {
    let f = fixture(true);
    let (status, hash, job) = call(&f.app, "POST", "/retrain", Some(json!({"kind": "refine"})), Some(TOKEN)).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(hash, "snap-a");
    let id = job["job_id"].as_u64().unwrap();
    assert_eq!(job["kind"], "refine");
    let start = Instant::now();
    let done = loop {
        let (status, _, s) = call(&f.app, "GET", &format!("/jobs/{id}"), None, None).await;
        assert_eq!(status, StatusCode::OK);
        if s["state"] == "done" {
            break s;
        }
        assert!(start.elapsed() < Duration::from_secs(10));
        tokio::time::sleep(Duration::from_millis(5)).await;
    };
    assert_eq!(done["report"]["best_epoch"], 1);
    assert_eq!(done["snapshot"], "refined");
    let (_, hash, info) = call(&f.app, "GET", "/model/info", None, None).await;
    assert_eq!(hash, "refined");
    assert_eq!(info["snapshot"], "refined");

    let (status, _, _) = call(&f.app, "POST", "/retrain", None, Some(TOKEN)).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let (status, _, _) = call(&f.app, "GET", "/jobs/999", None, None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn review_queue_survives_restart() {
    let f = fixture(true);
    call(&f.app, "POST", "/report", Some(json!({"song_id": first_song(&f)})), None).await;
    let mut cfg = ServiceConfig::new(f.data.clone());
    cfg.token = Some(TOKEN.into());
    let reopened = AppState::assemble(&cfg, None, None, ThresholdTable::default(), Arc::new(StubTrainer)).unwrap();
    assert_eq!(reopened.reviews.lock().pending_count(), 1);
}

#[tokio::test]
async fn static_assets_are_served_beside_the_api() {
    let f = fixture(true);
    let assets = tempfile::tempdir().unwrap();
    std::fs::write(assets.path().join("index.html"), "<h1>console</h1>").unwrap();
    let app = router(f.state.clone(), Some(assets.path()));
    let res = app
        .clone()
        .oneshot(Request::get("/index.html").body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(res.status(), StatusCode::OK);
    let (status, _, _) = call(&app, "GET", "/health", None, None).await;
    assert_eq!(status, StatusCode::OK);
}
