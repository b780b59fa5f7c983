use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use http_body_util::BodyExt;
use irda_cli::api::{router, AppState};
use irda_core::dialogue::{FixedClock, SessionConfig};
use irda_core::env::{generate_pool, EnvConfig};
use irda_core::store::SessionStore;
use irda_core::stub::RuleAwareStub;
use serde_json::{json, Value};
use tower::ServiceExt;

struct Harness {
    app: axum::Router,
    _dir: tempfile::TempDir,
}

impl Harness {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let pool = generate_pool(&EnvConfig::default(), 40, 7).unwrap();
        let store = SessionStore::open(dir.path()).unwrap();
        let state = AppState::new(pool, Arc::new(RuleAwareStub), store, Arc::new(FixedClock(1)), SessionConfig::default());
        Self { app: router(Arc::new(state)), _dir: dir }
    }

    async fn call(&self, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
        let mut req = Request::builder().method(method).uri(uri);
        let body = match body {
            Some(v) => {
                req = req.header("content-type", "application/json");
                Body::from(v.to_string())
            }
            None => Body::empty(),
        };
        let resp = self.app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
        (status, value)
    }

    async fn create(&self, id: &str) -> Value {
        let (status, body) = self.call(Method::POST, "/sessions", Some(json!({ "session_id": id }))).await;
        assert_eq!(status, StatusCode::CREATED, "{body}");
        body
    }

    async fn message(&self, id: &str, seq: u64, text: &str) -> (StatusCode, Value) {
        self.call(Method::POST, &format!("/sessions/{id}/messages"), Some(json!({ "seq": seq, "text": text }))).await
    }
}

#[tokio::test]
async fn healthz_reports_ok() {
    let h = Harness::new();
    let (status, body) = h.call(Method::GET, "/healthz", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "ok");
}

#[tokio::test]
async fn session_lifecycle_advances_state() {
    let h = Harness::new();
    let created = h.create("life").await;
    assert_eq!(created["session_id"], "life");
    assert_eq!(created["state"], "await_value");
    assert!(!created["turn"]["messages"].as_array().unwrap().is_empty());

    let (status, body) = h.message("life", 1, "respectful").await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["state"], "stage1");
    let shown = body["turn"]["attachment"].as_str().unwrap().to_string();

    let (status, view) = h.call(Method::GET, "/sessions/life", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(view["msg_seq"], 1);
    assert_eq!(view["session"]["stage1_ids"].as_array().unwrap().len(), 4);

    let (status, frames) = h.call(Method::GET, &format!("/sessions/life/trajectories/{shown}/frames"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(frames["trajectory_id"], shown.as_str());
    assert_eq!(frames["frames"].as_array().unwrap().len(), EnvConfig::default().episode_length + 1);

    let (status, list) = h.call(Method::GET, "/sessions", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(list, json!(["life"]));
}

#[tokio::test]
async fn retried_sequence_number_returns_original_reply() {
    let h = Harness::new();
    h.create("idem").await;
    let (_, first) = h.message("idem", 1, "respectful").await;
    let (status, again) = h.message("idem", 1, "something else entirely").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(again, first);
    let (status, err) = h.message("idem", 4, "No.").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(err["error"]["code"], "bad_request");
}

#[tokio::test]
async fn unknown_resources_are_404() {
    let h = Harness::new();
    let (status, err) = h.call(Method::GET, "/sessions/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(err["error"]["code"], "not_found");
    assert_eq!(err["error"]["retryable"], false);
    assert_eq!(h.message("nope", 1, "hi").await.0, StatusCode::NOT_FOUND);
    h.create("s").await;
    let (status, _) = h.call(Method::GET, "/sessions/s/trajectories/missing/frames", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn message_in_finished_session_is_bad_state() {
    let h = Harness::new();
    h.create("done").await;
    // Drive to completion with the synthetic participant's answers.
    let user = irda_core::synthetic::SyntheticUser::respectful();
    let pool = generate_pool(&EnvConfig::default(), 40, 7).unwrap();
    let mut seq = 0;
    loop {
        let (_, view) = h.call(Method::GET, "/sessions/done", None).await;
        if view["state"] == "done" {
            break;
        }
        let session = serde_json::from_value(view["session"].clone()).unwrap();
        let turn = serde_json::from_value(view["turn"].clone()).unwrap();
        seq += 1;
        let (status, body) = h.message("done", seq, &user.respond(&session, &turn, &pool)).await;
        assert_eq!(status, StatusCode::OK, "{body}");
        assert!(seq < 40, "session did not finish");
    }
    let (status, err) = h.message("done", seq + 1, "hello again").await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(err["error"]["code"], "bad_state");

    let (status, ctx) = h.call(Method::GET, "/sessions/done/context", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ctx["schema"], "irda-context/1");
    assert!(ctx["context"]["feedback"].as_array().unwrap().len() >= 4);
}

#[tokio::test]
async fn context_of_unfinished_session_is_bad_state() {
    let h = Harness::new();
    h.create("early").await;
    let (status, err) = h.call(Method::GET, "/sessions/early/context", None).await;
    assert_eq!(status, StatusCode::CONFLICT, "{err}");
}

#[tokio::test]
async fn malformed_requests_are_rejected() {
    let h = Harness::new();
    h.create("dup").await;
    let (status, _) = h.call(Method::POST, "/sessions", Some(json!({ "session_id": "dup" }))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, err) = h.call(Method::POST, "/sessions", Some(json!({ "session_id": "../x" }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{err}");
    let (status, _) = h.call(Method::POST, "/sessions", Some(json!({ "config": { "k": 0 } }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = h.call(Method::POST, "/sessions/dup/messages", Some(json!({ "text": "no seq" }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, created) = h.call(Method::POST, "/sessions", None).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(created["session_id"].as_str().unwrap().len(), 32);
}

/// Fails the first call with a transport error, then behaves like the stub.
struct FlakyOnce(std::sync::atomic::AtomicBool);

impl irda_core::LanguageModel for FlakyOnce {
    fn complete(&self, request: &irda_core::LlmRequest) -> Result<irda_core::Completion, irda_core::LlmError> {
        if !self.0.swap(true, std::sync::atomic::Ordering::SeqCst) {
            return Err(irda_core::LlmError::Transport("connection reset".into()));
        }
        RuleAwareStub.complete(request)
    }
}

#[tokio::test]
async fn upstream_failure_is_retryable_with_the_same_sequence_number() {
    let dir = tempfile::tempdir().unwrap();
    let pool = generate_pool(&EnvConfig::default(), 40, 7).unwrap();
    let store = SessionStore::open(dir.path()).unwrap();
    let llm = Arc::new(FlakyOnce(std::sync::atomic::AtomicBool::new(false)));
    let state = AppState::new(pool, llm, store, Arc::new(FixedClock(1)), SessionConfig::default());
    let h = Harness { app: router(Arc::new(state)), _dir: dir };
    h.create("flaky").await;
    h.message("flaky", 1, "respectful").await;
    // The fourth stage-1 answer triggers the first model call.
    for seq in 2..=4 {
        assert_eq!(h.message("flaky", seq, "No. It left home.").await.0, StatusCode::OK);
    }
    let (status, err) = h.message("flaky", 5, "No. It left home.").await;
    assert_eq!(status, StatusCode::BAD_GATEWAY, "{err}");
    assert_eq!(err["error"]["code"], "upstream_llm");
    assert_eq!(err["error"]["retryable"], true);
    let (_, view) = h.call(Method::GET, "/sessions/flaky", None).await;
    assert_eq!(view["msg_seq"], 4);

    let (status, body) = h.message("flaky", 5, "No. It left home.").await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["state"], "await_reflection");
}
