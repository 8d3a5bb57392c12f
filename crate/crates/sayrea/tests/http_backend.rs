mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use sayrea::backend::HttpChatBackend;
use sayrea_core::catalog::ServiceId;
use sayrea_core::engine::{Engine, EngineConfig, RequestState};
use sayrea_core::identify::{ChatMessage, CompletionBackend, LlmIdentifier, Role};
use serde_json::{json, Value};

/// (authorization header, request body) per call.
type Seen = Arc<Mutex<Vec<(Option<String>, Value)>>>;

#[derive(Clone, Default)]
struct Mock {
    seen: Seen,
    failures_left: Arc<AtomicUsize>,
    reply: Arc<Mutex<String>>,
}

async fn complete(State(m): State<Mock>, headers: HeaderMap, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    let auth = headers.get("authorization").and_then(|h| h.to_str().ok()).map(str::to_string);
    m.seen.lock().unwrap().push((auth, body));
    if m.failures_left.load(Ordering::SeqCst) > 0 {
        m.failures_left.fetch_sub(1, Ordering::SeqCst);
        return (StatusCode::SERVICE_UNAVAILABLE, Json(json!({ "error": "busy" })));
    }
    let content = m.reply.lock().unwrap().clone();
    (StatusCode::OK, Json(json!({ "choices": [{ "message": { "role": "assistant", "content": content } }] })))
}

/// Serves the mock on a background runtime and returns its URL.
fn spawn(mock: Mock) -> String {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            let app = Router::new().route("/v1/chat/completions", post(complete)).with_state(mock);
            axum::serve(listener, app).await.unwrap();
        });
    });
    format!("http://{}/v1/chat/completions", rx.recv().unwrap())
}

fn backend(url: &str) -> HttpChatBackend {
    HttpChatBackend::new(url, Some("k-123".into()), "test-model", Duration::from_secs(5))
}

#[test]
fn posts_chat_request_and_reads_content() {
    let mock = Mock::default();
    *mock.reply.lock().unwrap() = "- Weather/temperature: hot".into();
    let url = spawn(mock.clone());
    let msgs = [ChatMessage::new(Role::System, "guide"), ChatMessage::new(Role::User, "hello")];
    assert_eq!(backend(&url).complete(&msgs).unwrap(), "- Weather/temperature: hot");

    let seen = mock.seen.lock().unwrap();
    let (auth, body) = &seen[0];
    assert_eq!(auth.as_deref(), Some("Bearer k-123"));
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["temperature"], 0);
    assert_eq!(body["messages"][1], json!({ "role": "user", "content": "hello" }));
}

#[test]
fn engine_identifies_through_http_backend_after_a_retry() {
    let mock = Mock::default();
    *mock.reply.lock().unwrap() = "- Weather/temperature: hot\n- Nonsense/thing: x".into();
    mock.failures_left.store(1, Ordering::SeqCst);
    let url = spawn(mock.clone());
    let (reg, cat, _) = common::deps();
    let id = Arc::new(LlmIdentifier::new(backend(&url)).with_retry(2, Duration::from_millis(5)));
    let mut e = Engine::new(reg, cat, id, EngineConfig::default()).unwrap();
    let values = [("Weather/temperature".to_string(), 31.0.into())].into_iter().collect();
    e.update_context(values, 0).unwrap();
    let req = e.inject_usage(ServiceId::open("com.demo.weather"), 10).unwrap();
    let rule = e.submit_reason(&req.request_id, "very hot", 20).unwrap();
    assert_eq!(rule.cause.len(), 1);
    assert_eq!(rule.cause[0].canonical_value, "hot");
    assert_eq!(mock.seen.lock().unwrap().len(), 2);
    let prompt = mock.seen.lock().unwrap()[1].1["messages"].to_string();
    assert!(prompt.contains("very hot"));
}

#[test]
fn unreachable_backend_keeps_request_pending() {
    let mock = Mock::default();
    mock.failures_left.store(usize::MAX, Ordering::SeqCst);
    let url = spawn(mock.clone());
    let (reg, cat, _) = common::deps();
    let id = Arc::new(LlmIdentifier::new(backend(&url)).with_retry(1, Duration::from_millis(5)));
    let mut e = Engine::new(reg, cat, id, EngineConfig::default()).unwrap();
    let values = [("Weather/temperature".to_string(), 31.0.into())].into_iter().collect();
    e.update_context(values, 0).unwrap();
    let req = e.inject_usage(ServiceId::open("com.demo.weather"), 10).unwrap();
    let err = e.submit_reason(&req.request_id, "very hot", 20).unwrap_err();
    assert_eq!(err.code(), "BACKEND_UNAVAILABLE");
    assert_eq!(mock.seen.lock().unwrap().len(), 2);
    assert_eq!(e.request(&req.request_id).unwrap().state, RequestState::Pending);
    assert!(e.rules().is_empty());
}
