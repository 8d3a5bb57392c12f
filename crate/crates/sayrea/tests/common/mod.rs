#![allow(dead_code)]

use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use sayrea::api::{router, AppState, Clock};
use sayrea::store::DataDir;
use sayrea_core::catalog::Catalog;
use sayrea_core::context::Registry;
use sayrea_core::engine::{Engine, EngineConfig, JournalEntry};
use sayrea_core::identify::{Identifier, Lexicon, MockIdentifier};
use serde_json::Value;
use tower::ServiceExt;

pub fn deps() -> (Arc<Registry>, Arc<Catalog>, Arc<dyn Identifier>) {
    let reg = Arc::new(Registry::default_registry());
    let id: Arc<dyn Identifier> = Arc::new(MockIdentifier::new(Lexicon::default_lexicon(), reg.clone()));
    (reg, Arc::new(Catalog::default_catalog()), id)
}

pub fn engine() -> Engine {
    engine_from(Vec::new())
}

pub fn engine_from(entries: Vec<JournalEntry>) -> Engine {
    let (reg, cat, id) = deps();
    Engine::from_journal(reg, cat, id, EngineConfig::default(), entries).unwrap()
}

/// Clock that advances one second per reading.
pub fn ticking_clock(start: i64) -> Clock {
    let t = Arc::new(AtomicI64::new(start));
    Arc::new(move || t.fetch_add(1_000, Ordering::SeqCst))
}

pub struct TestApp {
    pub state: AppState,
    pub router: Router,
}

impl TestApp {
    pub fn new(engine: Engine, store: Option<DataDir>, token: Option<&str>) -> Self {
        let state = AppState::new(engine, store, ticking_clock(1_709_510_400_000), token.map(str::to_string));
        TestApp { router: router(state.clone()), state }
    }

    pub fn plain() -> Self {
        TestApp::new(engine(), None, None)
    }

    pub async fn send(&self, method: Method, path: &str, body: Option<&Value>, token: Option<&str>) -> (StatusCode, Value) {
        let mut req = Request::builder().method(method).uri(path);
        if let Some(t) = token {
            req = req.header("authorization", format!("Bearer {t}"));
        }
        let body = match body {
            Some(b) => {
                req = req.header("content-type", "application/json");
                Body::from(serde_json::to_vec(b).unwrap())
            }
            None => Body::empty(),
        };
        let resp = self.router.clone().oneshot(req.body(body).unwrap()).await.unwrap();
        let status = resp.status();
        let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
        let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
        (status, v)
    }

    pub async fn get(&self, path: &str) -> (StatusCode, Value) {
        self.send(Method::GET, path, None, None).await
    }

    pub async fn post(&self, path: &str, body: Value) -> (StatusCode, Value) {
        self.send(Method::POST, path, Some(&body), None).await
    }

    pub async fn ok(&self, path: &str, body: Value) -> Value {
        let (status, v) = self.post(path, body).await;
        assert_eq!(status, StatusCode::OK, "{path}: {v}");
        v
    }
}
