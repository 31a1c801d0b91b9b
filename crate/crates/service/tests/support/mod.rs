//! In-process app construction and request helpers for the service tests.
#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use ask_core::corpus::{CurationPolicy, RawRecord};
use ask_service::config::{ConfigArgs, FileConfig};
use ask_service::{api, AppState, Config, SharedState};
use axum::body::{Body, Bytes};
use axum::extract::ConnectInfo;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

pub fn config_for(dir: &Path) -> Config {
    let args = ConfigArgs {
        data_dir: Some(dir.to_path_buf()),
        ..Default::default()
    };
    Config::from_layers(&args, &FileConfig::default()).unwrap()
}

pub fn open_app(config: Config) -> (SharedState, Router) {
    let state = Arc::new(AppState::open(config).unwrap());
    let router = api::router(state.clone());
    (state, router)
}

pub fn ingest(state: &AppState, records: Vec<RawRecord>) {
    let report = state.engine.ingest(records, &CurationPolicy::default()).unwrap();
    assert!(report.unindexed.is_empty());
    state.save_index().unwrap();
}

pub struct Reply {
    pub status: StatusCode,
    pub body: Bytes,
    pub content_type: Option<String>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or_else(|e| panic!("not JSON ({e}): {:?}", self.body))
    }
}

pub struct Call {
    method: Method,
    uri: String,
    body: Vec<u8>,
    headers: Vec<(String, String)>,
    peer: Option<SocketAddr>,
}

impl Call {
    pub fn get(uri: &str) -> Self {
        Self::new(Method::GET, uri)
    }

    pub fn post(uri: &str, body: &Value) -> Self {
        Self::new(Method::POST, uri).raw(serde_json::to_vec(body).unwrap())
    }

    pub fn delete(uri: &str) -> Self {
        Self::new(Method::DELETE, uri)
    }

    pub fn new(method: Method, uri: &str) -> Self {
        Self {
            method,
            uri: uri.to_string(),
            body: Vec::new(),
            headers: Vec::new(),
            peer: None,
        }
    }

    pub fn raw(mut self, body: Vec<u8>) -> Self {
        self.body = body;
        self
    }

    pub fn header(mut self, name: &str, value: &str) -> Self {
        self.headers.push((name.into(), value.into()));
        self
    }

    pub fn peer(mut self, addr: &str) -> Self {
        self.peer = Some(addr.parse().unwrap());
        self
    }

    pub async fn send(self, router: &Router) -> Reply {
        let mut builder = Request::builder()
            .method(self.method)
            .uri(self.uri)
            .header("content-type", "application/json");
        for (k, v) in &self.headers {
            builder = builder.header(k, v);
        }
        let mut request = builder.body(Body::from(self.body)).unwrap();
        if let Some(peer) = self.peer {
            request.extensions_mut().insert(ConnectInfo(peer));
        }
        let response = router.clone().oneshot(request).await.unwrap();
        let status = response.status();
        let content_type = response
            .headers()
            .get("content-type")
            .map(|v| v.to_str().unwrap().to_string());
        let body = response.into_body().collect().await.unwrap().to_bytes();
        Reply {
            status,
            body,
            content_type,
        }
    }
}

/// Replaces cache provenance markers so responses served from the cache
/// compare equal to freshly generated ones.
pub fn normalize(value: &mut Value) {
    match value {
        Value::Object(map) => {
            for (k, v) in map.iter_mut() {
                match k.as_str() {
                    "provenance" => *v = Value::String("normalized".into()),
                    "model_calls" => *v = Value::from(0),
                    _ => normalize(v),
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(normalize),
        _ => {}
    }
}

pub fn normalized_bytes(body: &[u8]) -> Vec<u8> {
    let mut v: Value = serde_json::from_slice(body).unwrap();
    normalize(&mut v);
    serde_json::to_vec(&v).unwrap()
}
