//! HTTP routes under `/api/v1`.
//!
//! Request bodies are read as raw bytes and decoded here so that malformed
//! JSON produces the same `{stage, code, message}` error body as every other
//! failure. Engine and store calls run on the blocking pool.

use std::net::SocketAddr;

use axum::body::Bytes;
use axum::extract::{ConnectInfo, DefaultBodyLimit, Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use ask_core::bibliography::{CitationItem, ExportFormat, NewItem};
use ask_core::corpus::CorpusError;
use ask_core::feedback::{Feedback, QuestionFeedback, SystemFeedback};
use ask_core::pipeline::{ExtractionColumn, SearchRequest, DEFAULT_SYNTHESIS_N};
use ask_core::vectorstore::{parse_filter, Page};

use crate::error::ApiError;
use crate::state::SharedState;

/// Header carrying the anonymous session token.
pub const SESSION_HEADER: &str = "x-session-token";
pub const ANONYMOUS_SESSION: &str = "anonymous";
const MAX_BODY_BYTES: usize = 32 << 20;

pub fn router(state: SharedState) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/search", post(search))
        .route("/search/more", post(search_more))
        .route("/documents/:id", get(document))
        .route("/collections", post(create_collection).get(list_collections))
        .route("/collections/:id", get(get_collection))
        .route("/collections/:id/items", post(add_item))
        .route("/collections/:id/items/:item_id", delete(remove_item))
        .route("/collections/:id/import", post(import_items))
        .route("/collections/:id/export", get(export_collection))
        .route("/feedback/question", post(question_feedback))
        .route("/feedback/system", post(system_feedback))
        .route("/admin/feedback", get(admin_feedback))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .layer(middleware::from_fn_with_state(state.clone(), rate_limit))
        .with_state(state);
    Router::new()
        .nest("/api/v1", api)
        .fallback(|| async { ApiError::not_found("request", "no such endpoint") })
}

async fn rate_limit(State(state): State<SharedState>, request: Request, next: Next) -> Response {
    if let Some(ConnectInfo(addr)) = request.extensions().get::<ConnectInfo<SocketAddr>>() {
        if !state.limiter.check(addr.ip()) {
            return ApiError::new(
                StatusCode::TOO_MANY_REQUESTS,
                "request",
                "rate_limited",
                "request cap reached, retry later",
            )
            .into_response();
        }
    }
    next.run(request).await
}

fn decode<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::validation(format!("invalid request body: {e}")))
}

fn session_token(headers: &HeaderMap) -> Option<String> {
    headers
        .get(SESSION_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub corpus_size: usize,
    pub index_dimension: usize,
}

async fn health(State(state): State<SharedState>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        corpus_size: state.engine.corpus().len(),
        index_dimension: state.engine.index().dimension(),
    })
}

/// Wire form of a search. `filter` is the encoded grammar string.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchBody {
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub page: Option<Page>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub columns: Option<Vec<ExtractionColumn>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthesis_n: Option<usize>,
}

impl SearchBody {
    pub fn into_request(self) -> Result<SearchRequest, ApiError> {
        let mut request = SearchRequest::new(&self.question);
        if let Some(f) = &self.filter {
            request = request.with_filter(parse_filter(f)?);
        }
        if let Some(page) = self.page {
            request = request.with_page(page);
        }
        if let Some(columns) = self.columns {
            request = request.with_columns(columns);
        }
        request.synthesis_n = self.synthesis_n.unwrap_or(DEFAULT_SYNTHESIS_N);
        Ok(request)
    }
}

async fn search(State(state): State<SharedState>, body: Bytes) -> Result<Response, ApiError> {
    let request = decode::<SearchBody>(&body)?.into_request()?;
    let response = blocking(move || {
        let response = state.engine.ask(request)?;
        state.issued.insert(&response.question_id);
        Ok(response)
    })
    .await?;
    Ok(Json(response).into_response())
}

async fn search_more(State(state): State<SharedState>, body: Bytes) -> Result<Response, ApiError> {
    let body: SearchBody = decode(&body)?;
    let page = body
        .page
        .ok_or_else(|| ApiError::validation("`page` is required when loading more results"))?;
    let request = body.into_request()?;
    let fragment = blocking(move || Ok(state.engine.load_more(request, page)?)).await?;
    Ok(Json(fragment).into_response())
}

async fn document(State(state): State<SharedState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    match state.engine.corpus().get_document(&id) {
        Ok(doc) => Ok(Json(doc).into_response()),
        Err(CorpusError::NotFound(_)) => Err(ApiError::not_found("corpus", format!("no document `{id}`"))),
        Err(e) => Err(ApiError::internal(e.to_string())),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateCollectionBody {
    name: String,
}

async fn create_collection(
    State(state): State<SharedState>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, ApiError> {
    let body: CreateCollectionBody = decode(&body)?;
    let token = session_token(&headers);
    let collection = blocking(move || Ok(state.bibliography.create(&body.name, token.as_deref())?)).await?;
    Ok((StatusCode::CREATED, Json(collection)).into_response())
}

async fn list_collections(State(state): State<SharedState>, headers: HeaderMap) -> Result<Response, ApiError> {
    let token = session_token(&headers)
        .ok_or_else(|| ApiError::validation(format!("listing collections needs the `{SESSION_HEADER}` header")))?;
    Ok(Json(state.bibliography.list_for_session(&token)).into_response())
}

async fn get_collection(State(state): State<SharedState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(Json(state.bibliography.get(&id)?).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum AddItemBody {
    Document { doc_id: String },
    Item { item: Box<CitationItem> },
}

async fn add_item(
    State(state): State<SharedState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let body: AddItemBody = decode(&body)?;
    let collection = blocking(move || {
        let item = match body {
            AddItemBody::Document { doc_id } => match state.engine.corpus().get_document(&doc_id) {
                Ok(doc) => NewItem::Document(doc),
                Err(CorpusError::NotFound(_)) => {
                    return Err(ApiError::not_found("corpus", format!("no document `{doc_id}`")))
                }
                Err(e) => return Err(ApiError::internal(e.to_string())),
            },
            AddItemBody::Item { item } => NewItem::Item(*item),
        };
        Ok(state.bibliography.add_item(&id, item)?)
    })
    .await?;
    Ok(Json(collection).into_response())
}

async fn remove_item(
    State(state): State<SharedState>,
    Path((id, item_id)): Path<(String, String)>,
) -> Result<Response, ApiError> {
    let collection = blocking(move || Ok(state.bibliography.remove_item(&id, &item_id)?)).await?;
    Ok(Json(collection).into_response())
}

async fn import_items(
    State(state): State<SharedState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let outcome = blocking(move || Ok(state.bibliography.import_items(&id, &body)?)).await?;
    Ok(Json(outcome).into_response())
}

#[derive(Debug, Deserialize)]
struct ExportQuery {
    format: Option<String>,
}

async fn export_collection(
    State(state): State<SharedState>,
    Path(id): Path<String>,
    Query(query): Query<ExportQuery>,
) -> Result<Response, ApiError> {
    let format: ExportFormat = query.format.as_deref().unwrap_or("citation-json").parse()?;
    let bytes = blocking(move || Ok(state.bibliography.export(&id, format)?)).await?;
    Ok(([(header::CONTENT_TYPE, format.content_type())], bytes).into_response())
}

async fn question_feedback(
    State(state): State<SharedState>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, ApiError> {
    let feedback: QuestionFeedback = decode(&body)?;
    feedback.validate()?;
    if !state.issued.contains(&feedback.question_id) {
        return Err(ApiError::not_found(
            "feedback",
            format!("question `{}` was not issued by this service", feedback.question_id),
        ));
    }
    record(state, headers, Feedback::Question(feedback)).await
}

async fn system_feedback(
    State(state): State<SharedState>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, ApiError> {
    let feedback: SystemFeedback = decode(&body)?;
    record(state, headers, Feedback::System(feedback)).await
}

async fn record(state: SharedState, headers: HeaderMap, feedback: Feedback) -> Result<Response, ApiError> {
    let token = session_token(&headers).unwrap_or_else(|| ANONYMOUS_SESSION.to_string());
    let entry = blocking(move || Ok(state.feedback.record(feedback, &token)?)).await?;
    Ok((StatusCode::CREATED, Json(json!({ "id": entry.id }))).into_response())
}

async fn admin_feedback(State(state): State<SharedState>) -> Json<serde_json::Value> {
    let entries = state.feedback.entries();
    let score = state.feedback.system_score().ok();
    Json(json!({ "entries": entries, "umux_lite_score": score }))
}

/// Binds `addr` and serves until Ctrl-C.
pub async fn serve(state: SharedState, addr: SocketAddr) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state).into_make_service_with_connect_info::<SocketAddr>())
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
