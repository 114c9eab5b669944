//! JSON endpoints under `/api/`.

use std::path::Path;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{DefaultBodyLimit, Path as UrlPath, Query, Request, State};
use axum::http::header::{AUTHORIZATION, COOKIE, SET_COOKIE};
use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Extension, Json, Router};
use chrono::{DateTime, Utc};
use litatlas_core::recommend::{recommend, RecommendError, Verdict, DEFAULT_RECOMMENDATIONS};
use litatlas_core::search::{search_text, DEFAULT_LIMIT};
use litatlas_core::store::{Document, StoreError};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use crate::remote::unpack_snapshot;
use crate::state::{AppState, ReloadError, Served, SnapshotInfo};

pub const USER_COOKIE: &str = "litatlas_user";
/// Similar papers shown with a paper unless `top_k` says otherwise.
pub const DEFAULT_SIMILAR: usize = 10;
pub const DEFAULT_PAGE: usize = 50;
pub const MAX_PAGE: usize = 1000;
const UPLOAD_LIMIT: usize = 4 << 30;

type Shared = State<Arc<AppState>>;

/// Error body `{error, detail}` with a conventional status code.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    error: &'static str,
    detail: String,
}

impl ApiError {
    fn new(status: StatusCode, error: &'static str, detail: impl Into<String>) -> Self {
        ApiError {
            status,
            error,
            detail: detail.into(),
        }
    }

    fn bad_request(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", detail)
    }

    fn unknown_document(doc_id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "unknown_document", format!("no paper with id {doc_id:?}"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        #[derive(Serialize)]
        struct Body<'a> {
            error: &'a str,
            detail: &'a str,
        }
        let body = Json(Body {
            error: self.error,
            detail: &self.detail,
        });
        (self.status, body).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::new(r.status(), "bad_request", r.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        ApiError::bad_request(r.body_text())
    }
}

impl From<ReloadError> for ApiError {
    fn from(e: ReloadError) -> Self {
        let status = match &e {
            ReloadError::StaleVersion { .. } => StatusCode::CONFLICT,
            ReloadError::Store(StoreError::CorruptSnapshot(_) | StoreError::MissingSnapshot(_)) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            ReloadError::Store(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, "snapshot_rejected", e.to_string())
    }
}

/// Opaque per-browser identity from the `litatlas_user` cookie.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserId(pub String);

fn valid_token(t: &str) -> bool {
    t.len() == 32 && t.bytes().all(|b| b.is_ascii_hexdigit())
}

fn cookie_token(headers: &HeaderMap) -> Option<String> {
    headers
        .get_all(COOKIE)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .flat_map(|s| s.split(';'))
        .filter_map(|kv| kv.trim().split_once('='))
        .find(|(k, v)| *k == USER_COOKIE && valid_token(v))
        .map(|(_, v)| v.to_string())
}

/// Issues a random 128-bit token to clients without a valid one. Nothing is
/// stored until the first rating.
async fn user_cookie(mut req: Request, next: Next) -> Response {
    let (token, fresh) = match cookie_token(req.headers()) {
        Some(t) => (t, false),
        None => (format!("{:032x}", rand::random::<u128>()), true),
    };
    req.extensions_mut().insert(UserId(token.clone()));
    let mut resp = next.run(req).await;
    if fresh {
        let cookie = format!("{USER_COOKIE}={token}; Path=/; Max-Age=31536000; HttpOnly; SameSite=Lax");
        resp.headers_mut()
            .append(SET_COOKIE, HeaderValue::from_str(&cookie).expect("token is ASCII hex"));
    }
    resp
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PaperSummary {
    pub doc_id: String,
    pub title: String,
    pub year: Option<i32>,
    pub venue: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

fn summary(served: &Served, doc_id: &str, score: Option<f64>) -> PaperSummary {
    let doc = served.snapshot.corpus.get(doc_id);
    PaperSummary {
        doc_id: doc_id.to_string(),
        title: doc.map(|d| d.title.clone()).unwrap_or_default(),
        year: doc.and_then(|d| d.published_year),
        venue: doc.map(|d| d.venue.clone()).unwrap_or_default(),
        score,
    }
}

fn page_limit(limit: Option<usize>, default: usize) -> Result<usize, ApiError> {
    match limit.unwrap_or(default) {
        0 => Err(ApiError::bad_request("limit must be >= 1")),
        n if n > MAX_PAGE => Err(ApiError::bad_request(format!("limit must be <= {MAX_PAGE}"))),
        n => Ok(n),
    }
}

#[derive(Debug, Serialize)]
struct Health {
    status: &'static str,
    #[serde(flatten)]
    snapshot: SnapshotInfo,
}

async fn health(State(state): Shared) -> Json<Health> {
    Json(Health {
        status: "ok",
        snapshot: state.current().info(),
    })
}

#[derive(Debug, Deserialize)]
struct ListParams {
    limit: Option<usize>,
    offset: Option<usize>,
    q: Option<String>,
}

#[derive(Debug, Serialize)]
struct PaperPage {
    total: usize,
    offset: usize,
    limit: usize,
    papers: Vec<PaperSummary>,
}

async fn list_papers(
    State(state): Shared,
    params: Result<Query<ListParams>, QueryRejection>,
) -> Result<Json<PaperPage>, ApiError> {
    let Query(p) = params?;
    let limit = page_limit(p.limit, DEFAULT_PAGE)?;
    let offset = p.offset.unwrap_or(0);
    let served = state.current();
    let s = &served.snapshot;
    let (total, papers) = match p.q.as_deref().map(str::trim).filter(|q| !q.is_empty()) {
        None => (
            s.corpus.len(),
            s.corpus
                .doc_ids()
                .skip(offset)
                .take(limit)
                .map(|id| summary(&served, id, None))
                .collect(),
        ),
        Some(q) => {
            let hits = search_text(&s.inverted_index, &s.vocabulary, q, s.corpus.len().max(1))
                .map_err(|e| ApiError::bad_request(e.to_string()))?;
            let papers = hits
                .ranked
                .iter()
                .skip(offset)
                .take(limit)
                .map(|(id, score)| summary(&served, id, Some(*score)))
                .collect();
            (hits.ranked.len(), papers)
        }
    };
    Ok(Json(PaperPage {
        total,
        offset,
        limit,
        papers,
    }))
}

#[derive(Debug, Deserialize)]
struct DetailParams {
    top_k: Option<usize>,
}

#[derive(Debug, Serialize)]
struct PaperDetail {
    document: Document,
    x: Option<f64>,
    y: Option<f64>,
    similar: Vec<PaperSummary>,
}

async fn get_paper(
    State(state): Shared,
    UrlPath(doc_id): UrlPath<String>,
    params: Result<Query<DetailParams>, QueryRejection>,
) -> Result<Json<PaperDetail>, ApiError> {
    let Query(p) = params?;
    let top_k = page_limit(p.top_k, DEFAULT_SIMILAR)?;
    let served = state.current();
    let s = &served.snapshot;
    let document = s.corpus.get(&doc_id).ok_or_else(|| ApiError::unknown_document(&doc_id))?;
    let similar = s
        .similarity_graph
        .top_k_similar(&doc_id)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .iter()
        .take(top_k)
        .map(|(id, score)| summary(&served, id, Some(*score)))
        .collect();
    let xy = s.embedding.coords.get(&doc_id);
    Ok(Json(PaperDetail {
        document: document.clone(),
        x: xy.map(|p| p[0]),
        y: xy.map(|p| p[1]),
        similar,
    }))
}

#[derive(Debug, Serialize)]
struct MapPoint<'a> {
    doc_id: &'a str,
    x: f64,
    y: f64,
    title: &'a str,
    year: Option<i32>,
    venue: &'a str,
}

async fn map(State(state): Shared) -> Response {
    let served = state.current();
    let s = &served.snapshot;
    let points: Vec<MapPoint<'_>> = s
        .embedding
        .coords
        .iter()
        .map(|(id, [x, y])| {
            let doc = s.corpus.get(id);
            MapPoint {
                doc_id: id,
                x: *x,
                y: *y,
                title: doc.map_or("", |d| d.title.as_str()),
                year: doc.and_then(|d| d.published_year),
                venue: doc.map_or("", |d| d.venue.as_str()),
            }
        })
        .collect();
    Json(points).into_response()
}

#[derive(Debug, Deserialize)]
struct SearchBody {
    text: String,
    limit: Option<usize>,
}

#[derive(Debug, Serialize)]
struct SearchResponse {
    results: Vec<PaperSummary>,
    query_terms_matched: usize,
    total_matches: usize,
    truncated_at: Option<usize>,
}

/// Stateless: the submitted text is neither logged nor stored.
async fn search(
    State(state): Shared,
    body: Result<Json<SearchBody>, JsonRejection>,
) -> Result<Json<SearchResponse>, ApiError> {
    let Json(body) = body?;
    let limit = body.limit.unwrap_or(DEFAULT_LIMIT);
    let served = state.current();
    let s = &served.snapshot;
    let r = search_text(&s.inverted_index, &s.vocabulary, &body.text, limit)
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(Json(SearchResponse {
        results: r
            .ranked
            .iter()
            .map(|(id, score)| summary(&served, id, Some(*score)))
            .collect(),
        query_terms_matched: r.query_terms_matched,
        total_matches: r.total_matches,
        truncated_at: r.truncated_at,
    }))
}

#[derive(Debug, Deserialize)]
struct RateBody {
    verdict: Verdict,
}

#[derive(Debug, Serialize)]
struct RatingView {
    doc_id: String,
    verdict: Verdict,
    rated_at: DateTime<Utc>,
}

async fn rate_paper(
    State(state): Shared,
    Extension(user): Extension<UserId>,
    UrlPath(doc_id): UrlPath<String>,
    body: Result<Json<RateBody>, JsonRejection>,
) -> Result<Json<RatingView>, ApiError> {
    let Json(body) = body?;
    let served = state.current();
    let mut profiles = state.profiles.lock().await;
    let profile = profiles
        .book()
        .profile_or_new(&user.0)
        .rate(&doc_id, body.verdict, Utc::now(), |d| served.snapshot.corpus.contains(d))
        .map_err(|e| match e {
            RecommendError::UnknownDocument(_) => ApiError::unknown_document(&doc_id),
            other => ApiError::bad_request(other.to_string()),
        })?;
    let entry = profile.ratings[&doc_id].clone();
    profiles.put(profile).map_err(|e| {
        tracing::error!(error = %e, "cannot persist profile");
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "storage_failure", e.to_string())
    })?;
    Ok(Json(RatingView {
        doc_id,
        verdict: entry.verdict,
        rated_at: entry.rated_at,
    }))
}

#[derive(Debug, Serialize)]
struct RatingsResponse {
    ratings: Vec<RatingView>,
}

async fn ratings(State(state): Shared, Extension(user): Extension<UserId>) -> Json<RatingsResponse> {
    let profile = state.profiles.lock().await.book().get(&user.0).cloned();
    let ratings = profile
        .map(|p| {
            p.ratings
                .into_iter()
                .map(|(doc_id, e)| RatingView {
                    doc_id,
                    verdict: e.verdict,
                    rated_at: e.rated_at,
                })
                .collect()
        })
        .unwrap_or_default();
    Json(RatingsResponse { ratings })
}

#[derive(Debug, Deserialize)]
struct RecommendParams {
    limit: Option<usize>,
}

#[derive(Debug, Serialize)]
struct RecommendResponse {
    recommendations: Vec<PaperSummary>,
    relevant_count: usize,
}

async fn recommendations(
    State(state): Shared,
    Extension(user): Extension<UserId>,
    params: Result<Query<RecommendParams>, QueryRejection>,
) -> Result<Json<RecommendResponse>, ApiError> {
    let Query(p) = params?;
    let limit = page_limit(p.limit, DEFAULT_RECOMMENDATIONS)?;
    let profile = state.profiles.lock().await.book().profile_or_new(&user.0);
    let served = state.current();
    let list = recommend(&profile, &served.snapshot.similarity_graph, limit)
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(Json(RecommendResponse {
        recommendations: list
            .iter()
            .map(|(id, score)| summary(&served, id, Some(*score)))
            .collect(),
        relevant_count: profile.relevant().count(),
    }))
}

fn check_admin(state: &AppState, headers: &HeaderMap) -> Result<(), ApiError> {
    let Some(expected) = &state.admin_token else {
        return Err(ApiError::new(
            StatusCode::FORBIDDEN,
            "admin_disabled",
            "start the service with an admin token to enable this endpoint",
        ));
    };
    let offered = headers
        .get(AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .unwrap_or_default();
    let same = offered.len() == expected.len()
        && offered
            .bytes()
            .zip(expected.bytes())
            .fold(0u8, |acc, (a, b)| acc | (a ^ b))
            == 0;
    if same {
        Ok(())
    } else {
        Err(ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong admin token"))
    }
}

async fn admin_reload(State(state): Shared, headers: HeaderMap) -> Result<Json<SnapshotInfo>, ApiError> {
    check_admin(&state, &headers)?;
    Ok(Json(state.reload().await?))
}

async fn admin_upload(State(state): Shared, headers: HeaderMap, body: Bytes) -> Result<Json<SnapshotInfo>, ApiError> {
    check_admin(&state, &headers)?;
    let parent = state.snapshot_path().parent().unwrap_or(Path::new(".")).to_path_buf();
    let staged = parent.join(format!(".upload-{:016x}", rand::random::<u64>()));
    std::fs::create_dir(&staged)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "storage_failure", e.to_string()))?;
    let result = match unpack_snapshot(&body, &staged) {
        Ok(()) => state.install_upload(staged.clone()).await.map_err(ApiError::from),
        Err(detail) => Err(ApiError::new(StatusCode::BAD_REQUEST, "bad_archive", detail)),
    };
    let _ = std::fs::remove_dir_all(&staged);
    Ok(Json(result?))
}

async fn api_not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

async fn method_not_allowed() -> ApiError {
    ApiError::new(StatusCode::METHOD_NOT_ALLOWED, "method_not_allowed", "method not allowed for this endpoint")
}

/// All routes. Doc ids containing `/` must be percent-encoded in paths.
/// When `ui_dir` is given its files are served under `/`.
pub fn router(state: Arc<AppState>, ui_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/papers", get(list_papers))
        .route("/papers/{doc_id}", get(get_paper))
        .route("/papers/{doc_id}/rating", post(rate_paper))
        .route("/map", get(map))
        .route("/search", post(search))
        .route("/ratings", get(ratings))
        .route("/recommendations", get(recommendations))
        .route("/admin/reload", post(admin_reload))
        .route(
            "/admin/snapshot",
            put(admin_upload).layer(DefaultBodyLimit::max(UPLOAD_LIMIT)),
        )
        .fallback(api_not_found)
        .method_not_allowed_fallback(method_not_allowed)
        .layer(middleware::from_fn(user_cookie))
        .with_state(state);
    let app = Router::new().nest("/api", api);
    match ui_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cookie_parsing() {
        let mut h = HeaderMap::new();
        let tok = "0123456789abcdef0123456789abcdef";
        h.insert(COOKIE, HeaderValue::from_str(&format!("a=1; {USER_COOKIE}={tok}; b=2")).unwrap());
        assert_eq!(cookie_token(&h).as_deref(), Some(tok));
        h.insert(COOKIE, HeaderValue::from_static("litatlas_user=../../etc"));
        assert_eq!(cookie_token(&h), None);
        assert_eq!(cookie_token(&HeaderMap::new()), None);
    }

    #[test]
    fn limits() {
        assert_eq!(page_limit(None, 7).unwrap(), 7);
        assert!(page_limit(Some(0), 7).is_err());
        assert!(page_limit(Some(MAX_PAGE + 1), 7).is_err());
    }
}
