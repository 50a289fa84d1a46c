//! JSON API over a frozen embedding store.
//!
//! Fictitious artists are injected into a private copy of the dataset for
//! each request; the base graph and store never change. Every client
//! session (the `x-session` header) keeps its own history of injections.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use anyhow::Context;
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use gatsy::recommend::{project_2d, recommend_fictitious};
use gatsy::{Dataset, EmbeddingStore, Error, FictitiousArtistSpec, ModelParams, Recommendation};
use serde::{Deserialize, Serialize};

pub const SESSION_HEADER: &str = "x-session";
const DEFAULT_SESSION: &str = "default";
const DEFAULT_K: usize = 5;
const SEARCH_LIMIT: usize = 50;

pub struct AppState {
    store: EmbeddingStore,
    dataset: Dataset,
    params: ModelParams,
    projection: Vec<ProjectedArtist>,
    sessions: Mutex<HashMap<String, Vec<FictitiousResult>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtistSummary {
    pub index: usize,
    pub id: String,
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub genre: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtistDetail {
    #[serde(flatten)]
    pub artist: ArtistSummary,
    pub degree: usize,
    pub neighbors: Vec<ArtistSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectedArtist {
    pub index: usize,
    pub id: String,
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub genre: Option<String>,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FictitiousRequest {
    pub name: String,
    /// Node indices of the member artists.
    pub members: Vec<usize>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub features: Option<Vec<f64>>,
}

fn default_k() -> usize {
    DEFAULT_K
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FictitiousResult {
    pub name: String,
    pub members: Vec<ArtistSummary>,
    pub recommendation: Recommendation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub artists: usize,
    pub provenance: String,
}

#[derive(Debug, Deserialize)]
pub struct SearchParams {
    #[serde(default)]
    q: String,
    limit: Option<usize>,
}

#[derive(Debug, Deserialize)]
pub struct KParams {
    k: Option<usize>,
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    candidates: Vec<String>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    candidates: Vec<String>,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
            candidates: Vec::new(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::Query {
                ref reason,
                ref candidates,
                ..
            } => ApiError {
                status: if reason.contains("share this name") {
                    StatusCode::BAD_REQUEST
                } else {
                    StatusCode::NOT_FOUND
                },
                candidates: candidates.clone(),
                message: e.to_string(),
            },
            Error::Invalid(_) | Error::Shape { .. } => ApiError::bad_request(e.to_string()),
            other => ApiError {
                status: StatusCode::INTERNAL_SERVER_ERROR,
                message: other.to_string(),
                candidates: Vec::new(),
            },
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::bad_request(r.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        ApiError::bad_request(r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.message,
            candidates: self.candidates,
        };
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

impl AppState {
    /// Builds the store and the projection once; both stay frozen.
    pub fn new(ckpt: &[u8], params: ModelParams, dataset: Dataset) -> anyhow::Result<Self> {
        let store = EmbeddingStore::build(ckpt, &dataset)?;
        let proj = project_2d(store.embedding()).context("projecting the embedding")?;
        let projection = (0..store.len())
            .map(|i| ProjectedArtist {
                index: i,
                id: store.ids()[i].clone(),
                name: store.names()[i].clone(),
                genre: store.genre(i).map(str::to_string),
                x: proj.coords.get(i, 0),
                y: proj.coords.get(i, 1),
            })
            .collect();
        Ok(AppState {
            store,
            dataset,
            params,
            projection,
            sessions: Mutex::new(HashMap::new()),
        })
    }

    pub fn store(&self) -> &EmbeddingStore {
        &self.store
    }

    fn summary(&self, i: usize) -> ArtistSummary {
        ArtistSummary {
            index: i,
            id: self.store.ids()[i].clone(),
            name: self.store.names()[i].clone(),
            genre: self.store.genre(i).map(str::to_string),
        }
    }

    fn check_k(&self, k: usize) -> Result<usize, ApiError> {
        if k == 0 {
            return Err(ApiError::bad_request("k must be at least 1"));
        }
        Ok(k.min(self.store.len().saturating_sub(1)))
    }
}

fn session_of(headers: &HeaderMap) -> String {
    headers
        .get(SESSION_HEADER)
        .and_then(|v| v.to_str().ok())
        .filter(|s| !s.is_empty())
        .unwrap_or(DEFAULT_SESSION)
        .to_string()
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        artists: state.store.len(),
        provenance: state.store.provenance().to_string(),
    })
}

async fn search(
    State(state): State<Arc<AppState>>,
    params: Result<Query<SearchParams>, QueryRejection>,
) -> ApiResult<Vec<ArtistSummary>> {
    let Query(params) = params?;
    let limit = params.limit.unwrap_or(SEARCH_LIMIT);
    Ok(Json(
        state.store.search(&params.q, limit).into_iter().map(|i| state.summary(i)).collect(),
    ))
}

async fn artist(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<ArtistDetail> {
    let i = state.store.index_of_id(&id).ok_or_else(|| ApiError {
        status: StatusCode::NOT_FOUND,
        message: format!("no artist with id `{id}`"),
        candidates: state.store.suggest(&id, 5),
    })?;
    let g = &state.dataset.graph;
    Ok(Json(ArtistDetail {
        artist: state.summary(i),
        degree: g.degree(i),
        neighbors: g.neighbors(i).iter().map(|&j| state.summary(j)).collect(),
    }))
}

async fn recommend(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    params: Result<Query<KParams>, QueryRejection>,
) -> ApiResult<Recommendation> {
    let Query(params) = params?;
    let k = state.check_k(params.k.unwrap_or(DEFAULT_K))?;
    Ok(Json(state.store.recommend(&id, k)?))
}

async fn projection(State(state): State<Arc<AppState>>) -> Json<Vec<ProjectedArtist>> {
    Json(state.projection.clone())
}

async fn history(State(state): State<Arc<AppState>>, headers: HeaderMap) -> Json<Vec<FictitiousResult>> {
    let session = session_of(&headers);
    let sessions = state.sessions.lock().unwrap_or_else(|e| e.into_inner());
    Json(sessions.get(&session).cloned().unwrap_or_default())
}

async fn fictitious(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Result<Json<FictitiousRequest>, JsonRejection>,
) -> ApiResult<FictitiousResult> {
    let Json(req) = body?;
    let k = state.check_k(req.k)?;
    if req.members.is_empty() {
        return Err(ApiError::bad_request("members must not be empty"));
    }
    let n = state.store.len();
    if let Some(bad) = req.members.iter().find(|&&i| i >= n) {
        return Err(ApiError::bad_request(format!("member index {bad} out of range (0..{n})")));
    }
    let spec = FictitiousArtistSpec {
        name: req.name.clone(),
        members: req.members.iter().map(|&i| state.store.ids()[i].clone()).collect(),
        features: req.features.clone(),
    };
    let worker = Arc::clone(&state);
    let (recommendation, _) =
        tokio::task::spawn_blocking(move || recommend_fictitious(&worker.params, &worker.dataset, &spec, k))
            .await
            .map_err(|e| ApiError {
                status: StatusCode::INTERNAL_SERVER_ERROR,
                message: e.to_string(),
                candidates: Vec::new(),
            })??;
    let mut seen = std::collections::HashSet::new();
    let members: Vec<usize> = req.members.iter().copied().filter(|i| seen.insert(*i)).collect();
    let result = FictitiousResult {
        name: req.name,
        members: members.into_iter().map(|i| state.summary(i)).collect(),
        recommendation,
    };
    state
        .sessions
        .lock()
        .unwrap_or_else(|e| e.into_inner())
        .entry(session_of(&headers))
        .or_default()
        .push(result.clone());
    Ok(Json(result))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/artists", get(search))
        .route("/api/artists/{id}", get(artist))
        .route("/api/recommend/{id}", get(recommend))
        .route("/api/projection", get(projection))
        .route("/api/fictitious", get(history).post(fictitious))
        .with_state(state)
}

pub async fn serve(state: AppState, addr: SocketAddr) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    println!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state))).await?;
    Ok(())
}
