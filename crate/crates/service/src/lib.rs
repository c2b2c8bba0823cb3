//! REST service for interactive editing sessions.
//!
//! Routes:
//! - `POST /api/session` with `{"random_scene": seed}` or `{"png": base64}`
//! - `POST /api/session/{id}/edit` with `{"instruction": text}`, optional `?sample=true`
//! - `POST /api/session/{id}/undo`
//! - `GET /api/session/{id}/history`
//! - `GET /api/health`
//!
//! Anything else is served from the static directory, when one is configured.

pub mod api;
pub mod session;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use timgan_core::editor::Model;
use timgan_core::scenegen::{render_scene, DatasetConfig, SceneDescription};
use tokio::sync::Mutex;

pub use api::{ApiError, CreateResponse, EditResponse, ErrorBody, HealthResponse, HistoryEntry, HistoryResponse};
use api::{parse_create_request, parse_edit_request, png_b64, SessionSource};
use session::{Session, SessionStore};

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub ttl: Duration,
    pub capacity: usize,
    /// Largest accepted request body in bytes.
    pub max_body: usize,
    pub static_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            ttl: Duration::from_secs(3600),
            capacity: 256,
            max_body: 4 * 1024 * 1024,
            static_dir: None,
        }
    }
}

/// Shared handler state. The model is read-only for the server's lifetime.
#[derive(Clone)]
pub struct AppState {
    model: Arc<Model<f32>>,
    sessions: Arc<Mutex<SessionStore>>,
}

impl AppState {
    pub fn new(model: Model<f32>, config: &ServiceConfig) -> Self {
        AppState {
            model: Arc::new(model),
            sessions: Arc::new(Mutex::new(SessionStore::new(config.ttl, config.capacity))),
        }
    }
}

pub fn router(model: Model<f32>, config: &ServiceConfig) -> Router {
    let state = AppState::new(model, config);
    let max_body = config.max_body;
    let api = Router::new()
        .route("/api/health", get(health))
        .route("/api/session", post(create_session))
        .route("/api/session/{id}/edit", post(apply_edit))
        .route("/api/session/{id}/undo", post(undo))
        .route("/api/session/{id}/history", get(history))
        .layer(DefaultBodyLimit::max(max_body))
        .with_state(state);
    match &config.static_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

/// Binds `addr` and serves until the process stops.
pub async fn serve(model: Model<f32>, config: ServiceConfig, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(model, &config)).await
}

fn body(bytes: Result<Bytes, BytesRejection>) -> Result<Bytes, ApiError> {
    bytes.map_err(|e| ApiError::new(e.status(), e.body_text()))
}

async fn health(State(state): State<AppState>) -> Json<HealthResponse> {
    let sessions = state.sessions.lock().await.len();
    Json(HealthResponse {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        variant: state.model.config.variant.to_string(),
        image_size: state.model.config.image_size,
        sessions,
    })
}

async fn create_session(
    State(state): State<AppState>,
    bytes: Result<Bytes, BytesRejection>,
) -> Result<Json<CreateResponse>, ApiError> {
    let side = state.model.config.image_size;
    let image = match parse_create_request(&body(bytes)?, side)? {
        SessionSource::Png(img) => img,
        SessionSource::RandomScene(seed) => {
            let data = DatasetConfig::new(1, 1, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scene = SceneDescription::random(&mut rng, side, data.min_objects, data.max_objects)
                .map_err(|e| ApiError::bad_request(e.to_string()))?;
            render_scene(&scene)
        }
    };
    let id = uuid::Uuid::new_v4().simple().to_string();
    let image_b64 = png_b64(&image)?;
    let mut store = state.sessions.lock().await;
    store
        .insert(Session::new(id.clone(), image), Instant::now())
        .ok_or_else(|| ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, "session capacity reached, try again later"))?;
    Ok(Json(CreateResponse { id, image_b64, step: 0 }))
}

async fn lookup(state: &AppState, id: &str) -> Result<session::SharedSession, ApiError> {
    state
        .sessions
        .lock()
        .await
        .get(id, Instant::now())
        .ok_or_else(|| ApiError::not_found(id))
}

#[derive(Debug, Default, Deserialize)]
struct EditQuery {
    #[serde(default)]
    sample: bool,
}

async fn apply_edit(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(query): Query<EditQuery>,
    bytes: Result<Bytes, BytesRejection>,
) -> Result<Json<EditResponse>, ApiError> {
    let instruction = parse_edit_request(&body(bytes)?)?;
    let shared = lookup(&state, &id).await?;
    // Held across inference so edits on one session apply in arrival order.
    let mut session = shared.lock().await;
    let image = session.current().image.clone();
    let model = state.model.clone();
    let text = instruction.clone();
    let output = tokio::task::spawn_blocking(move || {
        if query.sample {
            let mut rng = rand::rng();
            model.edit(&image, &text, Some(&mut rng))
        } else {
            model.edit(&image, &text, None)
        }
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?
    .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    session.push(instruction, output);
    let step = session.step();
    EditResponse::from_step(step, session.current(), state.model.config.image_size).map(Json)
}

async fn undo(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<EditResponse>, ApiError> {
    let shared = lookup(&state, &id).await?;
    let mut session = shared.lock().await;
    session.undo();
    EditResponse::from_step(session.step(), session.current(), state.model.config.image_size).map(Json)
}

async fn history(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<HistoryResponse>, ApiError> {
    let shared = lookup(&state, &id).await?;
    let session = shared.lock().await;
    let steps = session
        .history()
        .iter()
        .enumerate()
        .map(|(step, s)| {
            Ok(HistoryEntry {
                step,
                instruction: s.instruction.clone(),
                thumbnail_b64: png_b64(&s.image)?,
            })
        })
        .collect::<Result<_, ApiError>>()?;
    Ok(Json(HistoryResponse { id, steps }))
}
