//! JSON HTTP API over the verification engine.
//!
//! Routes:
//! - `POST /api/verify` with `{"url": ..}` or `{"html": ..}` plus `"sources"`
//! - `GET /api/sources`
//! - `GET /api/health`
//!
//! The embedding table loads in the background after startup; until it is
//! ready, verification answers 503 with `Retry-After`.

use std::net::SocketAddr;
use std::sync::{Arc, OnceLock};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tower_http::cors::CorsLayer;
use tracing::{error, info};

use evidex_core::config::Config;
use evidex_core::pipeline::{registry_from_config, Engine, PipelineError, VerifyInput};
use evidex_core::sourceclient::{SourceFailure, SourceRegistry};

pub const PORT_ENV: &str = "EVIDEX_PORT";
pub const DEFAULT_PORT: u16 = 8080;
/// Seconds a client should wait before retrying while embeddings load.
pub const RETRY_AFTER_SECS: u32 = 2;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("invalid source registry: {0}")]
    Registry(String),
    #[error("invalid CORS origin {0:?}")]
    Cors(String),
    #[error("binding {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        source: std::io::Error,
    },
    #[error("server error: {0}")]
    Serve(std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceEntry {
    pub id: String,
    pub display_name: String,
    pub enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub embeddings_loaded: bool,
    pub vocab_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid_sources: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_errors: Option<Vec<SourceFailure>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct VerifyRequest {
    url: Option<String>,
    html: Option<String>,
    sources: Vec<String>,
}

struct Shared {
    config: Config,
    registry: Arc<SourceRegistry>,
    engine: OnceLock<Arc<Engine>>,
    load_error: OnceLock<String>,
}

/// Service state; cheap to clone.
#[derive(Clone)]
pub struct AppState {
    shared: Arc<Shared>,
}

impl AppState {
    /// State with no engine yet; call [`AppState::start_loading`] or
    /// [`AppState::install`].
    pub fn new(config: Config) -> Result<Self, ServiceError> {
        let registry =
            registry_from_config(&config).map_err(|e| ServiceError::Registry(e.to_string()))?;
        Ok(AppState {
            shared: Arc::new(Shared {
                config,
                registry: Arc::new(registry),
                engine: OnceLock::new(),
                load_error: OnceLock::new(),
            }),
        })
    }

    /// State around an engine that is already built.
    pub fn ready(engine: Arc<Engine>) -> Result<Self, ServiceError> {
        let state = Self::new(engine.config().clone())?;
        state.install(engine);
        Ok(state)
    }

    pub fn install(&self, engine: Arc<Engine>) {
        let _ = self.shared.engine.set(engine);
    }

    pub fn engine(&self) -> Option<&Arc<Engine>> {
        self.shared.engine.get()
    }

    /// Builds the engine on a blocking thread.
    pub fn start_loading(&self) -> tokio::task::JoinHandle<()> {
        let state = self.clone();
        tokio::task::spawn_blocking(move || {
            match Engine::from_config(state.shared.config.clone()) {
                Ok(engine) => {
                    info!(vocab = engine.table().len(), "engine ready");
                    state.install(Arc::new(engine));
                }
                Err(e) => {
                    error!(error = %e, "engine failed to load");
                    let _ = state.shared.load_error.set(e.to_string());
                }
            }
        })
    }

    fn registry(&self) -> Arc<SourceRegistry> {
        match self.engine() {
            Some(engine) => engine.registry(),
            None => self.shared.registry.clone(),
        }
    }
}

pub fn router(state: AppState) -> Result<Router, ServiceError> {
    let mut app = Router::new()
        .route("/api/verify", post(verify))
        .route("/api/sources", get(sources))
        .route("/api/health", get(health));
    if let Some(origin) = &state.shared.config.cors_origin {
        let origin = HeaderValue::from_str(origin).map_err(|_| ServiceError::Cors(origin.clone()))?;
        app = app.layer(
            CorsLayer::new()
                .allow_origin(origin)
                .allow_methods([Method::GET, Method::POST])
                .allow_headers([header::CONTENT_TYPE]),
        );
    }
    Ok(app.with_state(state))
}

/// Port from `EVIDEX_PORT`, else 8080.
pub fn port_from_env() -> Result<u16, String> {
    match std::env::var(PORT_ENV) {
        Ok(v) => v.parse().map_err(|_| format!("{PORT_ENV} is not a port: {v:?}")),
        Err(_) => Ok(DEFAULT_PORT),
    }
}

/// Binds `addr`, starts loading the engine and serves until `shutdown`
/// resolves.
pub async fn serve(
    config: Config,
    addr: SocketAddr,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    let state = AppState::new(config)?;
    let app = router(state.clone())?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|source| ServiceError::Bind { addr, source })?;
    info!(%addr, "listening");
    state.start_loading();
    axum::serve(listener, app)
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(ServiceError::Serve)
}

fn error_response(status: StatusCode, body: ErrorBody) -> Response {
    (status, Json(body)).into_response()
}

fn plain_error(status: StatusCode, message: impl Into<String>) -> Response {
    error_response(
        status,
        ErrorBody {
            error: message.into(),
            valid_sources: None,
            source_errors: None,
        },
    )
}

async fn verify(State(state): State<AppState>, body: Bytes) -> Response {
    let request: VerifyRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return plain_error(StatusCode::BAD_REQUEST, format!("invalid request body: {e}")),
    };
    let input = match (request.url, request.html) {
        (Some(url), None) => VerifyInput::Url(url),
        (None, Some(html)) => VerifyInput::Html { html, url: None },
        _ => return plain_error(StatusCode::BAD_REQUEST, "give exactly one of url and html"),
    };
    if request.sources.is_empty() {
        return plain_error(StatusCode::BAD_REQUEST, "select at least one source");
    }
    let registry = state.registry();
    if let Some(bad) = request.sources.iter().find(|id| registry.enabled(id).is_err()) {
        let valid = registry.iter().filter(|s| s.enabled).map(|s| s.id.clone()).collect();
        return error_response(
            StatusCode::BAD_REQUEST,
            ErrorBody {
                error: format!("unknown source {bad:?}"),
                valid_sources: Some(valid),
                source_errors: None,
            },
        );
    }
    let Some(engine) = state.engine().cloned() else {
        if let Some(e) = state.shared.load_error.get() {
            return plain_error(StatusCode::SERVICE_UNAVAILABLE, format!("engine failed to load: {e}"));
        }
        let mut response = plain_error(StatusCode::SERVICE_UNAVAILABLE, "embeddings are still loading");
        response
            .headers_mut()
            .insert(header::RETRY_AFTER, HeaderValue::from(RETRY_AFTER_SECS));
        return response;
    };
    let sources = request.sources;
    let outcome = tokio::task::spawn_blocking(move || engine.verify(&input, &sources)).await;
    match outcome {
        Ok(Ok(report)) => Json(report).into_response(),
        Ok(Err(e)) => pipeline_error(e),
        Err(e) => plain_error(StatusCode::INTERNAL_SERVER_ERROR, format!("verification aborted: {e}")),
    }
}

fn pipeline_error(e: PipelineError) -> Response {
    if e.is_extraction() {
        return plain_error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string());
    }
    match e {
        PipelineError::AllSourcesFailed(failures) => error_response(
            StatusCode::BAD_GATEWAY,
            ErrorBody {
                error: "all sources failed".into(),
                valid_sources: None,
                source_errors: Some(failures),
            },
        ),
        PipelineError::Query(_) => plain_error(StatusCode::BAD_REQUEST, e.to_string()),
        other => plain_error(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
    }
}

async fn sources(State(state): State<AppState>) -> Json<Vec<SourceEntry>> {
    Json(
        state
            .registry()
            .iter()
            .map(|s| SourceEntry {
                id: s.id.clone(),
                display_name: s.display_name.clone(),
                enabled: s.enabled,
            })
            .collect(),
    )
}

async fn health(State(state): State<AppState>) -> Json<Health> {
    let engine = state.engine();
    let error = state.shared.load_error.get().cloned();
    Json(Health {
        status: if error.is_some() { "error" } else { "ok" }.into(),
        embeddings_loaded: engine.is_some(),
        vocab_size: engine.map_or(0, |e| e.table().len()),
        error,
    })
}
