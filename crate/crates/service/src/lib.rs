//! HTTP backend for interactive annotation.
//!
//! Sessions hold a normalized volume and its annotation state. Slice image
//! embeddings are cached (LRU) so repeated box prompts on a slice only run
//! the decoder. Mutations of one session are serialized by a per-session
//! lock; the parameter set is shared read-only.

mod handlers;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::routing::{get, post, put};
use axum::Router;
use boxseg::annotate::AnnotationSession;
use boxseg::imgproc::{Modality, Volume};
use boxseg::model::{ImageEmbedding, ModelConfig, ParameterSet};
use lru::LruCache;

pub use handlers::{
    AssistResponse, CreateResponse, ExportResponse, MarkersRequest, MaskResponse, RefineRequest, SegmentRequest,
    SegmentResponse, SessionInfo, SynthRequest,
};

pub const DEFAULT_CACHE_CAPACITY: usize = 64;
pub const DEFAULT_PORT: u16 = 8080;
pub const ENV_CHECKPOINT: &str = "BOXSEG_CHECKPOINT";
pub const ENV_PORT: &str = "BOXSEG_PORT";

pub(crate) struct Session {
    pub volume: Arc<Volume>,
    pub source_modality: Modality,
    pub degenerate: bool,
    pub annotation: AnnotationSession,
    pub created: f64,
    pub updated: f64,
}

type SessionMap = HashMap<String, Arc<tokio::sync::Mutex<Session>>>;

/// Shared server state: one checkpoint, all sessions, the embedding cache.
pub struct AppState {
    pub(crate) params: Arc<ParameterSet>,
    pub(crate) cfg: ModelConfig,
    pub(crate) checkpoint_hash: String,
    pub(crate) sessions: RwLock<SessionMap>,
    /// Keyed by session and slice; every entry was computed with
    /// `params`, the only checkpoint this process ever loads.
    pub(crate) cache: Mutex<LruCache<(String, usize), Arc<ImageEmbedding>>>,
}

impl AppState {
    pub fn new(params: ParameterSet, cfg: ModelConfig, cache_capacity: usize) -> Self {
        let cap = NonZeroUsize::new(cache_capacity).unwrap_or(NonZeroUsize::MIN);
        Self {
            checkpoint_hash: params.content_hash(),
            params: Arc::new(params),
            cfg,
            sessions: RwLock::new(HashMap::new()),
            cache: Mutex::new(LruCache::new(cap)),
        }
    }

    pub fn from_checkpoint(path: &Path) -> boxseg::Result<Self> {
        let (cfg, params) = boxseg::iohub::load_checkpoint(path)?;
        Ok(Self::new(params, cfg, DEFAULT_CACHE_CAPACITY))
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn checkpoint_hash(&self) -> &str {
        &self.checkpoint_hash
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().expect("session map lock").len()
    }

    pub fn cached_embeddings(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/sessions", post(handlers::create_session))
        .route("/api/sessions/{id}", get(handlers::get_session))
        .route("/api/sessions/{id}/slices/{k}", get(handlers::get_slice))
        .route("/api/sessions/{id}/segment", post(handlers::segment))
        .route("/api/sessions/{id}/markers", post(handlers::submit_markers))
        .route("/api/sessions/{id}/assist", post(handlers::run_assist))
        .route("/api/sessions/{id}/masks/{k}", put(handlers::refine).get(handlers::get_mask))
        .route("/api/sessions/{id}/export", get(handlers::export))
        .with_state(state)
}

/// Checkpoint path and port from `BOXSEG_CHECKPOINT` / `BOXSEG_PORT`.
pub fn env_config() -> Result<(PathBuf, u16), String> {
    let ckpt = std::env::var_os(ENV_CHECKPOINT)
        .map(PathBuf::from)
        .ok_or_else(|| format!("{ENV_CHECKPOINT} is not set"))?;
    let port = match std::env::var(ENV_PORT) {
        Ok(p) => p.parse().map_err(|_| format!("{ENV_PORT}={p} is not a port"))?,
        Err(_) => DEFAULT_PORT,
    };
    Ok((ckpt, port))
}

pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}
