use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use base64::Engine;
use boxseg::annotate::{segment_embedded, slice_embedding, AnnotationSession, LinearMarker, SessionManifest};
use boxseg::imgproc::{normalize_volume, Modality};
use boxseg::iohub::{decode_volume, encode_png, rle_decode, rle_encode, RleMask};
use boxseg::model::BoundingBox;
use boxseg::synth::{generate_tumor_volume, SynthSpec};
use boxseg::Error;
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{AppState, Session};

pub(crate) struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::NotSegmented(_) => StatusCode::CONFLICT,
            Error::Io(_) | Error::Divergence { .. } | Error::NonFiniteGradient(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("request body: {e}")))
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> boxseg::Result<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

fn session(state: &AppState, id: &str) -> ApiResult<Arc<tokio::sync::Mutex<Session>>> {
    state
        .sessions
        .read()
        .expect("session map lock")
        .get(id)
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no session {id}")))
}

fn check_slice(s: &Session, k: usize) -> ApiResult<()> {
    let depth = s.volume.depth();
    if k >= depth {
        return Err(Error::SliceOutOfRange { index: k, depth }.into());
    }
    Ok(())
}

/// Body of a JSON session creation: a synthetic tumor volume.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthRequest {
    pub depth: usize,
    #[serde(default)]
    pub spec: SynthSpec,
}

#[derive(Debug, Deserialize)]
struct CreateJson {
    synth: SynthRequest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CreateResponse {
    pub id: String,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub modality: Modality,
    pub degenerate: bool,
}

/// `application/json` bodies carry `{"synth": {...}}`; anything else is
/// read as an MIV1 volume.
pub(crate) async fn create_session(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<CreateResponse>)> {
    let is_json = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("application/json"));
    let raw = if is_json {
        let req: CreateJson = parse(&body)?;
        blocking(move || Ok(generate_tumor_volume(&req.synth.spec, req.synth.depth)?.0)).await?
    } else {
        decode_volume(&body).map_err(Error::from)?.to_volume()?
    };
    let modality = raw.modality;
    let norm = blocking(move || normalize_volume(&raw)).await?;
    let volume = Arc::new(norm.output);
    let id = format!("{:032x}", rand::rng().random::<u128>());
    let t = now();
    let resp = CreateResponse {
        id: id.clone(),
        depth: volume.depth(),
        height: volume.height(),
        width: volume.width(),
        modality,
        degenerate: norm.degenerate,
    };
    let s = Session {
        annotation: AnnotationSession::new(&volume),
        volume,
        source_modality: modality,
        degenerate: norm.degenerate,
        created: t,
        updated: t,
    };
    state
        .sessions
        .write()
        .expect("session map lock")
        .insert(id, Arc::new(tokio::sync::Mutex::new(s)));
    Ok((StatusCode::CREATED, Json(resp)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub id: String,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub modality: Modality,
    pub degenerate: bool,
    pub created: f64,
    pub updated: f64,
    pub checkpoint_hash: String,
    pub state: SessionManifest,
}

pub(crate) async fn get_session(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Json<SessionInfo>> {
    let s = session(&state, &id)?;
    let s = s.lock().await;
    Ok(Json(SessionInfo {
        id,
        depth: s.volume.depth(),
        height: s.volume.height(),
        width: s.volume.width(),
        modality: s.source_modality,
        degenerate: s.degenerate,
        created: s.created,
        updated: s.updated,
        checkpoint_hash: state.checkpoint_hash.clone(),
        state: s.annotation.manifest(),
    }))
}

pub(crate) async fn get_slice(
    State(state): State<Arc<AppState>>,
    Path((id, k)): Path<(String, usize)>,
) -> ApiResult<Response> {
    let s = session(&state, &id)?;
    let volume = s.lock().await.volume.clone();
    if k >= volume.depth() {
        return Err(ApiError::new(StatusCode::NOT_FOUND, format!("no slice {k}")));
    }
    let png = blocking(move || encode_png(&volume.slice(k)?)).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentRequest {
    pub slice: usize,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub mask: RleMask,
    pub confidence: f32,
    pub inference_ms: f64,
    pub cache_hit: bool,
}

pub(crate) async fn segment(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<SegmentResponse>> {
    let req: SegmentRequest = parse(&body)?;
    let s = session(&state, &id)?;
    let mut s = s.lock().await;
    check_slice(&s, req.slice)?;
    let (w, h) = (s.volume.width(), s.volume.height());
    req.bbox.validate(w, h)?;

    let start = Instant::now();
    let key = (id, req.slice);
    let cached = state.cache.lock().expect("cache lock").get(&key).cloned();
    let cache_hit = cached.is_some();
    let embedding = match cached {
        Some(e) => e,
        None => {
            let (vol, params, cfg) = (s.volume.clone(), state.params.clone(), state.cfg.clone());
            let e = Arc::new(blocking(move || slice_embedding(&vol, req.slice, &params, &cfg)).await?);
            state.cache.lock().expect("cache lock").put(key, e.clone());
            e
        }
    };
    let (params, cfg, b) = (state.params.clone(), state.cfg.clone(), req.bbox);
    let result = blocking(move || segment_embedded(&embedding, &b, w, h, &params, &cfg)).await?;
    let elapsed = start.elapsed().as_secs_f64();

    let resp = SegmentResponse {
        mask: rle_encode(&result.mask),
        confidence: result.confidence,
        inference_ms: elapsed * 1e3,
        cache_hit,
    };
    s.annotation.record_segmentation(req.slice, req.bbox, result, elapsed)?;
    s.updated = now();
    Ok(Json(resp))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkersRequest {
    pub markers: Vec<LinearMarker>,
    /// Time the reader spent drawing them.
    #[serde(default)]
    pub seconds: f64,
}

pub(crate) async fn submit_markers(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<serde_json::Value>> {
    let req: MarkersRequest = parse(&body)?;
    if req.markers.is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "no markers given"));
    }
    let s = session(&state, &id)?;
    let mut s = s.lock().await;
    s.annotation.add_markers(&req.markers, req.seconds)?;
    s.updated = now();
    let slices: Vec<usize> = s.annotation.markers().keys().copied().collect();
    Ok(Json(serde_json::json!({ "marked_slices": slices })))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssistResponse {
    /// Slices that received a new model mask.
    pub slices: Vec<usize>,
    /// Slices in the marked span left alone because they were refined.
    pub kept_refined: Vec<usize>,
    pub inference_ms: f64,
}

pub(crate) async fn run_assist(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Json<AssistResponse>> {
    let s = session(&state, &id)?;
    let mut s = s.lock().await;
    if s.annotation.markers().is_empty() {
        return Err(ApiError::new(StatusCode::CONFLICT, "submit markers before running assist"));
    }
    let mut annotation = s.annotation.clone();
    let (vol, params, cfg) = (s.volume.clone(), state.params.clone(), state.cfg.clone());
    let start = Instant::now();
    let (annotation, slices) = blocking(move || {
        let updated = annotation.run_assist(&vol, &params, &cfg)?;
        Ok((annotation, updated))
    })
    .await?;
    let inference_ms = start.elapsed().as_secs_f64() * 1e3;
    let marked = annotation.markers();
    let (first, last) = (*marked.keys().next().expect("nonempty"), *marked.keys().next_back().expect("nonempty"));
    let kept_refined = annotation.refined().keys().copied().filter(|k| (first..=last).contains(k)).collect();
    s.annotation = annotation;
    s.updated = now();
    Ok(Json(AssistResponse {
        slices,
        kept_refined,
        inference_ms,
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskResponse {
    pub slice: usize,
    /// `"refined"` or `"model"`.
    pub source: String,
    pub mask: RleMask,
    pub confidence: Option<f32>,
    #[serde(rename = "box")]
    pub bbox: Option<BoundingBox>,
}

pub(crate) async fn get_mask(
    State(state): State<Arc<AppState>>,
    Path((id, k)): Path<(String, usize)>,
) -> ApiResult<Json<MaskResponse>> {
    let s = session(&state, &id)?;
    let s = s.lock().await;
    let a = &s.annotation;
    let model = a.model_masks().get(&k);
    let (source, mask) = match (a.refined().get(&k), model) {
        (Some(r), _) => ("refined", r),
        (None, Some(m)) => ("model", &m.mask),
        (None, None) => return Err(ApiError::new(StatusCode::NOT_FOUND, format!("slice {k} has no mask"))),
    };
    Ok(Json(MaskResponse {
        slice: k,
        source: source.into(),
        mask: rle_encode(mask),
        confidence: model.map(|m| m.confidence),
        bbox: a.boxes().get(&k).copied(),
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineRequest {
    pub mask: RleMask,
    #[serde(default)]
    pub seconds: f64,
}

pub(crate) async fn refine(
    State(state): State<Arc<AppState>>,
    Path((id, k)): Path<(String, usize)>,
    body: Bytes,
) -> ApiResult<StatusCode> {
    let req: RefineRequest = parse(&body)?;
    let mask = rle_decode(&req.mask).map_err(Error::from)?;
    let s = session(&state, &id)?;
    let mut s = s.lock().await;
    check_slice(&s, k)?;
    s.annotation.record_refinement(k, mask, req.seconds)?;
    s.updated = now();
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportResponse {
    pub session: SessionManifest,
    pub checkpoint_hash: String,
    /// Base64 of the MIV1 label volume.
    pub masks: String,
}

pub(crate) async fn export(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Json<ExportResponse>> {
    let s = session(&state, &id)?;
    let s = s.lock().await;
    let (session, bytes) = s.annotation.export();
    Ok(Json(ExportResponse {
        session,
        checkpoint_hash: state.checkpoint_hash.clone(),
        masks: base64::engine::general_purpose::STANDARD.encode(bytes),
    }))
}
