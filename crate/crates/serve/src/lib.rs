//! HTTP service: encode images to landmarks, decode edited landmarks, morph
//! between two encoded images.

pub mod api;
mod sessions;

pub use sessions::{Session, SessionCache};

use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use image::imageops::FilterType;
use lmdis::geometry::edge_length;
use lmdis::model::{out_of_bounds, stack_images, unstack_images, Model};
use lmdis::nn::Mode;
use lmdis::raster::Image;
use ndarray::{Array2, Array3, Axis};
use parking_lot::{Mutex, RwLock};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use api::*;

#[derive(Clone, Debug)]
pub struct ServeConfig {
    pub session_ttl: Duration,
    pub max_sessions: usize,
    pub max_body_bytes: usize,
    /// Largest accepted decoded image, in pixels.
    pub max_pixels: u64,
    /// Allowed CORS origin; any origin when unset.
    pub cors_origin: Option<String>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            session_ttl: Duration::from_secs(15 * 60),
            max_sessions: 512,
            max_body_bytes: 8 << 20,
            max_pixels: 4096 * 4096,
            cors_origin: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    BadRequest(String),
    #[error("unknown or expired session {0}")]
    UnknownSession(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Unprocessable(String),
    #[error("{0}")]
    TooLarge(String),
    #[error("no model loaded")]
    NoModel,
    #[error("internal error: {0}")]
    Internal(String),
}

impl ApiError {
    fn status(&self) -> StatusCode {
        match self {
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::UnknownSession(_) => StatusCode::NOT_FOUND,
            ApiError::Conflict(_) => StatusCode::CONFLICT,
            ApiError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::TooLarge(_) => StatusCode::PAYLOAD_TOO_LARGE,
            ApiError::NoModel => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if let ApiError::Internal(e) = &self {
            log::error!("{e}");
        }
        (self.status(), Json(ErrorBody { error: self.to_string() })).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        match r.status() {
            StatusCode::PAYLOAD_TOO_LARGE => ApiError::TooLarge(r.body_text()),
            StatusCode::UNPROCESSABLE_ENTITY => ApiError::Unprocessable(r.body_text()),
            _ => ApiError::BadRequest(r.body_text()),
        }
    }
}

impl From<lmdis::Error> for ApiError {
    fn from(e: lmdis::Error) -> Self {
        ApiError::Internal(e.to_string())
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// A model with finalized (or running) BN statistics and its file hash.
pub struct LoadedModel {
    pub model: Model<f32>,
    pub hash: String,
    bn_finalized: bool,
}

impl LoadedModel {
    pub fn new(mut model: Model<f32>, hash: impl Into<String>) -> Self {
        let bn_finalized = model.is_finalized();
        if !bn_finalized {
            log::warn!("serving a model without finalized BN statistics; running averages are used");
        }
        Self { model, hash: hash.into(), bn_finalized }
    }

    fn map_hw(&self) -> (usize, usize) {
        self.model.map_size()
    }

    /// Normalized landmark `(K, 2)` to display coordinates.
    fn to_display(&self, lm: &Array2<f32>) -> Vec<[f64; 2]> {
        let (h, w) = self.map_hw();
        let e = edge_length((h, w));
        lm.outer_iter().map(|p| [to_display(p[0] as f64 * e, w), to_display(p[1] as f64 * e, h)]).collect()
    }

    fn from_display(&self, pts: &[[f64; 2]]) -> Result<Array2<f32>, ApiError> {
        let k = self.model.landmarks();
        if pts.len() != k {
            return Err(ApiError::Unprocessable(format!("expected {k} landmarks, got {}", pts.len())));
        }
        if pts.iter().flatten().any(|v| !v.is_finite()) {
            return Err(ApiError::Unprocessable("landmark coordinates must be finite".into()));
        }
        let (h, w) = self.map_hw();
        let e = edge_length((h, w));
        Ok(Array2::from_shape_fn((k, 2), |(i, j)| {
            let px = if j == 0 { from_display(pts[i][0], w) } else { from_display(pts[i][1], h) };
            (px / e) as f32
        }))
    }

    /// Decodes one set of normalized landmarks; returns the PNG bytes and
    /// out-of-bounds flags.
    pub fn render(&self, lm: &Array2<f32>, desc: Option<&Array2<f32>>) -> Result<(Vec<u8>, Vec<bool>), ApiError> {
        let lm3 = lm.clone().insert_axis(Axis(0));
        let d3: Option<Array3<f32>> = desc.map(|d| d.clone().insert_axis(Axis(0)));
        let (dec, _) = self.model.decode(lm3.view(), d3.as_ref().map(|d| d.view()), Mode::Eval)?;
        let img = unstack_images(dec.color.view()).remove(0);
        let oob = out_of_bounds(lm3.view(), self.map_hw()).row(0).to_vec();
        Ok((img.encode_png()?, oob))
    }

    /// Runs the encoder on one image already at the model's input size.
    pub fn encode_image(&self, img: &Image) -> Result<(Array2<f32>, Option<Array2<f32>>), ApiError> {
        let x = stack_images::<f32>(std::slice::from_ref(img))?;
        let (enc, _) = self.model.encode(x.view(), Mode::Eval)?;
        let lm = enc.landmarks.index_axis(Axis(0), 0).to_owned();
        let desc = enc.descriptors.map(|d| d.index_axis(Axis(0), 0).to_owned());
        Ok((lm, desc))
    }
}

/// Shared server state; the model can be swapped, sessions remember which
/// model produced them.
pub struct AppState {
    pub config: ServeConfig,
    model: RwLock<Option<Arc<LoadedModel>>>,
    sessions: Mutex<SessionCache>,
}

impl AppState {
    pub fn new(config: ServeConfig) -> Self {
        let sessions = Mutex::new(SessionCache::new(config.session_ttl, config.max_sessions));
        Self { config, model: RwLock::new(None), sessions }
    }

    pub fn set_model(&self, model: LoadedModel) {
        log::info!("serving model {}", model.hash);
        *self.model.write() = Some(Arc::new(model));
    }

    pub fn load_checkpoint(&self, path: impl AsRef<Path>) -> lmdis::Result<()> {
        let ck = lmdis::checkpoint::load(path)?;
        self.set_model(LoadedModel::new(ck.model, ck.hash));
        Ok(())
    }

    pub fn model(&self) -> Result<Arc<LoadedModel>, ApiError> {
        self.model.read().clone().ok_or(ApiError::NoModel)
    }

    fn session(&self, id: &str) -> Result<Arc<Session>, ApiError> {
        self.sessions.lock().get(id).ok_or_else(|| ApiError::UnknownSession(id.to_string()))
    }

    fn check_model(&self, m: &LoadedModel, s: &Session) -> Result<(), ApiError> {
        if s.model != m.hash {
            return Err(ApiError::Conflict(format!(
                "session was encoded by model {} but {} is loaded",
                short(&s.model),
                short(&m.hash)
            )));
        }
        Ok(())
    }
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::Internal(e.to_string()))?
}

fn decode_payload(state: &AppState, m: &LoadedModel, b64: &str) -> Result<Image, ApiError> {
    let bytes = B64.decode(b64.trim()).map_err(|e| ApiError::BadRequest(format!("image is not base64: {e}")))?;
    let reader = image::ImageReader::new(std::io::Cursor::new(&bytes))
        .with_guessed_format()
        .map_err(|e| ApiError::BadRequest(e.to_string()))?;
    let (w, h) = reader.into_dimensions().map_err(|e| ApiError::BadRequest(format!("undecodable image: {e}")))?;
    if w as u64 * h as u64 > state.config.max_pixels {
        return Err(ApiError::TooLarge(format!("{w}x{h} image exceeds {} pixels", state.config.max_pixels)));
    }
    let dynimg = image::load_from_memory(&bytes).map_err(|e| ApiError::BadRequest(format!("undecodable image: {e}")))?;
    let [mh, mw] = m.model.config.image_size;
    let dynimg = if (h as usize, w as usize) == (mh, mw) {
        dynimg
    } else {
        dynimg.resize_exact(mw as u32, mh as u32, FilterType::Triangle)
    };
    Ok(Image::from_dynamic(&dynimg, m.model.config.image_channels)?)
}

async fn encode(
    State(state): State<Arc<AppState>>,
    req: Result<Json<EncodeRequest>, JsonRejection>,
) -> ApiResult<EncodeResponse> {
    let Json(req) = req?;
    let m = state.model()?;
    let st = state.clone();
    blocking(move || {
        let img = decode_payload(&st, &m, &req.image)?;
        let (lm, desc) = m.encode_image(&img)?;
        let (h, w) = m.map_hw();
        let oob = out_of_bounds(lm.clone().insert_axis(Axis(0)).view(), (h, w)).row(0).to_vec();
        let landmarks = m.to_display(&lm);
        let session_id = st.sessions.lock().insert(Session { model: m.hash.clone(), landmarks: lm, descriptors: desc });
        Ok(Json(EncodeResponse { session_id, landmarks, map_size: [h, w], out_of_bounds: oob }))
    })
    .await
}

async fn decode(
    State(state): State<Arc<AppState>>,
    req: Result<Json<DecodeRequest>, JsonRejection>,
) -> ApiResult<ImageResponse> {
    let Json(req) = req?;
    let m = state.model()?;
    let s = state.session(&req.session_id)?;
    state.check_model(&m, &s)?;
    let lm = m.from_display(&req.landmarks)?;
    blocking(move || {
        let (png, oob) = m.render(&lm, s.descriptors.as_ref())?;
        Ok(Json(ImageResponse { image: B64.encode(png), out_of_bounds: oob }))
    })
    .await
}

fn morph_inputs(state: &AppState, req: &MorphRequest) -> Result<(Arc<LoadedModel>, Array2<f32>, Arc<Session>), ApiError> {
    if !(0.0..=1.0).contains(&req.t) {
        return Err(ApiError::Unprocessable(format!("t = {} is outside [0, 1]", req.t)));
    }
    let m = state.model()?;
    let a = state.session(&req.session_a)?;
    let b = state.session(&req.session_b)?;
    if a.model != b.model {
        return Err(ApiError::Conflict("sessions were encoded by different models".into()));
    }
    state.check_model(&m, &a)?;
    let t = req.t as f32;
    let lm = &a.landmarks * (1.0 - t) + &b.landmarks * t;
    let src = match req.descriptor_source {
        DescriptorSource::A => a,
        DescriptorSource::B => b,
    };
    Ok((m, lm, src))
}

async fn morph(
    State(state): State<Arc<AppState>>,
    req: Result<Json<MorphRequest>, JsonRejection>,
) -> ApiResult<ImageResponse> {
    let Json(req) = req?;
    let (m, lm, src) = morph_inputs(&state, &req)?;
    blocking(move || {
        let (png, oob) = m.render(&lm, src.descriptors.as_ref())?;
        Ok(Json(ImageResponse { image: B64.encode(png), out_of_bounds: oob }))
    })
    .await
}

/// Interpolated landmarks of a morph request, without decoding.
async fn morph_landmarks(
    State(state): State<Arc<AppState>>,
    req: Result<Json<MorphRequest>, JsonRejection>,
) -> ApiResult<LandmarksResponse> {
    let Json(req) = req?;
    let (m, lm, _) = morph_inputs(&state, &req)?;
    Ok(Json(LandmarksResponse { landmarks: m.to_display(&lm) }))
}

async fn model_info(State(state): State<Arc<AppState>>) -> ApiResult<ModelInfo> {
    let m = state.model()?;
    let c = &m.model.config;
    let (h, w) = m.map_hw();
    Ok(Json(ModelInfo {
        landmarks: c.landmarks,
        descriptor_dim: if c.use_descriptors { c.descriptor_dim } else { 0 },
        feature_dim: if c.use_descriptors { c.feature_dim } else { 0 },
        use_descriptors: c.use_descriptors,
        image_size: c.image_size,
        image_channels: c.image_channels,
        map_size: [h, w],
        decoder_sigmas: c.decoder_sigmas.clone(),
        checkpoint_hash: m.hash.clone(),
        bn_finalized: m.bn_finalized,
    }))
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        model_loaded: state.model.read().is_some(),
        sessions: state.sessions.lock().len(),
    })
}

pub fn router(state: Arc<AppState>) -> Router {
    let cors = match &state.config.cors_origin {
        Some(o) => match HeaderValue::from_str(o) {
            Ok(v) => CorsLayer::new().allow_origin(AllowOrigin::exact(v)),
            Err(_) => {
                log::warn!("invalid CORS origin {o:?}; allowing any origin");
                CorsLayer::new().allow_origin(Any)
            }
        },
        None => CorsLayer::new().allow_origin(Any),
    }
    .allow_methods(Any)
    .allow_headers(Any);
    let limit = state.config.max_body_bytes;
    Router::new()
        .route("/encode", post(encode))
        .route("/decode", post(decode))
        .route("/morph", post(morph))
        .route("/debug/morph_landmarks", post(morph_landmarks))
        .route("/model", get(model_info))
        .route("/health", get(health))
        .layer(DefaultBodyLimit::max(limit))
        .layer(cors)
        .with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
