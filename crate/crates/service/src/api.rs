//! Request bodies, response bodies and the JSON error envelope.

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use timgan_core::image_io::{decode_png_sized, encode_gray_png, encode_png, upsample_nearest};
use timgan_core::scenegen::Image;

use crate::session::Step;

/// Error returned by every endpoint as `{error, code}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    pub fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("no session {id:?}"))
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message)
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct ErrorBody {
    pub error: String,
    pub code: u16,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.message,
            code: self.status.as_u16(),
        };
        (self.status, Json(body)).into_response()
    }
}

/// Where a new session's first image comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum SessionSource {
    RandomScene(u64),
    Png(Image),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateBody {
    random_scene: Option<u64>,
    png: Option<String>,
}

/// Parses a `POST /api/session` body. Exactly one of `random_scene` (a seed)
/// or `png` (base64) must be given; a PNG must be `side × side`.
pub fn parse_create_request(body: &[u8], side: usize) -> Result<SessionSource, ApiError> {
    let parsed: CreateBody =
        serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))?;
    match (parsed.random_scene, parsed.png) {
        (Some(seed), None) => Ok(SessionSource::RandomScene(seed)),
        (None, Some(b64)) => {
            let bytes = STANDARD
                .decode(b64.trim())
                .map_err(|e| ApiError::bad_request(format!("png is not valid base64: {e}")))?;
            let img = decode_png_sized(&bytes, side).map_err(|e| ApiError::bad_request(e.to_string()))?;
            Ok(SessionSource::Png(img))
        }
        _ => Err(ApiError::bad_request("give exactly one of \"random_scene\" or \"png\"")),
    }
}

/// Parses a `POST /api/session/{id}/edit` body into a trimmed instruction.
pub fn parse_edit_request(body: &[u8]) -> Result<String, ApiError> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct EditBody {
        instruction: String,
    }
    let parsed: EditBody =
        serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))?;
    let text = parsed.instruction.trim();
    if text.is_empty() {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "instruction is empty"));
    }
    Ok(text.to_string())
}

pub fn png_b64(img: &Image) -> Result<String, ApiError> {
    encode_png(img)
        .map(|b| STANDARD.encode(b))
        .map_err(|e| ApiError::internal(e.to_string()))
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct CreateResponse {
    pub id: String,
    pub image_b64: String,
    pub step: usize,
}

/// State after an edit or undo. Analysis fields are `null` at step 0.
#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct EditResponse {
    pub step: usize,
    pub instruction: Option<String>,
    pub image_b64: String,
    /// Grayscale mask upsampled to image resolution.
    pub mask_b64: Option<String>,
    pub tokens: Vec<String>,
    pub attn_where: Vec<f32>,
    pub attn_how: Vec<f32>,
    /// `[layer][block]` routing weights; empty for models without routing.
    pub alpha: Vec<Vec<f32>>,
}

impl EditResponse {
    pub fn from_step(index: usize, step: &Step, image_size: usize) -> Result<Self, ApiError> {
        let mut resp = EditResponse {
            step: index,
            instruction: step.instruction.clone(),
            image_b64: png_b64(&step.image)?,
            mask_b64: None,
            tokens: Vec::new(),
            attn_where: Vec::new(),
            attn_how: Vec::new(),
            alpha: Vec::new(),
        };
        if let Some(edit) = &step.edit {
            let factor = image_size / edit.mask.nrows().max(1);
            let mask = encode_gray_png(&upsample_nearest(&edit.mask, factor)).map_err(|e| ApiError::internal(e.to_string()))?;
            let n = edit.text.tokens.len();
            resp.mask_b64 = Some(STANDARD.encode(mask));
            resp.tokens = edit.text.tokens.clone();
            resp.attn_where = edit.text.attn_where[..n].to_vec();
            resp.attn_how = edit.text.attn_how[..n].to_vec();
            if let Some(route) = &edit.route {
                resp.alpha = route.alpha.outer_iter().map(|r| r.to_vec()).collect();
            }
        }
        Ok(resp)
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct HistoryEntry {
    pub step: usize,
    pub instruction: Option<String>,
    pub thumbnail_b64: String,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct HistoryResponse {
    pub id: String,
    pub steps: Vec<HistoryEntry>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct HealthResponse {
    pub status: String,
    pub version: String,
    pub variant: String,
    pub image_size: usize,
    pub sessions: usize,
}
