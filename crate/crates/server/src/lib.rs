//! JSON-over-HTTP front end for a [`StyleLibrary`].
//!
//! Routes:
//!
//! * `GET /api/styles` lists the bundles under the styles directory.
//! * `POST /api/render` stylizes a base64 PNG.
//! * `GET /health` reports liveness and the number of catalogued styles.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;
use shapematch::imageio::{decode_image, encode_png};
use shapematch::pipeline::CatalogEntry;
use shapematch::{Error, GridTag, RenderRequest, StyleLibrary, StyleRef};
use tower_http::cors::CorsLayer;

/// Request bodies larger than this are rejected.
pub const MAX_BODY_BYTES: usize = 16 * 1024 * 1024;

/// Environment variable consulted when no styles directory is given.
pub const STYLES_DIR_ENV: &str = "SMG_STYLES_DIR";

#[derive(Clone)]
pub struct AppState {
    pub library: Arc<StyleLibrary>,
}

impl AppState {
    pub fn new(styles_dir: impl Into<PathBuf>) -> Self {
        AppState {
            library: Arc::new(StyleLibrary::new(styles_dir)),
        }
    }
}

#[derive(Debug, Deserialize, Serialize)]
pub struct RenderBody {
    #[serde(default)]
    pub style: Option<String>,
    pub l: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    pub image_b64: String,
    #[serde(default)]
    pub glyph_style: Option<String>,
    #[serde(default)]
    pub texture_style: Option<String>,
    /// Treat the upload as dark ink on a light background.
    #[serde(default)]
    pub invert: bool,
}

#[derive(Debug, Deserialize, Serialize)]
pub struct RenderReply {
    pub image_b64: String,
    pub timing_ms: f64,
}

#[derive(Debug, Serialize)]
struct StyleJson {
    name: String,
    trained_at: Option<u64>,
    gly_weight: Option<f64>,
    glyph_sha256: Option<String>,
    texture_sha256: Option<String>,
}

impl From<CatalogEntry> for StyleJson {
    fn from(e: CatalogEntry) -> Self {
        StyleJson {
            name: e.name,
            trained_at: e.trained_at,
            gly_weight: e.gly_weight,
            glyph_sha256: e.glyph_sha256,
            texture_sha256: e.texture_sha256,
        }
    }
}

/// An HTTP status plus a message, rendered as `{"error": ...}`.
#[derive(Debug)]
pub struct ApiError(pub StatusCode, pub String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e.root() {
            Error::Argument(_) | Error::Shape(_) => StatusCode::BAD_REQUEST,
            Error::UnknownStyle(_) => StatusCode::NOT_FOUND,
            Error::Image { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            Error::Loading(_) => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/styles", get(list_styles))
        .route("/api/render", post(render))
        .route("/health", get(health))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

async fn list_styles(State(state): State<AppState>) -> Result<Json<serde_json::Value>, ApiError> {
    let lib = state.library.clone();
    let cat = blocking(move || lib.catalog().map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))).await?;
    let styles: Vec<StyleJson> = cat.styles.into_iter().map(StyleJson::from).collect();
    let mut body = json!({ "styles": styles });
    if !cat.warnings.is_empty() {
        body["warnings"] = json!(cat.warnings);
    }
    Ok(Json(body))
}

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    let lib = state.library.clone();
    let count = blocking(move || Ok(lib.catalog().map(|c| c.styles.len()).unwrap_or(0)))
        .await
        .unwrap_or(0);
    Json(json!({ "status": "ok", "loaded_styles": count }))
}

fn style_ref(body: &RenderBody) -> Result<StyleRef, ApiError> {
    match (&body.glyph_style, &body.texture_style, &body.style) {
        (Some(g), Some(t), _) => Ok(StyleRef::Mashup {
            glyph: g.clone(),
            texture: t.clone(),
        }),
        (_, _, Some(s)) => Ok(StyleRef::Single(s.clone())),
        _ => Err(bad_request("`style` is required unless both `glyph_style` and `texture_style` are given")),
    }
}

async fn render(
    State(state): State<AppState>,
    body: Result<Json<RenderBody>, axum::extract::rejection::JsonRejection>,
) -> Result<Json<RenderReply>, ApiError> {
    let Json(body) = body.map_err(|e| match e {
        axum::extract::rejection::JsonRejection::BytesRejection(b) => ApiError(b.status(), b.body_text()),
        other => bad_request(other.body_text()),
    })?;
    if !(0.0..=1.0).contains(&body.l) {
        return Err(bad_request(format!("l = {} outside [0, 1]", body.l)));
    }
    let style = style_ref(&body)?;
    let bytes = B64
        .decode(body.image_b64.as_bytes())
        .map_err(|e| bad_request(format!("image_b64 is not base64: {e}")))?;
    let lib = state.library.clone();
    let (l, seed, invert) = (body.l, body.seed.unwrap_or(0), body.invert);
    blocking(move || {
        let text = decode_image(&bytes, GridTag::Text, invert)?;
        let start = Instant::now();
        let out = lib.render(&RenderRequest { text, l, seed, style })?;
        let timing_ms = start.elapsed().as_secs_f64() * 1e3;
        let png = encode_png(&out)?;
        Ok(RenderReply {
            image_b64: B64.encode(png),
            timing_ms,
        })
    })
    .await
    .map(Json)
}

/// Binds `addr` and serves until ctrl-c.
pub async fn serve(addr: SocketAddr, styles_dir: impl Into<PathBuf>) -> std::io::Result<()> {
    let styles_dir = styles_dir.into();
    let app = router(AppState::new(&styles_dir));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("serving {} on http://{}", styles_dir.display(), listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_statuses() {
        let cases = [
            (Error::Argument("x".into()), StatusCode::BAD_REQUEST),
            (Error::UnknownStyle("x".into()), StatusCode::NOT_FOUND),
            (Error::Loading("x".into()), StatusCode::SERVICE_UNAVAILABLE),
            (Error::State("x".into()), StatusCode::INTERNAL_SERVER_ERROR),
            (
                Error::Image {
                    path: "<memory>".into(),
                    message: "bad".into(),
                },
                StatusCode::UNPROCESSABLE_ENTITY,
            ),
        ];
        for (e, want) in cases {
            assert_eq!(ApiError::from(e).0, want);
        }
    }
}
