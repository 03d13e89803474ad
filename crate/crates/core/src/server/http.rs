//! HTTP front end for [`Server`].
//!
//! | method | path | request | response |
//! |---|---|---|---|
//! | GET | `/status` | | status JSON |
//! | GET | `/split` | | `{"train_ids", "val_ids"}` in arrival order |
//! | GET | `/volumes` | | JSON array of ids |
//! | GET | `/volumes/{id}` | | NIfTI volume (raw HU) |
//! | GET | `/volumes/{id}/geometry` | | geometry JSON |
//! | GET | `/volumes/{id}/slice` | `axis`, `index`, `window` or `lower`+`upper` | 8-bit tile |
//! | POST | `/annotate/{id}` | NIfTI label file | submission JSON |
//! | POST | `/segment` | `{"volume_id", "bbox": {"min", "max"}}` | NIfTI mask over the box |
//! | POST | `/start`, `/stop` | | status JSON |
//! | POST | `/advance` | `{"epochs"}` | status JSON |
//! | POST | `/events` | `{"session", "events": [...]}` | 204 |
//! | POST | `/ingest` | | JSON array of submissions |
//!
//! Errors come back as `{"error": kind, "message": text}` with status 400
//! (malformed), 404 (unknown volume), 409 (duplicate), 422 (invalid
//! annotation) or 503 (model not ready).
//!
//! Slice tiles are row-major `u8`, with `x-width` and `x-height` headers.
//! Axial tiles fix z and run x along a row; sagittal tiles fix x and run y
//! along a row, z down the rows; coronal tiles fix y and run x along a row.

use std::net::{SocketAddr, ToSocketAddrs};
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use super::{Server, Service};
use crate::annotation::{annotation_from_bytes, segmentation_to_bytes};
use crate::interaction_log::InteractionEvent;
use crate::volume_io::volume_to_bytes;
use crate::{BoundingBox, Error, Result, WindowPreset};

pub const NIFTI_CONTENT_TYPE: &str = "application/gzip";

const BODY_LIMIT: usize = 1 << 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRequest {
    pub volume_id: String,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvanceRequest {
    pub epochs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventsRequest {
    pub session: String,
    pub events: Vec<InteractionEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Axial,
    Sagittal,
    Coronal,
}

#[derive(Debug, Deserialize)]
pub struct SliceQuery {
    pub axis: Axis,
    pub index: usize,
    pub window: Option<String>,
    pub lower: Option<f32>,
    pub upper: Option<f32>,
}

/// Machine-readable kind and HTTP status for an error.
pub fn classify(err: &Error) -> (StatusCode, &'static str) {
    match err {
        Error::InvalidAnnotation(_) | Error::BadLabel { .. } | Error::BoxOutOfRange { .. } => {
            (StatusCode::UNPROCESSABLE_ENTITY, "invalid_annotation")
        }
        Error::UnknownVolume(_) | Error::NotFound(_) => (StatusCode::NOT_FOUND, "unknown_volume"),
        Error::ModelNotReady => (StatusCode::SERVICE_UNAVAILABLE, "model_not_ready"),
        Error::DuplicateId(_) => (StatusCode::CONFLICT, "duplicate"),
        Error::Malformed(_)
        | Error::Nifti(_)
        | Error::Dimensionality(_)
        | Error::ShapeMismatch { .. }
        | Error::Empty(_)
        | Error::OutOfOrder { .. }
        | Error::Config(_) => (StatusCode::BAD_REQUEST, "malformed"),
        _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
    }
}

struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind) = classify(&self.0);
        let body = ErrorBody {
            error: kind.to_string(),
            message: self.0.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

async fn blocking<T, F>(server: Server, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(Server) -> Result<T> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(server))
        .await
        .map_err(|e| ApiError(Error::Malformed(format!("handler panicked: {e}"))))?
        .map_err(ApiError)
}

fn nifti_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, NIFTI_CONTENT_TYPE)], bytes).into_response()
}

async fn status(State(s): State<Server>) -> ApiResult<Response> {
    Ok(Json(s.status()?).into_response())
}

async fn split(State(s): State<Server>) -> ApiResult<Response> {
    Ok(Json(s.split()).into_response())
}

async fn volumes(State(s): State<Server>) -> ApiResult<Response> {
    Ok(Json(blocking(s, |s| s.volume_ids()).await?).into_response())
}

async fn volume(State(s): State<Server>, Path(id): Path<String>) -> ApiResult<Response> {
    let bytes = blocking(s, move |s| volume_to_bytes(&*s.volume(&id)?)).await?;
    Ok(nifti_response(bytes))
}

async fn geometry(State(s): State<Server>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(blocking(s, move |s| s.geometry(&id)).await?).into_response())
}

async fn slice(State(s): State<Server>, Path(id): Path<String>, Query(q): Query<SliceQuery>) -> ApiResult<Response> {
    let (w, h, tile) = blocking(s, move |s| {
        let preset = match (&q.window, q.lower, q.upper) {
            (_, Some(lo), Some(hi)) => WindowPreset::new("custom", lo, hi)?,
            (Some(name), None, None) => {
                WindowPreset::by_name(name).ok_or_else(|| Error::Malformed(format!("unknown window '{name}'")))?
            }
            (None, None, None) => WindowPreset::mediastinal(),
            _ => return Err(Error::Malformed("give both lower and upper".into())),
        };
        let vol = s.volume(&id)?;
        slice_tile(&vol.grid, q.axis, q.index, &preset)
    })
    .await?;
    let mut headers = HeaderMap::new();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static("application/octet-stream"));
    headers.insert("x-width", HeaderValue::from(w));
    headers.insert("x-height", HeaderValue::from(h));
    Ok((headers, tile).into_response())
}

/// Window one slice to bytes; see the module docs for the layout.
pub fn slice_tile(
    grid: &ndarray::Array3<f32>,
    axis: Axis,
    index: usize,
    preset: &WindowPreset,
) -> Result<(usize, usize, Vec<u8>)> {
    let (nx, ny, nz) = grid.dim();
    let (limit, w, h) = match axis {
        Axis::Axial => (nz, nx, ny),
        Axis::Sagittal => (nx, ny, nz),
        Axis::Coronal => (ny, nx, nz),
    };
    if index >= limit {
        return Err(Error::Malformed(format!("slice {index} outside 0..{limit}")));
    }
    let mut out = Vec::with_capacity(w * h);
    for r in 0..h {
        for c in 0..w {
            let hu = match axis {
                Axis::Axial => grid[[c, r, index]],
                Axis::Sagittal => grid[[index, c, r]],
                Axis::Coronal => grid[[c, index, r]],
            };
            out.push((preset.apply(hu) * 255.0).round() as u8);
        }
    }
    Ok((w, h, out))
}

async fn annotate(State(s): State<Server>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let ack = blocking(s, move |s| {
        let ann = annotation_from_bytes(&id, &body)?;
        s.submit_annotation(&ann)
    })
    .await?;
    Ok(Json(ack).into_response())
}

async fn segment(State(s): State<Server>, Json(req): Json<SegmentRequest>) -> ApiResult<Response> {
    let bytes = blocking(s, move |s| {
        let bbox = BoundingBox::new(req.bbox.min, req.bbox.max)?;
        let seg = s.request_segmentation(&req.volume_id, &bbox)?;
        segmentation_to_bytes(&seg, &s.geometry(&req.volume_id)?)
    })
    .await?;
    Ok(nifti_response(bytes))
}

async fn start(State(s): State<Server>) -> ApiResult<Response> {
    Ok(Json(blocking(s, |s| s.start_training()).await?).into_response())
}

async fn stop(State(s): State<Server>) -> ApiResult<Response> {
    Ok(Json(blocking(s, |s| s.stop_training()).await?).into_response())
}

async fn advance(State(s): State<Server>, Json(req): Json<AdvanceRequest>) -> ApiResult<Response> {
    Ok(Json(blocking(s, move |s| s.advance(req.epochs)).await?).into_response())
}

async fn events(State(s): State<Server>, Json(req): Json<EventsRequest>) -> ApiResult<Response> {
    blocking(s, move |s| s.record_events(&req.session, &req.events)).await?;
    Ok(StatusCode::NO_CONTENT.into_response())
}

async fn ingest(State(s): State<Server>) -> ApiResult<Response> {
    Ok(Json(blocking(s, |s| s.ingest_incoming()).await?).into_response())
}

pub fn router(server: Server) -> Router {
    Router::new()
        .route("/status", get(status))
        .route("/split", get(split))
        .route("/volumes", get(volumes))
        .route("/volumes/{id}", get(volume))
        .route("/volumes/{id}/geometry", get(geometry))
        .route("/volumes/{id}/slice", get(slice))
        .route("/annotate/{id}", post(annotate))
        .route("/segment", post(segment))
        .route("/start", post(start))
        .route("/stop", post(stop))
        .route("/advance", post(advance))
        .route("/events", post(events))
        .route("/ingest", post(ingest))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(server)
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::Io {
            path: "<runtime>".into(),
            source: e,
        })
}

fn bind(addr: impl ToSocketAddrs) -> Result<std::net::TcpListener> {
    let listener = std::net::TcpListener::bind(addr).map_err(|e| Error::Io {
        path: "<listen>".into(),
        source: e,
    })?;
    listener.set_nonblocking(true).map_err(|e| Error::Io {
        path: "<listen>".into(),
        source: e,
    })?;
    Ok(listener)
}

/// A server running on a background thread.
pub struct HttpHandle {
    pub addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl HttpHandle {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Stop accepting requests and wait for in-flight ones to finish.
    /// Training is left as it is.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for HttpHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Serve on a background thread. Bind to port 0 for an ephemeral port.
pub fn spawn(server: Server, addr: impl ToSocketAddrs) -> Result<HttpHandle> {
    let std_listener = bind(addr)?;
    let local = std_listener.local_addr().map_err(|e| Error::Io {
        path: "<listen>".into(),
        source: e,
    })?;
    let rt = runtime()?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let thread = std::thread::Builder::new()
        .name("http".into())
        .spawn(move || {
            rt.block_on(async move {
                let listener = match tokio::net::TcpListener::from_std(std_listener) {
                    Ok(l) => l,
                    Err(e) => return log::error!("listener: {e}"),
                };
                let app = router(server);
                if let Err(e) = axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await
                {
                    log::error!("http server: {e}");
                }
            })
        })
        .expect("spawn http thread");
    Ok(HttpHandle {
        addr: local,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

/// Serve on the current thread until the process is killed.
pub fn serve_forever(server: Server, addr: impl ToSocketAddrs) -> Result<()> {
    let std_listener = bind(addr)?;
    let rt = runtime()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::from_std(std_listener).map_err(|e| Error::Io {
            path: "<listen>".into(),
            source: e,
        })?;
        log::info!("listening on http://{}", listener.local_addr().map_err(|e| Error::io("<listen>", e))?);
        axum::serve(listener, router(server))
            .await
            .map_err(|e| Error::io("<serve>", e))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn tiles_follow_documented_layout() {
        let grid = Array3::from_shape_fn((3, 4, 5), |(x, y, z)| (x * 100 + y * 10 + z) as f32);
        let p = WindowPreset::new("raw", 0.0, 255.0).unwrap();
        let (w, h, t) = slice_tile(&grid, Axis::Axial, 2, &p).unwrap();
        assert_eq!((w, h), (3, 4));
        assert_eq!(t[w + 2], 212);
        let (w, h, t) = slice_tile(&grid, Axis::Sagittal, 1, &p).unwrap();
        assert_eq!((w, h), (4, 5));
        assert_eq!(t[3 * w + 2], 123);
        let (w, h, t) = slice_tile(&grid, Axis::Coronal, 3, &p).unwrap();
        assert_eq!((w, h), (3, 5));
        assert_eq!(t[4 * w + 1], 134);
        assert!(slice_tile(&grid, Axis::Axial, 5, &p).is_err());
    }

    #[test]
    fn mediastinal_bounds_map_to_black_and_white() {
        let grid = Array3::from_shape_vec((2, 1, 1), vec![-125.0, 250.0]).unwrap();
        let (_, _, t) = slice_tile(&grid, Axis::Axial, 0, &WindowPreset::mediastinal()).unwrap();
        assert_eq!(t, vec![0, 255]);
    }

    #[test]
    fn error_classes() {
        assert_eq!(classify(&Error::ModelNotReady).0, StatusCode::SERVICE_UNAVAILABLE);
        assert_eq!(classify(&Error::UnknownVolume("a".into())).0, StatusCode::NOT_FOUND);
        assert_eq!(classify(&Error::DuplicateId("a".into())).0, StatusCode::CONFLICT);
        assert_eq!(classify(&Error::InvalidAnnotation("a".into())).0, StatusCode::UNPROCESSABLE_ENTITY);
    }
}
