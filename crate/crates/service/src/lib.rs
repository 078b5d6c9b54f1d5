//! HTTP service over a dataset root for the labeling tool: frame listing,
//! images, labels, chart selections and association edits.
//!
//! Edits use optimistic concurrency: every frame carries a version counter
//! that a client echoes back, and a stale version is answered with 409.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Body;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use chartfuse::chartdb::{select_markers, MarkerStore, SelectionParams};
use chartfuse::datasetio::{association_file, associations_rel, load_dataset, write_atomic, FrameRecord, Split};
use chartfuse::camera::Calibration;

pub const AUDIT_LOG: &str = "audit.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("unknown frame `{0}`")]
    NotFound(String),
    #[error("frame version is {current}, edit was based on {given}")]
    Conflict { current: u64, given: u64 },
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match self {
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Conflict { .. } => StatusCode::CONFLICT,
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(serde_json::json!({ "error": self.to_string() }))).into_response()
    }
}

impl From<chartfuse::Error> for ApiError {
    fn from(e: chartfuse::Error) -> Self {
        ApiError::Internal(e.to_string())
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

/// One association change from the labeling tool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationEdit {
    /// Must match the path when present.
    #[serde(default)]
    pub frame_id: Option<String>,
    pub label_index: usize,
    pub marker_id: Option<String>,
    pub editor: String,
    pub timestamp: f64,
    /// Frame version the edit was based on.
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSummary {
    pub frame_id: String,
    pub split: Split,
    pub n_labels: usize,
    pub n_associated: usize,
    pub version: u64,
    pub has_image: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelView {
    pub index: usize,
    pub class: u32,
    pub bbox: [f64; 4],
    pub marker_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameLabels {
    pub frame_id: String,
    pub version: u64,
    pub labels: Vec<LabelView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerView {
    pub marker_id: String,
    pub dist: f64,
    pub bearing: f64,
    pub category: String,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMarkers {
    pub frame_id: String,
    pub selection: SelectionParams,
    pub markers: Vec<MarkerView>,
}

/// Selection overrides; `fov` is the half angle in degrees.
#[derive(Debug, Clone, Copy, Default, Deserialize)]
pub struct MarkerQuery {
    pub fov: Option<f64>,
    pub dmax: Option<f64>,
    pub dmin: Option<f64>,
}

#[derive(Debug, Serialize)]
struct AuditLine<'a> {
    frame_id: &'a str,
    label_index: usize,
    previous: Option<&'a str>,
    marker_id: Option<&'a str>,
    editor: &'a str,
    timestamp: f64,
    version: u64,
}

pub struct AppState {
    root: PathBuf,
    order: Vec<String>,
    frames: BTreeMap<String, Mutex<FrameRecord>>,
    markers: MarkerStore,
    calibration: Calibration,
    audit: Mutex<()>,
}

impl AppState {
    pub fn load(root: &Path) -> chartfuse::Result<Self> {
        let ds = load_dataset(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            order: ds.records.iter().map(|r| r.frame_id.clone()).collect(),
            frames: ds
                .records
                .into_iter()
                .map(|r| (r.frame_id.clone(), Mutex::new(r)))
                .collect(),
            markers: ds.markers,
            calibration: ds.calibration,
            audit: Mutex::new(()),
        })
    }

    fn frame(&self, id: &str) -> ApiResult<&Mutex<FrameRecord>> {
        self.frames.get(id).ok_or_else(|| ApiError::NotFound(id.to_string()))
    }

    fn snapshot(&self, id: &str) -> ApiResult<FrameRecord> {
        Ok(self.frame(id)?.lock().expect("frame lock").clone())
    }

    /// Validates and persists an edit. Writes to one frame are serialized
    /// by the frame's lock; different frames proceed independently.
    pub fn apply_edit(&self, frame_id: &str, edit: &AssociationEdit) -> ApiResult<FrameLabels> {
        if let Some(id) = &edit.frame_id {
            if id != frame_id {
                return Err(ApiError::BadRequest(format!("edit names frame `{id}`, path names `{frame_id}`")));
            }
        }
        let mut rec = self.frame(frame_id)?.lock().expect("frame lock");
        if edit.version != rec.version {
            return Err(ApiError::Conflict {
                current: rec.version,
                given: edit.version,
            });
        }
        let n = rec.labels.len();
        if edit.label_index >= n {
            return Err(ApiError::BadRequest(format!(
                "label_index {} out of range ({n} labels)",
                edit.label_index
            )));
        }
        if let Some(m) = &edit.marker_id {
            if !self.markers.contains(m) {
                return Err(ApiError::BadRequest(format!("unknown marker id `{m}`")));
            }
            let taken = rec
                .labels
                .iter()
                .enumerate()
                .any(|(i, l)| i != edit.label_index && l.marker_id.as_deref() == Some(m));
            if taken {
                return Err(ApiError::BadRequest(format!("marker `{m}` is already associated in this frame")));
            }
        }
        let mut next = rec.clone();
        let previous = std::mem::replace(&mut next.labels[edit.label_index].marker_id, edit.marker_id.clone());
        next.version += 1;
        let json = serde_json::to_string_pretty(&association_file(&next)).map_err(|e| ApiError::Internal(e.to_string()))?;
        write_atomic(&self.root.join(associations_rel(frame_id)), (json + "\n").as_bytes())?;
        self.append_audit(&AuditLine {
            frame_id,
            label_index: edit.label_index,
            previous: previous.as_deref(),
            marker_id: edit.marker_id.as_deref(),
            editor: &edit.editor,
            timestamp: edit.timestamp,
            version: next.version,
        })?;
        *rec = next;
        Ok(labels_view(&rec))
    }

    fn append_audit(&self, line: &AuditLine) -> ApiResult<()> {
        let _guard = self.audit.lock().expect("audit lock");
        let path = self.root.join(AUDIT_LOG);
        let text = serde_json::to_string(line).map_err(|e| ApiError::Internal(e.to_string()))?;
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| ApiError::Internal(format!("{}: {e}", path.display())))?;
        writeln!(f, "{text}")
            .and_then(|_| f.sync_data())
            .map_err(|e| ApiError::Internal(format!("{}: {e}", path.display())))
    }
}

fn labels_view(r: &FrameRecord) -> FrameLabels {
    FrameLabels {
        frame_id: r.frame_id.clone(),
        version: r.version,
        labels: r
            .labels
            .iter()
            .enumerate()
            .map(|(index, l)| LabelView {
                index,
                class: l.class,
                bbox: l.bbox,
                marker_id: l.marker_id.clone(),
            })
            .collect(),
    }
}

async fn list_frames(State(st): State<Arc<AppState>>) -> ApiResult<Json<Vec<FrameSummary>>> {
    let mut out = Vec::with_capacity(st.order.len());
    for id in &st.order {
        let r = st.snapshot(id)?;
        out.push(FrameSummary {
            frame_id: r.frame_id.clone(),
            split: r.split,
            n_labels: r.labels.len(),
            n_associated: r.labels.iter().filter(|l| l.marker_id.is_some()).count(),
            version: r.version,
            has_image: r.image.is_some(),
        });
    }
    Ok(Json(out))
}

async fn frame_image(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let r = st.snapshot(&id)?;
    let rel = r.image.ok_or_else(|| ApiError::NotFound(format!("{id}/image")))?;
    let path = st.root.join(rel);
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError::Internal(format!("{}: {e}", path.display())))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], Body::from(bytes)).into_response())
}

async fn frame_labels(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<FrameLabels>> {
    Ok(Json(labels_view(&st.snapshot(&id)?)))
}

async fn frame_markers(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<MarkerQuery>,
) -> ApiResult<Json<FrameMarkers>> {
    let r = st.snapshot(&id)?;
    let default = SelectionParams::for_camera(st.calibration.intrinsics.horizontal_fov());
    let selection = SelectionParams::new(
        q.fov.map_or(default.fov_half_angle, f64::to_radians),
        q.dmax.unwrap_or(default.d_max),
        q.dmin.unwrap_or(default.d_min),
    )
    .map_err(|e| ApiError::BadRequest(e.to_string()))?;
    let markers = select_markers(&st.markers, &r.pose, &selection)
        .into_iter()
        .map(|b| {
            let m = st.markers.get(&b.marker_id).expect("selected from the store");
            MarkerView {
                dist: b.polar.dist(),
                bearing: b.polar.bearing(),
                category: m.category.as_str().to_string(),
                lat: m.position.lat(),
                lon: m.position.lon(),
                marker_id: b.marker_id,
            }
        })
        .collect();
    Ok(Json(FrameMarkers {
        frame_id: id,
        selection,
        markers,
    }))
}

async fn post_association(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: axum::body::Bytes,
) -> ApiResult<Json<FrameLabels>> {
    let edit: AssociationEdit =
        serde_json::from_slice(&body).map_err(|e| ApiError::BadRequest(format!("invalid edit: {e}")))?;
    // file writes block; keep them off the async workers
    let labels = tokio::task::spawn_blocking(move || st.apply_edit(&id, &edit))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(Json(labels))
}

/// API routes; `static_dir`, when given, is served for every other path.
pub fn router(state: Arc<AppState>, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/v1/frames", get(list_frames))
        .route("/api/v1/frames/{id}/image", get(frame_image))
        .route("/api/v1/frames/{id}/labels", get(frame_labels))
        .route("/api/v1/frames/{id}/markers", get(frame_markers))
        .route("/api/v1/frames/{id}/associations", post(post_association))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves `root` on `listener` until the future is dropped.
pub async fn serve_on(listener: tokio::net::TcpListener, state: Arc<AppState>, static_dir: Option<&Path>) -> std::io::Result<()> {
    axum::serve(listener, router(state, static_dir)).await
}

/// Startup errors: dataset loading or socket binding.
#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Dataset(#[from] chartfuse::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub async fn serve(root: &Path, addr: SocketAddr, static_dir: Option<&Path>) -> Result<(), ServeError> {
    let state = Arc::new(AppState::load(root)?);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    serve_on(listener, state, static_dir).await?;
    Ok(())
}
