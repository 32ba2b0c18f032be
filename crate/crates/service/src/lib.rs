//! HTTP service that hands out point-labeling tasks one at a time, records
//! the answers in per-session JSONL logs and reports live agreement with
//! the ground-truth masks.
//!
//! | method | path | body / result |
//! |---|---|---|
//! | POST | `/sessions` | `{dataset_id, n_points, seed}` → session |
//! | GET | `/sessions/{id}/next` | current task or `done` |
//! | POST | `/sessions/{id}/labels` | `{task_id, label, elapsed_ms}` → ack |
//! | GET | `/sessions/{id}/stats` | labeled, total, mean seconds per point, agreement |
//! | GET | `/sessions/{id}/export` | point annotation file |
//! | GET | `/images/{file}` | image bytes |

pub mod error;
pub mod geometry;
pub mod session;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use pointsup::dataset::Dataset;
use pointsup::sim::{PointAnnotationFile, PointLabel};
use serde::{Deserialize, Serialize};
use tokio::sync::RwLock;

pub use error::{ServiceError, ServiceResult};
use geometry::{view_geometry, ViewGeometry};
pub use session::{Ack, Progress, Session, SessionInfo, Stats, Submitted};

/// Env var naming the directory for session logs.
pub const DATA_DIR_ENV: &str = "POINTSUP_DATA_DIR";
pub const DEFAULT_DATA_DIR: &str = "pointsup-data";

pub fn data_dir_from_env() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV).map_or_else(|| PathBuf::from(DEFAULT_DATA_DIR), PathBuf::from)
}

type SessionHandle = Arc<RwLock<Session>>;

pub struct AppState {
    datasets: HashMap<String, Arc<Dataset>>,
    image_root: PathBuf,
    data_dir: PathBuf,
    sessions: RwLock<HashMap<String, SessionHandle>>,
}

impl std::fmt::Debug for AppState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AppState")
            .field("datasets", &self.datasets.keys().collect::<Vec<_>>())
            .field("image_root", &self.image_root)
            .field("data_dir", &self.data_dir)
            .finish()
    }
}

impl AppState {
    /// Loads state, replaying every session log under `data_dir` whose
    /// dataset is served. Logs for other datasets are left untouched.
    pub fn open(datasets: Vec<Dataset>, image_root: impl Into<PathBuf>, data_dir: impl Into<PathBuf>) -> ServiceResult<Self> {
        let datasets: HashMap<String, Arc<Dataset>> = datasets.into_iter().map(|d| (d.id.clone(), Arc::new(d))).collect();
        let data_dir = data_dir.into();
        std::fs::create_dir_all(&data_dir)?;
        let mut sessions = HashMap::new();
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&data_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        paths.sort();
        for path in paths {
            match Session::replay(&path, |id| datasets.get(id).cloned()) {
                Ok(s) => {
                    sessions.insert(s.id().to_string(), Arc::new(RwLock::new(s)));
                }
                Err(ServiceError::UnknownDataset(_)) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(Self {
            datasets,
            image_root: image_root.into(),
            data_dir,
            sessions: RwLock::new(sessions),
        })
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    pub async fn session_count(&self) -> usize {
        self.sessions.read().await.len()
    }

    async fn session(&self, id: &str) -> ServiceResult<SessionHandle> {
        self.sessions
            .read()
            .await
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownSession(id.to_string()))
    }

    fn dataset(&self, id: &str) -> ServiceResult<&Arc<Dataset>> {
        self.datasets.get(id).ok_or_else(|| ServiceError::UnknownDataset(id.to_string()))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CreateSession {
    pub dataset_id: String,
    pub n_points: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SessionCreated {
    #[serde(flatten)]
    pub info: SessionInfo,
    pub total: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskView {
    pub task_id: usize,
    pub image_url: String,
    pub image_id: u64,
    pub instance_id: u64,
    pub category: String,
    /// `[x, y, w, h]`
    pub bbox: [f64; 4],
    pub point: Point,
    pub view_geometry: ViewGeometry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NextTask {
    pub done: bool,
    pub progress: Progress,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskView>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LabelSubmission {
    pub task_id: usize,
    pub label: PointLabel,
    pub elapsed_ms: f64,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/next", get(next_task))
        .route("/sessions/{id}/labels", post(submit_label))
        .route("/sessions/{id}/stats", get(session_stats))
        .route("/sessions/{id}/export", get(export))
        .route("/images/{file}", get(image))
        .with_state(state)
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    Json(req): Json<CreateSession>,
) -> ServiceResult<(StatusCode, Json<SessionCreated>)> {
    let dataset = state.dataset(&req.dataset_id)?.clone();
    let session = Session::create(&state.data_dir, &dataset, req.n_points, req.seed)?;
    let body = SessionCreated {
        info: session.info.clone(),
        total: session.tasks.len(),
    };
    state
        .sessions
        .write()
        .await
        .insert(session.id().to_string(), Arc::new(RwLock::new(session)));
    Ok((StatusCode::CREATED, Json(body)))
}

fn image_url(file_name: &str) -> String {
    format!("/images/{file_name}")
}

async fn next_task(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ServiceResult<Json<NextTask>> {
    let handle = state.session(&id).await?;
    let s = handle.read().await;
    let progress = s.progress();
    let Some(task) = s.next_task() else {
        return Ok(Json(NextTask {
            done: true,
            progress,
            task: None,
        }));
    };
    let dataset = state.dataset(&s.info.dataset_id)?;
    let image = dataset
        .image(task.image_id)
        .ok_or_else(|| ServiceError::NotFound(format!("image {}", task.image_id)))?;
    Ok(Json(NextTask {
        done: false,
        progress,
        task: Some(TaskView {
            task_id: task.task_id,
            image_url: image_url(&image.file_name),
            image_id: task.image_id,
            instance_id: task.instance_id,
            category: task.category.clone(),
            bbox: task.bbox.to_array(),
            point: Point { x: task.x, y: task.y },
            view_geometry: view_geometry((task.x, task.y), &task.bbox, image.width, image.height),
        }),
    }))
}

async fn submit_label(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<LabelSubmission>,
) -> ServiceResult<Json<Ack>> {
    let handle = state.session(&id).await?;
    let mut s = handle.write().await;
    let out = s.submit(req.task_id, req.label, req.elapsed_ms)?;
    Ok(Json(out.ack().clone()))
}

async fn session_stats(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ServiceResult<Json<Stats>> {
    let handle = state.session(&id).await?;
    let stats = handle.read().await.stats();
    Ok(Json(stats))
}

async fn export(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ServiceResult<Json<PointAnnotationFile>> {
    let handle = state.session(&id).await?;
    let file = handle.read().await.export();
    Ok(Json(file))
}

fn content_type(name: &str) -> &'static str {
    let ext = name.rsplit_once('.').map(|(_, e)| e.to_ascii_lowercase()).unwrap_or_default();
    match ext.as_str() {
        "png" => "image/png",
        "jpg" | "jpeg" => "image/jpeg",
        "gif" => "image/gif",
        "webp" => "image/webp",
        "bmp" => "image/bmp",
        "svg" => "image/svg+xml",
        _ => "application/octet-stream",
    }
}

async fn image(State(state): State<Arc<AppState>>, UrlPath(file): UrlPath<String>) -> ServiceResult<impl IntoResponse> {
    if file.is_empty() || file.starts_with('.') || file.contains(['/', '\\']) {
        return Err(ServiceError::Invalid(format!("bad image name {file:?}")));
    }
    let bytes = tokio::fs::read(state.image_root.join(&file)).await.map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => ServiceError::NotFound(file.clone()),
        _ => ServiceError::Io(e),
    })?;
    Ok(([(header::CONTENT_TYPE, content_type(&file))], bytes))
}

/// Serves until ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
