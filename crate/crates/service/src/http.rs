//! HTTP API. Read-only routes run concurrently; densification requests are
//! queued to a single worker thread.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::{Deserialize, Serialize};
use serde_json::json;
use splatlens::densifier::DensifierModel;
use splatlens::io;
use splatlens::roi::RoISpec;
use splatlens::{Camera, Rect};

use crate::error::{ServiceError, ServiceResult};
use crate::ops::{self, DensifyReport, LoadedScene};

/// A scene plus its low-res preview renders.
pub struct SceneState {
    pub scene: Arc<LoadedScene>,
    pub previews: Vec<Vec<u8>>,
}

impl SceneState {
    fn new(scene: LoadedScene) -> ServiceResult<Self> {
        let previews = scene
            .low_res_cameras
            .iter()
            .map(|c| Ok(io::encode_png(&ops::render_image(&scene.g_input, c)?)?))
            .collect::<ServiceResult<Vec<_>>>()?;
        Ok(SceneState {
            scene: Arc::new(scene),
            previews,
        })
    }
}

pub struct RoiEntry {
    pub view_id: usize,
    pub rect: Rect,
    pub seed: u64,
    pub spec: RoISpec,
    pub scene: Arc<LoadedScene>,
}

pub struct JobOutput {
    /// Serialized result payload.
    pub payload: Vec<u8>,
    pub gaussians: Vec<u8>,
    pub before: Vec<Vec<u8>>,
    pub after: Vec<Vec<u8>>,
}

pub enum JobState {
    Queued,
    Running,
    Done(Arc<JobOutput>),
    Failed(ServiceError),
}

struct Job {
    id: u64,
    roi: Arc<RoiEntry>,
}

pub struct AppState {
    scene: RwLock<Arc<SceneState>>,
    rois: RwLock<HashMap<u64, Arc<RoiEntry>>>,
    jobs: Arc<RwLock<HashMap<u64, JobState>>>,
    queue: Mutex<mpsc::Sender<Job>>,
    next_id: AtomicU64,
}

/// The `GET /result/{job}` body once the job has finished.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultPayload {
    pub state: String,
    pub view_id: usize,
    pub rect: Rect,
    pub seed: u64,
    #[serde(flatten)]
    pub report: DensifyReport,
    pub num_views: usize,
}

fn run_job(roi: &RoiEntry, model: &DensifierModel) -> ServiceResult<JobOutput> {
    let scene = &roi.scene;
    let (set, report) = ops::densify(scene, &roi.spec, model)?;
    let mut before = Vec::new();
    let mut after = Vec::new();
    for v in &scene.views {
        before.push(io::encode_png(&ops::render_image(&scene.g_input, &v.camera)?)?);
        after.push(io::encode_png(&ops::render_image(&set, &v.camera)?)?);
    }
    let mut gaussians = Vec::new();
    io::write_gaussian_set(&set, &mut gaussians)?;
    let payload = ResultPayload {
        state: "done".into(),
        view_id: roi.view_id,
        rect: roi.rect,
        seed: roi.seed,
        report,
        num_views: scene.views.len(),
    };
    Ok(JobOutput {
        payload: serde_json::to_vec(&payload)?,
        gaussians,
        before,
        after,
    })
}

fn worker(rx: mpsc::Receiver<Job>, jobs: Arc<RwLock<HashMap<u64, JobState>>>, model: DensifierModel) {
    for job in rx {
        jobs.write().unwrap().insert(job.id, JobState::Running);
        let state = match run_job(&job.roi, &model) {
            Ok(out) => JobState::Done(Arc::new(out)),
            Err(e) => {
                log::warn!("job {} failed: {e}", job.id);
                JobState::Failed(e)
            }
        };
        jobs.write().unwrap().insert(job.id, state);
    }
}

impl AppState {
    /// Loads the scene previews and starts the densification worker.
    pub fn new(scene: LoadedScene, model: DensifierModel) -> ServiceResult<Arc<Self>> {
        let (tx, rx) = mpsc::channel();
        let jobs = Arc::new(RwLock::new(HashMap::new()));
        let worker_jobs = jobs.clone();
        std::thread::Builder::new()
            .name("densify-worker".into())
            .spawn(move || worker(rx, worker_jobs, model))?;
        Ok(Arc::new(AppState {
            scene: RwLock::new(Arc::new(SceneState::new(scene)?)),
            rois: RwLock::new(HashMap::new()),
            jobs,
            queue: Mutex::new(tx),
            next_id: AtomicU64::new(1),
        }))
    }

    fn scene(&self) -> Arc<SceneState> {
        self.scene.read().unwrap().clone()
    }

    fn fresh_id(&self) -> u64 {
        self.next_id.fetch_add(1, Ordering::Relaxed)
    }
}

pub(crate) fn status_of(e: &ServiceError) -> StatusCode {
    match e.code.as_str() {
        "not_found" => StatusCode::NOT_FOUND,
        "invalid_request" | "shape" | "config" | "degenerate_roi" | "empty_mask" => StatusCode::UNPROCESSABLE_ENTITY,
        "bad_json" => StatusCode::BAD_REQUEST,
        "checkpoint" | "format" => StatusCode::CONFLICT,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

struct ApiError(ServiceError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (status_of(&self.0), [(header::CONTENT_TYPE, "application/json")], self.0.to_json()).into_response()
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError(e)
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn json_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| {
        let code = if e.is_data() { "invalid_request" } else { "bad_json" };
        ApiError(ServiceError::new(code, e.to_string()))
    })
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

fn json_response(status: StatusCode, bytes: Vec<u8>) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], bytes).into_response()
}

/// `"3.png"` → 3.
fn png_index(file: &str) -> ApiResult<usize> {
    file.strip_suffix(".png")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| ApiError(ServiceError::not_found(format!("no such image {file}"))))
}

fn pick<T: Clone>(items: &[T], i: usize, what: &str) -> ApiResult<T> {
    items
        .get(i)
        .cloned()
        .ok_or_else(|| ApiError(ServiceError::not_found(format!("no {what} {i}"))))
}

#[derive(Serialize)]
struct ViewInfo {
    id: usize,
    role: &'static str,
    camera: Camera,
    high_res_camera: Camera,
    image: String,
}

fn views_json(s: &SceneState) -> serde_json::Value {
    let scene = &s.scene;
    let views: Vec<ViewInfo> = scene
        .low_res_cameras
        .iter()
        .zip(&scene.views)
        .enumerate()
        .map(|(i, (low, hr))| ViewInfo {
            id: i,
            role: if i < ops::DEFAULT_NUM_CONTEXT { "context" } else { "target" },
            camera: *low,
            high_res_camera: hr.camera,
            image: format!("/views/{i}/image.png"),
        })
        .collect();
    json!({
        "seed": scene.seed,
        "downscale": scene.downscale(),
        "num_gaussians": scene.g_input.len(),
        "views": views,
    })
}

async fn get_views(State(st): State<Arc<AppState>>) -> Response {
    axum::Json(views_json(&st.scene())).into_response()
}

async fn get_view_image(State(st): State<Arc<AppState>>, Path(id): Path<usize>) -> ApiResult<Response> {
    Ok(png(pick(&st.scene().previews, id, "view")?))
}

#[derive(Deserialize)]
struct RoiRequest {
    view_id: usize,
    rect: Rect,
    #[serde(default)]
    seed: u64,
}

#[derive(Serialize)]
struct MaskInfo {
    view: usize,
    pixels: usize,
    crop: Option<Rect>,
    width: usize,
    height: usize,
    preview: String,
}

async fn post_roi(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let req: RoiRequest = json_body(&body)?;
    let scene = st.scene().scene.clone();
    let s2 = scene.clone();
    let spec = tokio::task::spawn_blocking(move || ops::build_roi(&s2, req.view_id, req.rect, req.seed))
        .await
        .map_err(|e| ServiceError::new("internal", e.to_string()))??;
    let id = st.fresh_id();
    let masks: Vec<MaskInfo> = spec
        .masks
        .iter()
        .enumerate()
        .map(|(v, m)| MaskInfo {
            view: v,
            pixels: m.count(),
            crop: spec.crops[v],
            width: m.width,
            height: m.height,
            preview: format!("/roi/{id}/mask/{v}.png"),
        })
        .collect();
    let body = json!({
        "roi_id": id,
        "view_id": req.view_id,
        "rect": req.rect,
        "seed": req.seed,
        "masks": masks,
    });
    st.rois.write().unwrap().insert(
        id,
        Arc::new(RoiEntry {
            view_id: req.view_id,
            rect: req.rect,
            seed: req.seed,
            spec,
            scene,
        }),
    );
    Ok((StatusCode::CREATED, axum::Json(body)).into_response())
}

fn roi_entry(st: &AppState, id: u64) -> ApiResult<Arc<RoiEntry>> {
    st.rois
        .read()
        .unwrap()
        .get(&id)
        .cloned()
        .ok_or_else(|| ApiError(ServiceError::not_found(format!("no RoI {id}"))))
}

async fn get_roi_mask(State(st): State<Arc<AppState>>, Path((id, file)): Path<(u64, String)>) -> ApiResult<Response> {
    let roi = roi_entry(&st, id)?;
    let v = png_index(&file)?;
    let m = pick(&roi.spec.masks, v, "view")?;
    Ok(png(io::encode_mask_png(&m).map_err(ServiceError::from)?))
}

#[derive(Deserialize)]
struct DensifyRequest {
    roi_id: u64,
}

async fn post_densify(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let req: DensifyRequest = json_body(&body)?;
    let roi = roi_entry(&st, req.roi_id)?;
    let id = st.fresh_id();
    st.jobs.write().unwrap().insert(id, JobState::Queued);
    st.queue
        .lock()
        .unwrap()
        .send(Job { id, roi })
        .map_err(|_| ServiceError::new("internal", "densification worker stopped"))?;
    Ok((StatusCode::ACCEPTED, axum::Json(json!({ "job_id": id, "state": "queued" }))).into_response())
}

enum Lookup {
    Pending(&'static str),
    Done(Arc<JobOutput>),
    Failed(ServiceError),
}

fn job(st: &AppState, id: u64) -> ApiResult<Lookup> {
    let jobs = st.jobs.read().unwrap();
    match jobs.get(&id) {
        None => Err(ApiError(ServiceError::not_found(format!("no job {id}")))),
        Some(JobState::Queued) => Ok(Lookup::Pending("queued")),
        Some(JobState::Running) => Ok(Lookup::Pending("running")),
        Some(JobState::Done(o)) => Ok(Lookup::Done(o.clone())),
        Some(JobState::Failed(e)) => Ok(Lookup::Failed(e.clone())),
    }
}

fn finished(st: &AppState, id: u64) -> ApiResult<Arc<JobOutput>> {
    match job(st, id)? {
        Lookup::Done(o) => Ok(o),
        Lookup::Pending(s) => Err(ApiError(ServiceError::not_found(format!("job {id} is {s}")))),
        Lookup::Failed(e) => Err(ApiError(e)),
    }
}

async fn get_result(State(st): State<Arc<AppState>>, Path(id): Path<u64>) -> ApiResult<Response> {
    Ok(match job(&st, id)? {
        Lookup::Pending(s) => json_response(StatusCode::ACCEPTED, serde_json::to_vec(&json!({ "state": s })).unwrap()),
        Lookup::Done(o) => json_response(StatusCode::OK, o.payload.clone()),
        Lookup::Failed(e) => {
            let body = json!({ "state": "failed", "error": e });
            json_response(StatusCode::INTERNAL_SERVER_ERROR, serde_json::to_vec(&body).unwrap())
        }
    })
}

async fn get_result_image(State(st): State<Arc<AppState>>, Path((id, which, file)): Path<(u64, String, String)>) -> ApiResult<Response> {
    let out = finished(&st, id)?;
    let v = png_index(&file)?;
    let images = match which.as_str() {
        "before" => &out.before,
        "after" => &out.after,
        _ => return Err(ApiError(ServiceError::not_found(format!("no image set {which}")))),
    };
    Ok(png(pick(images, v, "view")?))
}

async fn get_gaussians(State(st): State<Arc<AppState>>, Path(id): Path<u64>) -> ApiResult<Response> {
    let out = finished(&st, id)?;
    Ok((
        [
            (header::CONTENT_TYPE, "application/octet-stream".to_string()),
            (header::CONTENT_DISPOSITION, format!("attachment; filename=\"job_{id}.gs\"")),
        ],
        out.gaussians.clone(),
    )
        .into_response())
}

#[derive(Deserialize)]
struct SceneRequest {
    path: std::path::PathBuf,
}

/// Replaces the scene. RoIs of the old scene are dropped; queued jobs keep
/// the scene they were created with.
async fn post_scene(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let req: SceneRequest = json_body(&body)?;
    if !req.path.is_dir() {
        return Err(ApiError(ServiceError::not_found(format!("{} is not a directory", req.path.display()))));
    }
    let fresh = tokio::task::spawn_blocking(move || LoadedScene::load(&req.path).and_then(SceneState::new))
        .await
        .map_err(|e| ServiceError::new("internal", e.to_string()))??;
    let fresh = Arc::new(fresh);
    *st.scene.write().unwrap() = fresh.clone();
    st.rois.write().unwrap().clear();
    Ok(axum::Json(views_json(&fresh)).into_response())
}

async fn fallback() -> ApiError {
    ApiError(ServiceError::not_found("no such route"))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/views", get(get_views))
        .route("/views/{id}/image.png", get(get_view_image))
        .route("/roi", post(post_roi))
        .route("/roi/{id}/mask/{file}", get(get_roi_mask))
        .route("/densify", post(post_densify))
        .route("/result/{job}", get(get_result))
        .route("/result/{job}/{which}/{file}", get(get_result_image))
        .route("/gaussians/{job}", get(get_gaussians))
        .route("/scene", post(post_scene))
        .fallback(fallback)
        .with_state(state)
}

pub async fn serve(addr: &str, state: Arc<AppState>) -> ServiceResult<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}
