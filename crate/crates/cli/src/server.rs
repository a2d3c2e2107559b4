//! JSON-over-HTTP API for one ensemble. Long computations run as jobs that
//! are created with `POST /api/jobs/<kind>` and polled by id; jobs that
//! write into the work directory run one at a time.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::services::ServeDir;
use voxstream::octree::{build_octree, BrickOctree};
use voxstream::render::{extract_slice, Axis, SliceImage, SliceSpec, TransferFunction};
use voxstream::volume::SliceVolume;
use voxstream::JobControl;
use voxstream_ensemble::{
    aggregate, apply_brush, distance_matrix, embedding_curves, extract_features, extract_parcoords, intersection_mask,
    mds_embed, reembed_selection, scan_ensemble, tf_clamp, time_histogram_axes, BrushSelection, CachePolicy,
    DistanceMatrix, EnsembleDataset, FeatureMatrix, ParCoordsData, Sampling, Statistic,
};

use crate::error::{CliError, Result};

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub root: PathBuf,
    /// Features, matrices, masks and octrees are kept here.
    pub work_dir: PathBuf,
    pub static_dir: Option<PathBuf>,
    pub budget: usize,
    pub seed: u64,
    /// Random sample positions per feature record.
    pub samples: usize,
    pub brick_size: usize,
}

impl ServerConfig {
    pub fn new(root: impl Into<PathBuf>, work_dir: impl Into<PathBuf>) -> Self {
        ServerConfig {
            root: root.into(),
            work_dir: work_dir.into(),
            static_dir: None,
            budget: crate::DEFAULT_BUDGET,
            seed: 0,
            samples: 4096,
            brick_size: 32,
        }
    }

    pub fn sampling(&self) -> Sampling {
        Sampling::Random {
            count: self.samples,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
    Cancelled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub id: u64,
    pub kind: String,
    pub state: JobState,
    pub progress: f64,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
}

struct Job {
    id: u64,
    kind: String,
    control: JobControl,
    status: Mutex<(JobState, String, Option<Value>)>,
}

impl Job {
    fn status(&self) -> JobStatus {
        let (state, message, result) = self.status.lock().expect("job lock").clone();
        JobStatus {
            id: self.id,
            kind: self.kind.clone(),
            state,
            progress: self.control.progress(),
            message,
            result,
        }
    }

    fn set(&self, state: JobState, message: impl Into<String>, result: Option<Value>) {
        *self.status.lock().expect("job lock") = (state, message.into(), result);
    }
}

type ParcoordsCache = Option<(String, Arc<ParCoordsData>)>;

pub struct AppState {
    config: ServerConfig,
    dataset: EnsembleDataset,
    jobs: Mutex<BTreeMap<u64, Arc<Job>>>,
    next_id: AtomicU64,
    /// Held by a job while it writes into the work directory.
    writer: Arc<Mutex<()>>,
    parcoords: Mutex<ParcoordsCache>,
    octrees: Mutex<HashMap<PathBuf, Arc<BrickOctree>>>,
}

impl AppState {
    /// Scans the ensemble root (using its cache) and prepares the work
    /// directory.
    pub fn new(config: ServerConfig) -> Result<Self> {
        let (dataset, report) = scan_ensemble(&config.root, CachePolicy::Use, None)?;
        for w in &report.warnings {
            log::warn!("{w}");
        }
        std::fs::create_dir_all(&config.work_dir)?;
        Ok(AppState {
            config,
            dataset,
            jobs: Mutex::new(BTreeMap::new()),
            next_id: AtomicU64::new(1),
            writer: Arc::new(Mutex::new(())),
            parcoords: Mutex::new(None),
            octrees: Mutex::new(HashMap::new()),
        })
    }

    pub fn dataset(&self) -> &EnsembleDataset {
        &self.dataset
    }

    pub fn features_dir(&self) -> PathBuf {
        self.config.work_dir.join("features")
    }

    fn matrix_path(&self, fields: &[String]) -> PathBuf {
        self.config.work_dir.join("matrices").join(format!("{}.dist", fields.join("+")))
    }

    /// Complete feature matrices of `fields` sampled as configured, or
    /// `None` when any is missing, stale or partial.
    pub fn ready_features(&self, fields: &[String]) -> Option<Vec<FeatureMatrix>> {
        let sampling = self.config.sampling();
        let records_of = |f: &str| self.dataset.records(f);
        fields
            .iter()
            .map(|f| {
                let m = FeatureMatrix::open(voxstream_ensemble::features::feature_path(&self.features_dir(), f)).ok()?;
                let h = m.header();
                let fresh = h.sampling == sampling && h.mask.is_none() && h.records == records_of(f);
                (fresh && m.all_complete()).then_some(m)
            })
            .collect()
    }

    /// Distance matrix of `fields`, computed from complete features and
    /// cached on disk.
    fn matrix(&self, fields: &[String], job: Option<&JobControl>) -> Result<Option<DistanceMatrix>> {
        let Some(features) = self.ready_features(fields) else {
            return Ok(None);
        };
        let path = self.matrix_path(fields);
        if let Ok(m) = DistanceMatrix::load(&path) {
            if m.index == features[0].header().records {
                return Ok(Some(m));
            }
        }
        let m = distance_matrix(&features, job)?;
        std::fs::create_dir_all(path.parent().expect("matrix path has a parent"))?;
        let tmp = path.with_extension("partial");
        m.save(&tmp)?;
        std::fs::rename(tmp, &path)?;
        Ok(Some(m))
    }

    fn octree_for(&self, volume: &SliceVolume) -> Result<Arc<BrickOctree>> {
        let key = volume.path().to_path_buf();
        if let Some(o) = self.octrees.lock().expect("octree lock").get(&key) {
            return Ok(o.clone());
        }
        let o = Arc::new(build_octree(
            volume,
            self.config.brick_size,
            self.config.work_dir.join("octrees"),
            self.config.budget,
        )?);
        self.octrees.lock().expect("octree lock").insert(key, o.clone());
        Ok(o)
    }

    fn fields_or_common(&self, fields: Option<&str>) -> Result<Vec<String>> {
        let fields: Vec<String> = match fields {
            Some(s) if !s.is_empty() => s.split(',').map(str::to_string).collect(),
            _ => self.dataset.common_fields.clone(),
        };
        for f in &fields {
            self.dataset.field(f)?;
        }
        if fields.is_empty() {
            return Err(CliError::Config("no fields requested".into()));
        }
        Ok(fields)
    }

    /// Registers a job and runs it on its own thread. Jobs with `exclusive`
    /// wait for earlier exclusive jobs to finish.
    pub fn spawn_job(
        self: &Arc<Self>,
        kind: &str,
        exclusive: bool,
        work: impl FnOnce(&AppState, &JobControl) -> Result<Value> + Send + 'static,
    ) -> JobStatus {
        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        let job = Arc::new(Job {
            id,
            kind: kind.to_string(),
            control: JobControl::new(),
            status: Mutex::new((JobState::Queued, "queued".into(), None)),
        });
        self.jobs.lock().expect("jobs lock").insert(id, job.clone());
        let state = self.clone();
        let worker = job.clone();
        std::thread::spawn(move || {
            let job = worker;
            let writer = state.writer.clone();
            let _guard = exclusive.then(|| writer.lock().unwrap_or_else(|e| e.into_inner()));
            if job.control.is_cancelled() {
                job.set(JobState::Cancelled, "cancelled before start", None);
                return;
            }
            job.set(JobState::Running, "running", None);
            match work(&state, &job.control) {
                Ok(result) => {
                    job.control.set_progress(1.0);
                    job.set(JobState::Done, "done", Some(result));
                }
                Err(e) if e.is_cancelled() => job.set(JobState::Cancelled, e.to_string(), None),
                Err(e) => job.set(JobState::Failed, e.to_string(), Some(e.to_json())),
            }
        });
        job.status()
    }

    pub fn job(&self, id: u64) -> Option<JobStatus> {
        self.jobs.lock().expect("jobs lock").get(&id).map(|j| j.status())
    }

    pub fn cancel_job(&self, id: u64) -> Option<JobStatus> {
        let jobs = self.jobs.lock().expect("jobs lock");
        let job = jobs.get(&id)?;
        job.control.cancel();
        Some(job.status())
    }
}

/// Error response: `{"error": kind, "message": ...}` plus optional extras.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, kind: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: json!({ "error": kind, "message": message.into() }),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "BadRequest", message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, "NotFound", message)
    }
}

impl From<CliError> for ApiError {
    fn from(e: CliError) -> Self {
        let kind = e.kind();
        let status = match kind.as_str() {
            "UnknownName" | "MissingField" | "MissingFile" => StatusCode::NOT_FOUND,
            "IncompleteFeatures" => StatusCode::CONFLICT,
            "Io" | "Malformed" | "MalformedMeta" | "SizeMismatch" | "Image" => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError {
            status,
            body: e.to_json(),
        }
    }
}

impl From<voxstream_ensemble::Error> for ApiError {
    fn from(e: voxstream_ensemble::Error) -> Self {
        CliError::from(e).into()
    }
}

impl From<voxstream::Error> for ApiError {
    fn from(e: voxstream::Error) -> Self {
        CliError::from(e).into()
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;
type Shared = State<Arc<AppState>>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))?
}

fn features_missing(fields: &[String]) -> ApiError {
    ApiError {
        status: StatusCode::CONFLICT,
        body: json!({
            "error": "FeaturesMissing",
            "message": format!("features of {} have not been extracted", fields.join(", ")),
            "hint": {
                "method": "POST",
                "path": "/api/jobs/extract",
                "body": { "fields": fields },
            },
        }),
    }
}

fn member_set(s: Option<&str>) -> Option<BTreeSet<String>> {
    s.filter(|s| !s.is_empty()).map(|s| s.split(',').map(str::to_string).collect())
}

async fn get_ensemble(State(st): Shared) -> ApiResult<Json<Value>> {
    let mut v = serde_json::to_value(st.dataset()).map_err(CliError::from)?;
    v["total_steps"] = json!(st.dataset().total_steps());
    Ok(Json(v))
}

#[derive(Deserialize)]
struct EmbeddingQuery {
    fields: Option<String>,
    k: Option<usize>,
    members: Option<String>,
}

async fn get_embedding(State(st): Shared, Query(q): Query<EmbeddingQuery>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let fields = st.fields_or_common(q.fields.as_deref())?;
        let k = q.k.unwrap_or(2);
        let d = st.matrix(&fields, None)?.ok_or_else(|| features_missing(&fields))?;
        let e = mds_embed(&d, k)?;
        let mut v = e.to_json();
        v["fields"] = json!(fields);
        v["curves"] = serde_json::to_value(embedding_curves(&e, st.dataset())).map_err(CliError::from)?;
        Ok(Json(v))
    })
    .await
}

async fn get_reembed(State(st): Shared, Query(q): Query<EmbeddingQuery>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let fields = st.fields_or_common(q.fields.as_deref())?;
        let members = member_set(q.members.as_deref()).ok_or_else(|| ApiError::bad_request("members is required"))?;
        let d = st.matrix(&fields, None)?.ok_or_else(|| features_missing(&fields))?;
        let e = reembed_selection(&d, &members, q.k.unwrap_or(2))?;
        let mut v = e.to_json();
        v["fields"] = json!(fields);
        Ok(Json(v))
    })
    .await
}

#[derive(Deserialize, Default)]
struct FieldsBody {
    #[serde(default)]
    fields: Option<Vec<String>>,
}

#[derive(Deserialize)]
struct MaskBody {
    member: String,
    step: usize,
    selection: BrushSelection,
}

async fn post_job(
    State(st): Shared,
    UrlPath(kind): UrlPath<String>,
    body: Option<Json<Value>>,
) -> ApiResult<(StatusCode, [(header::HeaderName, String); 1], Json<JobStatus>)> {
    let body = body.map(|Json(v)| v).unwrap_or(json!({}));
    let status = match kind.as_str() {
        "extract" | "matrix" => {
            let FieldsBody { fields } = serde_json::from_value(body).map_err(|e| ApiError::bad_request(e.to_string()))?;
            let fields = st.fields_or_common(fields.map(|f| f.join(",")).as_deref())?;
            if kind == "extract" {
                st.spawn_job("extract", true, move |st, job| {
                    let run = extract_features(
                        st.dataset(),
                        &fields,
                        st.config.sampling(),
                        None,
                        st.features_dir(),
                        Some(job),
                    )?;
                    Ok(json!({ "fields": fields, "computed": run.computed, "reused": run.reused }))
                })
            } else {
                st.spawn_job("matrix", true, move |st, job| {
                    let d = st.matrix(&fields, Some(job))?.ok_or_else(|| {
                        voxstream_ensemble::Error::IncompleteFeatures(format!("features of {} are not extracted", fields.join(", ")))
                    })?;
                    Ok(json!({ "fields": fields, "records": d.len() }))
                })
            }
        }
        "mask" => {
            let MaskBody { member, step, selection } =
                serde_json::from_value(body).map_err(|e| ApiError::bad_request(e.to_string()))?;
            let data = current_parcoords(&st)?;
            st.dataset().member(&member)?;
            st.spawn_job("mask", true, move |st, job| {
                let out = st.config.work_dir.join("masks").join(format!("{member}_{step:04}"));
                let tmp = out.with_extension("partial");
                let _ = std::fs::remove_dir_all(&tmp);
                let mask = intersection_mask(st.dataset(), &data, &member, step, &selection, &tmp, Some(job));
                if let Err(e) = mask {
                    let _ = std::fs::remove_dir_all(&tmp);
                    return Err(e.into());
                }
                let _ = std::fs::remove_dir_all(&out);
                std::fs::rename(&tmp, &out)?;
                Ok(json!({ "path": out }))
            })
        }
        other => return Err(ApiError::not_found(format!("job kind {other:?}"))),
    };
    let location = format!("/api/jobs/{}", status.id);
    Ok((StatusCode::ACCEPTED, [(header::LOCATION, location)], Json(status)))
}

async fn get_job(State(st): Shared, UrlPath(id): UrlPath<u64>) -> ApiResult<Json<JobStatus>> {
    st.job(id).map(Json).ok_or_else(|| ApiError::not_found(format!("job {id}")))
}

async fn delete_job(State(st): Shared, UrlPath(id): UrlPath<u64>) -> ApiResult<Json<JobStatus>> {
    st.cancel_job(id).map(Json).ok_or_else(|| ApiError::not_found(format!("job {id}")))
}

#[derive(Deserialize)]
struct ParcoordsQuery {
    fields: Option<String>,
    samples: Option<usize>,
    times: Option<usize>,
    seed: Option<u64>,
    /// Per-step axes of one field instead of one axis per channel.
    time_field: Option<String>,
    members: Option<String>,
}

fn current_parcoords(st: &AppState) -> ApiResult<Arc<ParCoordsData>> {
    st.parcoords
        .lock()
        .expect("parcoords lock")
        .as_ref()
        .map(|(_, d)| d.clone())
        .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "NoParcoords", "request /api/parcoords first"))
}

async fn get_parcoords(State(st): Shared, Query(q): Query<ParcoordsQuery>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let samples = q.samples.unwrap_or(1024);
        let seed = q.seed.unwrap_or(st.config.seed);
        let key;
        let make: Box<dyn FnOnce() -> voxstream_ensemble::Result<ParCoordsData>> = match &q.time_field {
            Some(field) => {
                let members = member_set(q.members.as_deref());
                key = format!("time:{field}:{:?}:{samples}:{seed}", members);
                let (st, field) = (st.clone(), field.clone());
                Box::new(move || time_histogram_axes(st.dataset(), &field, members.as_ref(), samples, seed, None, None))
            }
            None => {
                let fields = st.fields_or_common(q.fields.as_deref())?;
                let times = q.times.unwrap_or(1);
                key = format!("channels:{fields:?}:{samples}:{times}:{seed}");
                let st = st.clone();
                Box::new(move || extract_parcoords(st.dataset(), &fields, samples, times, seed, None, None))
            }
        };
        let cached = st.parcoords.lock().expect("parcoords lock").clone();
        let data = match cached {
            Some((k, d)) if k == key => d,
            _ => {
                let d = Arc::new(make()?);
                *st.parcoords.lock().expect("parcoords lock") = Some((key, d.clone()));
                d
            }
        };
        Ok(Json(json!({
            "header": data.header,
            "summary": data.summary(),
            "values": data.values,
        })))
    })
    .await
}

#[derive(Deserialize)]
struct TfBinding {
    axis: usize,
    tf: TransferFunction,
}

#[derive(Deserialize)]
struct SelectionBody {
    #[serde(flatten)]
    selection: BrushSelection,
    #[serde(default)]
    tfs: Vec<TfBinding>,
    /// Include the selected line ids.
    #[serde(default)]
    lines: bool,
}

async fn post_selection(State(st): Shared, Json(body): Json<SelectionBody>) -> ApiResult<Json<Value>> {
    let data = current_parcoords(&st)?;
    blocking(move || {
        let mut sel = body.selection;
        if sel.order.is_empty() {
            sel.order = (0..sel.intervals.len()).collect();
        }
        let brush = apply_brush(&data, &sel)?;
        let tfs: Vec<(usize, TransferFunction)> = body.tfs.into_iter().map(|b| (b.axis, b.tf)).collect();
        let clamped = tf_clamp(&data, &sel, &tfs)?;
        let mut v = json!({
            "selected": brush.lines.len(),
            "total": data.header.lines(),
            "fractions": brush.fractions,
            "tfs": clamped,
        });
        if body.lines {
            v["lines"] = json!(brush.lines);
        }
        Ok(Json(v))
    })
    .await
}

/// 16-bit grayscale PNG of channel `c`, mapping `range` linearly onto
/// `0..=65535` and clamping outside it.
pub fn slice_png(img: &SliceImage, c: usize, [lo, hi]: [f64; 2]) -> Result<Vec<u8>> {
    if c >= img.channels {
        return Err(voxstream::Error::OutOfRange(format!("channel {c} of {}", img.channels)).into());
    }
    let span = hi - lo;
    let px: Vec<u16> = img
        .channel(c)
        .iter()
        .map(|&v| {
            let t = if span > 0.0 { (v as f64 - lo) / span } else { 0.0 };
            (t.clamp(0.0, 1.0) * 65535.0).round() as u16
        })
        .collect();
    let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(img.width as u32, img.height as u32, px)
        .expect("buffer matches the slice size");
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png).map_err(voxstream::Error::from)?;
    Ok(out.into_inner())
}

fn png_response(png: Vec<u8>, range: [f64; 2]) -> Response {
    let mut r = ([(header::CONTENT_TYPE, "image/png")], png).into_response();
    let h = r.headers_mut();
    for (name, v) in [("x-value-min", range[0]), ("x-value-max", range[1])] {
        h.insert(name, HeaderValue::from_str(&v.to_string()).expect("number is a valid header"));
    }
    r
}

#[derive(Deserialize)]
struct SliceQuery {
    member: String,
    /// Step index within the member.
    t: usize,
    field: String,
    axis: Option<String>,
    index: usize,
    lod: Option<usize>,
    channel: Option<usize>,
}

async fn get_slice(State(st): Shared, Query(q): Query<SliceQuery>) -> ApiResult<Response> {
    blocking(move || {
        let vref = st.dataset().volume(&q.member, q.t, &q.field)?;
        let vol = st.dataset().open_volume(vref)?;
        let octree = st.octree_for(&vol)?;
        let axis: Axis = q.axis.as_deref().unwrap_or("z").parse()?;
        let img = extract_slice(&octree, &SliceSpec::Axis { axis, index: q.index }, q.lod.unwrap_or(0))?;
        let c = q.channel.unwrap_or(0);
        let range = st.dataset().field(&q.field)?.range.get(c).copied().unwrap_or([0.0, 1.0]);
        Ok(png_response(slice_png(&img, c, range)?, range))
    })
    .await
}

#[derive(Deserialize)]
struct AggregateQuery {
    field: String,
    stat: Option<String>,
    members: Option<String>,
    t0: Option<f64>,
    t1: Option<f64>,
    axis: Option<String>,
    index: usize,
    channel: Option<usize>,
    /// `png` (default) or `json`.
    format: Option<String>,
}

async fn get_aggregate(State(st): Shared, Query(q): Query<AggregateQuery>) -> ApiResult<Response> {
    blocking(move || {
        let stat: Statistic = q.stat.as_deref().unwrap_or("mean").parse()?;
        let members = member_set(q.members.as_deref());
        let window = match (q.t0, q.t1) {
            (None, None) => None,
            (a, b) => Some([a.unwrap_or(f64::NEG_INFINITY), b.unwrap_or(f64::INFINITY)]),
        };
        let mut h = DefaultHasher::new();
        (&q.field, format!("{stat:?}"), &members, window.map(|w| w.map(f64::to_bits))).hash(&mut h);
        let out = st.config.work_dir.join("aggregates").join(format!("{:016x}", h.finish()));
        let vol = match SliceVolume::open(&out) {
            Ok(v) => v,
            Err(_) => {
                let _guard = st.writer.lock().unwrap_or_else(|e| e.into_inner());
                let tmp = out.with_extension("partial");
                let _ = std::fs::remove_dir_all(&tmp);
                aggregate(st.dataset(), &q.field, members.as_ref(), window, stat, &tmp, None)?;
                let _ = std::fs::remove_dir_all(&out);
                std::fs::rename(&tmp, &out).map_err(CliError::from)?;
                SliceVolume::open(&out)?
            }
        };
        let octree = st.octree_for(&vol)?;
        let axis: Axis = q.axis.as_deref().unwrap_or("z").parse()?;
        let img = extract_slice(&octree, &SliceSpec::Axis { axis, index: q.index }, 0)?;
        let c = q.channel.unwrap_or(0);
        if c >= img.channels {
            return Err(ApiError::bad_request(format!("channel {c} of {}", img.channels)));
        }
        let values = img.channel(c);
        let range = values.iter().fold([f64::INFINITY, f64::NEG_INFINITY], |[lo, hi], &v| {
            [lo.min(v as f64), hi.max(v as f64)]
        });
        match q.format.as_deref().unwrap_or("png") {
            "json" => Ok(Json(json!({
                "width": img.width,
                "height": img.height,
                "min": range[0],
                "max": range[1],
                "values": values,
            }))
            .into_response()),
            "png" => Ok(png_response(slice_png(&img, c, range)?, range)),
            other => Err(ApiError::bad_request(format!("format {other:?}"))),
        }
    })
    .await
}

const INDEX_HTML: &str = r#"<!doctype html>
<html><head><meta charset="utf-8"><title>voxstream</title></head>
<body><h1>voxstream ensemble API</h1>
<ul>
<li><a href="/api/ensemble">/api/ensemble</a></li>
<li>/api/embedding?fields=&amp;k=</li>
<li>/api/parcoords?fields=&amp;samples=&amp;times=</li>
<li>/api/slice?member=&amp;t=&amp;field=&amp;axis=&amp;index=&amp;lod=</li>
<li>/api/aggregate?field=&amp;stat=&amp;index=</li>
<li>/api/reembed?members=</li>
</ul></body></html>
"#;

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/api/ensemble", get(get_ensemble))
        .route("/api/embedding", get(get_embedding))
        .route("/api/reembed", get(get_reembed))
        .route("/api/jobs/{key}", post(post_job).get(get_job).delete(delete_job))
        .route("/api/parcoords", get(get_parcoords))
        .route("/api/selection", post(post_selection))
        .route("/api/slice", get(get_slice))
        .route("/api/aggregate", get(get_aggregate));
    let api = match state.config.static_dir.clone() {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(|| async { Html(INDEX_HTML) })),
    };
    api.with_state(state)
}

/// Binds `addr` and serves until interrupted.
pub fn serve(config: ServerConfig, addr: &str) -> Result<()> {
    let state = Arc::new(AppState::new(config)?);
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| CliError::Bind {
            addr: addr.to_string(),
            message: e.to_string(),
        })?;
        log::info!("listening on {}", listener.local_addr()?);
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

pub fn default_work_dir(root: &Path) -> PathBuf {
    root.join(".voxstream")
}
