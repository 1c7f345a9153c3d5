// SPDX-License-Identifier: MIT OR Apache-2.0

//! HTTP API over a completed run, mounted under `/api/v1`.
//!
//! Artifacts are loaded once and shared read-only between handlers. Steering
//! and attribution run on the configured host inside a blocking task, each
//! request with its own forward passes; the only mutable state is the map of
//! steering sessions.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use log::{info, warn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use tower_http::cors::{AllowOrigin, CorsLayer};
use tower_http::services::ServeDir;

use crate::attribution::{AttributionResult, Method, RangeMap};
use crate::config::{RunConfig, ServeConfig};
use crate::error::{Error, Result};
use crate::host::HostModel;
use crate::interpret::{self, Concept, FeatureRecord, Scores};
use crate::pipeline::{self, SteerReport};
use crate::sae::SaeParams;
use crate::store::{self, SparseFeatureCache};

/// Version of every response body.
pub const SCHEMA_VERSION: u32 = 1;

/// Steering sessions kept before the oldest is dropped.
pub const MAX_SESSIONS: usize = 1024;

const DEFAULT_MAX_LEN: usize = 4;
const DEFAULT_TOP_N: usize = 10;
const MAX_GENERATION: usize = 64;

/// Run outputs the API serves.
pub struct Artifacts {
    pub params: SaeParams,
    pub cache: SparseFeatureCache,
    pub records: BTreeMap<usize, FeatureRecord>,
    pub host: Arc<dyn HostModel>,
    pub image_root: PathBuf,
}

impl Artifacts {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let params = SaeParams::load(cfg.existing_path("params")?)?;
        let cache = SparseFeatureCache::load(cfg.existing_path("cache")?)?;
        if cache.d_sae() != params.d_sae() {
            return Err(Error::Config(format!(
                "cache has d_s={} but params have d_s={}",
                cache.d_sae(),
                params.d_sae()
            )));
        }
        let records = interpret::read_records(cfg.existing_path("records")?)?
            .into_iter()
            .map(|r| (r.feature_index, r))
            .collect();
        let host = pipeline::build_host(cfg)?;
        let image_root = cfg.image_root().unwrap_or_else(|_| cfg.base_dir.clone());
        Ok(Self {
            params,
            cache,
            records,
            host,
            image_root,
        })
    }
}

/// Shared handler state.
pub struct AppState {
    artifacts: Option<Arc<Artifacts>>,
    load_error: Option<String>,
    page_size: usize,
    sessions: Mutex<BTreeMap<u64, SteerReport>>,
    next_session: AtomicU64,
}

impl AppState {
    pub fn new(artifacts: Artifacts, page_size: usize) -> Self {
        Self::build(Some(Arc::new(artifacts)), None, page_size)
    }

    /// State that answers 503 to every artifact endpoint.
    pub fn unloaded(reason: impl Into<String>, page_size: usize) -> Self {
        Self::build(None, Some(reason.into()), page_size)
    }

    fn build(artifacts: Option<Arc<Artifacts>>, load_error: Option<String>, page_size: usize) -> Self {
        Self {
            artifacts,
            load_error,
            page_size: page_size.max(1),
            sessions: Mutex::new(BTreeMap::new()),
            next_session: AtomicU64::new(1),
        }
    }

    fn artifacts(&self) -> std::result::Result<Arc<Artifacts>, ApiError> {
        self.artifacts.clone().ok_or_else(|| ApiError {
            status: StatusCode::SERVICE_UNAVAILABLE,
            message: format!(
                "run artifacts are not loaded: {}",
                self.load_error.as_deref().unwrap_or("unknown reason")
            ),
            field: None,
        })
    }

    fn store_session(&self, report: SteerReport) -> u64 {
        let id = self.next_session.fetch_add(1, Ordering::Relaxed);
        let mut s = self.sessions.lock().unwrap_or_else(|p| p.into_inner());
        s.insert(id, report);
        while s.len() > MAX_SESSIONS {
            s.pop_first();
        }
        id
    }
}

/// Error body `{schema_version, error: {status, message, field?}}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
    pub field: Option<String>,
}

impl ApiError {
    fn not_found(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            message: message.into(),
            field: None,
        }
    }

    fn invalid(field: &str, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            message: message.into(),
            field: Some(field.to_string()),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::InvalidArgument(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Error::Client { .. } | Error::Protocol(_) => StatusCode::BAD_GATEWAY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self {
            status,
            message: e.to_string(),
            field: None,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut err = json!({ "status": self.status.as_u16(), "message": self.message });
        if let Some(f) = self.field {
            err["field"] = Value::String(f);
        }
        (
            self.status,
            Json(json!({ "schema_version": SCHEMA_VERSION, "error": err })),
        )
            .into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

fn versioned<T: Serialize>(body: T) -> Json<Value> {
    let mut v = serde_json::to_value(body).unwrap_or(Value::Null);
    if let Value::Object(m) = &mut v {
        m.insert("schema_version".into(), SCHEMA_VERSION.into());
    }
    Json(v)
}

fn cacheable(body: impl IntoResponse) -> Response {
    let mut r = body.into_response();
    r.headers_mut()
        .insert(header::CACHE_CONTROL, HeaderValue::from_static("public, max-age=300"));
    r
}

/// Sort key of `GET /features`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SortKey {
    Mean,
    Iou,
    Clip,
}

impl SortKey {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "mean" => Some(Self::Mean),
            "iou" => Some(Self::Iou),
            "clip" => Some(Self::Clip),
            _ => None,
        }
    }

    fn key(self, r: &FeatureRecord) -> Option<f64> {
        match self {
            Self::Mean => Some(r.peak_mean() as f64),
            Self::Iou => r.scores.iou,
            Self::Clip => r.scores.clip,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSummary {
    pub feature_index: usize,
    pub peak_mean: f32,
    pub explanation: Option<String>,
    pub refined_label: Option<String>,
    pub concept: Option<Concept>,
    pub scores: Scores,
    pub top_image_ids: Vec<String>,
}

impl FeatureSummary {
    fn of(r: &FeatureRecord) -> Self {
        Self {
            feature_index: r.feature_index,
            peak_mean: r.peak_mean(),
            explanation: r.explanation.clone(),
            refined_label: r.refined_label.clone(),
            concept: r.concept,
            scores: r.scores.clone(),
            top_image_ids: r.top_images.iter().map(|t| t.image_id.clone()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeaturePage {
    pub sort: SortKey,
    pub concept: Option<Concept>,
    pub page: usize,
    pub page_size: usize,
    pub total: usize,
    pub items: Vec<FeatureSummary>,
}

/// Records ordered by `sort` descending; missing scores last, ties by id.
pub fn sorted_records(
    records: &BTreeMap<usize, FeatureRecord>,
    sort: SortKey,
    concept: Option<Concept>,
) -> Vec<&FeatureRecord> {
    let mut v: Vec<&FeatureRecord> = records
        .values()
        .filter(|r| concept.is_none() || r.concept == concept)
        .collect();
    v.sort_by(|a, b| match (sort.key(a), sort.key(b)) {
        (Some(x), Some(y)) => y.total_cmp(&x).then(a.feature_index.cmp(&b.feature_index)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.feature_index.cmp(&b.feature_index),
    });
    v
}

async fn health(State(st): State<Arc<AppState>>) -> Json<Value> {
    let loaded = st.artifacts.as_ref().map(|a| {
        json!({
            "d_model": a.params.d_model(),
            "d_sae": a.params.d_sae(),
            "k": a.params.k(),
            "n_records": a.records.len(),
            "n_images": a.cache.n_images(),
        })
    });
    versioned(json!({
        "name": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "artifacts_loaded": st.artifacts.is_some(),
        "artifacts": loaded,
        "load_error": st.load_error,
    }))
}

async fn list_features(
    State(st): State<Arc<AppState>>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    let a = st.artifacts()?;
    let sort = match q.get("sort").map(String::as_str) {
        None | Some("") => SortKey::Mean,
        Some(s) => SortKey::parse(s)
            .ok_or_else(|| ApiError::invalid("sort", format!("unknown sort key {s:?}; expected mean, iou or clip")))?,
    };
    let concept = match q.get("concept").map(String::as_str) {
        None | Some("") => None,
        Some(c) => Some(
            c.parse::<Concept>()
                .map_err(|_| ApiError::invalid("concept", format!("unknown concept {c:?}")))?,
        ),
    };
    let page = match q.get("page").map(String::as_str) {
        None | Some("") => 0,
        Some(p) => p
            .parse::<usize>()
            .map_err(|_| ApiError::invalid("page", format!("page must be a non-negative integer, got {p:?}")))?,
    };
    let all = sorted_records(&a.records, sort, concept);
    let items = all
        .iter()
        .skip(page.saturating_mul(st.page_size))
        .take(st.page_size)
        .map(|r| FeatureSummary::of(r))
        .collect();
    Ok(cacheable(versioned(FeaturePage {
        sort,
        concept,
        page,
        page_size: st.page_size,
        total: all.len(),
        items,
    })))
}

fn parse_feature(id: &str) -> ApiResult<usize> {
    id.parse()
        .map_err(|_| ApiError::not_found(format!("unknown feature {id:?}")))
}

async fn feature_detail(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let a = st.artifacts()?;
    let j = parse_feature(&id)?;
    let r = a
        .records
        .get(&j)
        .ok_or_else(|| ApiError::not_found(format!("no record for feature {j}")))?;
    let urls: Vec<String> = r
        .top_images
        .iter()
        .map(|t| format!("/api/v1/images/{}", t.image_id))
        .collect();
    Ok(cacheable(versioned(json!({ "record": r, "image_urls": urls }))))
}

fn content_type(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => "image/png",
        Some("bmp") => "image/bmp",
        Some("ppm" | "pgm" | "pnm") => "image/x-portable-anymap",
        Some("jpg" | "jpeg") => "image/jpeg",
        _ => "application/octet-stream",
    }
}

async fn image_bytes(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let a = st.artifacts()?;
    let i = a
        .cache
        .image_index(&id)
        .ok_or_else(|| ApiError::not_found(format!("unknown image {id:?}")))?;
    let source = a
        .cache
        .sources()
        .get(i)
        .filter(|s| !s.is_empty())
        .cloned()
        .unwrap_or_else(|| id.clone());
    let path = a.image_root.join(&source);
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|_| ApiError::not_found(format!("image file for {id:?} is missing")))?;
    Ok(cacheable(([(header::CONTENT_TYPE, content_type(&path))], bytes)))
}

async fn heatmap(
    State(st): State<Arc<AppState>>,
    UrlPath((id, image_id)): UrlPath<(String, String)>,
) -> ApiResult<Response> {
    let a = st.artifacts()?;
    let j = parse_feature(&id)?;
    if j >= a.cache.d_sae() {
        return Err(ApiError::not_found(format!("unknown feature {j}")));
    }
    if a.cache.image_index(&image_id).is_none() {
        return Err(ApiError::not_found(format!("unknown image {image_id:?}")));
    }
    let hm = store::token_heatmap(&a.cache, &image_id, j)?;
    Ok(cacheable(versioned(json!({
        "feature": j,
        "image_id": image_id,
        "rows": hm.rows,
        "cols": hm.cols,
        "values": hm.values,
    }))))
}

/// JSON object body with per-field validation.
struct Body(Map<String, Value>);

impl Body {
    fn parse(bytes: &[u8]) -> ApiResult<Self> {
        match serde_json::from_slice::<Value>(bytes) {
            Ok(Value::Object(m)) => Ok(Self(m)),
            Ok(_) => Err(ApiError::invalid("body", "request body must be a JSON object")),
            Err(e) => Err(ApiError::invalid(
                "body",
                format!("request body is not valid JSON: {e}"),
            )),
        }
    }

    fn opt<T: DeserializeOwned>(&self, field: &str, expected: &str) -> ApiResult<Option<T>> {
        match self.0.get(field) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => serde_json::from_value(v.clone())
                .map(Some)
                .map_err(|_| ApiError::invalid(field, format!("`{field}` must be {expected}"))),
        }
    }

    fn req<T: DeserializeOwned>(&self, field: &str, expected: &str) -> ApiResult<T> {
        self.opt(field, expected)?
            .ok_or_else(|| ApiError::invalid(field, format!("missing field `{field}`")))
    }
}

fn check_image(a: &Artifacts, image: &Option<String>) -> ApiResult<()> {
    match image {
        Some(id) if a.cache.image_index(id).is_none() => {
            Err(ApiError::invalid("image", format!("unknown image {id:?}")))
        }
        _ => Ok(()),
    }
}

fn token_field(body: &Body, field: &str) -> ApiResult<Option<usize>> {
    match body.0.get(field) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Number(n)) => n
            .as_u64()
            .map(|v| Some(v as usize))
            .ok_or_else(|| ApiError::invalid(field, format!("`{field}` must be a token id or word"))),
        Some(Value::String(s)) => pipeline::token_id(s)
            .map(Some)
            .map_err(|e| ApiError::invalid(field, e.to_string())),
        Some(_) => Err(ApiError::invalid(
            field,
            format!("`{field}` must be a token id or word"),
        )),
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: format!("worker failed: {e}"),
            field: None,
        })?
        .map_err(ApiError::from)
}

async fn steer(State(st): State<Arc<AppState>>, bytes: Bytes) -> ApiResult<Json<Value>> {
    let a = st.artifacts()?;
    let body = Body::parse(&bytes)?;
    let feature: usize = body.req("feature", "a feature index")?;
    if feature >= a.params.d_sae() {
        return Err(ApiError::invalid(
            "feature",
            format!("feature {feature} out of range (d_s={})", a.params.d_sae()),
        ));
    }
    let value: f32 = body.req("value", "a number")?;
    if !value.is_finite() {
        return Err(ApiError::invalid("value", "`value` must be finite"));
    }
    let prompt: String = body.req("prompt", "a string")?;
    let tokens: Vec<usize> = body.opt("tokens", "a list of token positions")?.unwrap_or_default();
    let image: Option<String> = body.opt("image", "an image id")?;
    check_image(&a, &image)?;
    let max_len: usize = body.opt("max_len", "a positive integer")?.unwrap_or(DEFAULT_MAX_LEN);
    if max_len == 0 || max_len > MAX_GENERATION {
        return Err(ApiError::invalid(
            "max_len",
            format!("`max_len` must be in 1..={MAX_GENERATION}"),
        ));
    }
    let report = blocking(move || {
        pipeline::steer_compare(
            a.host.as_ref(),
            &a.params,
            &prompt,
            image,
            feature,
            value,
            &tokens,
            max_len,
        )
    })
    .await?;
    let session = st.store_session(report.clone());
    Ok(versioned(json!({ "session": session, "report": report })))
}

async fn steer_session(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let id: u64 = id
        .parse()
        .map_err(|_| ApiError::not_found(format!("unknown session {id:?}")))?;
    let report = st
        .sessions
        .lock()
        .unwrap_or_else(|p| p.into_inner())
        .get(&id)
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("unknown session {id}")))?;
    Ok(versioned(json!({ "session": id, "report": report })))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionSummary {
    pub method: Method,
    pub v_c: usize,
    pub v_b: usize,
    pub baseline: f64,
    pub n_tokens: usize,
    pub n_entries: usize,
    pub n_reselections: usize,
}

impl AttributionSummary {
    pub fn of(r: &AttributionResult) -> Self {
        Self {
            method: r.method,
            v_c: r.v_c,
            v_b: r.v_b,
            baseline: r.baseline,
            n_tokens: r.n_tokens,
            n_entries: r.entries.len(),
            n_reselections: r.entries.iter().filter(|e| e.reselection).count(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeResponse {
    pub summary: AttributionSummary,
    pub result: AttributionResult,
    pub maps: Vec<RangeMap>,
}

async fn attribute(State(st): State<Arc<AppState>>, bytes: Bytes) -> ApiResult<Json<Value>> {
    let a = st.artifacts()?;
    let body = Body::parse(&bytes)?;
    let prompt: String = body.req("prompt", "a string")?;
    let v_c = token_field(&body, "v_c")?;
    let v_b = token_field(&body, "v_b")?.ok_or_else(|| ApiError::invalid("v_b", "missing field `v_b`"))?;
    let method = match body.opt::<String>("method", "`exact` or `approx`")? {
        None => Method::Approx,
        Some(m) => m
            .parse()
            .map_err(|_| ApiError::invalid("method", format!("unknown method {m:?}; expected exact or approx")))?,
    };
    let image: Option<String> = body.opt("image", "an image id")?;
    check_image(&a, &image)?;
    let top_n: usize = body.opt("top_n", "a non-negative integer")?.unwrap_or(DEFAULT_TOP_N);
    let vocab = a.host.vocab();
    for (field, v) in [("v_c", v_c), ("v_b", Some(v_b))] {
        if let Some(v) = v.filter(|&v| v >= vocab) {
            return Err(ApiError::invalid(
                field,
                format!("token {v} out of range (vocab={vocab})"),
            ));
        }
    }
    let report = blocking(move || {
        pipeline::attribute_prompt(a.host.as_ref(), &a.params, &prompt, image, v_c, v_b, method, top_n)
    })
    .await?;
    Ok(versioned(AttributeResponse {
        summary: AttributionSummary::of(&report.result),
        result: report.result,
        maps: report.maps,
    }))
}

fn cors(origin: Option<&str>) -> Result<CorsLayer> {
    let allow = match origin {
        Some(o) => AllowOrigin::exact(
            HeaderValue::from_str(o).map_err(|_| Error::Config(format!("invalid `serve.cors_origin` {o:?}")))?,
        ),
        None => AllowOrigin::any(),
    };
    Ok(CorsLayer::new()
        .allow_origin(allow)
        .allow_methods([axum::http::Method::GET, axum::http::Method::POST])
        .allow_headers([header::CONTENT_TYPE]))
}

/// The `/api/v1` router, plus static UI assets when `ui_dir` is set.
pub fn router(state: Arc<AppState>, serve: &ServeConfig, base_dir: &Path) -> Result<Router> {
    let api = Router::new()
        .route("/health", get(health))
        .route("/features", get(list_features))
        .route("/features/{id}", get(feature_detail))
        .route("/features/{id}/heatmap/{image_id}", get(heatmap))
        .route("/images/{id}", get(image_bytes))
        .route("/steer", post(steer))
        .route("/steer/{session}", get(steer_session))
        .route("/attribute", post(attribute))
        .with_state(state);
    let mut app = Router::new().nest("/api/v1", api);
    if let Some(ui) = &serve.ui_dir {
        app = app.fallback_service(ServeDir::new(base_dir.join(ui)));
    }
    Ok(app.layer(cors(serve.cors_origin.as_deref())?))
}

/// Loads the run and serves it on `cfg.serve.addr` until interrupted.
/// Missing artifacts do not stop the server; their endpoints answer 503.
pub fn serve(cfg: &RunConfig) -> Result<()> {
    let sc = &cfg.serve;
    let state = match Artifacts::load(cfg) {
        Ok(a) => {
            info!(
                "serve: {} feature records, {} images",
                a.records.len(),
                a.cache.n_images()
            );
            AppState::new(a, sc.page_size)
        }
        Err(e) => {
            warn!("serve: artifacts not loaded: {e}");
            AppState::unloaded(e.to_string(), sc.page_size)
        }
    };
    let app = router(Arc::new(state), sc, &cfg.base_dir)?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::invalid(format!("cannot start runtime: {e}")))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&sc.addr)
            .await
            .map_err(|e| Error::Config(format!("cannot bind `serve.addr` {}: {e}", sc.addr)))?;
        info!("serve: listening on http://{}/api/v1", sc.addr);
        axum::serve(listener, app)
            .await
            .map_err(|e| Error::invalid(format!("server failed: {e}")))
    })
}

#[cfg(test)]
mod tests {
    use std::sync::OnceLock;

    use axum::body::Body as HttpBody;
    use axum::http::Request;
    use http_body_util::BodyExt;
    use tower::ServiceExt;

    use super::*;
    use crate::host::{self, HostInput, ToyVocab};
    use crate::pipeline::DemoOptions;

    struct Run {
        _dir: tempfile::TempDir,
        cfg: RunConfig,
    }

    fn run() -> &'static Run {
        static RUN: OnceLock<Run> = OnceLock::new();
        RUN.get_or_init(|| {
            let dir = tempfile::tempdir().unwrap();
            let mut opts = DemoOptions::default();
            opts.world.n_images = 40;
            opts.train.steps = 1500;
            let cfg = pipeline::demo_config(dir.path(), &opts).unwrap();
            pipeline::run_all(&cfg).unwrap();
            Run { _dir: dir, cfg }
        })
    }

    fn app() -> Router {
        let cfg = &run().cfg;
        let mut serve = cfg.serve.clone();
        serve.page_size = 4;
        serve.cors_origin = Some("http://localhost:5173".into());
        let state = AppState::new(Artifacts::load(cfg).unwrap(), serve.page_size);
        router(Arc::new(state), &serve, &cfg.base_dir).unwrap()
    }

    async fn call(app: Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
        let (status, bytes) = call_raw(app, method, uri, body).await;
        (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
    }

    async fn call_raw(app: Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
        let req = Request::builder()
            .method(method)
            .uri(uri)
            .header(header::CONTENT_TYPE, "application/json")
            .body(match body {
                Some(b) => HttpBody::from(b.to_string()),
                None => HttpBody::empty(),
            })
            .unwrap();
        let resp = app.oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
        (status, bytes)
    }

    fn records() -> Vec<FeatureRecord> {
        interpret::read_records(run().cfg.path("records").unwrap()).unwrap()
    }

    #[tokio::test]
    async fn health_reports_schema_and_dims() {
        let (s, v) = call(app(), "GET", "/api/v1/health", None).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(v["schema_version"], SCHEMA_VERSION);
        assert_eq!(v["artifacts_loaded"], true);
        assert_eq!(v["artifacts"]["k"], 1);
    }

    #[tokio::test]
    async fn feature_list_follows_sort_and_pages() {
        let recs: BTreeMap<usize, FeatureRecord> = records().into_iter().map(|r| (r.feature_index, r)).collect();
        for sort in [SortKey::Mean, SortKey::Iou, SortKey::Clip] {
            let want: Vec<usize> = sorted_records(&recs, sort, None)
                .iter()
                .map(|r| r.feature_index)
                .collect();
            let mut got = Vec::new();
            for page in 0.. {
                let name = serde_json::to_value(sort).unwrap();
                let uri = format!("/api/v1/features?sort={}&page={page}", name.as_str().unwrap());
                let (s, v) = call(app(), "GET", &uri, None).await;
                assert_eq!(s, StatusCode::OK);
                assert_eq!(v["total"], want.len());
                let items = v["items"].as_array().unwrap();
                if items.is_empty() {
                    break;
                }
                assert!(items.len() <= 4);
                got.extend(items.iter().map(|i| i["feature_index"].as_u64().unwrap() as usize));
            }
            assert_eq!(got, want, "{sort:?}");
        }
        let means: Vec<f32> = sorted_records(&recs, SortKey::Mean, None)
            .iter()
            .map(|r| r.peak_mean())
            .collect();
        assert!(means.windows(2).all(|w| w[0] >= w[1]));
    }

    #[tokio::test]
    async fn feature_list_filters_by_concept() {
        let (s, v) = call(app(), "GET", "/api/v1/features?concept=colour&page=0", None).await;
        assert_eq!(s, StatusCode::OK);
        let n = records().iter().filter(|r| r.concept == Some(Concept::Colour)).count();
        assert_eq!(v["total"], n);
        for i in v["items"].as_array().unwrap() {
            assert_eq!(i["concept"], "colour");
        }
    }

    #[tokio::test]
    async fn bad_queries_name_the_field() {
        for (uri, field) in [
            ("/api/v1/features?sort=loudness", "sort"),
            ("/api/v1/features?concept=smell", "concept"),
            ("/api/v1/features?page=-1", "page"),
        ] {
            let (s, v) = call(app(), "GET", uri, None).await;
            assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{uri}");
            assert_eq!(v["error"]["field"], field);
        }
    }

    #[tokio::test]
    async fn feature_detail_equals_disk_record() {
        let rec = records().into_iter().next().unwrap();
        let uri = format!("/api/v1/features/{}", rec.feature_index);
        let (s, v) = call(app(), "GET", &uri, None).await;
        assert_eq!(s, StatusCode::OK);
        let got: FeatureRecord = serde_json::from_value(v["record"].clone()).unwrap();
        assert_eq!(got, rec);
        assert_eq!(v["image_urls"].as_array().unwrap().len(), rec.top_images.len());
    }

    #[tokio::test]
    async fn unknown_things_are_404() {
        for uri in [
            "/api/v1/features/99999",
            "/api/v1/features/abc",
            "/api/v1/images/nope",
            "/api/v1/features/0/heatmap/nope",
            "/api/v1/features/99999/heatmap/img00000",
            "/api/v1/steer/424242",
        ] {
            let (s, v) = call(app(), "GET", uri, None).await;
            assert_eq!(s, StatusCode::NOT_FOUND, "{uri}");
            assert_eq!(v["schema_version"], SCHEMA_VERSION);
        }
    }

    #[tokio::test]
    async fn images_and_heatmaps_come_from_the_run() {
        let (s, bytes) = call_raw(app(), "GET", "/api/v1/images/img00000", None).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(&bytes[..8], b"\x89PNG\r\n\x1a\n");

        let rec = records().into_iter().next().unwrap();
        let img = &rec.top_images[0].image_id;
        let uri = format!("/api/v1/features/{}/heatmap/{img}", rec.feature_index);
        let (s, v) = call(app(), "GET", &uri, None).await;
        assert_eq!(s, StatusCode::OK);
        let cache = SparseFeatureCache::load(run().cfg.path("cache").unwrap()).unwrap();
        let hm = store::token_heatmap(&cache, img, rec.feature_index).unwrap();
        let values: Vec<f32> = serde_json::from_value(v["values"].clone()).unwrap();
        assert_eq!(values, hm.values);
        assert_eq!(v["rows"], hm.rows);
    }

    fn inactive_feature(prompt: &str, image: &str) -> usize {
        let a = Artifacts::load(&run().cfg).unwrap();
        let input = HostInput {
            image: Some(image.into()),
            text: ToyVocab::default().encode(prompt),
        };
        let out = host::hooked_forward(a.host.as_ref(), &input, &a.params, &[]).unwrap();
        (0..a.params.d_sae())
            .find(|j| out.states.iter().all(|s| !s.active.contains(j)))
            .unwrap()
    }

    #[tokio::test]
    async fn zero_steer_on_inactive_feature_is_noop() {
        let prompt = "what is your feeling right now ?";
        let j = inactive_feature(prompt, "img00000");
        let body = json!({ "feature": j, "value": 0.0, "prompt": prompt, "image": "img00000" });
        let (s, v) = call(app(), "POST", "/api/v1/steer", Some(body)).await;
        assert_eq!(s, StatusCode::OK, "{v}");
        assert_eq!(v["report"]["steered"], v["report"]["unsteered"]);
        let session = v["session"].as_u64().unwrap();
        assert!(session >= 1);
    }

    #[tokio::test]
    async fn sessions_are_kept_and_unique() {
        let app = app();
        let body = json!({ "feature": 0, "value": 5.0, "prompt": "tell me a story" });
        let (_, a) = call(app.clone(), "POST", "/api/v1/steer", Some(body.clone())).await;
        let (_, b) = call(app.clone(), "POST", "/api/v1/steer", Some(body)).await;
        assert_ne!(a["session"], b["session"]);
        assert_eq!(a["report"], b["report"]);
        let uri = format!("/api/v1/steer/{}", a["session"]);
        let (s, v) = call(app, "GET", &uri, None).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(v["report"], a["report"]);
    }

    #[tokio::test]
    async fn bad_bodies_name_the_field() {
        let cases = [
            (json!({ "value": 1.0, "prompt": "hi" }), "/api/v1/steer", "feature"),
            (
                json!({ "feature": 0, "value": "big", "prompt": "hi" }),
                "/api/v1/steer",
                "value",
            ),
            (
                json!({ "feature": 100000, "value": 1.0, "prompt": "hi" }),
                "/api/v1/steer",
                "feature",
            ),
            (json!({ "feature": 0, "value": 1.0 }), "/api/v1/steer", "prompt"),
            (
                json!({ "feature": 0, "value": 1.0, "prompt": "hi", "image": "zz" }),
                "/api/v1/steer",
                "image",
            ),
            (
                json!({ "prompt": "hi", "v_b": "no", "method": "guess" }),
                "/api/v1/attribute",
                "method",
            ),
            (json!({ "prompt": "hi" }), "/api/v1/attribute", "v_b"),
            (
                json!({ "prompt": "hi", "v_b": "zzzz-word" }),
                "/api/v1/attribute",
                "v_b",
            ),
            (json!({ "prompt": "hi", "v_b": 100000 }), "/api/v1/attribute", "v_b"),
            (json!([1, 2]), "/api/v1/attribute", "body"),
        ];
        for (body, uri, field) in cases {
            let (s, v) = call(app(), "POST", uri, Some(body.clone())).await;
            assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
            assert_eq!(v["error"]["field"], field, "{body}");
        }
    }

    fn linear_app(seed: u64) -> Router {
        use rand::{Rng, SeedableRng};
        let (d_l, d_s) = (6, 10);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut g = |n: usize| (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>();
        let mut params = SaeParams::new(d_l, d_s, d_s, g(d_s * d_l), g(d_l), g(d_s), g(d_l * d_s), g(d_l)).unwrap();
        params.b_enc_mut().fill(-0.2);
        let vocab = ToyVocab::default().words.len();
        let host = host::ToyLinearHost::random(d_l, vocab, store::Grid::new(2, 2).unwrap(), seed);
        let base = Artifacts::load(&run().cfg).unwrap();
        let a = Artifacts {
            params,
            host: Arc::new(host),
            ..base
        };
        router(Arc::new(AppState::new(a, 10)), &ServeConfig::default(), Path::new(".")).unwrap()
    }

    #[tokio::test]
    async fn approx_matches_exact_through_the_api() {
        for seed in 0..5 {
            let app = linear_app(seed);
            let mut results = Vec::new();
            for method in ["exact", "approx"] {
                let body =
                    json!({ "prompt": "tell me a story about the image", "v_c": "yes", "v_b": "no", "method": method });
                let (s, v) = call(app.clone(), "POST", "/api/v1/attribute", Some(body)).await;
                assert_eq!(s, StatusCode::OK, "{v}");
                assert_eq!(v["summary"]["method"], method);
                let r: AttributionResult = serde_json::from_value(v["result"].clone()).unwrap();
                results.push(r);
            }
            let (exact, approx) = (&results[0], &results[1]);
            assert!(!exact.entries.is_empty());
            assert_eq!(exact.entries.len(), approx.entries.len());
            for e in &exact.entries {
                assert!(!e.reselection);
                let a = approx.get(e.token, e.feature).unwrap();
                let tol = 1e-4 * e.influence.abs().max(a.influence.abs()).max(1e-9);
                assert!((e.influence - a.influence).abs() <= tol, "{e:?} vs {a:?}");
            }
        }
    }

    #[tokio::test]
    async fn attribute_on_the_demo_host_reports_reselections() {
        let body = json!({ "prompt": "what is your feeling right now ?", "image": "img00001", "v_b": "no", "method": "exact" });
        let (s, v) = call(app(), "POST", "/api/v1/attribute", Some(body)).await;
        assert_eq!(s, StatusCode::OK, "{v}");
        let r: AttributionResult = serde_json::from_value(v["result"].clone()).unwrap();
        let n = r.entries.iter().filter(|e| e.reselection).count();
        assert_eq!(v["summary"]["n_reselections"], n);
        assert!(!v["maps"].as_array().unwrap().is_empty());
    }

    #[tokio::test]
    async fn unloaded_state_answers_503() {
        let state = Arc::new(AppState::unloaded("no params", 10));
        let app = router(state, &ServeConfig::default(), Path::new(".")).unwrap();
        let (s, v) = call(app.clone(), "GET", "/api/v1/features", None).await;
        assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
        assert!(v["error"]["message"].as_str().unwrap().contains("no params"));
        let (s, v) = call(app, "GET", "/api/v1/health", None).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(v["artifacts_loaded"], false);
    }

    #[tokio::test]
    async fn cors_allows_the_ui_origin() {
        let req = Request::builder()
            .uri("/api/v1/health")
            .header(header::ORIGIN, "http://localhost:5173")
            .body(HttpBody::empty())
            .unwrap();
        let resp = app().oneshot(req).await.unwrap();
        assert_eq!(
            resp.headers().get(header::ACCESS_CONTROL_ALLOW_ORIGIN).unwrap(),
            "http://localhost:5173"
        );
    }

    #[tokio::test]
    async fn gets_are_deterministic() {
        let (_, a) = call_raw(app(), "GET", "/api/v1/features?sort=iou", None).await;
        let (_, b) = call_raw(app(), "GET", "/api/v1/features?sort=iou", None).await;
        assert_eq!(a, b);
    }
}
