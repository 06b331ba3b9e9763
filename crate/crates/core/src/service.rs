//! HTTP service and its configuration.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use crate::embed::{HashEmbedder, DEFAULT_DIM};
use crate::engine::{EngineConfig, MemoryBase};
use crate::extraction::ExtractionConfig;
use crate::operators::CompressionConfig;
use crate::prompts::PromptTemplates;
use crate::provider::{HttpProvider, LlmProvider, MockProvider};
use crate::retrieval::{RecallConfig, ScoredMemory};
use crate::schema::parse_schema;
use crate::segmentation::Role;
use crate::store::{RecordKind, SearchFilter, Store, StoreConfig};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderMode {
    Mock,
    HttpLlm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub mode: ProviderMode,
    /// Script file for the mock provider.
    pub script: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout_ms: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            mode: ProviderMode::Mock,
            script: None,
            endpoint: None,
            model: "default".into(),
            api_key: None,
            timeout_ms: 30_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub listen: String,
    pub data_dir: PathBuf,
    pub flush_threshold: usize,
    pub recall: RecallConfig,
    pub extraction: ExtractionConfig,
    pub compression: CompressionConfig,
    pub provider: ProviderConfig,
    /// Directory whose template files override the built-in prompts.
    pub prompt_dir: Option<PathBuf>,
    pub bearer_token: Option<String>,
    pub fsync: bool,
    /// Period of the background consolidation worker; 0 disables it.
    pub worker_interval_ms: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            listen: "127.0.0.1:7700".into(),
            data_dir: PathBuf::from("membase-data"),
            flush_threshold: 20,
            recall: RecallConfig::default(),
            extraction: ExtractionConfig::default(),
            compression: CompressionConfig::default(),
            provider: ProviderConfig::default(),
            prompt_dir: None,
            bearer_token: None,
            fsync: true,
            worker_interval_ms: 1_000,
        }
    }
}

const ENV_PREFIX: &str = "MEMBASE_";

/// Parses an env value as JSON when it is valid JSON, else as a string.
fn env_value(raw: &str) -> serde_json::Value {
    serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()))
}

impl ServiceConfig {
    /// Reads a JSON config file (or defaults when `path` is `None`) and
    /// applies `MEMBASE_*` overrides from `vars`. Nested keys use a double
    /// underscore: `MEMBASE_RECALL__W_TIME=0.3`.
    pub fn load<I>(path: Option<&Path>, vars: I) -> crate::Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => serde_json::Value::Object(Default::default()),
        };
        // Fill defaults first so nested overrides have somewhere to land.
        let base: ServiceConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        value = serde_json::to_value(&base).expect("config serializes");
        let mut vars: Vec<(String, String)> = vars
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        vars.sort();
        for (key, raw) in vars {
            let pointer: String = key[ENV_PREFIX.len()..]
                .split("__")
                .map(|part| format!("/{}", part.to_ascii_lowercase()))
                .collect();
            let slot = value
                .pointer_mut(&pointer)
                .ok_or_else(|| Error::Config(format!("{key}: unknown config key")))?;
            *slot = env_value(&raw);
        }
        let cfg: ServiceConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.provider.mode == ProviderMode::Mock {
            match &self.provider.script {
                Some(p) if p.is_file() => {}
                Some(p) => return Err(Error::Config(format!("mock script {} not found", p.display()))),
                None => return Err(Error::Config("mock provider mode requires provider.script".into())),
            }
        }
        if self.provider.mode == ProviderMode::HttpLlm && self.provider.endpoint.is_none() {
            return Err(Error::Config("http-llm provider mode requires provider.endpoint".into()));
        }
        std::fs::create_dir_all(&self.data_dir)?;
        let probe = self.data_dir.join(".write-probe");
        std::fs::write(&probe, b"ok")
            .and_then(|_| std::fs::remove_file(&probe))
            .map_err(|e| Error::Config(format!("data directory {} is not writable: {e}", self.data_dir.display())))?;
        self.engine_config().validate()
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            extraction: ExtractionConfig {
                flush_threshold: self.flush_threshold,
                ..self.extraction.clone()
            },
            recall: self.recall.clone(),
            compression: self.compression,
            ..EngineConfig::default()
        }
    }

    pub fn provider(&self) -> crate::Result<Arc<dyn LlmProvider>> {
        Ok(match self.provider.mode {
            ProviderMode::Mock => {
                let path = self.provider.script.as_deref().ok_or_else(|| Error::Config("no mock script".into()))?;
                Arc::new(MockProvider::from_file(path)?)
            }
            ProviderMode::HttpLlm => Arc::new(HttpProvider::new(
                self.provider.endpoint.as_deref().unwrap_or_default(),
                &self.provider.model,
                self.provider.api_key.clone(),
                Duration::from_millis(self.provider.timeout_ms),
            )),
        })
    }

    /// Opens the store and builds the engine.
    pub fn build(&self) -> crate::Result<MemoryBase> {
        self.validate()?;
        let store_cfg = StoreConfig {
            fsync: self.fsync,
            token_merge_threshold: self.recall.rerank.token_merge_threshold,
            ..StoreConfig::default()
        };
        let (store, report) = Store::open(&self.data_dir, store_cfg)?;
        for w in &report.warnings {
            tracing::warn!("{w}");
        }
        let templates = match &self.prompt_dir {
            Some(d) => PromptTemplates::load_dir(d)?,
            None => PromptTemplates::default(),
        };
        Ok(
            MemoryBase::new(store, Arc::new(HashEmbedder::new(DEFAULT_DIM)), self.provider()?, self.engine_config())?
                .with_templates(templates),
        )
    }
}

/// Problem-detail error body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub code: String,
    pub message: String,
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub details: Option<serde_json::Value>,
}

pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    details: Option<serde_json::Value>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
            details: None,
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, code) = match &e {
            Error::UnknownSession(_) => (StatusCode::NOT_FOUND, "unknown_session"),
            Error::UnknownEntity { .. } => (StatusCode::NOT_FOUND, "unknown_entity"),
            Error::UnknownEvent(_) => (StatusCode::NOT_FOUND, "unknown_event"),
            Error::FlushInProgress(_) => (StatusCode::CONFLICT, "flush_in_progress"),
            Error::NoSchema => (StatusCode::CONFLICT, "no_schema"),
            Error::Schema(_) | Error::InvalidSchema(_) | Error::Conform(_) => {
                (StatusCode::UNPROCESSABLE_ENTITY, "validation_failed")
            }
            Error::Config(_) | Error::IndexGap { .. } | Error::UnknownField { .. } | Error::NonNumeric { .. } => {
                (StatusCode::UNPROCESSABLE_ENTITY, "invalid_request")
            }
            Error::Provider(_) | Error::Segmentation(_) | Error::ExtractionFailed { .. } => {
                (StatusCode::BAD_GATEWAY, "provider_failed")
            }
            Error::Patch(_) | Error::Store(_) | Error::Io(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        // The path is filled in by the `problem_path` middleware.
        let body = Problem {
            code: self.code.to_string(),
            message: self.message,
            path: String::new(),
            details: self.details,
        };
        (self.status, Json(body)).into_response()
    }
}

async fn problem_path(req: Request, next: Next) -> Response {
    let path = req.uri().path().to_string();
    let resp = next.run(req).await;
    let is_json = resp
        .headers()
        .get(header::CONTENT_TYPE)
        .is_some_and(|v| v.as_bytes().starts_with(b"application/json"));
    if resp.status().is_success() {
        return resp;
    }
    let (mut parts, body) = resp.into_parts();
    let Ok(bytes) = axum::body::to_bytes(body, 1 << 20).await else {
        return StatusCode::INTERNAL_SERVER_ERROR.into_response();
    };
    if !is_json {
        // Extractor rejections arrive as plain text.
        let code = parts
            .status
            .canonical_reason()
            .unwrap_or("error")
            .to_ascii_lowercase()
            .replace(' ', "_");
        let p = Problem {
            code,
            message: String::from_utf8_lossy(&bytes).into_owned(),
            path,
            details: None,
        };
        return (parts.status, Json(p)).into_response();
    }
    match serde_json::from_slice::<Problem>(&bytes) {
        Ok(mut p) if p.path.is_empty() => {
            p.path = path;
            let body = serde_json::to_vec(&p).expect("problem serializes");
            parts.headers.remove(header::CONTENT_LENGTH);
            Response::from_parts(parts, axum::body::Body::from(body))
        }
        _ => Response::from_parts(parts, axum::body::Body::from(bytes)),
    }
}

#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<MemoryBase>,
    pub bearer_token: Option<String>,
}

async fn require_token(State(state): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.bearer_token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok && req.uri().path() != "/v1/healthz" {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token")
                .into_response();
        }
    }
    next.run(req).await
}

async fn blocking<T, F>(engine: &Arc<MemoryBase>, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&MemoryBase) -> crate::Result<T> + Send + 'static,
{
    let engine = engine.clone();
    tokio::task::spawn_blocking(move || f(&engine))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

async fn install_schema(State(st): State<AppState>, body: String) -> Result<Response, ApiError> {
    let schema = parse_schema(&body).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "schema_syntax", e.to_string()))?;
    let version = schema.version;
    let report = blocking(&st.engine, move |mb| mb.install_schema(schema)).await?;
    if !report.is_valid() {
        return Err(ApiError {
            details: Some(serde_json::to_value(&report).expect("report serializes")),
            ..ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "validation_failed",
                format!("schema rejected with {} violation(s)", report.violations.len()),
            )
        });
    }
    Ok(Json(serde_json::json!({ "version": version, "notes": report.notes })).into_response())
}

#[derive(Debug, Deserialize)]
struct MessageBody {
    #[serde(default = "default_role")]
    role: Role,
    content: String,
    #[serde(default)]
    timestamp: Option<i64>,
    #[serde(default)]
    user: Option<String>,
    #[serde(default)]
    index: Option<usize>,
}

fn default_role() -> Role {
    Role::User
}

async fn append_message(
    State(st): State<AppState>,
    UrlPath(sid): UrlPath<String>,
    Json(body): Json<MessageBody>,
) -> Result<Response, ApiError> {
    let r = blocking(&st.engine, move |mb| {
        let ts = body.timestamp.unwrap_or_else(|| mb.now());
        let user = body.user.unwrap_or_else(|| "default".into());
        mb.append_message(&sid, &user, body.role, &body.content, ts, body.index)
    })
    .await?;
    let events = r.flush.as_ref().map(|f| f.event_ids.len());
    let mut v = serde_json::to_value(&r).expect("append result serializes");
    if let Some(n) = events {
        v["events"] = n.into();
    }
    Ok(Json(v).into_response())
}

async fn flush(State(st): State<AppState>, UrlPath(sid): UrlPath<String>) -> Result<Response, ApiError> {
    let r = blocking(&st.engine, move |mb| mb.flush(&sid)).await?;
    Ok(Json(r).into_response())
}

/// Per-request overrides; names follow [`RecallConfig`].
#[derive(Debug, Default, Deserialize)]
pub struct SearchParams {
    pub q: String,
    pub k: Option<usize>,
    pub w_time: Option<f64>,
    pub w_busi: Option<f64>,
    pub freshness_window_ms: Option<i64>,
    pub decay_half_life_ms: Option<i64>,
    pub quota_primary: Option<usize>,
    pub quota_keyword: Option<usize>,
    pub final_k: Option<usize>,
    pub alpha: Option<f64>,
    pub keyword_floor: Option<f64>,
    pub rerank: Option<bool>,
    pub rerank_quantized: Option<bool>,
    pub candidate_cap: Option<usize>,
    #[serde(rename = "type")]
    pub type_name: Option<String>,
    pub kind: Option<RecordKind>,
    pub user: Option<String>,
    pub topic: Option<String>,
    pub since: Option<i64>,
    pub until: Option<i64>,
}

impl SearchParams {
    /// Applies the overrides to `base`. `k` sets `final_k` and splits it
    /// 4:1 between the primary and keyword quotas unless those are given.
    pub fn recall_config(&self, base: &RecallConfig) -> RecallConfig {
        let mut c = base.clone();
        if let Some(k) = self.k {
            c.final_k = k;
            c.quota_keyword = k / 5;
            c.quota_primary = k - k / 5;
        }
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        set!(w_time, w_busi, freshness_window_ms, decay_half_life_ms, quota_primary, quota_keyword, final_k, alpha, keyword_floor);
        if let Some(v) = self.rerank {
            c.rerank.enabled = v;
        }
        if let Some(v) = self.rerank_quantized {
            c.rerank.quantized = v;
        }
        if let Some(v) = self.candidate_cap {
            c.rerank.candidate_cap = v;
        }
        c
    }

    pub fn filter(&self) -> SearchFilter {
        SearchFilter {
            kinds: self.kind.map(|k| vec![k]),
            type_name: self.type_name.clone(),
            user: self.user.clone(),
            topic: self.topic.clone(),
            since: self.since,
            until: self.until,
        }
    }
}

async fn search(State(st): State<AppState>, Query(p): Query<SearchParams>) -> Result<Json<Vec<ScoredMemory>>, ApiError> {
    let hits = blocking(&st.engine, move |mb| {
        let cfg = p.recall_config(&mb.config().recall);
        mb.search(&p.q, &cfg, &p.filter())
    })
    .await?;
    Ok(Json(hits))
}

async fn get_entity(
    State(st): State<AppState>,
    UrlPath((entity_type, group_key)): UrlPath<(String, String)>,
) -> Result<Response, ApiError> {
    let e = blocking(&st.engine, move |mb| mb.get_entity(&entity_type, &group_key)).await?;
    Ok(Json(e).into_response())
}

async fn compress(State(st): State<AppState>) -> Result<Response, ApiError> {
    let r = blocking(&st.engine, |mb| mb.compress()).await?;
    Ok(Json(r).into_response())
}

async fn expire(State(st): State<AppState>) -> Result<Response, ApiError> {
    let pruned = blocking(&st.engine, |mb| mb.expire()).await?;
    Ok(Json(serde_json::json!({ "pruned": pruned })).into_response())
}

async fn healthz(State(st): State<AppState>) -> Result<Response, ApiError> {
    let h = blocking(&st.engine, |mb| Ok(mb.health())).await?;
    Ok(Json(h).into_response())
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/schemas", put(install_schema))
        .route("/v1/sessions/:sid/messages", post(append_message))
        .route("/v1/sessions/:sid/flush", post(flush))
        .route("/v1/memories/search", get(search))
        .route("/v1/entities/:entity_type/:group_key", get(get_entity))
        .route("/v1/admin/compress", post(compress))
        .route("/v1/admin/expire", post(expire))
        .route("/v1/healthz", get(healthz))
        .fallback(not_found)
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .layer(middleware::from_fn(problem_path))
        .with_state(state)
}

/// Drains the merge queue and flushes idle sessions until the process ends.
pub fn spawn_worker(engine: Arc<MemoryBase>, every: Duration) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(every);
        tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            tick.tick().await;
            let mb = engine.clone();
            let done = tokio::task::spawn_blocking(move || {
                for r in mb.flush_idle() {
                    if let Err(e) = r {
                        tracing::warn!("idle flush failed: {e}");
                    }
                }
                mb.run_consolidation(32)
            })
            .await;
            match done {
                Ok(Ok(r)) if !r.completed.is_empty() || !r.failed.is_empty() => {
                    tracing::info!(completed = r.completed.len(), failed = r.failed.len(), "consolidation pass");
                }
                Ok(Err(e)) => tracing::warn!("consolidation failed: {e}"),
                Err(e) => tracing::error!("worker panicked: {e}"),
                _ => {}
            }
        }
    })
}

/// Binds and serves until ctrl-c.
pub async fn serve(cfg: ServiceConfig) -> anyhow::Result<()> {
    let engine = Arc::new(cfg.build()?);
    if cfg.worker_interval_ms > 0 {
        spawn_worker(engine.clone(), Duration::from_millis(cfg.worker_interval_ms));
    }
    let app = router(AppState {
        engine,
        bearer_token: cfg.bearer_token.clone(),
    });
    let listener = tokio::net::TcpListener::bind(&cfg.listen).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
