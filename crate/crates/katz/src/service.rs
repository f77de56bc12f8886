//! HTTP chat service.
//!
//! Endpoints (JSON over HTTP/1.1):
//!
//! - `POST /v1/chat` `{session_id?, message? | audio?: {data, media_type, lang_hint?}, lang?}`
//!   → `{session_id, reply, detected_lang, tokens_generated}`
//! - `POST /v1/generate` `{prompt, max_new_tokens?, temperature?, top_k?, seed?}`
//!   → `{text, token_count}`
//! - `GET /v1/health` → `{status: "ok", model: {n_blocks, params}}`
//!
//! Errors come back as `{error, stage?}` with status 400 (bad request or
//! budget), 404 (unknown or expired session), 413 (message or audio too
//! large, or question longer than the context allows), 502 (a pipeline
//! stage failed; `stage` names it), or 500.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use katz_core::lingua::{chat_pipeline, ChatHistory, ChatInput, Clock, LangCode, Providers};
use katz_core::model::DecodeOptions;
use katz_core::{Model, RngStream, Vocabulary};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::TokenizerConfig;
use crate::error::{Error, Result};
use crate::providers::ProviderConfig;

pub const ENV_ADDR: &str = "KATZ_ADDR";
pub const ENV_CHECKPOINT: &str = "KATZ_CHECKPOINT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub addr: String,
    pub checkpoint: Option<PathBuf>,
    pub tokenizer: TokenizerConfig,
    pub decode: DecodeOptions,
    pub session_ttl_secs: u64,
    pub max_message_bytes: usize,
    pub max_audio_bytes: usize,
    pub seed: u64,
    pub providers: ProviderConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:8080".into(),
            checkpoint: None,
            tokenizer: TokenizerConfig::default(),
            decode: DecodeOptions::default(),
            session_ttl_secs: 1800,
            max_message_bytes: 4096,
            max_audio_bytes: 8 << 20,
            seed: 0,
            providers: ProviderConfig::default(),
        }
    }
}

impl ServiceConfig {
    /// Applies `KATZ_ADDR` and `KATZ_CHECKPOINT` when set.
    pub fn apply_env(&mut self) {
        if let Ok(a) = std::env::var(ENV_ADDR) {
            self.addr = a;
        }
        if let Ok(c) = std::env::var(ENV_CHECKPOINT) {
            self.checkpoint = Some(c.into());
        }
    }

    pub fn validate(&self, n_ctx: usize) -> Result<()> {
        if self.session_ttl_secs == 0 {
            return Err(Error::Usage("session_ttl_secs must be positive".into()));
        }
        if self.decode.max_new_tokens >= n_ctx {
            return Err(Error::Usage(format!(
                "max_new_tokens {} leaves no room for a question in a context of {n_ctx}",
                self.decode.max_new_tokens
            )));
        }
        if !(self.decode.temperature >= 0.0 && self.decode.temperature.is_finite()) {
            return Err(Error::Usage("temperature must be finite and >= 0".into()));
        }
        Ok(())
    }
}

struct Session {
    history: ChatHistory,
    rng: RngStream,
}

struct Entry {
    slot: Arc<tokio::sync::Mutex<Session>>,
    last_used: Instant,
}

struct Inner {
    model: Model<f32>,
    vocab: Vocabulary,
    providers: Providers,
    config: ServiceConfig,
    sessions: Mutex<HashMap<String, Entry>>,
    created: AtomicU64,
    root_rng: RngStream,
}

/// Shared server state. Cloning is cheap.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    pub fn new(
        model: Model<f32>,
        vocab: Vocabulary,
        providers: Providers,
        config: ServiceConfig,
    ) -> Result<Self> {
        config.validate(model.config.n_ctx)?;
        if vocab.len() != model.config.vocab {
            return Err(Error::Usage(format!(
                "tokenizer has {} entries, model expects {}",
                vocab.len(),
                model.config.vocab
            )));
        }
        Ok(Self {
            inner: Arc::new(Inner {
                root_rng: RngStream::new(config.seed),
                model,
                vocab,
                providers,
                config,
                sessions: Mutex::new(HashMap::new()),
                created: AtomicU64::new(0),
            }),
        })
    }

    /// Loads the checkpoint, tokenizer, and providers named by `config`.
    pub fn from_config(config: ServiceConfig) -> Result<Self> {
        let path = config
            .checkpoint
            .clone()
            .ok_or_else(|| Error::Usage(format!("no checkpoint given (set {ENV_CHECKPOINT})")))?;
        let model = Checkpoint::<f32>::load(&path)?.into_model();
        let vocab = config.tokenizer.load()?;
        let providers = config.providers.build()?;
        Self::new(model, vocab, providers, config)
    }

    pub fn model(&self) -> &Model<f32> {
        &self.inner.model
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.inner.vocab
    }

    pub fn session_count(&self) -> usize {
        self.inner.sessions.lock().unwrap().len()
    }

    /// Token history of a live session.
    pub async fn history(&self, id: &str) -> Option<Vec<u32>> {
        let slot = self.inner.sessions.lock().unwrap().get(id)?.slot.clone();
        let s = slot.lock().await;
        Some(s.history.tokens())
    }

    /// Drops sessions idle longer than the TTL at `now` and returns how
    /// many went. Sessions with a request in flight are kept.
    pub fn gc(&self, now: Instant) -> usize {
        let ttl = Duration::from_secs(self.inner.config.session_ttl_secs);
        let mut map = self.inner.sessions.lock().unwrap();
        let before = map.len();
        map.retain(|_, e| {
            Arc::strong_count(&e.slot) > 1 || now.saturating_duration_since(e.last_used) <= ttl
        });
        before - map.len()
    }

    fn open_session(
        &self,
        id: Option<String>,
        now: Instant,
    ) -> std::result::Result<(String, Arc<tokio::sync::Mutex<Session>>), ApiError> {
        let ttl = Duration::from_secs(self.inner.config.session_ttl_secs);
        let mut map = self.inner.sessions.lock().unwrap();
        match id {
            Some(id) => {
                let expired = match map.get_mut(&id) {
                    None => {
                        return Err(ApiError::new(
                            StatusCode::NOT_FOUND,
                            format!("unknown session {id}"),
                        ))
                    }
                    Some(e) if now.saturating_duration_since(e.last_used) > ttl => true,
                    Some(e) => {
                        e.last_used = now;
                        return Ok((id, e.slot.clone()));
                    }
                };
                if expired {
                    map.remove(&id);
                }
                Err(ApiError::new(
                    StatusCode::NOT_FOUND,
                    format!("session {id} expired"),
                ))
            }
            None => {
                let id = uuid::Uuid::new_v4().to_string();
                let n = self.inner.created.fetch_add(1, Ordering::Relaxed);
                let slot = Arc::new(tokio::sync::Mutex::new(Session {
                    history: ChatHistory::new(),
                    rng: self.inner.root_rng.fork(n),
                }));
                map.insert(
                    id.clone(),
                    Entry {
                        slot: slot.clone(),
                        last_used: now,
                    },
                );
                Ok((id, slot))
            }
        }
    }

    fn touch(&self, id: &str) {
        if let Some(e) = self.inner.sessions.lock().unwrap().get_mut(id) {
            e.last_used = Instant::now();
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AudioInput {
    /// Base64 (standard alphabet) encoded payload.
    pub data: String,
    pub media_type: String,
    #[serde(default)]
    pub lang_hint: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatRequest {
    #[serde(default)]
    pub session_id: Option<String>,
    #[serde(default)]
    pub message: Option<String>,
    #[serde(default)]
    pub audio: Option<AudioInput>,
    /// `auto`, `en`, or `zh`. A fixed language acts as the speech
    /// recognition hint; detection always runs on the text.
    #[serde(default)]
    pub lang: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub session_id: String,
    pub reply: String,
    pub detected_lang: String,
    pub tokens_generated: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: String,
    #[serde(default)]
    pub max_new_tokens: Option<usize>,
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub top_k: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub text: String,
    pub token_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub n_blocks: usize,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub model: ModelInfo,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, error: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                error: error.into(),
                stage: None,
            },
        }
    }

    fn bad_request(error: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, error)
    }

    /// Status for an error raised while answering a chat turn.
    fn from_pipeline(e: katz_core::Error) -> Self {
        use katz_core::Error as E;
        let (status, stage) = match &e {
            E::ContextLength { .. } => (StatusCode::PAYLOAD_TOO_LARGE, None),
            E::Precondition(_) => (StatusCode::BAD_REQUEST, None),
            E::Upstream { stage, .. } => (StatusCode::BAD_GATEWAY, Some(*stage)),
            E::UnsupportedLanguage(_) => (StatusCode::BAD_GATEWAY, Some("detect")),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, None),
        };
        Self {
            status,
            body: ErrorBody {
                error: e.to_string(),
                stage: stage.map(str::to_string),
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::bad_request(r.body_text())
    }
}

struct MonotonicClock(Instant);

impl Clock for MonotonicClock {
    fn now_micros(&self) -> u64 {
        self.0.elapsed().as_micros() as u64
    }
}

fn join_error(e: tokio::task::JoinError) -> ApiError {
    ApiError::new(
        StatusCode::INTERNAL_SERVER_ERROR,
        format!("worker failed: {e}"),
    )
}

fn parse_lang(code: &str) -> std::result::Result<Option<LangCode>, ApiError> {
    match code {
        "auto" => Ok(None),
        "en" => Ok(Some(LangCode::En)),
        "zh" => Ok(Some(LangCode::Zh)),
        other => Err(ApiError::bad_request(format!(
            "lang must be auto, en, or zh, got {other:?}"
        ))),
    }
}

fn chat_input(req: ChatRequest, cfg: &ServiceConfig) -> std::result::Result<ChatInput, ApiError> {
    let lang = parse_lang(req.lang.as_deref().unwrap_or("auto"))?;
    match (req.message, req.audio) {
        (Some(m), None) => {
            if m.len() > cfg.max_message_bytes {
                return Err(ApiError::new(
                    StatusCode::PAYLOAD_TOO_LARGE,
                    format!(
                        "message of {} bytes exceeds {}",
                        m.len(),
                        cfg.max_message_bytes
                    ),
                ));
            }
            Ok(ChatInput::Text(m))
        }
        (None, Some(a)) => {
            let payload = base64::engine::general_purpose::STANDARD
                .decode(a.data.as_bytes())
                .map_err(|e| ApiError::bad_request(format!("audio.data is not base64: {e}")))?;
            if payload.len() > cfg.max_audio_bytes {
                return Err(ApiError::new(
                    StatusCode::PAYLOAD_TOO_LARGE,
                    format!(
                        "audio of {} bytes exceeds {}",
                        payload.len(),
                        cfg.max_audio_bytes
                    ),
                ));
            }
            let hint = match a.lang_hint.as_deref() {
                Some(h) => parse_lang(h)?,
                None => lang,
            };
            Ok(ChatInput::Audio {
                payload,
                media_type: a.media_type,
                hint,
            })
        }
        (Some(_), Some(_)) => Err(ApiError::bad_request(
            "send either message or audio, not both",
        )),
        (None, None) => Err(ApiError::bad_request("message or audio is required")),
    }
}

async fn chat(
    State(state): State<AppState>,
    body: std::result::Result<Json<ChatRequest>, JsonRejection>,
) -> std::result::Result<Json<ChatResponse>, ApiError> {
    let Json(req) = body?;
    let session_id = req.session_id.clone();
    let input = chat_input(req, &state.inner.config)?;
    let (id, slot) = state.open_session(session_id, Instant::now())?;
    let mut guard = slot.lock_owned().await;
    let worker = state.clone();
    let trace = tokio::task::spawn_blocking(move || {
        let inner = &worker.inner;
        let session = &mut *guard;
        chat_pipeline(
            &input,
            &inner.providers,
            &inner.model,
            &inner.vocab,
            &mut session.history,
            &inner.config.decode,
            &mut session.rng,
            &MonotonicClock(Instant::now()),
        )
    })
    .await
    .map_err(join_error)?;
    state.touch(&id);
    let trace = trace.map_err(ApiError::from_pipeline)?;
    Ok(Json(ChatResponse {
        session_id: id,
        reply: trace.final_reply,
        detected_lang: trace.detected.as_str().to_string(),
        tokens_generated: trace.reply_ids.len(),
    }))
}

async fn generate(
    State(state): State<AppState>,
    body: std::result::Result<Json<GenerateRequest>, JsonRejection>,
) -> std::result::Result<Json<GenerateResponse>, ApiError> {
    let Json(req) = body?;
    let inner = &state.inner;
    let defaults = inner.config.decode;
    let opts = DecodeOptions {
        max_new_tokens: req.max_new_tokens.unwrap_or(defaults.max_new_tokens),
        temperature: req.temperature.unwrap_or(defaults.temperature),
        top_k: req.top_k.unwrap_or(defaults.top_k),
        stop_id: None,
    };
    if !(opts.temperature >= 0.0 && opts.temperature.is_finite()) {
        return Err(ApiError::bad_request("temperature must be finite and >= 0"));
    }
    if req.prompt.is_empty() {
        return Err(ApiError::bad_request("prompt must be nonempty"));
    }
    let prompt = inner.vocab.encode(&req.prompt);
    let n_ctx = inner.model.config.n_ctx;
    if prompt.len() + opts.max_new_tokens > n_ctx {
        return Err(ApiError::bad_request(format!(
            "prompt of {} tokens plus {} new tokens exceeds the context of {n_ctx}",
            prompt.len(),
            opts.max_new_tokens
        )));
    }
    let mut rng = RngStream::new(req.seed.unwrap_or(inner.config.seed));
    let worker = state.clone();
    let answer = tokio::task::spawn_blocking(move || {
        let inner = &worker.inner;
        inner.model.reply(&inner.vocab, prompt, &opts, &mut rng)
    })
    .await
    .map_err(join_error)?
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(Json(GenerateResponse {
        text: answer.text,
        token_count: answer.ids.len(),
    }))
}

async fn health(State(state): State<AppState>) -> Json<HealthResponse> {
    let m = &state.inner.model;
    Json(HealthResponse {
        status: "ok".into(),
        model: ModelInfo {
            n_blocks: m.config.n_blocks,
            params: m.num_parameters(),
        },
    })
}

pub fn router(state: AppState) -> Router {
    // Audio arrives base64 encoded, a third larger than the raw limit.
    let limit = state.inner.config.max_audio_bytes / 3 * 4 + 64 * 1024;
    Router::new()
        .route("/v1/chat", post(chat))
        .route("/v1/generate", post(generate))
        .route("/v1/health", get(health))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

/// Serves until `shutdown` resolves, collecting idle sessions once a
/// minute.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<()> {
    let gc_state = state.clone();
    let gc = tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(60));
        loop {
            tick.tick().await;
            gc_state.gc(Instant::now());
        }
    });
    let addr: Option<SocketAddr> = listener.local_addr().ok();
    let result = axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(|e| Error::Http(format!("server on {addr:?} failed: {e}")));
    gc.abort();
    result
}
