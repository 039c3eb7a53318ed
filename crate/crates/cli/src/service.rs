//! HTTP/SSE service over shared, immutable model and probe artifacts.

use std::convert::Infallible;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::sse::{Event, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::{Deserialize, Serialize};
use serde_json::json;
use streamner::model::LanguageModel;
use streamner::probe::ProbeSet;
use streamner::propagation::Strategy;
use streamner::stream::{annotate_text, init_stream, span_records, step, PipelineConfig, SpanRecord};
use streamner::Error;
use tokio::sync::mpsc;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    pub model_dir: PathBuf,
    pub probes_dir: PathBuf,
    pub pipeline: Option<PipelineConfig>,
    pub max_streams: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            bind: SocketAddr::from(([127, 0, 0, 1], 8080)),
            model_dir: PathBuf::from("artifacts/model"),
            probes_dir: PathBuf::from("artifacts/probes"),
            pipeline: None,
            max_streams: 4,
        }
    }
}

pub struct AppState {
    pub lm: LanguageModel,
    pub probes: ProbeSet,
    pub defaults: PipelineConfig,
    pub max_streams: usize,
    active: AtomicUsize,
}

impl AppState {
    /// Checks that the probes fit the model. Pipeline defaults take the
    /// probes' layer and span variant.
    pub fn new(lm: LanguageModel, probes: ProbeSet, defaults: Option<PipelineConfig>, max_streams: usize) -> streamner::Result<Self> {
        probes.check(&lm)?;
        let mut defaults = defaults.unwrap_or_default();
        defaults.layer = probes.layer;
        defaults.variant = probes.span_variant;
        defaults.validate(&lm, &probes)?;
        Ok(AppState { lm, probes, defaults, max_streams, active: AtomicUsize::new(0) })
    }

    pub fn load(cfg: &ServiceConfig) -> streamner::Result<Self> {
        let lm = LanguageModel::load_dir(&cfg.model_dir)?;
        let probes = ProbeSet::load_dir(&cfg.probes_dir)?;
        AppState::new(lm, probes, cfg.pipeline.clone(), cfg.max_streams)
    }

    pub fn active_streams(&self) -> usize {
        self.active.load(Ordering::SeqCst)
    }
}

/// Client-tunable pipeline and decoding parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Params {
    pub strategy: Option<Strategy>,
    pub span_threshold: Option<f32>,
    pub adj_threshold: Option<f32>,
    pub window: Option<usize>,
    pub max_new_tokens: Option<usize>,
    pub repetition_penalty: Option<f32>,
}

impl Params {
    pub fn apply(&self, base: &PipelineConfig) -> PipelineConfig {
        let mut c = base.clone();
        if let Some(s) = self.strategy {
            c.strategy = s;
        }
        if let Some(t) = self.span_threshold {
            c.span_threshold = t;
        }
        if let Some(t) = self.adj_threshold {
            c.adj_threshold = t;
        }
        if let Some(w) = self.window {
            c.window = w;
        }
        if let Some(n) = self.max_new_tokens {
            c.decode.max_new_tokens = n;
        }
        if let Some(r) = self.repetition_penalty {
            c.decode.repetition_penalty = r;
        }
        c
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotateRequest {
    pub text: String,
    #[serde(default)]
    pub params: Params,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnnotateResponse {
    pub tokens: Vec<String>,
    pub entities: Vec<SpanRecord>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamRequest {
    pub prompt: String,
    #[serde(default)]
    pub params: Params,
}

/// Payload of the final `done` event.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DoneEvent {
    pub text: String,
    pub entities: Vec<SpanRecord>,
}

pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

fn from_engine(e: Error) -> ApiError {
    let code = match e {
        Error::ContextOverflow { .. } => StatusCode::UNPROCESSABLE_ENTITY,
        Error::InvalidPipeline(_) | Error::InvalidPenalty(_) | Error::MissingProbe(_) | Error::EmptySequence => {
            StatusCode::BAD_REQUEST
        }
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    };
    ApiError(code, e.to_string())
}

fn parse<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| bad_request(format!("malformed body: {e}")))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/meta", get(meta))
        .route("/v1/annotate", post(annotate))
        .route("/v1/stream", post(stream))
        .with_state(state)
}

async fn meta(State(s): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({
        "model": s.lm.config(),
        "model_checksum": s.lm.weights.checksum(),
        "vocab_size": s.lm.vocab.len(),
        "probes": {
            "layer": s.probes.layer,
            "span_variant": s.probes.span_variant,
            "has_span": s.probes.span.is_some(),
            "has_adjacency": s.probes.adjacency.is_some(),
        },
        "types": s.probes.types.names(),
        "strategies": Strategy::ALL.iter().map(|x| x.name()).collect::<Vec<_>>(),
        "defaults": s.defaults,
        "max_streams": s.max_streams,
    }))
}

async fn annotate(State(s): State<Arc<AppState>>, body: Bytes) -> Result<Json<AnnotateResponse>, ApiError> {
    let req: AnnotateRequest = parse(&body)?;
    if req.text.trim().is_empty() {
        return Err(bad_request("text is empty"));
    }
    let cfg = req.params.apply(&s.defaults);
    let state = s.clone();
    tokio::task::spawn_blocking(move || {
        let ids = state.lm.vocab.encode(&req.text);
        let tokens: Vec<String> = ids.iter().map(|&t| state.lm.vocab.piece(t).to_string()).collect();
        let spans = annotate_text(&state.lm, &state.probes, &ids, &cfg).map_err(from_engine)?;
        Ok(Json(AnnotateResponse { entities: span_records(&spans, &tokens, &state.probes.types), tokens }))
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

/// Releases a stream slot when dropped.
struct Slot(Arc<AppState>);

impl Drop for Slot {
    fn drop(&mut self) {
        self.0.active.fetch_sub(1, Ordering::SeqCst);
    }
}

fn acquire(s: &Arc<AppState>) -> Option<Slot> {
    s.active
        .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| (n < s.max_streams).then_some(n + 1))
        .ok()
        .map(|_| Slot(s.clone()))
}

async fn stream(
    State(s): State<Arc<AppState>>,
    body: Bytes,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let req: StreamRequest = parse(&body)?;
    if req.prompt.trim().is_empty() {
        return Err(bad_request("prompt is empty"));
    }
    let cfg = req.params.apply(&s.defaults);
    let ids = s.lm.vocab.encode(&req.prompt);
    let need = ids.len() + cfg.decode.max_new_tokens;
    if need > s.lm.config().max_context {
        return Err(ApiError(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("prompt plus generation needs {need} positions, context is {}", s.lm.config().max_context),
        ));
    }
    cfg.validate(&s.lm, &s.probes).map_err(from_engine)?;
    let slot = acquire(&s).ok_or_else(|| ApiError(StatusCode::CONFLICT, "too many concurrent streams".into()))?;
    let (tx, rx) = mpsc::channel::<Event>(64);
    tokio::task::spawn_blocking(move || {
        let _slot = slot;
        let st = &_slot.0;
        let send = |e: Event| tx.blocking_send(e).is_ok();
        let result = (|| -> streamner::Result<()> {
            let (mut state, events) = init_stream(&st.lm, &st.probes, &st.probes.types, &ids, &cfg)?;
            for e in &events {
                if !send(Event::default().event("token").json_data(e).expect("event serializes")) {
                    return Ok(());
                }
            }
            while !state.is_finished() {
                let e = step(&st.lm, &st.probes, &mut state)?;
                if !send(Event::default().event("token").json_data(&e).expect("event serializes")) {
                    return Ok(());
                }
            }
            let done = DoneEvent {
                text: state.text(),
                entities: span_records(state.entities(), state.pieces(), &st.probes.types),
            };
            send(Event::default().event("done").json_data(&done).expect("event serializes"));
            Ok(())
        })();
        if let Err(e) = result {
            send(Event::default().event("error").data(e.to_string()));
        }
    });
    let events = futures::stream::unfold(rx, |mut rx| async move { rx.recv().await.map(|e| (Ok(e), rx)) });
    Ok(Sse::new(events))
}

/// Serves until Ctrl-C.
pub async fn serve(cfg: &ServiceConfig) -> anyhow::Result<()> {
    let state = Arc::new(AppState::load(cfg)?);
    let listener = tokio::net::TcpListener::bind(cfg.bind).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
