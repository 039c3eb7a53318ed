use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use streamner::data::Gazetteer;
use streamner::model::{init_model, LanguageModel, ModelConfig};
use streamner::probe::{MlpProbe, ProbeSet};
use streamner::span::SpanVariant;
use streamner::stream::{fold_events, PipelineConfig, SpanRecord, StreamEvent};
use streamner_cli::service::{router, AnnotateResponse, AppState, DoneEvent};
use tower::ServiceExt;

fn state(max_streams: usize) -> Arc<AppState> {
    let g = Gazetteer::builtin();
    let vocab = g.vocab();
    let cfg = ModelConfig { n_layers: 2, n_heads: 2, d_model: 16, d_ff: 32, vocab_size: vocab.len(), max_context: 256, seed: 3 };
    let lm = LanguageModel::new(init_model(&cfg).unwrap(), vocab).unwrap();
    let types = g.types();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let probes = ProbeSet {
        vocab_fingerprint: lm.vocab.fingerprint(),
        layer: 1,
        span_variant: SpanVariant::SpanNext,
        typing: MlpProbe::init(cfg.d_model, 8, types.n_labels(), &mut rng),
        span: Some(MlpProbe::init(cfg.attn_dim(), 8, 2, &mut rng)),
        adjacency: Some(MlpProbe::init(cfg.attn_dim(), 8, 2, &mut rng)),
        types,
    };
    let defaults = PipelineConfig { span_threshold: 0.45, ..PipelineConfig::default() };
    Arc::new(AppState::new(lm, probes, Some(defaults), max_streams).unwrap())
}

fn post(uri: &str, body: impl Into<Body>) -> Request<Body> {
    Request::post(uri).header("content-type", "application/json").body(body.into()).unwrap()
}

async fn send(s: &Arc<AppState>, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = router(s.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

/// Splits an SSE body into (event name, data) pairs.
fn sse_events(body: &[u8]) -> Vec<(String, String)> {
    let text = String::from_utf8(body.to_vec()).unwrap();
    text.split("\n\n")
        .filter(|b| !b.trim().is_empty())
        .map(|block| {
            let mut name = String::from("message");
            let mut data = Vec::new();
            for line in block.lines() {
                if let Some(v) = line.strip_prefix("event:") {
                    name = v.trim().to_string();
                } else if let Some(v) = line.strip_prefix("data:") {
                    data.push(v.strip_prefix(' ').unwrap_or(v).to_string());
                }
            }
            (name, data.join("\n"))
        })
        .collect()
}

#[tokio::test]
async fn meta_lists_types_strategies_and_defaults() {
    let s = state(2);
    let (code, body) = send(&s, Request::get("/v1/meta").body(Body::empty()).unwrap()).await;
    assert_eq!(code, StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["types"].as_array().unwrap().len(), 5);
    assert!(v["types"].as_array().unwrap().contains(&json!("PERSON")));
    assert_eq!(v["strategies"].as_array().unwrap().len(), 4);
    assert_eq!(v["defaults"]["strategy"], "spanwise_propagation");
    assert_eq!(v["defaults"]["layer"], 1);
    assert_eq!(v["max_streams"], 2);
    assert_eq!(v["probes"]["has_span"], true);
}

#[tokio::test]
async fn annotate_rejects_bad_bodies() {
    let s = state(1);
    for body in [
        r#"{"text": ""}"#,
        r#"{"text": "   "}"#,
        r#"{"text": "#,
        r#"not json"#,
        r#"{"txt": "Paris"}"#,
        r#"{"text": "Paris", "params": {"span_threshold": 1.5}}"#,
        r#"{"text": "Paris", "params": {"bogus": 1}}"#,
    ] {
        let (code, resp) = send(&s, post("/v1/annotate", body)).await;
        assert_eq!(code, StatusCode::BAD_REQUEST, "{body}");
        let v: Value = serde_json::from_slice(&resp).unwrap();
        assert!(v["error"].is_string());
    }
}

#[tokio::test]
async fn annotate_returns_tokens_and_spans() {
    let s = state(1);
    let (code, body) = send(&s, post("/v1/annotate", r#"{"text": "Paul Atreides wrote Dune in Paris ."}"#)).await;
    assert_eq!(code, StatusCode::OK);
    let r: AnnotateResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(r.tokens, ["Paul", "Atreides", "wrote", "Dune", "in", "Paris", "."]);
    for e in &r.entities {
        assert!(e.start <= e.end && e.end < r.tokens.len());
        assert_eq!(e.text, r.tokens[e.start..=e.end].join(" "));
    }
}

#[tokio::test]
async fn stream_emits_one_event_per_token_then_done() {
    let s = state(1);
    let req = json!({"prompt": "Paul Atreides is", "params": {"max_new_tokens": 8}});
    let (code, body) = send(&s, post("/v1/stream", req.to_string())).await;
    assert_eq!(code, StatusCode::OK);
    let events = sse_events(&body);
    let (last, rest) = events.split_last().unwrap();
    assert_eq!(last.0, "done");
    assert!(rest.len() >= 8);
    assert!(rest.iter().all(|e| e.0 == "token"));
    let parsed: Vec<StreamEvent> = rest.iter().map(|e| serde_json::from_str(&e.1).unwrap()).collect();
    for (k, e) in parsed.iter().enumerate() {
        assert_eq!(e.step, k);
    }
    let done: DoneEvent = serde_json::from_str(&last.1).unwrap();
    assert_eq!(done.entities, fold_events(&parsed));
    assert_eq!(s.active_streams(), 0);
}

#[tokio::test]
async fn folded_stream_matches_annotate_of_final_text() {
    let s = state(1);
    for (prompt, strategy) in [
        ("Paul Atreides is", "spanwise_propagation"),
        ("the mayor of", "tokenwise"),
        ("critics at the", "adjacency"),
        ("Marie Curie wrote", "spanwise_typing"),
    ] {
        let params = json!({"max_new_tokens": 12, "strategy": strategy});
        let (code, body) = send(&s, post("/v1/stream", json!({"prompt": prompt, "params": params}).to_string())).await;
        assert_eq!(code, StatusCode::OK);
        let events = sse_events(&body);
        let tokens: Vec<StreamEvent> = events
            .iter()
            .filter(|e| e.0 == "token")
            .map(|e| serde_json::from_str(&e.1).unwrap())
            .collect();
        let done: DoneEvent = serde_json::from_str(&events.last().unwrap().1).unwrap();
        let folded: Vec<SpanRecord> = fold_events(&tokens);
        let (code, body) = send(&s, post("/v1/annotate", json!({"text": done.text, "params": params}).to_string())).await;
        assert_eq!(code, StatusCode::OK);
        let ann: AnnotateResponse = serde_json::from_slice(&body).unwrap();
        assert_eq!(folded, ann.entities, "{prompt} / {strategy}");
    }
}

#[tokio::test]
async fn stream_rejects_bad_requests() {
    let s = state(1);
    let (code, _) = send(&s, post("/v1/stream", "{")).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
    let (code, _) = send(&s, post("/v1/stream", r#"{"prompt": ""}"#)).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
    let long = vec!["Paris"; 250].join(" ");
    let req = json!({"prompt": long, "params": {"max_new_tokens": 10}});
    let (code, _) = send(&s, post("/v1/stream", req.to_string())).await;
    assert_eq!(code, StatusCode::UNPROCESSABLE_ENTITY);
    let req = json!({"prompt": "Paris", "params": {"repetition_penalty": 0.5}});
    let (code, _) = send(&s, post("/v1/stream", req.to_string())).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
    assert_eq!(s.active_streams(), 0);
}

#[tokio::test]
async fn excess_streams_get_409_and_slots_are_released() {
    let s = state(1);
    // 200 tokens overflow the event buffer, so the worker holds its slot
    // until the body is read or dropped
    let long = json!({"prompt": "Paris", "params": {"max_new_tokens": 200}}).to_string();
    let held = router(s.clone()).oneshot(post("/v1/stream", long.clone())).await.unwrap();
    assert_eq!(held.status(), StatusCode::OK);
    assert_eq!(s.active_streams(), 1);
    let (code, body) = send(&s, post("/v1/stream", long.clone())).await;
    assert_eq!(code, StatusCode::CONFLICT);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert!(v["error"].as_str().unwrap().contains("streams"));
    // annotate is not limited
    let (code, _) = send(&s, post("/v1/annotate", r#"{"text": "Paris"}"#)).await;
    assert_eq!(code, StatusCode::OK);
    drop(held);
    for _ in 0..500 {
        if s.active_streams() == 0 {
            break;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    assert_eq!(s.active_streams(), 0);
    let short = json!({"prompt": "Paris", "params": {"max_new_tokens": 2}}).to_string();
    let (code, _) = send(&s, post("/v1/stream", short)).await;
    assert_eq!(code, StatusCode::OK);
}

#[tokio::test]
async fn probes_must_match_the_model() {
    let s = state(1);
    let mut probes = s.probes.clone();
    probes.vocab_fingerprint = "other".into();
    assert!(AppState::new(s.lm.clone(), probes, None, 1).is_err());
}

#[tokio::test]
async fn serves_over_tcp_and_shuts_down() {
    let s = state(1);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(async move {
        axum::serve(listener, router(s))
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await
    });
    let mut conn = tokio::net::TcpStream::connect(addr).await.unwrap();
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    conn.write_all(b"GET /v1/meta HTTP/1.1\r\nhost: x\r\nconnection: close\r\n\r\n").await.unwrap();
    let mut buf = Vec::new();
    conn.read_to_end(&mut buf).await.unwrap();
    assert!(String::from_utf8_lossy(&buf).starts_with("HTTP/1.1 200"));
    tx.send(()).unwrap();
    tokio::time::timeout(Duration::from_secs(10), server).await.unwrap().unwrap().unwrap();
}
