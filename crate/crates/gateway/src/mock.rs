//! Loopback server for tests. It validates requests against the wire schema,
//! counts requests in flight, can fail the first attempts of each request id,
//! and answers repeated ids from a cache so a retried request yields one
//! logical score.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderMap, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use base64::Engine;
use serde_json::{json, Value};
use tokio::sync::oneshot;

/// A validated request as the handler sees it.
#[derive(Debug, Clone, PartialEq)]
pub enum MockCall {
    /// Multimodal yes/no question asking for next-token log-probabilities.
    Vqa { request_id: String, question: String, image: Vec<u8> },
    /// Text-only chat completion.
    Chat { request_id: String, message: String },
    Embedding { request_id: String, image: Vec<u8>, text: String },
    Score { request_id: String, prompt: String, image: Vec<u8> },
}

impl MockCall {
    pub fn request_id(&self) -> &str {
        match self {
            MockCall::Vqa { request_id, .. }
            | MockCall::Chat { request_id, .. }
            | MockCall::Embedding { request_id, .. }
            | MockCall::Score { request_id, .. } => request_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MockReply {
    Json(Value),
    Status(u16, String),
}

#[derive(Debug, Clone, Default)]
pub struct MockOptions {
    /// Held before answering, so concurrent requests overlap.
    pub delay: Duration,
    /// Each request id gets HTTP 503 on this many attempts before it is served.
    pub fail_first: u32,
    /// Bearer token required on every request.
    pub token: Option<String>,
}

#[derive(Debug, Default)]
pub struct MockStats {
    requests: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    handler_calls: AtomicUsize,
    attempts: Mutex<HashMap<String, u32>>,
    served: Mutex<HashMap<String, Value>>,
}

impl MockStats {
    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    /// Times the handler produced a fresh reply.
    pub fn handler_calls(&self) -> usize {
        self.handler_calls.load(Ordering::SeqCst)
    }

    pub fn attempts(&self, request_id: &str) -> u32 {
        self.attempts.lock().unwrap().get(request_id).copied().unwrap_or(0)
    }

    /// Request ids answered successfully, each counted once.
    pub fn served_ids(&self) -> usize {
        self.served.lock().unwrap().len()
    }
}

type Handler = dyn Fn(&MockCall) -> MockReply + Send + Sync;

struct Shared {
    handler: Box<Handler>,
    opts: MockOptions,
    stats: Arc<MockStats>,
}

pub struct MockServer {
    addr: SocketAddr,
    stats: Arc<MockStats>,
    shutdown: Option<oneshot::Sender<()>>,
}

impl MockServer {
    pub fn start(
        handler: impl Fn(&MockCall) -> MockReply + Send + Sync + 'static,
        opts: MockOptions,
    ) -> std::io::Result<Self> {
        let listener = std::net::TcpListener::bind("127.0.0.1:0")?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let stats = Arc::new(MockStats::default());
        let shared = Arc::new(Shared { handler: Box::new(handler), opts, stats: stats.clone() });
        let app = Router::new()
            .route("/v1/chat/completions", post(handle))
            .route("/v1/embeddings", post(handle))
            .route("/v1/score", post(handle))
            .with_state(shared);
        let (tx, rx) = oneshot::channel::<()>();
        let runtime = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
        std::thread::spawn(move || {
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener).expect("listener");
                let _ = axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await;
            })
        });
        Ok(Self { addr, stats, shutdown: Some(tx) })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stats(&self) -> &MockStats {
        &self.stats
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

struct InFlight<'a>(&'a MockStats);

impl<'a> InFlight<'a> {
    fn enter(stats: &'a MockStats) -> Self {
        stats.requests.fetch_add(1, Ordering::SeqCst);
        let now = stats.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        stats.max_in_flight.fetch_max(now, Ordering::SeqCst);
        Self(stats)
    }
}

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

fn bad(msg: impl Into<String>) -> Response {
    (StatusCode::BAD_REQUEST, msg.into()).into_response()
}

async fn handle(State(st): State<Arc<Shared>>, uri: Uri, headers: HeaderMap, body: Bytes) -> Response {
    let _guard = InFlight::enter(&st.stats);
    if !st.opts.delay.is_zero() {
        tokio::time::sleep(st.opts.delay).await;
    }
    if let Some(token) = &st.opts.token {
        let expected = format!("Bearer {token}");
        if headers.get("authorization").and_then(|v| v.to_str().ok()) != Some(expected.as_str()) {
            return (StatusCode::UNAUTHORIZED, "bad or missing bearer token").into_response();
        }
    }
    let Some(id) = headers.get("x-request-id").and_then(|v| v.to_str().ok()).map(str::to_string) else {
        return bad("missing X-Request-Id header");
    };
    let attempt = {
        let mut a = st.stats.attempts.lock().unwrap();
        let n = a.entry(id.clone()).or_insert(0);
        *n += 1;
        *n
    };
    if attempt <= st.opts.fail_first {
        return (StatusCode::SERVICE_UNAVAILABLE, "injected failure").into_response();
    }
    if let Some(v) = st.stats.served.lock().unwrap().get(&id) {
        return Json(v.clone()).into_response();
    }
    let call = match serde_json::from_slice::<Value>(&body)
        .map_err(|e| e.to_string())
        .and_then(|b| parse_call(uri.path(), &id, &b))
    {
        Ok(c) => c,
        Err(e) => return bad(e),
    };
    st.stats.handler_calls.fetch_add(1, Ordering::SeqCst);
    match (st.handler)(&call) {
        MockReply::Json(v) => {
            st.stats.served.lock().unwrap().entry(id).or_insert_with(|| v.clone());
            Json(v).into_response()
        }
        MockReply::Status(code, msg) => {
            (StatusCode::from_u16(code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR), msg).into_response()
        }
    }
}

fn b64(s: &str) -> Result<Vec<u8>, String> {
    base64::engine::general_purpose::STANDARD.decode(s).map_err(|e| format!("bad base64: {e}"))
}

fn str_field<'a>(v: &'a Value, key: &str) -> Result<&'a str, String> {
    v.get(key).and_then(Value::as_str).ok_or_else(|| format!("missing string field {key:?}"))
}

fn parse_call(path: &str, id: &str, body: &Value) -> Result<MockCall, String> {
    str_field(body, "model")?;
    let request_id = id.to_string();
    match path {
        "/v1/chat/completions" => {
            let msgs = body.get("messages").and_then(Value::as_array).ok_or("missing messages")?;
            let last = msgs.last().ok_or("empty messages")?;
            if str_field(last, "role")? != "user" {
                return Err("last message must come from the user".into());
            }
            match last.get("content") {
                Some(Value::String(message)) => Ok(MockCall::Chat { request_id, message: message.clone() }),
                Some(Value::Array(parts)) => {
                    if body.get("logprobs") != Some(&Value::Bool(true)) {
                        return Err("image questions must request logprobs".into());
                    }
                    if body.get("max_tokens").and_then(Value::as_u64) != Some(1) {
                        return Err("image questions must set max_tokens to 1".into());
                    }
                    if body.get("top_logprobs").and_then(Value::as_u64).unwrap_or(0) < 1 {
                        return Err("top_logprobs must be at least 1".into());
                    }
                    let mut image = None;
                    let mut question = None;
                    for p in parts {
                        match str_field(p, "type")? {
                            "image_url" => {
                                let url = p.pointer("/image_url/url").and_then(Value::as_str).ok_or("missing image_url.url")?;
                                let data = url
                                    .strip_prefix("data:")
                                    .and_then(|r| r.split_once(";base64,"))
                                    .ok_or("image url must be a base64 data URL")?
                                    .1;
                                image = Some(b64(data)?);
                            }
                            "text" => question = Some(str_field(p, "text")?.to_string()),
                            t => return Err(format!("unknown content part {t:?}")),
                        }
                    }
                    match (image, question) {
                        (Some(image), Some(question)) => Ok(MockCall::Vqa { request_id, question, image }),
                        _ => Err("need one image part and one text part".into()),
                    }
                }
                _ => Err("message content must be a string or a part list".into()),
            }
        }
        "/v1/embeddings" => {
            let input = body.get("input").and_then(Value::as_array).ok_or("missing input")?;
            if input.len() != 2 || str_field(&input[0], "type")? != "image" || str_field(&input[1], "type")? != "text" {
                return Err("input must be [image, text]".into());
            }
            str_field(&input[0], "media_type")?;
            let image = b64(str_field(&input[0], "data")?)?;
            let text = str_field(&input[1], "text")?.to_string();
            Ok(MockCall::Embedding { request_id, image, text })
        }
        "/v1/score" => {
            if str_field(body, "request_id")? != id {
                return Err("body request_id differs from X-Request-Id".into());
            }
            let prompt = str_field(body, "prompt")?.to_string();
            let img = body.get("image").ok_or("missing image")?;
            str_field(img, "media_type")?;
            let image = b64(str_field(img, "data")?)?;
            Ok(MockCall::Score { request_id, prompt, image })
        }
        other => Err(format!("unknown path {other}")),
    }
}

/// Non-finite values go out as strings, the way servers emit them.
fn number(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else if x.is_nan() {
        json!("NaN")
    } else if x > 0.0 {
        json!("Infinity")
    } else {
        json!("-Infinity")
    }
}

/// Chat-completion reply whose first position carries `candidates` as its
/// top log-probabilities.
pub fn logprob_reply(candidates: &[(&str, f64)]) -> MockReply {
    let top: Vec<Value> = candidates.iter().map(|(t, lp)| json!({"token": t, "logprob": number(*lp)})).collect();
    let first = candidates.first().map(|c| c.0).unwrap_or("");
    MockReply::Json(json!({
        "id": "mock",
        "object": "chat.completion",
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": first},
            "logprobs": {"content": [{"token": first, "logprob": number(candidates.first().map_or(0.0, |c| c.1)), "top_logprobs": top}]},
            "finish_reason": "length",
        }],
    }))
}

pub fn chat_reply(content: &str) -> MockReply {
    MockReply::Json(json!({
        "id": "mock",
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}],
    }))
}

pub fn embedding_reply(image: &[f64], text: &[f64]) -> MockReply {
    let enc = |v: &[f64]| Value::Array(v.iter().map(|&x| number(x)).collect());
    MockReply::Json(json!({
        "object": "list",
        "data": [{"index": 0, "embedding": enc(image)}, {"index": 1, "embedding": enc(text)}],
    }))
}

pub fn score_reply(request_id: &str, score: f64) -> MockReply {
    MockReply::Json(json!({"request_id": request_id, "score": number(score)}))
}
