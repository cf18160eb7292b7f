use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Duration;

use base64::Engine;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::{GatewayError, ScorerEndpoint, VqaTemplateEnsemble};

/// Stable id for one sample under one scorer. Retries reuse it, so a server
/// that deduplicates by id scores the sample once.
pub fn request_id(reward_name: &str, prompt_id: &str, sample_index: u32) -> String {
    let mut h = Sha256::new();
    h.update(reward_name.as_bytes());
    h.update([0]);
    h.update(prompt_id.as_bytes());
    h.update([0]);
    h.update(sample_index.to_le_bytes());
    hex::encode(&h.finalize()[..16])
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBlob {
    pub bytes: Vec<u8>,
    pub media_type: String,
}

impl ImageBlob {
    pub fn base64(&self) -> String {
        base64::engine::general_purpose::STANDARD.encode(&self.bytes)
    }

    pub fn data_url(&self) -> String {
        format!("data:{};base64,{}", self.media_type, self.base64())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreItem {
    pub request_id: String,
    pub prompt_text: String,
    pub image: ImageBlob,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RemoteKind {
    Vqa(VqaTemplateEnsemble),
    Embedding,
    Scalar,
}

impl RemoteKind {
    /// Scorer version string recorded with each reward. For the VQA scorer it
    /// pins the template text.
    pub fn version(&self) -> String {
        match self {
            RemoteKind::Vqa(e) => {
                let mut h = Sha256::new();
                for t in e.templates() {
                    h.update(t.as_bytes());
                    h.update([0]);
                }
                format!("vqa-yes/{}", &hex::encode(h.finalize())[..12])
            }
            RemoteKind::Embedding => "embedding-cosine/1".into(),
            RemoteKind::Scalar => "scalar/1".into(),
        }
    }
}

/// Blocking HTTP client for one endpoint.
#[derive(Debug, Clone)]
pub struct ScorerClient {
    endpoint: ScorerEndpoint,
    agent: ureq::Agent,
    token: Option<String>,
}

fn retryable(status: u16) -> bool {
    status == 408 || status == 429 || status >= 500
}

impl ScorerClient {
    pub fn new(endpoint: ScorerEndpoint) -> Result<Self, GatewayError> {
        endpoint.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(endpoint.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        let token = endpoint.token();
        Ok(Self { endpoint, agent, token })
    }

    pub fn endpoint(&self) -> &ScorerEndpoint {
        &self.endpoint
    }

    /// POSTs `body` with retries on transport failures, 408, 429 and 5xx.
    pub(crate) fn post_json(&self, path: &str, request_id: &str, body: &Value) -> Result<Value, GatewayError> {
        let url = self.endpoint.url(path);
        let policy = &self.endpoint.retry;
        let mut last = String::new();
        for attempt in 1..=policy.max_attempts {
            if attempt > 1 {
                std::thread::sleep(policy.backoff(attempt - 1));
            }
            let mut req = self.agent.post(&url).header("X-Request-Id", request_id);
            if let Some(t) = &self.token {
                req = req.header("Authorization", format!("Bearer {t}"));
            }
            let mut resp = match req.send_json(body) {
                Ok(r) => r,
                Err(e) => {
                    log::warn!("{url} attempt {attempt}: {e}");
                    last = e.to_string();
                    continue;
                }
            };
            let status = resp.status().as_u16();
            let text = match resp.body_mut().read_to_string() {
                Ok(t) => t,
                Err(e) => {
                    last = e.to_string();
                    continue;
                }
            };
            if status == 200 {
                return serde_json::from_str(&text).map_err(|e| GatewayError::Decode(e.to_string()));
            }
            if !retryable(status) {
                return Err(GatewayError::Status { status, url, body: text });
            }
            log::warn!("{url} attempt {attempt}: HTTP {status}");
            last = format!("HTTP {status}: {text}");
        }
        Err(GatewayError::Transport { attempts: policy.max_attempts, message: last })
    }

    /// Mean over templates of the probability mass on "yes" among the
    /// returned next-token candidates.
    pub fn vqa_yes_score(
        &self,
        image: &ImageBlob,
        prompt_text: &str,
        ensemble: &VqaTemplateEnsemble,
        request_id: &str,
    ) -> Result<f64, GatewayError> {
        let url = image.data_url();
        let questions = ensemble.instantiate(prompt_text);
        let mut sum = 0.0;
        for (i, q) in questions.iter().enumerate() {
            let body = json!({
                "model": self.endpoint.model,
                "messages": [{
                    "role": "user",
                    "content": [
                        {"type": "image_url", "image_url": {"url": url}},
                        {"type": "text", "text": q},
                    ],
                }],
                "max_tokens": 1,
                "temperature": 0.0,
                "logprobs": true,
                "top_logprobs": 20,
            });
            let resp = self.post_json("/v1/chat/completions", &format!("{request_id}-t{i}"), &body)?;
            sum += yes_probability(&resp)?;
        }
        Ok(sum / questions.len() as f64)
    }

    /// Cosine similarity between the image and prompt embeddings.
    pub fn embedding_similarity_score(
        &self,
        image: &ImageBlob,
        prompt_text: &str,
        request_id: &str,
    ) -> Result<f64, GatewayError> {
        let body = json!({
            "model": self.endpoint.model,
            "input": [
                {"type": "image", "media_type": image.media_type, "data": image.base64()},
                {"type": "text", "text": prompt_text},
            ],
        });
        let resp = self.post_json("/v1/embeddings", request_id, &body)?;
        let mut data: Vec<(u64, Vec<f64>)> = Vec::new();
        for d in resp.get("data").and_then(Value::as_array).ok_or_else(|| decode("missing data array"))? {
            let index = d.get("index").and_then(Value::as_u64).ok_or_else(|| decode("embedding without index"))?;
            let v = d.get("embedding").and_then(Value::as_array).ok_or_else(|| decode("missing embedding"))?;
            let v = v.iter().map(finite_number).collect::<Result<Vec<f64>, _>>()?;
            data.push((index, v));
        }
        data.sort_by_key(|d| d.0);
        if data.len() != 2 || data[0].0 != 0 || data[1].0 != 1 {
            return Err(decode("expected embeddings at indices 0 and 1"));
        }
        cosine(&data[0].1, &data[1].1)
    }

    /// A single remote scalar, passed through unchanged.
    pub fn scalar_preference_score(
        &self,
        image: &ImageBlob,
        prompt_text: &str,
        request_id: &str,
    ) -> Result<f64, GatewayError> {
        let body = json!({
            "model": self.endpoint.model,
            "request_id": request_id,
            "prompt": prompt_text,
            "image": {"media_type": image.media_type, "data": image.base64()},
        });
        let resp = self.post_json("/v1/score", request_id, &body)?;
        match resp.get("request_id").and_then(Value::as_str) {
            Some(got) if got == request_id => {}
            Some(got) => return Err(GatewayError::Attribution { sent: request_id.into(), got: got.into() }),
            None => return Err(decode("response does not echo request_id")),
        }
        match resp.get("score") {
            None | Some(Value::Null) => Err(GatewayError::MissingScalar),
            Some(v) => finite_number(v),
        }
    }

    pub fn score(&self, kind: &RemoteKind, item: &ScoreItem) -> Result<f64, GatewayError> {
        match kind {
            RemoteKind::Vqa(e) => self.vqa_yes_score(&item.image, &item.prompt_text, e, &item.request_id),
            RemoteKind::Embedding => self.embedding_similarity_score(&item.image, &item.prompt_text, &item.request_id),
            RemoteKind::Scalar => self.scalar_preference_score(&item.image, &item.prompt_text, &item.request_id),
        }
    }

    /// Scores every item with at most `max_concurrency` requests in flight.
    /// Results line up with `items`.
    pub fn score_items(&self, kind: &RemoteKind, items: &[ScoreItem]) -> Vec<Result<f64, GatewayError>> {
        score_batch(items, self.endpoint.max_concurrency, |it| self.score(kind, it))
    }
}

fn decode(msg: &str) -> GatewayError {
    GatewayError::Decode(msg.into())
}

/// JSON has no NaN or infinity, so servers that emit them send strings.
fn finite_number(v: &Value) -> Result<f64, GatewayError> {
    match v {
        Value::Number(n) => n.as_f64().filter(|x| x.is_finite()).ok_or_else(|| GatewayError::NonFinite(n.to_string())),
        Value::String(s) => match s.trim().parse::<f64>() {
            Ok(x) if x.is_finite() => Err(decode(&format!("number sent as string {s:?}"))),
            Ok(_) => Err(GatewayError::NonFinite(s.clone())),
            Err(_) => Err(decode(&format!("expected a number, got {s:?}"))),
        },
        other => Err(decode(&format!("expected a number, got {other}"))),
    }
}

fn yes_probability(resp: &Value) -> Result<f64, GatewayError> {
    let cands = resp
        .pointer("/choices/0/logprobs/content/0/top_logprobs")
        .and_then(Value::as_array)
        .ok_or(GatewayError::MissingLogprobs)?;
    let mut p = 0.0;
    for c in cands {
        let token = c.get("token").and_then(Value::as_str).ok_or_else(|| decode("candidate without token"))?;
        let lp = finite_number(c.get("logprob").ok_or(GatewayError::MissingLogprobs)?)?;
        if lp > 1e-9 {
            return Err(decode(&format!("positive logprob {lp}")));
        }
        if token.trim().to_lowercase() == "yes" {
            p += lp.exp();
        }
    }
    Ok(p.min(1.0))
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64, GatewayError> {
    if a.len() != b.len() {
        return Err(GatewayError::DimensionMismatch(a.len(), b.len()));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(GatewayError::ZeroVector);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Runs `f` over `items` on at most `max_concurrency` worker threads. One
/// aggregator collects results by index, so completion order does not matter.
pub fn score_batch<T, F>(items: &[T], max_concurrency: usize, f: F) -> Vec<Result<f64, GatewayError>>
where
    T: Sync,
    F: Fn(&T) -> Result<f64, GatewayError> + Sync,
{
    let n = items.len();
    let next = AtomicUsize::new(0);
    let mut out: Vec<Option<Result<f64, GatewayError>>> = (0..n).map(|_| None).collect();
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|s| {
        for _ in 0..max_concurrency.max(1).min(n) {
            let tx = tx.clone();
            let (next, f) = (&next, &f);
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n || tx.send((i, f(&items[i]))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, r) in rx {
            out[i] = Some(r);
        }
    });
    out.into_iter().map(|r| r.expect("every index is scored")).collect()
}
