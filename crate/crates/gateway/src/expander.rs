use rwrforge_core::curation::{category_slug, CurationError, ExpansionRequest, PromptExpander};
use serde_json::{json, Value};

use crate::{request_id, GatewayError, ScorerClient, ScorerEndpoint};

/// Prompt expansion through a text-only chat-completion endpoint. Each reply
/// is split into lines; cleanup and deduplication happen in the caller.
pub struct HttpExpander {
    client: ScorerClient,
    temperature: f64,
}

impl HttpExpander {
    pub fn new(endpoint: ScorerEndpoint) -> Result<Self, GatewayError> {
        Ok(Self { client: ScorerClient::new(endpoint)?, temperature: 1.0 })
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }
}

impl PromptExpander for HttpExpander {
    fn generate(&mut self, request: &ExpansionRequest) -> Result<Vec<String>, CurationError> {
        let body = json!({
            "model": self.client.endpoint().model,
            "messages": [{"role": "user", "content": request.message}],
            "temperature": self.temperature,
        });
        let id = request_id("expand", category_slug(request.category), request.round as u32);
        let resp = self
            .client
            .post_json("/v1/chat/completions", &id, &body)
            .map_err(|e| CurationError::Endpoint(e.to_string()))?;
        let content = resp
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| CurationError::Endpoint("reply has no message content".into()))?;
        Ok(content.lines().map(str::to_string).collect())
    }
}
