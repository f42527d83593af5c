//! HTTP backend for chat-completion style endpoints.
//!
//! Request body: `{"model", "messages": [system, user], ...params}`; the
//! report is read from `choices[0].message.content`. The credential is read
//! from an environment variable and sent as a bearer token.

use std::collections::BTreeMap;
use std::time::Duration;

use super::{BackendError, BackendReply, GatewayError, ScoreRequest, ScoringBackend};

pub struct LiveBackend {
    endpoint: String,
    api_key: String,
    client: reqwest::blocking::Client,
}

impl std::fmt::Debug for LiveBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LiveBackend")
            .field("endpoint", &self.endpoint)
            .finish_non_exhaustive()
    }
}

impl LiveBackend {
    /// Reads the credential from `key_env`.
    pub fn from_env(endpoint: &str, key_env: &str, timeout: Duration) -> Result<Self, GatewayError> {
        let api_key = std::env::var(key_env)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| GatewayError::MissingCredential(key_env.to_owned()))?;
        Self::with_key(endpoint, api_key, timeout)
    }

    pub fn with_key(endpoint: &str, api_key: String, timeout: Duration) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GatewayError::Fatal(format!("HTTP client: {e}")))?;
        Ok(Self {
            endpoint: endpoint.to_owned(),
            api_key,
            client,
        })
    }
}

fn classify_status(status: u16, body: &str) -> BackendError {
    let snippet: String = body.chars().take(200).collect();
    let message = format!("HTTP {status}: {snippet}");
    match status {
        401 | 403 => BackendError::Fatal(message),
        408 | 409 | 425 | 429 | 500..=599 => BackendError::Transient(message),
        _ => BackendError::Permanent(message),
    }
}

impl ScoringBackend for LiveBackend {
    fn tag(&self) -> String {
        "live".to_owned()
    }

    fn send(
        &self,
        request: &ScoreRequest,
        params: &BTreeMap<String, serde_json::Value>,
    ) -> Result<BackendReply, BackendError> {
        let mut body = serde_json::Map::new();
        for (k, v) in params {
            body.insert(k.clone(), v.clone());
        }
        body.insert("model".into(), request.key.model_id.clone().into());
        body.insert(
            "messages".into(),
            serde_json::json!([
                {"role": "system", "content": request.prompt.system_text},
                {"role": "user", "content": request.prompt.user_text},
            ]),
        );
        let response = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(serde_json::Value::Object(body).to_string())
            .send()
            .map_err(|e| BackendError::Transient(format!("request failed: {e}")))?;
        let status = response.status().as_u16();
        let text = response
            .text()
            .map_err(|e| BackendError::Transient(format!("reading response: {e}")))?;
        if !(200..300).contains(&status) {
            return Err(classify_status(status, &text));
        }
        let json: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| BackendError::Permanent(format!("response is not JSON: {e}")))?;
        let content = json
            .pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .ok_or_else(|| BackendError::Permanent("response has no choices[0].message.content".into()))?;
        let mut meta = BTreeMap::new();
        meta.insert("backend".to_owned(), "live".to_owned());
        for field in ["id", "model"] {
            if let Some(v) = json.get(field).and_then(|v| v.as_str()) {
                meta.insert(field.to_owned(), v.to_owned());
            }
        }
        if let Some(reason) = json.pointer("/choices/0/finish_reason").and_then(|v| v.as_str()) {
            meta.insert("finish_reason".to_owned(), reason.to_owned());
        }
        Ok(BackendReply {
            text: content.to_owned(),
            meta,
        })
    }
}
