use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One chat-completion call. Decoding is always requested deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub system: String,
    pub user: String,
    /// JSON schema the output must satisfy.
    pub schema: Value,
    pub temperature: f64,
    pub top_p: f64,
}

impl ChatRequest {
    pub fn new(
        model: impl Into<String>,
        system: impl Into<String>,
        user: impl Into<String>,
        schema: Value,
    ) -> Self {
        Self {
            model: model.into(),
            system: system.into(),
            user: user.into(),
            schema,
            temperature: 0.0,
            top_p: 1.0,
        }
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("request serializes");
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

pub trait ModelBackend: Send + Sync {
    /// Identifier used in audit logs; never shown to a verifier.
    fn name(&self) -> &str;
    fn complete(&self, request: &ChatRequest) -> Result<String>;
}

/// Replays recorded responses keyed by request hash.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FixtureBackend {
    pub name: String,
    pub responses: BTreeMap<String, String>,
}

impl FixtureBackend {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            responses: BTreeMap::new(),
        }
    }

    pub fn record(&mut self, request: &ChatRequest, response: impl Into<String>) {
        self.responses.insert(request.hash(), response.into());
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        Ok(serde_json::from_slice(bytes)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl ModelBackend for FixtureBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, request: &ChatRequest) -> Result<String> {
        self.responses.get(&request.hash()).cloned().ok_or_else(|| {
            Error::Backend(format!(
                "{}: no recorded response for request {}",
                self.name,
                request.hash()
            ))
        })
    }
}

/// OpenAI-compatible `/v1/chat/completions` endpoint with schema-guided decoding.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    pub name: String,
    pub base_url: String,
    pub timeout: Duration,
}

impl HttpBackend {
    pub fn new(name: impl Into<String>, base_url: impl Into<String>, timeout: Duration) -> Self {
        Self {
            name: name.into(),
            base_url: base_url.into(),
            timeout,
        }
    }

    pub fn body(request: &ChatRequest) -> Value {
        json!({
            "model": request.model,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": request.user},
            ],
            "temperature": request.temperature,
            "top_p": request.top_p,
            "response_format": {
                "type": "json_schema",
                "json_schema": {"name": "output", "strict": true, "schema": request.schema},
            },
        })
    }
}

impl ModelBackend for HttpBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let url = format!(
            "{}/v1/chat/completions",
            self.base_url.trim_end_matches('/')
        );
        let body = serde_json::to_string(&Self::body(request))?;
        let fail = |e: ureq::Error| Error::Backend(format!("{}: {e}", self.name));
        let mut resp = agent
            .post(&url)
            .header("Content-Type", "application/json")
            .send(body)
            .map_err(fail)?;
        let text = resp.body_mut().read_to_string().map_err(fail)?;
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Backend(format!("{}: {e}", self.name)))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(String::from)
            .ok_or_else(|| {
                Error::Backend(format!("{}: response has no message content", self.name))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn requests_are_deterministic_and_hash_stably() {
        let r = ChatRequest::new("m", "sys", "user", json!({"type": "array"}));
        assert_eq!((r.temperature, r.top_p), (0.0, 1.0));
        assert_eq!(r.hash(), r.clone().hash());
        assert_ne!(
            r.hash(),
            ChatRequest::new("m", "sys", "user2", json!({"type": "array"})).hash()
        );
        let body = HttpBackend::body(&r);
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["top_p"], 1.0);
    }

    #[test]
    fn fixture_replays_and_misses() {
        let r = ChatRequest::new("m", "sys", "user", Value::Null);
        let mut f = FixtureBackend::new("m");
        f.record(&r, "[]");
        assert_eq!(f.complete(&r).unwrap(), "[]");
        let g = FixtureBackend::from_json(f.to_json().unwrap().as_bytes()).unwrap();
        assert_eq!(g, f);
        assert!(matches!(
            f.complete(&ChatRequest::new("m", "x", "y", Value::Null)),
            Err(Error::Backend(_))
        ));
    }
}
