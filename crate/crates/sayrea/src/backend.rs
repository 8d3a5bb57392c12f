//! Chat-completion backend over HTTP and identifier selection.

use std::sync::Arc;
use std::time::Duration;

use sayrea_core::context::Registry;
use sayrea_core::identify::{BackendError, ChatMessage, CompletionBackend, Identifier, Lexicon, LlmIdentifier, MockIdentifier};
use serde_json::{json, Value};

pub const ENV_URL: &str = "SAYREA_LLM_URL";
pub const ENV_KEY: &str = "SAYREA_LLM_KEY";
pub const ENV_MODEL: &str = "SAYREA_LLM_MODEL";

/// POSTs `{model, temperature: 0, messages}` and reads
/// `choices[0].message.content` from the reply.
pub struct HttpChatBackend {
    agent: ureq::Agent,
    url: String,
    key: Option<String>,
    model: String,
}

impl HttpChatBackend {
    pub fn new(url: impl Into<String>, key: Option<String>, model: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into();
        HttpChatBackend { agent, url: url.into(), key, model: model.into() }
    }

    pub fn from_env() -> anyhow::Result<Self> {
        let url = std::env::var(ENV_URL).map_err(|_| anyhow::anyhow!("{ENV_URL} is not set"))?;
        let key = std::env::var(ENV_KEY).ok().filter(|k| !k.is_empty());
        let model = std::env::var(ENV_MODEL).unwrap_or_else(|_| "gpt-3.5-turbo".into());
        Ok(HttpChatBackend::new(url, key, model, Duration::from_secs(30)))
    }
}

impl CompletionBackend for HttpChatBackend {
    fn name(&self) -> &str {
        &self.model
    }

    fn complete(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        let body = json!({ "model": self.model, "temperature": 0, "messages": messages });
        let mut req = self.agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(key) = &self.key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| BackendError(e.to_string()))?;
        let reply: Value = resp.body_mut().read_json().map_err(|e| BackendError(format!("unreadable reply: {e}")))?;
        reply["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| BackendError("reply has no choices[0].message.content".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum BackendKind {
    Mock,
    Http,
}

pub fn build_identifier(kind: BackendKind, registry: Arc<Registry>, lexicon: Lexicon) -> anyhow::Result<Arc<dyn Identifier>> {
    Ok(match kind {
        BackendKind::Mock => Arc::new(MockIdentifier::new(lexicon, registry)),
        BackendKind::Http => Arc::new(LlmIdentifier::new(HttpChatBackend::from_env()?)),
    })
}
