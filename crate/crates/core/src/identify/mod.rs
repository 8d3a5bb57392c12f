//! Attribute identification: turn a one-sentence reason into the set of
//! snapshot attributes it refers to.
//!
//! The prompt is dialogue-form (guidance, one worked example, the current
//! request). Any chat completion backend can answer it; completions are
//! parsed leniently and matched back against the snapshot, so the result
//! only ever contains attributes the snapshot actually holds.

mod mock;
mod prompt;

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{fold_text, ContextAttribute, ContextError, ContextSnapshot, Registry};

pub use mock::{mock_identify, score_attribute, tokenize, Lexicon, DEFAULT_LEXICON_JSON, MOCK_CAP};
pub use prompt::{build_prompt, ChatMessage, FormatExample, PromptBundle, Role, EXAMPLE_COMPLETION, EXAMPLE_INPUT, GUIDANCE};

pub const ACCURACY_THRESHOLD: f64 = 0.75;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IdentifyError {
    #[error("reason is empty")]
    EmptyReason,
    #[error("snapshot has no attributes")]
    EmptySnapshot,
    #[error("completion backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("no context attributes identified")]
    NoAttributesIdentified { warnings: Vec<String> },
    #[error("accuracy is undefined for an empty user choice")]
    UndefinedAccuracy,
    #[error(transparent)]
    Context(#[from] ContextError),
}

impl IdentifyError {
    pub fn code(&self) -> &'static str {
        match self {
            IdentifyError::EmptyReason => "EMPTY_REASON",
            IdentifyError::EmptySnapshot => "EMPTY_SNAPSHOT",
            IdentifyError::BackendUnavailable(_) => "BACKEND_UNAVAILABLE",
            IdentifyError::NoAttributesIdentified { .. } => "NO_ATTRIBUTES_IDENTIFIED",
            IdentifyError::UndefinedAccuracy => "UNDEFINED_ACCURACY",
            IdentifyError::Context(e) => e.code(),
        }
    }
}

/// Transport-level failure reported by a completion backend.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("{0}")]
pub struct BackendError(pub String);

/// Anything that can complete a chat-style prompt.
pub trait CompletionBackend: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifiedCause {
    pub attributes: Vec<ContextAttribute>,
    pub raw_completion: String,
    pub backend: String,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Strips list markers: "-", "*", "•", "1.", "2)".
fn strip_marker(line: &str) -> &str {
    let line = line.trim();
    if let Some(rest) = line.strip_prefix(['-', '*', '•']) {
        return rest.trim();
    }
    let digits = line.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits > 0 {
        let rest = &line[digits..];
        if let Some(rest) = rest.strip_prefix(['.', ')']) {
            return rest.trim();
        }
    }
    line
}

fn normalize(s: &str) -> String {
    fold_text(s).split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parses a completion into snapshot attributes. Lines are matched first on
/// their "Dimension/feature" key, then on the attribute semantic; anything
/// else is dropped with a warning.
pub fn parse_completion(completion: &str, snapshot: &ContextSnapshot) -> (Vec<ContextAttribute>, Vec<String>) {
    let mut found: Vec<ContextAttribute> = Vec::new();
    let mut warnings = Vec::new();
    for raw in completion.lines() {
        let line = strip_marker(raw);
        if line.is_empty() {
            continue;
        }
        let (key, value) = match line.split_once(':') {
            Some((k, v)) => (normalize(k), normalize(v)),
            None => (String::new(), normalize(line)),
        };
        let by_key = snapshot.attributes().iter().find(|a| {
            let k = normalize(&a.feature_key());
            let dotted = normalize(&format!("{}.{}", a.dimension_id, a.feature_id));
            key == k || key == dotted
        });
        let by_semantic = || {
            snapshot
                .attributes()
                .iter()
                .find(|a| normalize(&a.semantic) == value || normalize(&a.semantic) == normalize(line))
        };
        match by_key.or_else(by_semantic) {
            Some(a) => {
                if !found.contains(a) {
                    found.push(a.clone());
                }
            }
            None => warnings.push(format!("dropped unmatched line {raw:?}")),
        }
    }
    (found, warnings)
}

/// Sends the prompt to `backend` and parses the answer.
pub fn identify(
    bundle: &PromptBundle,
    backend: &dyn CompletionBackend,
    snapshot: &ContextSnapshot,
) -> Result<IdentifiedCause, IdentifyError> {
    let started = Instant::now();
    let completion = backend
        .complete(&bundle.messages())
        .map_err(|e| IdentifyError::BackendUnavailable(e.0))?;
    let latency_ms = started.elapsed().as_millis() as u64;
    let (attributes, warnings) = parse_completion(&completion, snapshot);
    if attributes.is_empty() {
        return Err(IdentifyError::NoAttributesIdentified { warnings });
    }
    Ok(IdentifiedCause { attributes, raw_completion: completion, backend: backend.name().to_string(), latency_ms, warnings })
}

/// Overlap of the user's validation choice with the prediction; accurate
/// when strictly above 75%.
pub fn overlap_accuracy(
    user_choice: &[ContextAttribute],
    predicted: &[ContextAttribute],
) -> Result<(f64, bool), IdentifyError> {
    let user: BTreeSet<(String, String, String)> = user_choice.iter().map(ContextAttribute::triple).collect();
    if user.is_empty() {
        return Err(IdentifyError::UndefinedAccuracy);
    }
    let pred: BTreeSet<(String, String, String)> = predicted.iter().map(ContextAttribute::triple).collect();
    let ratio = user.intersection(&pred).count() as f64 / user.len() as f64;
    Ok((ratio, ratio > ACCURACY_THRESHOLD))
}

/// What the engine calls to turn a prompt into a cause.
pub trait Identifier: Send + Sync {
    fn name(&self) -> &str;
    fn identify(&self, bundle: &PromptBundle, snapshot: &ContextSnapshot) -> Result<IdentifiedCause, IdentifyError>;
}

/// Identifier backed by a completion endpoint, retrying transport failures.
pub struct LlmIdentifier<B> {
    backend: B,
    retries: usize,
    backoff: Duration,
}

impl<B: CompletionBackend> LlmIdentifier<B> {
    pub fn new(backend: B) -> Self {
        LlmIdentifier { backend, retries: 2, backoff: Duration::from_millis(500) }
    }

    pub fn with_retry(mut self, retries: usize, backoff: Duration) -> Self {
        self.retries = retries;
        self.backoff = backoff;
        self
    }
}

impl<B: CompletionBackend> Identifier for LlmIdentifier<B> {
    fn name(&self) -> &str {
        self.backend.name()
    }

    fn identify(&self, bundle: &PromptBundle, snapshot: &ContextSnapshot) -> Result<IdentifiedCause, IdentifyError> {
        let mut attempt = 0;
        loop {
            match identify(bundle, &self.backend, snapshot) {
                Err(IdentifyError::BackendUnavailable(_)) if attempt < self.retries => {
                    attempt += 1;
                    std::thread::sleep(self.backoff * attempt as u32);
                }
                other => return other,
            }
        }
    }
}

pub struct MockIdentifier {
    lexicon: Lexicon,
    registry: Arc<Registry>,
}

impl MockIdentifier {
    pub fn new(lexicon: Lexicon, registry: Arc<Registry>) -> Self {
        MockIdentifier { lexicon, registry }
    }
}

impl Identifier for MockIdentifier {
    fn name(&self) -> &str {
        "mock"
    }

    fn identify(&self, bundle: &PromptBundle, snapshot: &ContextSnapshot) -> Result<IdentifiedCause, IdentifyError> {
        mock_identify(&bundle.reason, snapshot, &self.lexicon, &self.registry)
    }
}
