//! Deterministic offline identifier: token overlap plus a small lexicon.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::context::{ContextAttribute, ContextSnapshot, Registry};

use super::{IdentifiedCause, IdentifyError};

pub const DEFAULT_LEXICON_JSON: &str = include_str!("../../data/lexicon.json");

/// Maximum number of attributes the mock selects.
pub const MOCK_CAP: usize = 4;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    /// Reason word to "Dimension/feature" keys.
    pub entries: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub stopwords: BTreeSet<String>,
}

impl Lexicon {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn default_lexicon() -> Self {
        Lexicon::from_json(DEFAULT_LEXICON_JSON).expect("shipped lexicon is valid")
    }
}

pub fn tokenize(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn attribute_tokens(attr: &ContextAttribute) -> BTreeSet<String> {
    let mut t = tokenize(&attr.semantic);
    t.extend(tokenize(&attr.feature_id));
    t.extend(tokenize(&attr.dimension_id));
    t
}

/// Score of one attribute against reason tokens (stopwords already removed).
pub fn score_attribute(reason_tokens: &BTreeSet<String>, attr: &ContextAttribute, lexicon: &Lexicon) -> usize {
    let overlap = attribute_tokens(attr).intersection(reason_tokens).count();
    let key = attr.feature_key().to_lowercase();
    let lexical = reason_tokens
        .iter()
        .filter(|w| lexicon.entries.get(*w).is_some_and(|ks| ks.iter().any(|k| k.to_lowercase() == key)))
        .count();
    overlap + lexical
}

pub fn mock_identify(
    reason: &str,
    snapshot: &ContextSnapshot,
    lexicon: &Lexicon,
    registry: &Registry,
) -> Result<IdentifiedCause, IdentifyError> {
    if reason.trim().is_empty() {
        return Err(IdentifyError::EmptyReason);
    }
    let tokens: BTreeSet<String> = tokenize(reason).into_iter().filter(|t| !lexicon.stopwords.contains(t)).collect();
    let mut scored: Vec<(usize, ContextAttribute)> = snapshot
        .attributes()
        .iter()
        .map(|a| (score_attribute(&tokens, a, lexicon), a.clone()))
        .filter(|(s, _)| *s >= 1)
        .collect();
    if scored.is_empty() {
        return Err(IdentifyError::NoAttributesIdentified { warnings: vec![format!("no attribute relates to {reason:?}")] });
    }
    for (_, a) in &scored {
        registry.key(a)?;
    }
    scored.sort_by(|(sa, a), (sb, b)| sb.cmp(sa).then_with(|| registry.canonical_order(a, b).expect("resolved above")));
    scored.truncate(MOCK_CAP);
    let mut attributes: Vec<ContextAttribute> = scored.into_iter().map(|(_, a)| a).collect();
    registry.sort_canonical(&mut attributes)?;
    let raw_completion = attributes
        .iter()
        .map(|a| format!("- {}/{}: {}", a.dimension_id, a.feature_id, a.semantic))
        .collect::<Vec<_>>()
        .join("\n");
    Ok(IdentifiedCause { attributes, raw_completion, backend: "mock".into(), latency_ms: 0, warnings: Vec::new() })
}
