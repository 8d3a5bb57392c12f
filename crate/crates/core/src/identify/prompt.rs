use serde::{Deserialize, Serialize};

use crate::context::{ContextSnapshot, Registry};

use super::IdentifyError;

pub const GUIDANCE: &str = "You help a phone assistant learn when to offer a service. \
The user just used a service and said, in one sentence, why. \
Below are the user's reason, the service, and every context attribute the phone perceives right now, \
one per line as \"Dimension/feature: value\". \
Complete the answer with the context attributes that the reason refers to or implies. \
Copy each chosen line exactly as given, one per line, prefixed with \"- \". \
Choose only from the listed attributes and do not explain.";

pub const EXAMPLE_INPUT: &str = "Reason: \"it's raining on my way to work\"\n\
Service: \"show transit card\"\n\
Context attributes:\n\
Time/day_of_week: Tuesday\n\
Time/time_period: early-morning\n\
Weather/weather_type: rain\n\
Weather/temperature: 12 degrees Celsius\n\
Location/location_tag: home\n\
Activities/activity: walking";

pub const EXAMPLE_COMPLETION: &str = "- Time/time_period: early-morning\n\
- Weather/weather_type: rain\n\
- Activities/activity: walking";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        ChatMessage { role, content: content.into() }
    }
}

/// One-shot completion example: an input block and the expected answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatExample {
    pub input: String,
    pub completion: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub guidance: String,
    pub format_example: FormatExample,
    pub reason: String,
    pub service_semantic: String,
    pub attribute_lines: Vec<String>,
}

fn quoted(s: &str) -> String {
    serde_json::to_string(s).expect("strings serialize")
}

fn one_line(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\n', "\\n").replace('\r', "\\r")
}

impl PromptBundle {
    /// The current-request block: quoted reason and service, then attributes.
    pub fn input_block(&self) -> String {
        let mut s = format!(
            "Reason: {}\nService: {}\nContext attributes:",
            quoted(&self.reason),
            quoted(&self.service_semantic)
        );
        for line in &self.attribute_lines {
            s.push('\n');
            s.push_str(line);
        }
        s
    }

    /// Dialogue-form prompt: guidance, the worked example, then the request.
    pub fn messages(&self) -> Vec<ChatMessage> {
        vec![
            ChatMessage::new(Role::System, &self.guidance),
            ChatMessage::new(Role::User, &self.format_example.input),
            ChatMessage::new(Role::Assistant, &self.format_example.completion),
            ChatMessage::new(Role::User, self.input_block()),
        ]
    }

    /// Plain-text rendering for completion-only backends and logs.
    pub fn render(&self) -> String {
        format!(
            "{}\n\n{}\n{}\n\n{}\n",
            self.guidance,
            self.format_example.input,
            self.format_example.completion,
            self.input_block()
        )
    }
}

/// Builds the prompt for one reason request. Attribute lines follow the
/// canonical order so equal snapshots always give equal prompts.
pub fn build_prompt(
    reason: &str,
    service_semantic: &str,
    snapshot: &ContextSnapshot,
    registry: &Registry,
) -> Result<PromptBundle, IdentifyError> {
    let reason = reason.trim();
    if reason.is_empty() {
        return Err(IdentifyError::EmptyReason);
    }
    if snapshot.is_empty() {
        return Err(IdentifyError::EmptySnapshot);
    }
    let mut attrs = snapshot.attributes().to_vec();
    registry.sort_canonical(&mut attrs)?;
    Ok(PromptBundle {
        guidance: GUIDANCE.to_string(),
        format_example: FormatExample { input: EXAMPLE_INPUT.to_string(), completion: EXAMPLE_COMPLETION.to_string() },
        reason: reason.to_string(),
        service_semantic: service_semantic.to_string(),
        attribute_lines: attrs
            .iter()
            .map(|a| format!("{}/{}: {}", a.dimension_id, a.feature_id, one_line(&a.semantic)))
            .collect(),
    })
}
