//! Chat request types and their OpenAI-compatible wire form.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::GatewayError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MediaType {
    #[serde(rename = "image/png")]
    Png,
    #[serde(rename = "image/jpeg")]
    Jpeg,
}

impl MediaType {
    pub fn as_str(self) -> &'static str {
        match self {
            MediaType::Png => "image/png",
            MediaType::Jpeg => "image/jpeg",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "image/png" => Some(MediaType::Png),
            "image/jpeg" | "image/jpg" => Some(MediaType::Jpeg),
            _ => None,
        }
    }

    /// Media type implied by a file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        match ext.as_str() {
            "png" => Some(MediaType::Png),
            "jpg" | "jpeg" => Some(MediaType::Jpeg),
            _ => None,
        }
    }

    /// Checks the leading magic bytes of an encoded image.
    pub fn matches_magic(self, bytes: &[u8]) -> bool {
        match self {
            MediaType::Png => bytes.starts_with(&[0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A]),
            MediaType::Jpeg => bytes.starts_with(&[0xFF, 0xD8, 0xFF]),
        }
    }
}

/// One piece of message content: text or an inline image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Part {
    Text(String),
    Image { bytes: Vec<u8>, media_type: MediaType },
}

impl Part {
    pub fn text(s: impl Into<String>) -> Self {
        Part::Text(s.into())
    }

    /// Reads an image file, taking the media type from its extension.
    pub fn image_file(path: &Path) -> std::io::Result<Self> {
        let media_type = MediaType::from_path(path).ok_or_else(|| {
            std::io::Error::new(
                std::io::ErrorKind::InvalidInput,
                format!("{}: not a .png/.jpg/.jpeg image", path.display()),
            )
        })?;
        let bytes = std::fs::read(path)?;
        if !media_type.matches_magic(&bytes) {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("{}: content is not {}", path.display(), media_type.as_str()),
            ));
        }
        Ok(Part::Image { bytes, media_type })
    }

    fn data_url(bytes: &[u8], media_type: MediaType) -> String {
        format!("data:{};base64,{}", media_type.as_str(), BASE64.encode(bytes))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub role: Role,
    pub parts: Vec<Part>,
}

impl Message {
    pub fn system(text: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            parts: vec![Part::text(text)],
        }
    }

    pub fn user(parts: Vec<Part>) -> Self {
        Self {
            role: Role::User,
            parts,
        }
    }

    /// Concatenated text parts, newline separated.
    pub fn text(&self) -> String {
        self.parts
            .iter()
            .filter_map(|p| match p {
                Part::Text(t) => Some(t.as_str()),
                Part::Image { .. } => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub endpoint_id: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Pipeline stage label, used for logging and mock matching.
    pub request_tag: String,
    /// When set, ask for this many top token log-probabilities per position.
    pub top_logprobs: Option<u8>,
}

impl ChatRequest {
    pub fn new(endpoint_id: impl Into<String>, request_tag: impl Into<String>, messages: Vec<Message>) -> Self {
        Self {
            endpoint_id: endpoint_id.into(),
            messages,
            temperature: 0.0,
            max_tokens: 1024,
            request_tag: request_tag.into(),
            top_logprobs: None,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    pub fn with_logprobs(mut self, top: u8) -> Self {
        self.top_logprobs = Some(top);
        self
    }

    /// All user-message text, joined with newlines.
    pub fn user_text(&self) -> String {
        self.messages
            .iter()
            .filter(|m| m.role == Role::User)
            .map(Message::text)
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let invalid = |m: &str| Err(GatewayError::InvalidRequest(m.to_string()));
        if !self.messages.iter().any(|m| m.role == Role::User) {
            return invalid("at least one user message is required");
        }
        if self.messages.iter().any(|m| m.parts.is_empty()) {
            return invalid("messages must carry at least one part");
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return invalid("temperature must be finite and >= 0");
        }
        if self.max_tokens == 0 {
            return invalid("max_tokens must be positive");
        }
        Ok(())
    }

    /// Serializes into an OpenAI chat-completions request body.
    pub fn to_wire(&self, model: &str) -> serde_json::Value {
        let messages = self
            .messages
            .iter()
            .map(|m| {
                let content = match m.parts.as_slice() {
                    [Part::Text(t)] => WireContent::Text(t.clone()),
                    parts => WireContent::Parts(
                        parts
                            .iter()
                            .map(|p| match p {
                                Part::Text(t) => WirePart::Text { text: t.clone() },
                                Part::Image { bytes, media_type } => WirePart::ImageUrl {
                                    image_url: WireImageUrl {
                                        url: Part::data_url(bytes, *media_type),
                                    },
                                },
                            })
                            .collect(),
                    ),
                };
                WireMessage { role: m.role, content }
            })
            .collect();
        let wire = WireRequest {
            model: model.to_string(),
            messages,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            logprobs: self.top_logprobs.map(|_| true),
            top_logprobs: self.top_logprobs,
        };
        serde_json::to_value(wire).expect("wire request is always serializable")
    }

    /// Parses a wire body back into a request. The wire form has no endpoint
    /// or tag, so both are supplied by the caller.
    pub fn from_wire(value: &serde_json::Value, endpoint_id: &str, request_tag: &str) -> Result<Self, GatewayError> {
        let wire: WireRequest = serde_json::from_value(value.clone())
            .map_err(|e| GatewayError::InvalidRequest(format!("wire request: {e}")))?;
        let mut messages = Vec::with_capacity(wire.messages.len());
        for m in wire.messages {
            let parts = match m.content {
                WireContent::Text(t) => vec![Part::Text(t)],
                WireContent::Parts(parts) => parts
                    .into_iter()
                    .map(|p| match p {
                        WirePart::Text { text } => Ok(Part::Text(text)),
                        WirePart::ImageUrl { image_url } => parse_data_url(&image_url.url),
                    })
                    .collect::<Result<_, _>>()?,
            };
            messages.push(Message { role: m.role, parts });
        }
        Ok(Self {
            endpoint_id: endpoint_id.to_string(),
            messages,
            temperature: wire.temperature,
            max_tokens: wire.max_tokens,
            request_tag: request_tag.to_string(),
            top_logprobs: wire.top_logprobs,
        })
    }
}

fn parse_data_url(url: &str) -> Result<Part, GatewayError> {
    let bad = || GatewayError::InvalidRequest(format!("unsupported image url `{:.40}`", url));
    let rest = url.strip_prefix("data:").ok_or_else(bad)?;
    let (media, data) = rest.split_once(";base64,").ok_or_else(bad)?;
    let media_type = MediaType::parse(media).ok_or_else(bad)?;
    let bytes = BASE64.decode(data).map_err(|_| bad())?;
    Ok(Part::Image { bytes, media_type })
}

#[derive(Serialize, Deserialize)]
struct WireRequest {
    model: String,
    messages: Vec<WireMessage>,
    temperature: f64,
    max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    logprobs: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    top_logprobs: Option<u8>,
}

#[derive(Serialize, Deserialize)]
struct WireMessage {
    role: Role,
    content: WireContent,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum WireContent {
    Text(String),
    Parts(Vec<WirePart>),
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum WirePart {
    Text { text: String },
    ImageUrl { image_url: WireImageUrl },
}

#[derive(Serialize, Deserialize)]
struct WireImageUrl {
    url: String,
}

/// Log-probability of one generated token plus its top alternatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
    #[serde(default)]
    pub top_logprobs: Vec<TopLogprob>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopLogprob {
    pub token: String,
    pub logprob: f64,
}

/// The first choice of a chat completion.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Completion {
    pub text: String,
    pub logprobs: Option<Vec<TokenLogprob>>,
}

impl Completion {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            logprobs: None,
        }
    }

    /// Log-probability of `token` at the first generated position, looking at
    /// the sampled token and its listed alternatives. Leading/trailing
    /// whitespace in token strings is ignored.
    pub fn first_token_logprob(&self, token: &str) -> Option<f64> {
        let first = self.logprobs.as_ref()?.first()?;
        if first.token.trim() == token {
            return Some(first.logprob);
        }
        first
            .top_logprobs
            .iter()
            .find(|t| t.token.trim() == token)
            .map(|t| t.logprob)
    }
}

#[derive(Deserialize)]
pub(crate) struct WireResponse {
    #[serde(default)]
    pub choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
pub(crate) struct WireChoice {
    pub message: WireResponseMessage,
    #[serde(default)]
    pub logprobs: Option<WireChoiceLogprobs>,
}

#[derive(Deserialize)]
pub(crate) struct WireResponseMessage {
    #[serde(default)]
    pub content: Option<String>,
}

#[derive(Deserialize)]
pub(crate) struct WireChoiceLogprobs {
    #[serde(default)]
    pub content: Option<Vec<TokenLogprob>>,
}

impl WireResponse {
    pub(crate) fn into_completion(self) -> Option<Completion> {
        let choice = self.choices.into_iter().next()?;
        Some(Completion {
            text: choice.message.content.unwrap_or_default(),
            logprobs: choice.logprobs.and_then(|l| l.content),
        })
    }
}
