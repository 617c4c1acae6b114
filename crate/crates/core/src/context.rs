//! What a pipeline stage needs to issue model calls: the gateway, the prompt
//! set, which endpoint serves each stage, and decoding settings.

use serde::{Deserialize, Serialize};

use crate::gateway::{ChatRequest, Gateway, Message, Part};
use crate::prompts::PromptSet;

/// Endpoint id per stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageEndpoints {
    pub positive_gen: String,
    pub negative_gen: String,
    pub verify: String,
    pub rephrase: String,
    #[serde(default)]
    pub rerank: Option<String>,
}

impl StageEndpoints {
    /// Every stage served by the same endpoint.
    pub fn single(endpoint_id: &str) -> Self {
        Self {
            positive_gen: endpoint_id.into(),
            negative_gen: endpoint_id.into(),
            verify: endpoint_id.into(),
            rephrase: endpoint_id.into(),
            rerank: Some(endpoint_id.into()),
        }
    }

    pub fn ids(&self) -> Vec<&str> {
        let mut ids = vec![
            self.positive_gen.as_str(),
            self.negative_gen.as_str(),
            self.verify.as_str(),
            self.rephrase.as_str(),
        ];
        ids.extend(self.rerank.as_deref());
        ids
    }
}

/// Sampling settings. Generation is mildly sampled for variety; verification
/// and reranking are greedy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Decoding {
    pub generation_temperature: f64,
    pub verification_temperature: f64,
    pub generation_max_tokens: u32,
    pub verification_max_tokens: u32,
}

impl Default for Decoding {
    fn default() -> Self {
        Self {
            generation_temperature: 0.7,
            verification_temperature: 0.0,
            generation_max_tokens: 1024,
            verification_max_tokens: 16,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StageContext<'a> {
    pub gateway: &'a Gateway,
    pub prompts: &'a PromptSet,
    pub endpoints: &'a StageEndpoints,
    pub decoding: &'a Decoding,
}

impl StageContext<'_> {
    pub(crate) fn generation_request(&self, endpoint: &str, tag: &str, parts: Vec<Part>) -> ChatRequest {
        ChatRequest::new(endpoint, tag, vec![Message::user(parts)])
            .with_temperature(self.decoding.generation_temperature)
            .with_max_tokens(self.decoding.generation_max_tokens)
    }

    pub(crate) fn greedy_request(&self, endpoint: &str, tag: &str, parts: Vec<Part>) -> ChatRequest {
        ChatRequest::new(endpoint, tag, vec![Message::user(parts)])
            .with_temperature(self.decoding.verification_temperature)
            .with_max_tokens(self.decoding.verification_max_tokens)
    }
}
