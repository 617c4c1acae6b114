use std::time::Duration;

use super::request::WireResponse;
use super::{Backend, ChatRequest, Completion, EndpointConfig, TransportError};

/// OpenAI-compatible `POST {base_url}/chat/completions` over blocking HTTP.
#[derive(Debug, Clone, Default)]
pub struct HttpBackend {
    _private: (),
}

impl HttpBackend {
    pub fn new() -> Self {
        Self::default()
    }

    fn agent(timeout: Duration) -> ureq::Agent {
        ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into()
    }
}

impl Backend for HttpBackend {
    fn send(&self, endpoint: &EndpointConfig, request: &ChatRequest) -> Result<Completion, TransportError> {
        let url = format!("{}/chat/completions", endpoint.base_url.trim_end_matches('/'));
        let body = serde_json::to_string(&request.to_wire(&endpoint.model_name))
            .map_err(|e| TransportError::Protocol(e.to_string()))?;
        let agent = Self::agent(Duration::from_millis(endpoint.timeout_ms));
        let mut call = agent.post(&url).header("Content-Type", "application/json");
        if let Some(key) = endpoint.api_key_env.as_deref().and_then(|var| std::env::var(var).ok()) {
            call = call.header("Authorization", format!("Bearer {key}"));
        }
        let mut response = call.send(body).map_err(map_ureq)?;
        let status = response.status().as_u16();
        let text = response.body_mut().read_to_string().map_err(map_ureq)?;
        if status >= 400 {
            return Err(TransportError::Status { status, body: text });
        }
        let parsed: WireResponse =
            serde_json::from_str(&text).map_err(|e| TransportError::Protocol(format!("response body: {e}")))?;
        parsed
            .into_completion()
            .ok_or_else(|| TransportError::Protocol("response has no choices".into()))
    }
}

fn map_ureq(err: ureq::Error) -> TransportError {
    match err {
        ureq::Error::Timeout(_) => TransportError::Timeout,
        ureq::Error::StatusCode(status) => TransportError::Status {
            status,
            body: String::new(),
        },
        ureq::Error::Io(e) if e.kind() == std::io::ErrorKind::TimedOut => TransportError::Timeout,
        other => TransportError::Connection(other.to_string()),
    }
}
