//! Deterministic scripted backend for offline runs and tests.
//!
//! A script is an ordered list of rules. Each rule matches on the request
//! tag and a substring of the user text (`*` matches anything) and hands out
//! its responses in order. Substrings are also looked for in the raw bytes of
//! attached images, so synthetic page images can carry markers. The first
//! matching rule wins. A rule either cycles through its responses forever
//! (`repeat`) or fails with `script exhausted` once they run out.
//!
//! Scripts load from JSON:
//!
//! ```json
//! {
//!   "default": null,
//!   "rules": [
//!     {"tag": "verify_A", "contains": "*", "responses": ["Yes"], "repeat": true},
//!     {"tag": "rerank", "contains": "*", "repeat": true,
//!      "responses": [{"text": "True", "logprobs": {"True": -0.31, "False": -1.31}}]},
//!     {"tag": "*", "contains": "flaky", "responses": [{"status": 503}, {"timeout": true}, "OK"]}
//!   ]
//! }
//! ```

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Backend, ChatRequest, Completion, EndpointConfig, Part, TokenLogprob, TopLogprob, TransportError};

/// Wildcard for [`MockRule::tag`] and [`MockRule::contains`].
pub const MATCH_ANY: &str = "*";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawResponse", into = "RawResponse")]
pub enum MockResponse {
    Completion {
        text: String,
        /// First-position token log-probabilities, keyed by token.
        logprobs: Option<BTreeMap<String, f64>>,
    },
    Status {
        status: u16,
        body: String,
    },
    Timeout,
}

impl MockResponse {
    pub fn text(text: impl Into<String>) -> Self {
        MockResponse::Completion {
            text: text.into(),
            logprobs: None,
        }
    }

    pub fn status(status: u16, body: impl Into<String>) -> Self {
        MockResponse::Status {
            status,
            body: body.into(),
        }
    }

    /// A completion carrying first-token log-probabilities; the sampled token
    /// is the most likely one.
    pub fn logprobs(entries: &[(&str, f64)]) -> Self {
        let map: BTreeMap<String, f64> = entries.iter().map(|(t, l)| (t.to_string(), *l)).collect();
        let text = entries
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(t, _)| t.to_string())
            .unwrap_or_default();
        MockResponse::Completion {
            text,
            logprobs: Some(map),
        }
    }

    fn to_result(&self) -> Result<Completion, TransportError> {
        match self {
            MockResponse::Completion { text, logprobs } => Ok(Completion {
                text: text.clone(),
                logprobs: logprobs.as_ref().map(|map| {
                    let mut top: Vec<TopLogprob> = map
                        .iter()
                        .map(|(token, logprob)| TopLogprob {
                            token: token.clone(),
                            logprob: *logprob,
                        })
                        .collect();
                    top.sort_by(|a, b| b.logprob.total_cmp(&a.logprob).then(a.token.cmp(&b.token)));
                    let (token, logprob) = top
                        .first()
                        .map(|t| (t.token.clone(), t.logprob))
                        .unwrap_or_else(|| (text.clone(), 0.0));
                    vec![TokenLogprob {
                        token,
                        logprob,
                        top_logprobs: top,
                    }]
                }),
            }),
            MockResponse::Status { status, body } => Err(TransportError::Status {
                status: *status,
                body: body.clone(),
            }),
            MockResponse::Timeout => Err(TransportError::Timeout),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RawResponse {
    Text(String),
    Completion {
        text: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        logprobs: Option<BTreeMap<String, f64>>,
    },
    Status {
        status: u16,
        #[serde(default)]
        body: String,
    },
    Timeout {
        timeout: bool,
    },
}

impl TryFrom<RawResponse> for MockResponse {
    type Error = String;

    fn try_from(raw: RawResponse) -> Result<Self, Self::Error> {
        Ok(match raw {
            RawResponse::Text(text) => MockResponse::text(text),
            RawResponse::Completion { text, logprobs } => MockResponse::Completion { text, logprobs },
            RawResponse::Status { status, body } => MockResponse::Status { status, body },
            RawResponse::Timeout { timeout: true } => MockResponse::Timeout,
            RawResponse::Timeout { timeout: false } => return Err("`timeout: false` is not a response".into()),
        })
    }
}

impl From<MockResponse> for RawResponse {
    fn from(r: MockResponse) -> Self {
        match r {
            MockResponse::Completion { text, logprobs: None } => RawResponse::Text(text),
            MockResponse::Completion { text, logprobs } => RawResponse::Completion { text, logprobs },
            MockResponse::Status { status, body } => RawResponse::Status { status, body },
            MockResponse::Timeout => RawResponse::Timeout { timeout: true },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    pub tag: String,
    pub contains: String,
    /// Further substrings that must all be present as well.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub also_contains: Vec<String>,
    pub responses: Vec<MockResponse>,
    #[serde(default)]
    pub repeat: bool,
    /// Simulated latency per call.
    #[serde(default)]
    pub delay_ms: u64,
}

impl MockRule {
    /// A rule that fails with `script exhausted` after its last response.
    pub fn sequence(tag: &str, contains: &str, responses: Vec<MockResponse>) -> Self {
        Self {
            tag: tag.to_string(),
            contains: contains.to_string(),
            also_contains: Vec::new(),
            responses,
            repeat: false,
            delay_ms: 0,
        }
    }

    /// A rule that cycles through its responses forever.
    pub fn repeat(tag: &str, contains: &str, responses: Vec<MockResponse>) -> Self {
        Self {
            repeat: true,
            ..Self::sequence(tag, contains, responses)
        }
    }

    /// Requires `needle` as well as `contains`.
    pub fn and_contains(mut self, needle: &str) -> Self {
        self.also_contains.push(needle.to_string());
        self
    }

    fn matches(&self, request: &ChatRequest, user_text: &str) -> bool {
        let found = |needle: &str| {
            needle == MATCH_ANY
                || user_text.contains(needle)
                || images(request).any(|bytes| contains_bytes(bytes, needle.as_bytes()))
        };
        (self.tag == MATCH_ANY || self.tag == request.request_tag)
            && found(&self.contains)
            && self.also_contains.iter().all(|n| found(n))
    }
}

fn images(request: &ChatRequest) -> impl Iterator<Item = &[u8]> {
    request.messages.iter().flat_map(|m| &m.parts).filter_map(|p| match p {
        Part::Image { bytes, .. } => Some(bytes.as_slice()),
        Part::Text(_) => None,
    })
}

fn contains_bytes(haystack: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    /// Response for requests no rule matches; `None` makes the mock strict.
    #[serde(default)]
    pub default: Option<MockResponse>,
}

impl MockScript {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

/// Backend answering from a [`MockScript`]; records every request it sees.
#[derive(Debug)]
pub struct ScriptedMock {
    script: MockScript,
    cursors: Mutex<Vec<usize>>,
    log: Mutex<Vec<ChatRequest>>,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
}

impl ScriptedMock {
    pub fn new(script: MockScript) -> Self {
        let cursors = vec![0; script.rules.len()];
        Self {
            script,
            cursors: Mutex::new(cursors),
            log: Mutex::new(Vec::new()),
            in_flight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        }
    }

    /// Number of requests received so far.
    pub fn calls(&self) -> usize {
        self.log.lock().unwrap().len()
    }

    /// Requests received so far, in arrival order.
    pub fn requests(&self) -> Vec<ChatRequest> {
        self.log.lock().unwrap().clone()
    }

    /// Highest number of simultaneous in-flight calls observed.
    pub fn peak_in_flight(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    fn pick(&self, request: &ChatRequest) -> (Result<Completion, TransportError>, u64) {
        let user_text = request.user_text();
        let Some(idx) = self.script.rules.iter().position(|r| r.matches(request, &user_text)) else {
            return match &self.script.default {
                Some(resp) => (resp.to_result(), 0),
                None => (
                    Err(TransportError::Script(format!(
                        "unmatched request (tag `{}`)",
                        request.request_tag
                    ))),
                    0,
                ),
            };
        };
        let rule = &self.script.rules[idx];
        let mut cursors = self.cursors.lock().unwrap();
        let cursor = cursors[idx];
        let response = if rule.responses.is_empty() {
            None
        } else if rule.repeat {
            Some(&rule.responses[cursor % rule.responses.len()])
        } else {
            rule.responses.get(cursor)
        };
        cursors[idx] += 1;
        drop(cursors);
        match response {
            Some(r) => (r.to_result(), rule.delay_ms),
            None => (
                Err(TransportError::Script(format!(
                    "script exhausted (rule {idx}: tag `{}`, contains `{}`)",
                    rule.tag, rule.contains
                ))),
                rule.delay_ms,
            ),
        }
    }
}

impl Backend for ScriptedMock {
    fn send(&self, _endpoint: &EndpointConfig, request: &ChatRequest) -> Result<Completion, TransportError> {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        self.log.lock().unwrap().push(request.clone());
        let (result, delay) = self.pick(request);
        if delay > 0 {
            std::thread::sleep(Duration::from_millis(delay));
        }
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        result
    }
}
