//! OpenAI-compatible chat completions and embeddings over HTTP.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{
    count_tokens, Backend, BackendError, CompletionRequest, CompletionResult, Embeddings,
    ResultSource,
};
use crate::metrics::l2_normalize;

pub const API_KEY_ENV: &str = "PERTFORGE_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LiveConfig {
    pub base_url: String,
    pub model: String,
    pub embedding_model: String,
    /// Read from `PERTFORGE_API_KEY` when unset.
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
}

impl Default for LiveConfig {
    fn default() -> Self {
        LiveConfig {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-3.5-turbo".into(),
            embedding_model: "text-embedding-3-small".into(),
            api_key: None,
            max_attempts: 3,
            backoff_base_ms: 1000,
            max_in_flight: 4,
            timeout_secs: 120,
        }
    }
}

/// Counting semaphore bounding concurrent requests.
struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

struct SlotGuard<'a>(&'a Slots);

impl Slots {
    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().expect("slots poisoned");
        while *free == 0 {
            free = self.cv.wait(free).expect("slots poisoned");
        }
        *free -= 1;
        SlotGuard(self)
    }
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("slots poisoned") += 1;
        self.0.cv.notify_one();
    }
}

pub struct LiveBackend {
    config: LiveConfig,
    api_key: String,
    agent: ureq::Agent,
    slots: Slots,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatBody<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    top_p: f64,
    max_tokens: u32,
}

#[derive(Serialize)]
struct EmbeddingBody<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct Usage {
    prompt_tokens: Option<u64>,
    completion_tokens: Option<u64>,
    total_tokens: Option<u64>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingItem>,
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    index: Option<usize>,
    embedding: Vec<f64>,
}

enum Attempt {
    Retry(String),
    Fatal(String),
}

impl LiveBackend {
    pub fn new(mut config: LiveConfig) -> Result<Self, BackendError> {
        let api_key = match config.api_key.take() {
            Some(key) => key,
            None => std::env::var(API_KEY_ENV)
                .map_err(|_| BackendError::MissingCredential(API_KEY_ENV))?,
        };
        config.base_url = config.base_url.trim_end_matches('/').to_owned();
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .new_agent();
        let slots = Slots {
            free: Mutex::new(config.max_in_flight.max(1)),
            cv: Condvar::new(),
        };
        Ok(LiveBackend {
            config,
            api_key,
            agent,
            slots,
        })
    }

    pub fn config(&self) -> &LiveConfig {
        &self.config
    }

    /// The exact JSON body sent for a chat request. Identical requests
    /// serialize to identical bytes.
    pub fn chat_body(&self, request: &CompletionRequest) -> String {
        let mut messages = Vec::with_capacity(2);
        if let Some(system) = &request.system_text {
            messages.push(ChatMessage {
                role: "system",
                content: system,
            });
        }
        messages.push(ChatMessage {
            role: "user",
            content: &request.user_text,
        });
        serde_json::to_string(&ChatBody {
            model: &self.config.model,
            messages,
            temperature: request.temperature,
            top_p: request.top_p,
            max_tokens: request.max_output_tokens,
        })
        .expect("chat body serializes")
    }

    fn post(&self, endpoint: &str, body: &str) -> Result<String, BackendError> {
        let _slot = self.slots.acquire();
        let attempts = self.config.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            match self.post_once(endpoint, body) {
                Ok(text) => return Ok(text),
                Err(Attempt::Fatal(cause)) => {
                    return Err(BackendError::Transport {
                        endpoint: endpoint.to_owned(),
                        attempts: attempt,
                        cause,
                    })
                }
                Err(Attempt::Retry(cause)) => {
                    log::warn!("{endpoint}: attempt {attempt}/{attempts} failed: {cause}");
                    last = cause;
                    if attempt < attempts {
                        let delay = self
                            .config
                            .backoff_base_ms
                            .saturating_mul(1 << (attempt - 1));
                        thread::sleep(Duration::from_millis(delay));
                    }
                }
            }
        }
        Err(BackendError::Transport {
            endpoint: endpoint.to_owned(),
            attempts,
            cause: last,
        })
    }

    fn post_once(&self, endpoint: &str, body: &str) -> Result<String, Attempt> {
        let response = self
            .agent
            .post(endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .header("Content-Type", "application/json")
            .send(body)
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .into_body()
            .read_to_string()
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        match status {
            200..=299 => Ok(text),
            429 | 500..=599 => Err(Attempt::Retry(format!("HTTP {status}"))),
            _ => Err(Attempt::Fatal(format!("HTTP {status}: {text}"))),
        }
    }
}

impl Backend for LiveBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        request.validate()?;
        let endpoint = format!("{}/chat/completions", self.config.base_url);
        let raw = self.post(&endpoint, &self.chat_body(request))?;
        let protocol = |cause: String| BackendError::Protocol {
            endpoint: endpoint.clone(),
            cause,
        };
        let parsed: ChatResponse =
            serde_json::from_str(&raw).map_err(|e| protocol(e.to_string()))?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| protocol("no choices in response".into()))?
            .message
            .content
            .unwrap_or_default();
        let prompt_text = format!(
            "{}{}",
            request.system_text.as_deref().unwrap_or(""),
            request.user_text
        );
        let usage = parsed.usage.as_ref();
        let reported =
            usage.is_some_and(|u| u.prompt_tokens.is_some() && u.completion_tokens.is_some());
        Ok(CompletionResult {
            prompt_tokens: count_tokens(&prompt_text, usage.and_then(|u| u.prompt_tokens)),
            completion_tokens: count_tokens(&text, usage.and_then(|u| u.completion_tokens)),
            text,
            source: ResultSource::Live,
            usage_reported: reported,
        })
    }

    fn embed_with_usage(&self, texts: &[String]) -> Result<Embeddings, BackendError> {
        if texts.is_empty() {
            return Err(BackendError::EmptyBatch);
        }
        let endpoint = format!("{}/embeddings", self.config.base_url);
        let body = serde_json::to_string(&EmbeddingBody {
            model: &self.config.embedding_model,
            input: texts,
        })
        .expect("embedding body serializes");
        let raw = self.post(&endpoint, &body)?;
        let parsed: EmbeddingResponse =
            serde_json::from_str(&raw).map_err(|e| BackendError::Protocol {
                endpoint: endpoint.clone(),
                cause: e.to_string(),
            })?;
        if parsed.data.len() != texts.len() {
            return Err(BackendError::Protocol {
                endpoint,
                cause: format!(
                    "expected {} embeddings, got {}",
                    texts.len(),
                    parsed.data.len()
                ),
            });
        }
        let mut items = parsed.data;
        items.sort_by_key(|item| item.index.unwrap_or(0));
        let vectors = items
            .into_iter()
            .map(|item| {
                let mut v = item.embedding;
                l2_normalize(&mut v);
                v
            })
            .collect();
        let reported = parsed
            .usage
            .as_ref()
            .and_then(|u| u.total_tokens.or(u.prompt_tokens));
        Ok(Embeddings {
            vectors,
            tokens: reported.unwrap_or_else(|| texts.iter().map(|t| count_tokens(t, None)).sum()),
            usage_reported: reported.is_some(),
        })
    }
}
