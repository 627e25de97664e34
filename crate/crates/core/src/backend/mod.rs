//! Model access: one trait over a live OpenAI-compatible gateway and a
//! deterministic scriptable mock, plus token accounting.

mod ledger;
mod live;
mod mock;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ledger::{
    format_millions, CallRecord, CostLedger, LedgerSummary, MeteredBackend, Phase, TokenSource,
};
pub use live::{LiveBackend, LiveConfig, API_KEY_ENV};
pub use mock::{MockAction, MockBackend, MockRule, MockScript, MOCK_SCRIPT_VERSION};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport error: {endpoint} failed after {attempts} attempt(s): {cause}")]
    Transport {
        endpoint: String,
        attempts: u32,
        cause: String,
    },
    #[error("protocol error from {endpoint}: {cause}")]
    Protocol { endpoint: String, cause: String },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("mock script: {0}")]
    Script(String),
    #[error("missing credential: environment variable {0} is not set")]
    MissingCredential(&'static str),
}

/// What a request is for. The live backend ignores it; mock rules match on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    Perturb,
    Difference,
    Gradient,
    Propose,
    Paraphrase,
    Task,
    Other,
}

impl fmt::Display for RequestKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RequestKind::Perturb => "perturb",
            RequestKind::Difference => "difference",
            RequestKind::Gradient => "gradient",
            RequestKind::Propose => "propose",
            RequestKind::Paraphrase => "paraphrase",
            RequestKind::Task => "task",
            RequestKind::Other => "other",
        };
        f.write_str(s)
    }
}

/// Sampling settings for generation steps (perturbing, proposing, paraphrasing).
pub const GENERATION_TEMPERATURE: f64 = 1.0;
pub const GENERATION_TOP_P: f64 = 0.95;
/// Sampling settings for scoring: greedy and fixed.
pub const SCORING_TEMPERATURE: f64 = 0.0;
pub const SCORING_TOP_P: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub kind: RequestKind,
    /// Free-form tag, e.g. the perturbation code for `Perturb` requests.
    pub label: Option<String>,
    pub system_text: Option<String>,
    pub user_text: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_output_tokens: u32,
    /// Only consulted by the mock backend.
    pub seed: Option<u64>,
}

impl CompletionRequest {
    pub fn new(
        kind: RequestKind,
        system_text: Option<String>,
        user_text: impl Into<String>,
    ) -> Self {
        CompletionRequest {
            kind,
            label: None,
            system_text,
            user_text: user_text.into(),
            temperature: GENERATION_TEMPERATURE,
            top_p: GENERATION_TOP_P,
            max_output_tokens: 512,
            seed: None,
        }
    }

    pub fn scoring(mut self) -> Self {
        self.temperature = SCORING_TEMPERATURE;
        self.top_p = SCORING_TOP_P;
        self
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature {} < 0",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(BackendError::InvalidRequest(format!(
                "top_p {} outside (0, 1]",
                self.top_p
            )));
        }
        if self.max_output_tokens == 0 {
            return Err(BackendError::InvalidRequest(
                "max_output_tokens must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Characters fed to the model (system + user).
    pub fn input_text_len(&self) -> usize {
        self.system_text.as_deref().map_or(0, |s| s.chars().count())
            + self.user_text.chars().count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResultSource {
    Live,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub source: ResultSource,
    /// True when the counts came from the server rather than the heuristic.
    pub usage_reported: bool,
}

pub struct Embeddings {
    pub vectors: Vec<Vec<f64>>,
    pub tokens: u64,
    pub usage_reported: bool,
}

pub trait Backend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError>;

    /// One L2-normalized vector per input text.
    fn embed_with_usage(&self, texts: &[String]) -> Result<Embeddings, BackendError>;

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        self.embed_with_usage(texts).map(|e| e.vectors)
    }
}

/// Reported usage wins; otherwise `ceil(chars / 4)`.
pub fn count_tokens(text: &str, usage: Option<u64>) -> u64 {
    match usage {
        Some(reported) => reported,
        None => (text.chars().count() as u64).div_ceil(4),
    }
}

/// Stable 64-bit FNV-1a over a sequence of parts, used to derive per-call seeds.
pub fn derive_seed(base: u64, parts: &[&str]) -> u64 {
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ base.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for part in parts {
        for b in part.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(PRIME);
        }
        h ^= 0xff;
        h = h.wrapping_mul(PRIME);
    }
    h
}
