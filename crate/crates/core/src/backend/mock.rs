//! Deterministic scriptable backend for offline runs and tests.
//!
//! A script is an ordered list of rules. The first rule whose filters all
//! match the request produces the response. Randomized actions draw from a
//! ChaCha stream seeded by the request seed and the rule index, so the
//! output is a pure function of `(script, request)`.
//!
//! ```json
//! {
//!   "version": 1,
//!   "rules": [
//!     { "kind": "perturb", "label": "C3", "action": { "op": "append", "suffix": "@@" } },
//!     { "kind": "task", "user_regex": "good", "action": { "op": "template", "text": "positive" } }
//!   ],
//!   "fallback": { "op": "echo" }
//! }
//! ```

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{
    count_tokens, derive_seed, Backend, BackendError, CompletionRequest, CompletionResult,
    Embeddings, RequestKind, ResultSource,
};
use crate::metrics::tf_embed;

pub const MOCK_SCRIPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    pub version: u32,
    #[serde(default)]
    pub rules: Vec<MockRule>,
    /// Used when no rule matches; without it an unmatched request is an error.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<MockAction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<RequestKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_regex: Option<String>,
    /// Capture groups are available to templates as `{1}`..`{9}`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_regex: Option<String>,
    pub action: MockAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookupEntry {
    pub contains: String,
    pub respond: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum MockAction {
    Echo,
    Empty,
    Uppercase,
    /// Placeholders: `{user}`, `{system}`, `{label}`, `{1}`..`{9}`.
    Template {
        text: String,
    },
    Append {
        suffix: String,
    },
    Prepend {
        prefix: String,
    },
    /// Regex replace-all over the user text; `with` accepts `$1`-style groups.
    Replace {
        pattern: String,
        with: String,
    },
    /// Seeded character edits (swap, drop, double, substitute) on letters.
    Typo {
        edits: u32,
    },
    /// Seeded uniform pick of one sub-action.
    Choose {
        options: Vec<MockAction>,
    },
    /// First entry whose `contains` occurs in the lowercased user text.
    Lookup {
        entries: Vec<LookupEntry>,
        default: String,
    },
    /// Applies each step to the previous step's output.
    Chain {
        steps: Vec<MockAction>,
    },
    Fail {
        message: String,
    },
}

struct CompiledRule {
    rule: MockRule,
    system: Option<Regex>,
    user: Option<Regex>,
}

pub struct MockBackend {
    script: MockScript,
    rules: Vec<CompiledRule>,
}

impl MockScript {
    pub fn from_json(text: &str) -> Result<Self, BackendError> {
        serde_json::from_str(text).map_err(|e| BackendError::Script(e.to_string()))
    }
}

fn compile(pattern: &Option<String>) -> Result<Option<Regex>, BackendError> {
    pattern
        .as_deref()
        .map(|p| Regex::new(p).map_err(|e| BackendError::Script(format!("bad regex {p:?}: {e}"))))
        .transpose()
}

fn check_action(action: &MockAction) -> Result<(), BackendError> {
    match action {
        MockAction::Replace { pattern, .. } => compile(&Some(pattern.clone())).map(|_| ()),
        MockAction::Choose { options } if options.is_empty() => Err(BackendError::Script(
            "choose needs at least one option".into(),
        )),
        MockAction::Choose { options } => options.iter().try_for_each(check_action),
        MockAction::Chain { steps } => steps.iter().try_for_each(check_action),
        _ => Ok(()),
    }
}

impl MockBackend {
    pub fn new(script: MockScript) -> Result<Self, BackendError> {
        if script.version != MOCK_SCRIPT_VERSION {
            return Err(BackendError::Script(format!(
                "unsupported script version {} (expected {MOCK_SCRIPT_VERSION})",
                script.version
            )));
        }
        let rules = script
            .rules
            .iter()
            .map(|rule| {
                check_action(&rule.action)?;
                Ok(CompiledRule {
                    system: compile(&rule.system_regex)?,
                    user: compile(&rule.user_regex)?,
                    rule: rule.clone(),
                })
            })
            .collect::<Result<Vec<_>, BackendError>>()?;
        if let Some(fallback) = &script.fallback {
            check_action(fallback)?;
        }
        Ok(MockBackend { script, rules })
    }

    pub fn from_json(text: &str) -> Result<Self, BackendError> {
        Self::new(MockScript::from_json(text)?)
    }

    pub fn from_path(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Script(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// A script with only a fallback action.
    pub fn fixed(action: MockAction) -> Self {
        Self::new(MockScript {
            version: MOCK_SCRIPT_VERSION,
            rules: Vec::new(),
            fallback: Some(action),
        })
        .expect("fixed mock is valid")
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }

    fn respond(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        let system = request.system_text.as_deref().unwrap_or("");
        for (index, compiled) in self.rules.iter().enumerate() {
            let rule = &compiled.rule;
            if rule.kind.is_some_and(|k| k != request.kind) {
                continue;
            }
            if rule.label.is_some() && rule.label != request.label {
                continue;
            }
            if compiled
                .system
                .as_ref()
                .is_some_and(|re| !re.is_match(system))
            {
                continue;
            }
            let captures: Vec<String> = match &compiled.user {
                Some(re) => match re.captures(&request.user_text) {
                    Some(caps) => caps
                        .iter()
                        .map(|m| m.map_or_else(String::new, |m| m.as_str().to_owned()))
                        .collect(),
                    None => continue,
                },
                None => Vec::new(),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                request.seed.unwrap_or(0),
                &[&index.to_string()],
            ));
            let ctx = Context {
                request,
                captures: &captures,
            };
            return apply(&rule.action, &request.user_text, &ctx, &mut rng);
        }
        match &self.script.fallback {
            Some(action) => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    request.seed.unwrap_or(0),
                    &["fallback"],
                ));
                let ctx = Context {
                    request,
                    captures: &[],
                };
                apply(action, &request.user_text, &ctx, &mut rng)
            }
            None => Err(BackendError::Script(format!(
                "no rule matches request kind={} label={:?}",
                request.kind, request.label
            ))),
        }
    }
}

struct Context<'a> {
    request: &'a CompletionRequest,
    captures: &'a [String],
}

fn apply(
    action: &MockAction,
    input: &str,
    ctx: &Context<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<String, BackendError> {
    Ok(match action {
        MockAction::Echo => input.to_owned(),
        MockAction::Empty => String::new(),
        MockAction::Uppercase => input.to_uppercase(),
        MockAction::Template { text } => render(text, input, ctx),
        MockAction::Append { suffix } => format!("{input}{}", render(suffix, input, ctx)),
        MockAction::Prepend { prefix } => format!("{}{input}", render(prefix, input, ctx)),
        MockAction::Replace { pattern, with } => {
            let re = Regex::new(pattern).map_err(|e| BackendError::Script(e.to_string()))?;
            re.replace_all(input, with.as_str()).into_owned()
        }
        MockAction::Typo { edits } => typo(input, *edits, rng),
        MockAction::Choose { options } => {
            let pick = rng.random_range(0..options.len());
            apply(&options[pick], input, ctx, rng)?
        }
        MockAction::Lookup { entries, default } => {
            let lowered = input.to_lowercase();
            entries
                .iter()
                .find(|e| lowered.contains(&e.contains.to_lowercase()))
                .map_or_else(|| default.clone(), |e| e.respond.clone())
        }
        MockAction::Chain { steps } => {
            let mut text = input.to_owned();
            for step in steps {
                text = apply(step, &text, ctx, rng)?;
            }
            text
        }
        MockAction::Fail { message } => {
            return Err(BackendError::Transport {
                endpoint: "mock".into(),
                attempts: 1,
                cause: message.clone(),
            })
        }
    })
}

fn render(template: &str, input: &str, ctx: &Context<'_>) -> String {
    let mut out = template
        .replace("{user}", input)
        .replace("{system}", ctx.request.system_text.as_deref().unwrap_or(""))
        .replace("{label}", ctx.request.label.as_deref().unwrap_or(""));
    for (i, cap) in ctx.captures.iter().enumerate().skip(1).take(9) {
        out = out.replace(&format!("{{{i}}}"), cap);
    }
    out
}

fn typo(input: &str, edits: u32, rng: &mut ChaCha8Rng) -> String {
    let mut chars: Vec<char> = input.chars().collect();
    for _ in 0..edits {
        let letters: Vec<usize> = chars
            .iter()
            .enumerate()
            .filter(|(_, c)| c.is_alphabetic())
            .map(|(i, _)| i)
            .collect();
        if letters.is_empty() {
            break;
        }
        let at = letters[rng.random_range(0..letters.len())];
        match rng.random_range(0..4u8) {
            0 if at + 1 < chars.len() => chars.swap(at, at + 1),
            1 if chars.len() > 1 => {
                chars.remove(at);
            }
            2 => chars.insert(at, chars[at]),
            _ => chars[at] = char::from(b'a' + rng.random_range(0..26u8)),
        }
    }
    chars.into_iter().collect()
}

impl Backend for MockBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        request.validate()?;
        let text = self.respond(request)?;
        Ok(CompletionResult {
            prompt_tokens: (request.input_text_len() as u64).div_ceil(4),
            completion_tokens: count_tokens(&text, None),
            text,
            source: ResultSource::Mock,
            usage_reported: false,
        })
    }

    fn embed_with_usage(&self, texts: &[String]) -> Result<Embeddings, BackendError> {
        if texts.is_empty() {
            return Err(BackendError::EmptyBatch);
        }
        Ok(Embeddings {
            vectors: tf_embed(texts),
            tokens: texts.iter().map(|t| count_tokens(t, None)).sum(),
            usage_reported: false,
        })
    }
}
