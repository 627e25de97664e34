//! Token accounting split by phase and iteration.

use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, CompletionRequest, CompletionResult, Embeddings, RequestKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Perturbation phase (A).
    Perturb,
    /// Optimization phase (O).
    Optimize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenSource {
    Reported,
    Heuristic,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CallRecord {
    pub phase: Phase,
    pub iteration: u32,
    pub kind: RequestKind,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub source: TokenSource,
}

impl CallRecord {
    pub fn tokens(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

/// Shared, append-only call log. Safe to record into from many workers.
#[derive(Debug, Default)]
pub struct CostLedger {
    calls: Mutex<Vec<CallRecord>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationCost {
    pub perturb: u64,
    pub optimize: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub iterations: BTreeMap<u32, IterationCost>,
    pub perturb_total: u64,
    pub optimize_total: u64,
    pub total: u64,
    pub reported_tokens: u64,
    pub heuristic_tokens: u64,
    pub calls: usize,
}

impl LedgerSummary {
    /// `A = 0.0064M, O = 0.0194M, total = Σ(A_i + O_i) = 0.0258M`
    pub fn report_line(&self) -> String {
        format!(
            "A = {}, O = {}, total = Σ(A_i + O_i) = {}",
            format_millions(self.perturb_total),
            format_millions(self.optimize_total),
            format_millions(self.total)
        )
    }
}

/// Tokens in millions with four decimals, e.g. `0.0258M`.
pub fn format_millions(tokens: u64) -> String {
    format!("{:.4}M", tokens as f64 / 1_000_000.0)
}

#[derive(Serialize, Deserialize)]
struct LedgerFile {
    summary: LedgerSummary,
    calls: Vec<CallRecord>,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_calls(calls: Vec<CallRecord>) -> Self {
        CostLedger {
            calls: Mutex::new(calls),
        }
    }

    pub fn record(&self, call: CallRecord) {
        self.calls.lock().expect("ledger poisoned").push(call);
    }

    /// Records in a canonical order, independent of completion order.
    pub fn calls(&self) -> Vec<CallRecord> {
        let mut calls = self.calls.lock().expect("ledger poisoned").clone();
        calls.sort();
        calls
    }

    pub fn replace(&self, calls: Vec<CallRecord>) {
        *self.calls.lock().expect("ledger poisoned") = calls;
    }

    /// Drops every call recorded for iterations after `iteration`.
    pub fn truncate_after(&self, iteration: u32) {
        self.calls
            .lock()
            .expect("ledger poisoned")
            .retain(|c| c.iteration <= iteration);
    }

    pub fn total(&self) -> u64 {
        self.calls
            .lock()
            .expect("ledger poisoned")
            .iter()
            .map(CallRecord::tokens)
            .sum()
    }

    pub fn summary(&self) -> LedgerSummary {
        let calls = self.calls.lock().expect("ledger poisoned");
        let mut iterations: BTreeMap<u32, IterationCost> = BTreeMap::new();
        let (mut reported, mut heuristic) = (0, 0);
        for c in calls.iter() {
            let entry = iterations.entry(c.iteration).or_default();
            match c.phase {
                Phase::Perturb => entry.perturb += c.tokens(),
                Phase::Optimize => entry.optimize += c.tokens(),
            }
            match c.source {
                TokenSource::Reported => reported += c.tokens(),
                TokenSource::Heuristic => heuristic += c.tokens(),
            }
        }
        let perturb_total = iterations.values().map(|i| i.perturb).sum();
        let optimize_total = iterations.values().map(|i| i.optimize).sum();
        LedgerSummary {
            total: iterations.values().map(|i| i.perturb + i.optimize).sum(),
            iterations,
            perturb_total,
            optimize_total,
            reported_tokens: reported,
            heuristic_tokens: heuristic,
            calls: calls.len(),
        }
    }

    pub fn to_json(&self) -> String {
        let file = LedgerFile {
            summary: self.summary(),
            calls: self.calls(),
        };
        serde_json::to_string_pretty(&file).expect("ledger serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let file: LedgerFile = serde_json::from_str(text)?;
        Ok(Self::from_calls(file.calls))
    }

    pub fn meter<'a>(
        &'a self,
        backend: &'a dyn Backend,
        phase: Phase,
        iteration: u32,
    ) -> MeteredBackend<'a> {
        MeteredBackend {
            inner: backend,
            ledger: self,
            phase,
            iteration,
        }
    }
}

/// A backend view that records every call into a ledger under a fixed phase
/// and iteration.
pub struct MeteredBackend<'a> {
    inner: &'a dyn Backend,
    ledger: &'a CostLedger,
    phase: Phase,
    iteration: u32,
}

impl MeteredBackend<'_> {
    pub fn with_phase(&self, phase: Phase) -> MeteredBackend<'_> {
        MeteredBackend {
            inner: self.inner,
            ledger: self.ledger,
            phase,
            iteration: self.iteration,
        }
    }
}

impl Backend for MeteredBackend<'_> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        let result = self.inner.complete(request)?;
        self.ledger.record(CallRecord {
            phase: self.phase,
            iteration: self.iteration,
            kind: request.kind,
            prompt_tokens: result.prompt_tokens,
            completion_tokens: result.completion_tokens,
            source: if result.usage_reported {
                TokenSource::Reported
            } else {
                TokenSource::Heuristic
            },
        });
        Ok(result)
    }

    fn embed_with_usage(&self, texts: &[String]) -> Result<Embeddings, BackendError> {
        let result = self.inner.embed_with_usage(texts)?;
        self.ledger.record(CallRecord {
            phase: self.phase,
            iteration: self.iteration,
            kind: RequestKind::Other,
            prompt_tokens: result.tokens,
            completion_tokens: 0,
            source: if result.usage_reported {
                TokenSource::Reported
            } else {
                TokenSource::Heuristic
            },
        });
        Ok(result)
    }
}
