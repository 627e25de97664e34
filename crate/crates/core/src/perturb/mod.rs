//! Perturbation taxonomy, similarity-gated adversarial perturbation and
//! benchmark construction.
//!
//! Nine perturbation types fall into two categories. `P1` types inject surface
//! noise and are gated by normalized Levenshtein similarity; `P2` types rewrite
//! structure while keeping meaning and are gated by embedding similarity.

mod benchmark;
mod engine;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::BackendError;
use crate::metrics::SimilarityVerdict;
use crate::tasks::{Gold, TaskKind};

pub use benchmark::{
    build_benchmark, similarity_report, FailedSample, PerturbedDataset, SimilarityReport,
    SimilarityRow,
};
pub use engine::{
    adversarial_select, gate, perturb_iterative, perturb_long_text, perturb_once, select_min,
    split_sentences, AttackContext, Selected, Sentences,
};
pub(crate) use engine::{attack_round, RoundOutcome};

#[derive(Debug, Error)]
pub enum PerturbError {
    #[error("unknown perturbation code {0:?} (valid codes: C1 C2 C3 W1 W2 W3 S1 S2 S3)")]
    UnknownCode(String),
    #[error("unperturbable sample {id} under {code}: {diagnostics}")]
    Unperturbable {
        id: String,
        code: PerturbationCode,
        diagnostics: String,
    },
    #[error("{code}: {failed} of {total} samples failed")]
    TooManyFailures {
        code: PerturbationCode,
        failed: usize,
        total: usize,
    },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PerturbationCode {
    C1,
    C2,
    C3,
    W1,
    W2,
    W3,
    S1,
    S2,
    S3,
}

impl PerturbationCode {
    pub const ALL: [PerturbationCode; 9] = [
        PerturbationCode::C1,
        PerturbationCode::C2,
        PerturbationCode::C3,
        PerturbationCode::W1,
        PerturbationCode::W2,
        PerturbationCode::W3,
        PerturbationCode::S1,
        PerturbationCode::S2,
        PerturbationCode::S3,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PerturbationCode::C1 => "C1",
            PerturbationCode::C2 => "C2",
            PerturbationCode::C3 => "C3",
            PerturbationCode::W1 => "W1",
            PerturbationCode::W2 => "W2",
            PerturbationCode::W3 => "W3",
            PerturbationCode::S1 => "S1",
            PerturbationCode::S2 => "S2",
            PerturbationCode::S3 => "S3",
        }
    }

    pub fn category(self) -> Category {
        use PerturbationCode::*;
        match self {
            C1 | C2 | C3 | S1 => Category::P1,
            W1 | W2 | W3 | S2 | S3 => Category::P2,
        }
    }

    pub fn description(self) -> &'static str {
        use PerturbationCode::*;
        match self {
            C1 => "Change words to have typos",
            C2 => "Change Letters",
            C3 => "Add extraneous characters",
            W1 => "Change word to synonyms",
            W2 => "Delete meaningless words",
            W3 => "Add neutral words",
            S1 => "Add meaningless handle",
            S2 => "Paraphrase the sentence",
            S3 => "Change the syntactic structure",
        }
    }

    fn default_guide(self) -> &'static str {
        use PerturbationCode::*;
        match self {
            C1 => "Rewrite the text so that a few words contain realistic typos (a dropped, doubled or swapped letter). Change nothing else. Return only the modified text.",
            C2 => "Change one or two individual letters inside a few words of the text, replacing them with other letters. Change nothing else. Return only the modified text.",
            C3 => "Insert a few extraneous characters (such as @, #, ~ or stray punctuation) into the text without removing anything. Return only the modified text.",
            W1 => "Replace a few words in the text with close synonyms so that the meaning stays the same. Return only the modified text.",
            W2 => "Delete a few words from the text that carry little meaning, such as fillers or redundant modifiers, keeping the meaning intact. Return only the modified text.",
            W3 => "Add a few neutral words to the text that do not change its meaning or sentiment. Return only the modified text.",
            S1 => "Add a meaningless handle, such as a random @username or tag, to the text. Keep the rest unchanged. Return only the modified text.",
            S2 => "Paraphrase the text so that it expresses the same meaning in different words. Return only the paraphrased text.",
            S3 => "Change the syntactic structure of the text (for example active to passive voice, or reordered clauses) while keeping its meaning. Return only the rewritten text.",
        }
    }
}

impl fmt::Display for PerturbationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PerturbationCode {
    type Err = PerturbError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PerturbationCode::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| PerturbError::UnknownCode(s.to_owned()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    /// Surface noise; Levenshtein-gated.
    P1,
    /// Meaning-preserving rewrites; semantically gated.
    P2,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::P1 => "P1",
            Category::P2 => "P2",
        })
    }
}

impl FromStr for Category {
    type Err = PerturbError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "P1" => Ok(Category::P1),
            "P2" => Ok(Category::P2),
            other => Err(PerturbError::Invalid(format!("unknown category {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub code: PerturbationCode,
    pub category: Category,
    /// Instruction sent to the generator: the fixed guide for this type.
    pub guide: String,
    pub description: String,
}

/// The default spec for a code given as text, e.g. `"C1"`.
pub fn guide_for(code: &str) -> Result<PerturbationSpec, PerturbError> {
    Ok(GuideBook::default().spec(code.parse()?))
}

/// Guide texts per code; defaults can be overridden from configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GuideBook {
    #[serde(default)]
    pub overrides: BTreeMap<PerturbationCode, String>,
}

impl GuideBook {
    pub fn spec(&self, code: PerturbationCode) -> PerturbationSpec {
        PerturbationSpec {
            code,
            category: code.category(),
            guide: self
                .overrides
                .get(&code)
                .cloned()
                .unwrap_or_else(|| code.default_guide().to_owned()),
            description: code.description().to_owned(),
        }
    }

    pub fn specs(&self, codes: &[PerturbationCode]) -> Vec<PerturbationSpec> {
        codes.iter().map(|&c| self.spec(c)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sensitivity {
    Sensitive,
    Robust,
}

/// Which perturbations degrade which task kinds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensitivityMatrix {
    cells: BTreeMap<TaskKind, BTreeMap<PerturbationCode, Sensitivity>>,
}

impl Default for SensitivityMatrix {
    /// Robust cells: summarization {C3, W2}, simplification {C1, C2, C3},
    /// classification {C3, S1}. Every other cell is sensitive.
    fn default() -> Self {
        use PerturbationCode::*;
        let robust = |kind: TaskKind| -> &'static [PerturbationCode] {
            match kind {
                TaskKind::Summarization => &[C3, W2],
                TaskKind::Simplification => &[C1, C2, C3],
                TaskKind::Classification => &[C3, S1],
            }
        };
        let cells = TaskKind::ALL
            .into_iter()
            .map(|kind| {
                let row = PerturbationCode::ALL
                    .into_iter()
                    .map(|code| {
                        let s = if robust(kind).contains(&code) {
                            Sensitivity::Robust
                        } else {
                            Sensitivity::Sensitive
                        };
                        (code, s)
                    })
                    .collect();
                (kind, row)
            })
            .collect();
        SensitivityMatrix { cells }
    }
}

impl SensitivityMatrix {
    pub fn get(&self, kind: TaskKind, code: PerturbationCode) -> Sensitivity {
        self.cells
            .get(&kind)
            .and_then(|row| row.get(&code))
            .copied()
            .unwrap_or(Sensitivity::Sensitive)
    }

    pub fn set(&mut self, kind: TaskKind, code: PerturbationCode, value: Sensitivity) {
        self.cells.entry(kind).or_default().insert(code, value);
    }

    pub fn is_sensitive(&self, kind: TaskKind, code: PerturbationCode) -> bool {
        self.get(kind, code) == Sensitivity::Sensitive
    }

    pub fn sensitive_codes(&self, kind: TaskKind) -> Vec<PerturbationCode> {
        PerturbationCode::ALL
            .into_iter()
            .filter(|&c| self.is_sensitive(kind, c))
            .collect()
    }

    /// Sensitive codes of one category, in taxonomy order.
    pub fn sensitive_in(&self, kind: TaskKind, category: Category) -> Vec<PerturbationCode> {
        self.sensitive_codes(kind)
            .into_iter()
            .filter(|c| c.category() == category)
            .collect()
    }

    /// Every configured task kind has all nine codes.
    pub fn is_complete(&self) -> bool {
        self.cells
            .values()
            .all(|row| row.len() == PerturbationCode::ALL.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbConfig {
    /// Minimum normalized Levenshtein similarity for P1 candidates.
    pub epsilon_p1: f64,
    /// Minimum semantic similarity for P2 candidates.
    pub epsilon_p2: f64,
    /// Threshold for whole-document similarity on long-text tasks (both categories).
    pub epsilon_long_text: f64,
    /// Candidates generated per round.
    pub candidates: usize,
    /// Rounds of iterative perturbation.
    pub rounds: usize,
    pub seed: u64,
    /// Build sub-datasets for robust-marked codes too.
    pub force_all: bool,
    /// A sub-dataset fails when more than this fraction of samples fail.
    pub max_failure_fraction: f64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig {
            epsilon_p1: 0.90,
            epsilon_p2: 0.80,
            epsilon_long_text: 0.98,
            candidates: 4,
            rounds: 3,
            seed: 0,
            force_all: false,
            max_failure_fraction: 0.5,
        }
    }
}

impl PerturbConfig {
    pub fn epsilon(&self, category: Category, long_text: bool) -> f64 {
        match (long_text, category) {
            (true, _) => self.epsilon_long_text,
            (false, Category::P1) => self.epsilon_p1,
            (false, Category::P2) => self.epsilon_p2,
        }
    }

    pub fn validate(&self) -> Result<(), PerturbError> {
        for (name, eps) in [
            ("epsilon_p1", self.epsilon_p1),
            ("epsilon_p2", self.epsilon_p2),
            ("epsilon_long_text", self.epsilon_long_text),
        ] {
            if !(eps > 0.0 && eps <= 1.0) {
                return Err(PerturbError::Invalid(format!(
                    "{name} = {eps} must lie in (0, 1]"
                )));
            }
        }
        if self.candidates == 0 || self.rounds == 0 {
            return Err(PerturbError::Invalid(
                "candidates and rounds must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.max_failure_fraction) {
            return Err(PerturbError::Invalid(
                "max_failure_fraction must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    /// 1-based round (or guide position in mix-mode).
    pub round: usize,
    pub code: PerturbationCode,
    pub candidate: String,
    pub similarity: f64,
    pub adversarial_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentence_index: Option<usize>,
}

/// A perturbed input with its lineage. Serializes as a dataset record
/// (`id`, `input`, `label`/`references`) plus lineage fields, so perturbed
/// files load as ordinary datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbedSample {
    #[serde(rename = "id")]
    pub source_id: String,
    #[serde(rename = "input")]
    pub perturbed: String,
    pub original: String,
    #[serde(flatten)]
    pub gold: Gold,
    pub applied_guides: Vec<PerturbationCode>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped_guides: Vec<PerturbationCode>,
    pub iterations: Vec<RoundTrace>,
    pub gate: SimilarityVerdict,
}

impl PerturbedSample {
    pub fn as_sample(&self) -> crate::tasks::Sample {
        crate::tasks::Sample {
            id: self.source_id.clone(),
            input: self.perturbed.clone(),
            gold: self.gold.clone(),
        }
    }
}
