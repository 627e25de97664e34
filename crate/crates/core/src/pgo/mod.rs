//! Prompt optimization against perturbed inputs.
//!
//! Each iteration perturbs a batch of training samples (sequentially for
//! `P1` guides, independently for `P2`), asks the model to describe what
//! changed, condenses those notes into a textual gradient, proposes and
//! paraphrases new prompts, and keeps whichever candidate has the lowest
//! loss on the perturbed validation sets. The incumbent always competes, so
//! the validation loss never increases.

mod run;
mod steps;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::BackendError;
use crate::perturb::{PerturbConfig, PerturbError, PerturbationCode};

pub use run::{
    optimize, CandidateRecord, FinalSelection, IterationRecord, OptimizationRun, Optimizer,
    RunManifest, RunStore,
};
pub use steps::{
    combined_mode, evaluate_prompt_loss, extract_differences, generate_gradient, mix_mode,
    paraphrase, propose_prompts, LossReport,
};

#[derive(Debug, Error)]
pub enum PgoError {
    #[error("sample {id}: every guide was skipped")]
    AllGuidesSkipped { id: String },
    #[error("sample {id}: no usable P2 perturbations")]
    NoUsableP2 { id: String },
    #[error("empty gradient material: {0}")]
    EmptyGradientMaterial(String),
    #[error("proposal collapse: no proposal differs from the incumbent prompt {incumbent}")]
    ProposalCollapse { incumbent: String },
    #[error("no validation samples for {0}")]
    MissingCode(PerturbationCode),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Perturb(PerturbError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed {path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error("run directory {0} is locked by another process")]
    Locked(String),
    #[error("cannot resume: {0}")]
    ResumeMismatch(String),
}

impl From<PerturbError> for PgoError {
    fn from(e: PerturbError) -> Self {
        match e {
            PerturbError::Backend(b) => PgoError::Backend(b),
            other => PgoError::Perturb(other),
        }
    }
}

impl PgoError {
    /// Backend failures abort the run with checkpoints intact; resuming
    /// later can succeed. Everything else would fail again.
    pub fn is_resumable(&self) -> bool {
        matches!(self, PgoError::Backend(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Initial,
    GradientProposed,
    Paraphrase,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: String,
    pub text: String,
    /// 0 for the initial prompt, otherwise one more than the prompt it was
    /// derived from.
    pub iteration: u32,
    pub parent: Option<String>,
    pub provenance: Provenance,
    pub gradient_id: Option<String>,
}

impl Prompt {
    pub fn initial(text: impl Into<String>) -> Self {
        Prompt {
            id: "p0".into(),
            text: text.into(),
            iteration: 0,
            parent: None,
            provenance: Provenance::Initial,
            gradient_id: None,
        }
    }
}

/// What the model said changed between an original and a perturbed input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DifferenceNote {
    pub id: String,
    pub source_id: String,
    pub original: String,
    pub perturbed: String,
    pub note: String,
}

/// Aggregated guidance distilled from a batch of difference notes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradientNote {
    pub id: String,
    pub iteration: u32,
    pub text: String,
    /// Ids of the difference notes it was built from.
    pub built_from: Vec<String>,
}

/// Meta-prompts. `{original}`, `{perturbed}`, `{prompt}`, `{notes}` and
/// `{gradient}` are substituted where they appear.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PgoTemplates {
    pub difference_system: String,
    pub difference_user: String,
    pub gradient_system: String,
    pub gradient_user: String,
    pub propose_system: String,
    pub paraphrase_system: String,
}

impl Default for PgoTemplates {
    fn default() -> Self {
        PgoTemplates {
            difference_system: "You compare two versions of a text. Describe precisely how the perturbed \
                                version differs from the original: which characters, words or structures \
                                changed and what kind of change it is. Answer in one or two sentences."
                .into(),
            difference_user: "Original: {original}\nPerturbed: {perturbed}".into(),
            gradient_system: "The notes below describe how task inputs were perturbed. Summarize them into \
                              concrete guidance on how the instruction should change so that a model \
                              following it still answers correctly when its input contains such \
                              perturbations. Answer in at most three sentences."
                .into(),
            gradient_user: "Instruction: {prompt}\n\nPerturbation notes:\n{notes}".into(),
            propose_system: "You improve instructions for a language model. Guidance:\n{gradient}\n\nRewrite \
                             the instruction you are given so that it follows this guidance and stays robust \
                             to the described perturbations. Reply with the new instruction only."
                .into(),
            paraphrase_system: "Rewrite the instruction you are given in different words while keeping its \
                                meaning. Reply with the rewritten instruction only."
                .into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PgoConfig {
    pub iterations: u32,
    /// Training samples perturbed per iteration for P1 runs.
    pub batch_p1: usize,
    /// Training samples perturbed per iteration for P2 runs.
    pub batch_p2: usize,
    /// Prompt proposals per iteration.
    pub proposals: usize,
    /// Paraphrases per proposal.
    pub paraphrases: usize,
    pub seed: u64,
    pub perturb: PerturbConfig,
    pub templates: PgoTemplates,
}

impl Default for PgoConfig {
    fn default() -> Self {
        PgoConfig {
            iterations: 5,
            batch_p1: 5,
            batch_p2: 3,
            proposals: 4,
            paraphrases: 2,
            seed: 0,
            perturb: PerturbConfig::default(),
            templates: PgoTemplates::default(),
        }
    }
}

impl PgoConfig {
    pub fn validate(&self) -> Result<(), PgoError> {
        self.perturb.validate()?;
        if self.iterations == 0 {
            return Err(PgoError::Invalid("iterations must be at least 1".into()));
        }
        if self.batch_p1 == 0 || self.batch_p2 == 0 {
            return Err(PgoError::Invalid("batch sizes must be positive".into()));
        }
        if self.proposals == 0 {
            return Err(PgoError::Invalid("proposals must be at least 1".into()));
        }
        Ok(())
    }
}
