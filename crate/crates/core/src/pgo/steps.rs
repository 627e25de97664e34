use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DifferenceNote, GradientNote, PgoError, PgoTemplates, Prompt, Provenance};
use crate::backend::{derive_seed, Backend, CompletionRequest, RequestKind};
use crate::perturb::{
    attack_round, split_sentences, AttackContext, Category, PerturbationCode, PerturbationSpec,
    PerturbedSample, RoundOutcome, RoundTrace,
};
use crate::tasks::{evaluate_output, Sample, TaskSpec};

fn fill(template: &str, pairs: &[(&str, &str)]) -> String {
    pairs.iter().fold(template.to_owned(), |acc, (key, value)| {
        acc.replace(&format!("{{{key}}}"), value)
    })
}

fn pick_sentence<R: Rng + ?Sized>(
    ctx: &AttackContext<'_>,
    text: &str,
    rng: &mut R,
) -> Option<usize> {
    if !ctx.task.kind.is_long_text() {
        return None;
    }
    match split_sentences(text).len() {
        0 | 1 => None,
        n => Some(rng.random_range(0..n)),
    }
}

/// Applies P1 guides one after another, each to the output of the previous
/// one. Every step is gated by Levenshtein similarity against the original
/// input; a guide with no surviving candidate is skipped and recorded.
pub fn mix_mode<R: Rng + ?Sized>(
    sample: &Sample,
    guides: &[PerturbationSpec],
    ctx: &AttackContext<'_>,
    rng: &mut R,
) -> Result<PerturbedSample, PgoError> {
    if guides.is_empty() {
        return Err(PgoError::Invalid(
            "mix-mode needs at least one guide".into(),
        ));
    }
    if let Some(g) = guides.iter().find(|g| g.category != Category::P1) {
        return Err(PgoError::Invalid(format!(
            "mix-mode takes P1 guides only, got {}",
            g.code
        )));
    }
    let epsilon = ctx
        .config
        .epsilon(Category::P1, ctx.task.kind.is_long_text());
    let mut current = sample.input.clone();
    let mut applied = Vec::new();
    let mut skipped = Vec::new();
    let mut trace = Vec::new();
    let mut verdict = None;
    for (position, spec) in guides.iter().enumerate() {
        let sentence = pick_sentence(ctx, &current, rng);
        let outcome = attack_round(
            &sample.id,
            &current,
            &sample.input,
            &sample.gold,
            spec,
            position + 1,
            epsilon,
            sentence,
            ctx,
        )?;
        match outcome {
            RoundOutcome::Chosen {
                selected,
                sentence_index,
            } => {
                trace.push(RoundTrace {
                    round: position + 1,
                    code: spec.code,
                    candidate: selected.text.clone(),
                    similarity: selected.verdict.value,
                    adversarial_score: selected.score,
                    sentence_index,
                });
                current = selected.text;
                verdict = Some(selected.verdict);
                applied.push(spec.code);
            }
            RoundOutcome::Empty(why) => {
                log::debug!("sample {}: guide {} skipped: {why}", sample.id, spec.code);
                skipped.push(spec.code);
            }
        }
    }
    let Some(gate) = verdict else {
        return Err(PgoError::AllGuidesSkipped {
            id: sample.id.clone(),
        });
    };
    Ok(PerturbedSample {
        source_id: sample.id.clone(),
        perturbed: current,
        original: sample.input.clone(),
        gold: sample.gold.clone(),
        applied_guides: applied,
        skipped_guides: skipped,
        iterations: trace,
        gate,
    })
}

/// Applies each P2 guide independently to the original input, gated by
/// semantic similarity. Returns one perturbed variant per surviving guide.
pub fn combined_mode<R: Rng + ?Sized>(
    sample: &Sample,
    guides: &[PerturbationSpec],
    ctx: &AttackContext<'_>,
    rng: &mut R,
) -> Result<Vec<PerturbedSample>, PgoError> {
    if let Some(g) = guides.iter().find(|g| g.category != Category::P2) {
        return Err(PgoError::Invalid(format!(
            "combined-mode takes P2 guides only, got {}",
            g.code
        )));
    }
    let epsilon = ctx
        .config
        .epsilon(Category::P2, ctx.task.kind.is_long_text());
    let mut out = Vec::new();
    for spec in guides {
        let sentence = pick_sentence(ctx, &sample.input, rng);
        let outcome = attack_round(
            &sample.id,
            &sample.input,
            &sample.input,
            &sample.gold,
            spec,
            1,
            epsilon,
            sentence,
            ctx,
        )?;
        match outcome {
            RoundOutcome::Chosen {
                selected,
                sentence_index,
            } => out.push(PerturbedSample {
                source_id: sample.id.clone(),
                perturbed: selected.text.clone(),
                original: sample.input.clone(),
                gold: sample.gold.clone(),
                applied_guides: vec![spec.code],
                skipped_guides: Vec::new(),
                iterations: vec![RoundTrace {
                    round: 1,
                    code: spec.code,
                    candidate: selected.text,
                    similarity: selected.verdict.value,
                    adversarial_score: selected.score,
                    sentence_index,
                }],
                gate: selected.verdict,
            }),
            RoundOutcome::Empty(why) => {
                log::debug!("sample {}: guide {} gated out: {why}", sample.id, spec.code);
            }
        }
    }
    if out.is_empty() {
        return Err(PgoError::NoUsableP2 {
            id: sample.id.clone(),
        });
    }
    Ok(out)
}

/// Asks the model what changed between `original` and `perturbed`. Identical
/// texts get the note "no differences" without a model call. An empty answer
/// is retried once with a fresh seed.
#[allow(clippy::too_many_arguments)]
pub fn extract_differences(
    id: &str,
    source_id: &str,
    original: &str,
    perturbed: &str,
    templates: &PgoTemplates,
    backend: &dyn Backend,
    seed: u64,
    tag: &str,
) -> Result<DifferenceNote, PgoError> {
    let note = |text: String| DifferenceNote {
        id: id.to_owned(),
        source_id: source_id.to_owned(),
        original: original.to_owned(),
        perturbed: perturbed.to_owned(),
        note: text,
    };
    if original == perturbed {
        return Ok(note("no differences".into()));
    }
    let user = fill(
        &templates.difference_user,
        &[("original", original), ("perturbed", perturbed)],
    );
    for attempt in 0..2u32 {
        let request = CompletionRequest::new(
            RequestKind::Difference,
            Some(templates.difference_system.clone()),
            &user,
        )
        .with_label(tag)
        .with_seed(derive_seed(seed, &[&attempt.to_string()]));
        let text = backend.complete(&request)?.text.trim().to_owned();
        if !text.is_empty() {
            return Ok(note(text));
        }
    }
    Err(PgoError::EmptyGradientMaterial(format!(
        "no difference description for sample {source_id}"
    )))
}

/// Condenses difference notes into one gradient note. An empty answer is
/// retried once.
pub fn generate_gradient(
    iteration: u32,
    notes: &[DifferenceNote],
    prompt_text: &str,
    templates: &PgoTemplates,
    backend: &dyn Backend,
    seed: u64,
) -> Result<GradientNote, PgoError> {
    if notes.is_empty() {
        return Err(PgoError::EmptyGradientMaterial(
            "no difference notes".into(),
        ));
    }
    let bullets: Vec<String> = notes.iter().map(|n| format!("- {}", n.note)).collect();
    let user = fill(
        &templates.gradient_user,
        &[("prompt", prompt_text), ("notes", &bullets.join("\n"))],
    );
    let tag = format!("iter-{iteration}");
    for attempt in 0..2u32 {
        let request = CompletionRequest::new(
            RequestKind::Gradient,
            Some(templates.gradient_system.clone()),
            &user,
        )
        .with_label(&tag)
        .with_seed(derive_seed(seed, &[&attempt.to_string()]));
        let text = backend.complete(&request)?.text.trim().to_owned();
        if !text.is_empty() {
            return Ok(GradientNote {
                id: format!("g{iteration}"),
                iteration,
                text,
                built_from: notes.iter().map(|n| n.id.clone()).collect(),
            });
        }
    }
    Err(PgoError::EmptyGradientMaterial(format!(
        "iteration {iteration}: empty gradient"
    )))
}

/// `m` rewrites of the incumbent guided by the gradient. Empty answers,
/// duplicates and copies of the incumbent are dropped; if nothing is left
/// the proposal step collapsed.
pub fn propose_prompts(
    incumbent: &Prompt,
    gradient: &GradientNote,
    m: usize,
    templates: &PgoTemplates,
    backend: &dyn Backend,
    seed: u64,
) -> Result<Vec<Prompt>, PgoError> {
    let system = fill(&templates.propose_system, &[("gradient", &gradient.text)]);
    let tag = format!("iter-{}", gradient.iteration);
    let mut out: Vec<Prompt> = Vec::new();
    for j in 0..m {
        let request =
            CompletionRequest::new(RequestKind::Propose, Some(system.clone()), &incumbent.text)
                .with_label(&tag)
                .with_seed(derive_seed(seed, &[&j.to_string()]));
        let text = backend.complete(&request)?.text.trim().to_owned();
        if text.is_empty() || text == incumbent.text || out.iter().any(|p| p.text == text) {
            continue;
        }
        out.push(Prompt {
            id: format!("{}-p{}", gradient.id, j + 1),
            text,
            iteration: incumbent.iteration + 1,
            parent: Some(incumbent.id.clone()),
            provenance: Provenance::GradientProposed,
            gradient_id: Some(gradient.id.clone()),
        });
    }
    if out.is_empty() {
        return Err(PgoError::ProposalCollapse {
            incumbent: incumbent.id.clone(),
        });
    }
    Ok(out)
}

/// `k` meaning-preserving rewrites of `prompt`, minus empties, duplicates
/// and copies of the original.
pub fn paraphrase(
    prompt: &Prompt,
    k: usize,
    templates: &PgoTemplates,
    backend: &dyn Backend,
    seed: u64,
    tag: &str,
) -> Result<Vec<Prompt>, PgoError> {
    let mut out: Vec<Prompt> = Vec::new();
    for r in 0..k {
        let request = CompletionRequest::new(
            RequestKind::Paraphrase,
            Some(templates.paraphrase_system.clone()),
            &prompt.text,
        )
        .with_label(tag)
        .with_seed(derive_seed(seed, &[&r.to_string()]));
        let text = backend.complete(&request)?.text.trim().to_owned();
        if text.is_empty() || text == prompt.text || out.iter().any(|p| p.text == text) {
            continue;
        }
        out.push(Prompt {
            id: format!("{}-r{}", prompt.id, r + 1),
            text,
            iteration: prompt.iteration,
            parent: Some(prompt.id.clone()),
            provenance: Provenance::Paraphrase,
            gradient_id: prompt.gradient_id.clone(),
        });
    }
    Ok(out)
}

/// Per-code mean task score of a prompt on the perturbed validation sets.
/// The loss of a code is its negated score; `total_loss` sums over codes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub per_code: BTreeMap<PerturbationCode, f64>,
    pub total_loss: f64,
}

impl LossReport {
    /// Mean score over codes, in the task metric's range.
    pub fn score(&self) -> f64 {
        if self.per_code.is_empty() {
            0.0
        } else {
            -self.total_loss / self.per_code.len() as f64
        }
    }
}

pub(crate) fn mean_score(
    prompt_text: &str,
    samples: &[Sample],
    task: &TaskSpec,
    backend: &dyn Backend,
) -> Result<f64, PgoError> {
    let values: Vec<f64> = samples
        .par_iter()
        .map(|s| {
            let output = backend.complete(&task.request(prompt_text, &s.input))?.text;
            Ok(evaluate_output(task, s, &output).0)
        })
        .collect::<Result<_, PgoError>>()?;
    Ok(values.iter().sum::<f64>() / values.len().max(1) as f64)
}

/// Scores `prompt_text` on every code's validation samples. Backend
/// failures propagate rather than scoring zero, so a flaky endpoint cannot
/// silently pick the wrong prompt.
pub fn evaluate_prompt_loss(
    prompt_text: &str,
    validation: &BTreeMap<PerturbationCode, Vec<Sample>>,
    codes: &[PerturbationCode],
    task: &TaskSpec,
    backend: &dyn Backend,
) -> Result<LossReport, PgoError> {
    if codes.is_empty() {
        return Err(PgoError::Invalid(
            "no perturbation codes to evaluate".into(),
        ));
    }
    let mut per_code = BTreeMap::new();
    for &code in codes {
        let samples = validation
            .get(&code)
            .filter(|s| !s.is_empty())
            .ok_or(PgoError::MissingCode(code))?;
        per_code.insert(code, mean_score(prompt_text, samples, task, backend)?);
    }
    let total_loss = per_code.values().map(|s| -s).sum();
    Ok(LossReport {
        per_code,
        total_loss,
    })
}
