use rand::Rng;
use regex::Regex;
use std::sync::OnceLock;

use super::{Category, PerturbConfig, PerturbError, PerturbationSpec, PerturbedSample, RoundTrace};
use crate::backend::{derive_seed, Backend, CompletionRequest, RequestKind};
use crate::metrics::{lev_similarity, semantic_similarities, SimilarityKind, SimilarityVerdict};
use crate::tasks::{evaluate_output, Gold, Sample, TaskSpec};

/// Everything adversarial selection needs: the task, the prompt under
/// attack, the model, and the knobs.
#[derive(Clone, Copy)]
pub struct AttackContext<'a> {
    pub task: &'a TaskSpec,
    pub prompt_text: &'a str,
    pub backend: &'a dyn Backend,
    pub config: &'a PerturbConfig,
    /// Mixed into every generation seed so repeated attacks on the same text
    /// (e.g. in different optimizer iterations) draw fresh candidates.
    pub salt: &'a str,
}

impl AttackContext<'_> {
    fn round_seed(&self, id: &str, spec: &PerturbationSpec, round: usize) -> u64 {
        derive_seed(
            self.config.seed,
            &[self.salt, id, spec.code.as_str(), &round.to_string()],
        )
    }
}

/// `k` generation calls with the guide as instruction. Empty outputs,
/// duplicates and outputs equal to `x` are dropped.
pub fn perturb_once(
    x: &str,
    spec: &PerturbationSpec,
    k: usize,
    backend: &dyn Backend,
    seed: u64,
) -> Result<Vec<String>, PerturbError> {
    if x.trim().is_empty() {
        return Err(PerturbError::Invalid("cannot perturb empty text".into()));
    }
    if k == 0 {
        return Err(PerturbError::Invalid(
            "candidate count must be at least 1".into(),
        ));
    }
    let mut out: Vec<String> = Vec::with_capacity(k);
    for j in 0..k {
        let request = CompletionRequest::new(RequestKind::Perturb, Some(spec.guide.clone()), x)
            .with_label(spec.code.as_str())
            .with_seed(derive_seed(seed, &[&j.to_string()]));
        let text = backend.complete(&request)?.text.trim().to_owned();
        if !text.is_empty() && text != x && !out.contains(&text) {
            out.push(text);
        }
    }
    Ok(out)
}

/// Keeps candidates whose similarity to `original` reaches `epsilon`:
/// Levenshtein for P1, embedding cosine for P2.
pub fn gate(
    candidates: &[String],
    original: &str,
    category: Category,
    epsilon: f64,
    embedder: &dyn Backend,
) -> Result<Vec<(String, SimilarityVerdict)>, PerturbError> {
    let (kind, values) = match category {
        Category::P1 => (
            SimilarityKind::Levenshtein,
            candidates
                .iter()
                .map(|c| lev_similarity(original, c))
                .collect(),
        ),
        Category::P2 => (
            SimilarityKind::Semantic,
            semantic_similarities(original, candidates, embedder)?,
        ),
    };
    Ok(candidates
        .iter()
        .zip(values)
        .map(|(c, v)| (c.clone(), SimilarityVerdict::new(kind, v, epsilon)))
        .filter(|(_, verdict)| verdict.passed)
        .collect())
}

/// Index of the lowest score; ties go to the higher similarity, then to the
/// earlier entry. `entries` are `(score, similarity)` pairs.
pub fn select_min(entries: &[(f64, f64)]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &(score, sim)) in entries.iter().enumerate() {
        best = match best {
            None => Some(i),
            Some(b) => {
                let (bs, bsim) = entries[b];
                if score < bs || (score == bs && sim > bsim) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selected {
    pub index: usize,
    pub text: String,
    pub verdict: SimilarityVerdict,
    pub score: f64,
}

/// Runs the task on every gated candidate with the prompt under attack and
/// returns the one the model handles worst.
pub fn adversarial_select(
    gated: &[(String, SimilarityVerdict)],
    prompt_text: &str,
    gold: &Gold,
    task: &TaskSpec,
    backend: &dyn Backend,
) -> Result<Selected, PerturbError> {
    if gated.is_empty() {
        return Err(PerturbError::Invalid(
            "adversarial selection needs at least one candidate".into(),
        ));
    }
    let mut entries = Vec::with_capacity(gated.len());
    for (candidate, verdict) in gated {
        let output = backend
            .complete(&task.request(prompt_text, candidate))?
            .text;
        let sample = Sample {
            id: String::new(),
            input: candidate.clone(),
            gold: gold.clone(),
        };
        entries.push((evaluate_output(task, &sample, &output).0, verdict.value));
    }
    let index = select_min(&entries).expect("non-empty");
    Ok(Selected {
        index,
        text: gated[index].0.clone(),
        verdict: gated[index].1,
        score: entries[index].0,
    })
}

/// Result of one perturb → gate → select round.
pub(crate) enum RoundOutcome {
    Chosen {
        selected: Selected,
        sentence_index: Option<usize>,
    },
    /// Nothing survived the gate; the string explains why.
    Empty(String),
}

/// One attack round on `current`, gated against `original`. With
/// `sentence_index`, only that sentence of `current` is perturbed and the
/// replacement must remain a single sentence.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attack_round(
    id: &str,
    current: &str,
    original: &str,
    gold: &Gold,
    spec: &PerturbationSpec,
    round: usize,
    epsilon: f64,
    sentence_index: Option<usize>,
    ctx: &AttackContext<'_>,
) -> Result<RoundOutcome, PerturbError> {
    let seed = ctx.round_seed(id, spec, round);
    let (whole, generated) = match sentence_index {
        None => {
            let candidates = perturb_once(current, spec, ctx.config.candidates, ctx.backend, seed)?;
            let n = candidates.len();
            (candidates, n)
        }
        Some(index) => {
            let sentences = split_sentences(current);
            let target = &sentences.parts[index].0;
            let seed = derive_seed(seed, &[&index.to_string()]);
            let pieces = perturb_once(target, spec, ctx.config.candidates, ctx.backend, seed)?;
            let mut whole = Vec::new();
            for piece in &pieces {
                let mut next = sentences.clone();
                next.parts[index].0 = piece.clone();
                let joined = next.join();
                if split_sentences(&joined) == next {
                    whole.push(joined);
                }
            }
            (whole, pieces.len())
        }
    };
    let gated = gate(&whole, original, spec.category, epsilon, ctx.backend)?;
    if gated.is_empty() {
        let at = sentence_index.map_or_else(String::new, |i| format!("sentence {i}: "));
        return Ok(RoundOutcome::Empty(format!(
            "{at}{generated} distinct candidate(s), {} structurally valid, none reached similarity {epsilon}",
            whole.len()
        )));
    }
    let selected = adversarial_select(&gated, ctx.prompt_text, gold, ctx.task, ctx.backend)?;
    Ok(RoundOutcome::Chosen {
        selected,
        sentence_index,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_rounds<F>(
    id: &str,
    x: &str,
    gold: &Gold,
    spec: &PerturbationSpec,
    rounds: usize,
    long_text: bool,
    ctx: &AttackContext<'_>,
    mut pick_sentence: F,
) -> Result<PerturbedSample, PerturbError>
where
    F: FnMut(&str) -> Option<usize>,
{
    if rounds == 0 {
        return Err(PerturbError::Invalid("rounds must be at least 1".into()));
    }
    let epsilon = ctx.config.epsilon(spec.category, long_text);
    let mut current = x.to_owned();
    let mut trace = Vec::new();
    let mut verdict = None;
    for round in 1..=rounds {
        let sentence = pick_sentence(&current);
        match attack_round(id, &current, x, gold, spec, round, epsilon, sentence, ctx)? {
            RoundOutcome::Chosen {
                selected,
                sentence_index,
            } => {
                trace.push(RoundTrace {
                    round,
                    code: spec.code,
                    candidate: selected.text.clone(),
                    similarity: selected.verdict.value,
                    adversarial_score: selected.score,
                    sentence_index,
                });
                current = selected.text;
                verdict = Some(selected.verdict);
            }
            RoundOutcome::Empty(diagnostics) if round == 1 => {
                return Err(PerturbError::Unperturbable {
                    id: id.to_owned(),
                    code: spec.code,
                    diagnostics,
                })
            }
            RoundOutcome::Empty(_) => break,
        }
    }
    Ok(PerturbedSample {
        source_id: id.to_owned(),
        perturbed: current,
        original: x.to_owned(),
        gold: gold.clone(),
        applied_guides: vec![spec.code],
        skipped_guides: Vec::new(),
        iterations: trace,
        gate: verdict.expect("round 1 succeeded"),
    })
}

/// Repeated perturb → gate → select, each round attacking the previous
/// winner. Similarity is always measured against the untouched source. A
/// round with no surviving candidate ends the loop early; if that happens in
/// round 1 the sample is unperturbable.
pub fn perturb_iterative(
    id: &str,
    x: &str,
    gold: &Gold,
    spec: &PerturbationSpec,
    rounds: usize,
    ctx: &AttackContext<'_>,
) -> Result<PerturbedSample, PerturbError> {
    run_rounds(id, x, gold, spec, rounds, false, ctx, |_| None)
}

/// A text cut into sentences at terminal punctuation followed by whitespace.
/// Joining `prefix` and every `(sentence, separator)` pair restores the
/// input byte for byte.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentences {
    pub prefix: String,
    pub parts: Vec<(String, String)>,
}

impl Sentences {
    pub fn join(&self) -> String {
        let mut out = self.prefix.clone();
        for (s, sep) in &self.parts {
            out.push_str(s);
            out.push_str(sep);
        }
        out
    }

    pub fn texts(&self) -> Vec<&str> {
        self.parts.iter().map(|(s, _)| s.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }
}

fn boundary() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[.!?]\s+").expect("valid regex"))
}

/// No abbreviation handling: "Dr. Smith" splits after "Dr.".
pub fn split_sentences(text: &str) -> Sentences {
    let body = text.trim_start();
    let prefix = text[..text.len() - body.len()].to_owned();
    let mut parts = Vec::new();
    let mut start = 0;
    for m in boundary().find_iter(body) {
        let end = m.start() + 1;
        parts.push((body[start..end].to_owned(), body[end..m.end()].to_owned()));
        start = m.end();
    }
    if start < body.len() {
        let rest = &body[start..];
        let trimmed = rest.trim_end();
        parts.push((trimmed.to_owned(), rest[trimmed.len()..].to_owned()));
    }
    Sentences { prefix, parts }
}

/// One uniformly chosen sentence per round is perturbed and put back in
/// place; everything else stays byte-identical. Gating and selection look
/// at the whole text. A one-sentence input falls back to
/// [`perturb_iterative`].
pub fn perturb_long_text<R: Rng + ?Sized>(
    id: &str,
    x: &str,
    gold: &Gold,
    spec: &PerturbationSpec,
    rounds: usize,
    ctx: &AttackContext<'_>,
    rng: &mut R,
) -> Result<PerturbedSample, PerturbError> {
    let count = split_sentences(x).len();
    match count {
        0 => Err(PerturbError::Invalid("cannot perturb empty text".into())),
        1 => perturb_iterative(id, x, gold, spec, rounds, ctx),
        _ => run_rounds(id, x, gold, spec, rounds, true, ctx, |_| {
            Some(rng.random_range(0..count))
        }),
    }
}
