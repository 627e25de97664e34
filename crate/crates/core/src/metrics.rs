//! Deterministic text metrics: edit distance, ROUGE-1/2/L, SARI, accuracy
//! and embedding cosine similarity.
//!
//! Every function here is pure. Token-level metrics share one tokenizer:
//! lowercase, ASCII punctuation removed, split on whitespace.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no references")]
    NoReferences,
    #[error("length mismatch: {predictions} predictions vs {gold} gold labels")]
    LengthMismatch { predictions: usize, gold: usize },
    #[error("empty prediction list")]
    Empty,
}

/// Lowercases, drops ASCII punctuation and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

/// Edit distance over Unicode scalar values (insert, delete, substitute; unit cost).
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }

    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let substitution = prev[j] + usize::from(ca != cb);
            cur[j + 1] = substitution.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - levenshtein(a, b) / max(|a|, |b|)`, with two empty strings scoring 1.0.
pub fn lev_similarity(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein(a, b) as f64 / longest as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RougeVariant {
    #[serde(rename = "rouge1")]
    Rouge1,
    #[serde(rename = "rouge2")]
    Rouge2,
    #[serde(rename = "rougeL")]
    RougeL,
}

impl RougeVariant {
    pub const ALL: [RougeVariant; 3] = [
        RougeVariant::Rouge1,
        RougeVariant::Rouge2,
        RougeVariant::RougeL,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RougeVariant::Rouge1 => "rouge1",
            RougeVariant::Rouge2 => "rouge2",
            RougeVariant::RougeL => "rougeL",
        }
    }
}

impl fmt::Display for RougeVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub variant: RougeVariant,
}

impl RougeScore {
    fn from_counts(
        overlap: usize,
        candidate_total: usize,
        reference_total: usize,
        variant: RougeVariant,
    ) -> Self {
        let (precision, recall) = match (candidate_total, reference_total) {
            (0, 0) => (1.0, 1.0),
            (0, _) | (_, 0) => (0.0, 0.0),
            (c, r) => (overlap as f64 / c as f64, overlap as f64 / r as f64),
        };
        RougeScore {
            precision,
            recall,
            f1: f_measure(precision, recall),
            variant,
        }
    }
}

fn f_measure(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge(candidate: &str, reference: &str, variant: RougeVariant) -> RougeScore {
    let cand = tokenize(candidate);
    let refr = tokenize(reference);
    if cand.is_empty() || refr.is_empty() {
        let both = cand.is_empty() && refr.is_empty();
        let v = if both { 1.0 } else { 0.0 };
        return RougeScore {
            precision: v,
            recall: v,
            f1: v,
            variant,
        };
    }
    match variant {
        RougeVariant::Rouge1 | RougeVariant::Rouge2 => {
            let n = if variant == RougeVariant::Rouge1 {
                1
            } else {
                2
            };
            let c = ngram_counts(&cand, n);
            let r = ngram_counts(&refr, n);
            let overlap = c
                .iter()
                .map(|(gram, &count)| count.min(r.get(gram).copied().unwrap_or(0)))
                .sum();
            RougeScore::from_counts(overlap, c.values().sum(), r.values().sum(), variant)
        }
        RougeVariant::RougeL => {
            RougeScore::from_counts(lcs_len(&cand, &refr), cand.len(), refr.len(), variant)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SariScore {
    pub keep: f64,
    pub add: f64,
    /// Deletion precision, as in the original metric definition.
    pub delete: f64,
    pub overall: f64,
}

pub const SARI_MAX_ORDER: usize = 4;

type Counter<'a> = BTreeMap<&'a [String], usize>;

fn counter<'a>(tokens: &'a [String], n: usize, scale: usize) -> Counter<'a> {
    let mut out = Counter::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *out.entry(gram).or_insert(0) += scale;
        }
    }
    out
}

fn intersect<'a>(a: &Counter<'a>, b: &Counter<'a>) -> Counter<'a> {
    a.iter()
        .filter_map(|(k, &v)| b.get(k).map(|&w| (*k, v.min(w))))
        .collect()
}

fn subtract<'a>(a: &Counter<'a>, b: &Counter<'a>) -> Counter<'a> {
    a.iter()
        .filter_map(|(k, &v)| {
            let rest = v.saturating_sub(b.get(k).copied().unwrap_or(0));
            (rest > 0).then_some((*k, rest))
        })
        .collect()
}

/// keep F1, deletion precision and addition F1 for a single n-gram order.
fn sari_order(
    source: &[String],
    candidate: &[String],
    references: &[Vec<String>],
    n: usize,
) -> (f64, f64, f64) {
    let num_refs = references.len();
    let mut refs = Counter::new();
    for r in references {
        for (gram, count) in counter(r, n, 1) {
            *refs.entry(gram).or_insert(0) += count;
        }
    }
    let src = counter(source, n, num_refs);
    let cand = counter(candidate, n, num_refs);

    let keep = intersect(&src, &cand);
    let keep_good = intersect(&keep, &refs);
    let keep_all = intersect(&src, &refs);
    let keep_precision = if keep.is_empty() {
        1.0
    } else {
        keep_good
            .iter()
            .map(|(g, &c)| c as f64 / keep[g] as f64)
            .sum::<f64>()
            / keep.len() as f64
    };
    let keep_recall = if keep_all.is_empty() {
        1.0
    } else {
        keep_good
            .iter()
            .map(|(g, &c)| c as f64 / keep_all[g] as f64)
            .sum::<f64>()
            / keep_all.len() as f64
    };

    let del = subtract(&src, &cand);
    let del_good = subtract(&del, &refs);
    let del_precision = if del.is_empty() {
        1.0
    } else {
        del_good
            .iter()
            .map(|(g, &c)| c as f64 / del[g] as f64)
            .sum::<f64>()
            / del.len() as f64
    };

    let src_set: HashSet<_> = src.keys().collect();
    let ref_set: HashSet<_> = refs.keys().collect();
    let added: Vec<_> = cand.keys().filter(|g| !src_set.contains(g)).collect();
    let added_good = added.iter().filter(|g| ref_set.contains(*g)).count();
    let add_all = ref_set.iter().filter(|g| !src_set.contains(*g)).count();
    let add_precision = if added.is_empty() {
        1.0
    } else {
        added_good as f64 / added.len() as f64
    };
    let add_recall = if add_all == 0 {
        1.0
    } else {
        added_good as f64 / add_all as f64
    };

    (
        f_measure(keep_precision, keep_recall),
        del_precision,
        f_measure(add_precision, add_recall),
    )
}

/// SARI over n-gram orders 1..=4. Empty n-gram sets score 1.0 for the
/// precision/recall they would otherwise leave undefined.
pub fn sari(
    source: &str,
    candidate: &str,
    references: &[String],
) -> Result<SariScore, MetricsError> {
    if references.is_empty() {
        return Err(MetricsError::NoReferences);
    }
    let source = tokenize(source);
    let candidate = tokenize(candidate);
    let references: Vec<Vec<String>> = references.iter().map(|r| tokenize(r)).collect();

    let (mut keep, mut delete, mut add) = (0.0, 0.0, 0.0);
    for n in 1..=SARI_MAX_ORDER {
        let (k, d, a) = sari_order(&source, &candidate, &references, n);
        keep += k;
        delete += d;
        add += a;
    }
    let orders = SARI_MAX_ORDER as f64;
    let (keep, delete, add) = (keep / orders, delete / orders, add / orders);
    Ok(SariScore {
        keep,
        add,
        delete,
        overall: (keep + add + delete) / 3.0,
    })
}

/// Fraction of predictions that normalize exactly to their gold label.
///
/// A prediction counts as correct only when, after lowercasing and stripping
/// punctuation and whitespace, it equals a label from `labelset` that is also
/// the gold label.
pub fn accuracy(
    predictions: &[String],
    gold: &[String],
    labelset: &[String],
) -> Result<f64, MetricsError> {
    if predictions.len() != gold.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            gold: gold.len(),
        });
    }
    if predictions.is_empty() {
        return Err(MetricsError::Empty);
    }
    let labels: Vec<String> = labelset.iter().map(|l| normalize_text(l)).collect();
    let correct = predictions
        .iter()
        .zip(gold)
        .filter(|(p, g)| {
            let p = normalize_text(p);
            labels.contains(&p) && p == normalize_text(g)
        })
        .count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Lowercase, punctuation removed, whitespace runs collapsed to one space.
pub fn normalize_text(text: &str) -> String {
    tokenize(text).join(" ")
}

/// Term-frequency vectors over the batch vocabulary, L2-normalized.
///
/// Texts without any token map to the zero vector.
pub fn tf_embed(texts: &[String]) -> Vec<Vec<f64>> {
    let tokenized: Vec<Vec<String>> = texts.iter().map(|t| tokenize(t)).collect();
    let vocab: BTreeMap<&str, usize> = {
        let mut words: Vec<&str> = tokenized.iter().flatten().map(String::as_str).collect();
        words.sort_unstable();
        words.dedup();
        words.into_iter().enumerate().map(|(i, w)| (w, i)).collect()
    };
    tokenized
        .iter()
        .map(|tokens| {
            let mut v = vec![0.0; vocab.len()];
            for t in tokens {
                v[vocab[t.as_str()]] += 1.0;
            }
            l2_normalize(&mut v);
            v
        })
        .collect()
}

pub fn l2_normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Cosine similarity clamped to `[0, 1]`. Mismatched lengths compare over the
/// shared prefix; a zero vector yields 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(0.0, 1.0)
}

pub fn semantic_similarity(a: &str, b: &str, embedder: &dyn Backend) -> Result<f64, BackendError> {
    if a == b {
        return Ok(1.0);
    }
    let vectors = embedder.embed(&[a.to_owned(), b.to_owned()])?;
    Ok(cosine(&vectors[0], &vectors[1]))
}

/// Similarities of `candidates` to `original`, embedded in one batch.
pub fn semantic_similarities(
    original: &str,
    candidates: &[String],
    embedder: &dyn Backend,
) -> Result<Vec<f64>, BackendError> {
    if candidates.is_empty() {
        return Ok(Vec::new());
    }
    let mut batch = Vec::with_capacity(candidates.len() + 1);
    batch.push(original.to_owned());
    batch.extend(candidates.iter().cloned());
    let vectors = embedder.embed(&batch)?;
    Ok(candidates
        .iter()
        .zip(&vectors[1..])
        .map(|(c, v)| {
            if c == original {
                1.0
            } else {
                cosine(&vectors[0], v)
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityKind {
    Levenshtein,
    Semantic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityVerdict {
    pub kind: SimilarityKind,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl SimilarityVerdict {
    pub fn new(kind: SimilarityKind, value: f64, threshold: f64) -> Self {
        SimilarityVerdict {
            kind,
            value,
            threshold,
            passed: value >= threshold,
        }
    }
}
