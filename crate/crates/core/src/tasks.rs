//! Task definitions, JSON-Lines datasets, splits and the scoring harness.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backend::{Backend, CompletionRequest, RequestKind};
use crate::metrics::{self, normalize_text, RougeVariant};
use crate::pgo::Prompt;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: field `{field}`: {message}")]
    Schema {
        line: usize,
        field: &'static str,
        message: String,
    },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid split: {0}")]
    Split(String),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("no samples to score")]
    NoSamples,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Simplification,
    Summarization,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [
        TaskKind::Summarization,
        TaskKind::Simplification,
        TaskKind::Classification,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Classification => "classification",
            TaskKind::Simplification => "simplification",
            TaskKind::Summarization => "summarization",
        }
    }

    /// Long inputs get the one-sentence-per-round perturbation strategy.
    pub fn is_long_text(self) -> bool {
        self == TaskKind::Summarization
    }

    pub fn default_metric(self) -> TaskMetric {
        match self {
            TaskKind::Classification => TaskMetric::Accuracy,
            TaskKind::Simplification => TaskMetric::Sari,
            TaskKind::Summarization => TaskMetric::RougeSuite,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "classification" => Ok(TaskKind::Classification),
            "simplification" => Ok(TaskKind::Simplification),
            "summarization" => Ok(TaskKind::Summarization),
            other => Err(TaskError::InvalidTask(format!(
                "unknown task kind {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskMetric {
    Accuracy,
    Sari,
    RougeSuite,
}

impl TaskMetric {
    pub fn name(self) -> &'static str {
        match self {
            TaskMetric::Accuracy => "accuracy",
            TaskMetric::Sari => "sari",
            TaskMetric::RougeSuite => "rouge-suite",
        }
    }
}

/// How a task is posed to the model: the prompt is the system message and
/// the sample input is the user message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    #[serde(default)]
    pub labelset: Vec<String>,
    pub metric: TaskMetric,
}

impl TaskSpec {
    pub fn classification<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Self {
        TaskSpec {
            kind: TaskKind::Classification,
            labelset: labels.into_iter().map(Into::into).collect(),
            metric: TaskMetric::Accuracy,
        }
    }

    pub fn simplification() -> Self {
        TaskSpec {
            kind: TaskKind::Simplification,
            labelset: Vec::new(),
            metric: TaskMetric::Sari,
        }
    }

    pub fn summarization() -> Self {
        TaskSpec {
            kind: TaskKind::Summarization,
            labelset: Vec::new(),
            metric: TaskMetric::RougeSuite,
        }
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        match self.kind {
            TaskKind::Classification if self.labelset.is_empty() => Err(TaskError::InvalidTask(
                "classification needs a non-empty labelset".into(),
            )),
            TaskKind::Simplification | TaskKind::Summarization if !self.labelset.is_empty() => Err(
                TaskError::InvalidTask(format!("{} takes no labelset", self.kind)),
            ),
            _ if self.metric != self.kind.default_metric() => Err(TaskError::InvalidTask(format!(
                "{} is scored with {}, not {}",
                self.kind,
                self.kind.default_metric().name(),
                self.metric.name()
            ))),
            _ => Ok(()),
        }
    }

    pub fn request(&self, prompt_text: &str, input: &str) -> CompletionRequest {
        CompletionRequest::new(RequestKind::Task, Some(prompt_text.to_owned()), input).scoring()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gold {
    Label(String),
    References(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub input: String,
    pub gold: Gold,
}

impl Sample {
    /// The JSON-Lines record form: `{"id", "input", "label"}` or `{"id", "input", "references"}`.
    pub fn to_record(&self) -> Value {
        let mut obj = serde_json::Map::new();
        obj.insert("id".into(), Value::String(self.id.clone()));
        obj.insert("input".into(), Value::String(self.input.clone()));
        match &self.gold {
            Gold::Label(l) => obj.insert("label".into(), Value::String(l.clone())),
            Gold::References(r) => obj.insert("references".into(), Value::from(r.clone())),
        };
        Value::Object(obj)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub task: TaskSpec,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn parse_record(line_no: usize, line: &str, task: &TaskSpec) -> Result<Sample, TaskError> {
    let value: Value = serde_json::from_str(line).map_err(|e| TaskError::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    let obj = value.as_object().ok_or_else(|| TaskError::Parse {
        line: line_no,
        message: "expected a JSON object".into(),
    })?;
    let schema = |field: &'static str, message: &str| TaskError::Schema {
        line: line_no,
        field,
        message: message.to_owned(),
    };
    let id = match obj.get("id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        Some(_) => return Err(schema("id", "must be a string or number")),
        None => return Err(schema("id", "missing")),
    };
    let input = match obj.get("input") {
        Some(Value::String(s)) if !s.trim().is_empty() => s.clone(),
        Some(Value::String(_)) => return Err(schema("input", "empty")),
        Some(_) => return Err(schema("input", "must be a string")),
        None => return Err(schema("input", "missing")),
    };
    let gold = match task.kind {
        TaskKind::Classification => match obj.get("label") {
            Some(Value::String(l)) => {
                if !task
                    .labelset
                    .iter()
                    .any(|x| normalize_text(x) == normalize_text(l))
                {
                    return Err(schema("label", &format!("{l:?} is not in the labelset")));
                }
                Gold::Label(l.clone())
            }
            Some(_) => return Err(schema("label", "must be a string")),
            None => return Err(schema("label", "missing")),
        },
        TaskKind::Simplification | TaskKind::Summarization => match obj.get("references") {
            Some(Value::Array(items)) if !items.is_empty() => Gold::References(
                items
                    .iter()
                    .map(|v| v.as_str().map(str::to_owned))
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| schema("references", "must contain only strings"))?,
            ),
            Some(Value::Array(_)) => {
                return Err(schema("references", "needs at least one reference"))
            }
            Some(_) => return Err(schema("references", "must be a list")),
            None => return Err(schema("references", "missing")),
        },
    };
    Ok(Sample { id, input, gold })
}

pub fn parse_dataset(name: &str, text: &str, task: &TaskSpec) -> Result<Dataset, TaskError> {
    task.validate()?;
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        samples.push(parse_record(i + 1, line, task)?);
    }
    if samples.is_empty() {
        return Err(TaskError::EmptyDataset);
    }
    Ok(Dataset {
        name: name.to_owned(),
        task: task.clone(),
        samples,
    })
}

/// Loads a JSON-Lines dataset; the dataset name is the file stem.
pub fn load_dataset(path: &Path, task: &TaskSpec) -> Result<Dataset, TaskError> {
    let text = std::fs::read_to_string(path).map_err(|source| TaskError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .map(|n| n.split('.').next().unwrap_or(n))
        .unwrap_or("dataset");
    let dataset = parse_dataset(name, &text, task)?;
    log::info!("loaded {} records from {}", dataset.len(), path.display());
    Ok(dataset)
}

pub fn write_jsonl(samples: &[Sample]) -> String {
    samples
        .iter()
        .map(|s| format!("{}\n", s.to_record()))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub const DEFAULT_SPLIT: (f64, f64, f64) = (0.6, 0.2, 0.2);

/// Seeded shuffle followed by a contiguous three-way cut.
pub fn split(
    dataset: &Dataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<Splits, TaskError> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(TaskError::Split(format!(
            "fractions ({a}, {b}, {c}) must be in [0,1] and sum to 1"
        )));
    }
    let mut samples = dataset.samples.clone();
    samples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = samples.len();
    let n_train = (n as f64 * a).round() as usize;
    let n_val = ((n as f64 * b).round() as usize).min(n - n_train.min(n));
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(TaskError::Split(format!(
            "{n} samples with fractions ({a}, {b}, {c}) leave an empty split"
        )));
    }
    let test = samples.split_off(n_train + n_val);
    let validation = samples.split_off(n_train);
    Ok(Splits {
        train: samples,
        validation,
        test,
    })
}

/// Maps a free-form model answer onto the labelset.
///
/// Exact match after normalization wins. Otherwise the answer must contain
/// exactly one label as a whole-word phrase; a label whose match lies inside
/// a longer label's match does not count ("very positive" beats "positive").
pub fn normalize_label(raw: &str, labelset: &[String]) -> Option<String> {
    let answer = normalize_text(raw);
    if let Some(label) = labelset.iter().find(|l| normalize_text(l) == answer) {
        return Some(label.clone());
    }
    let words: Vec<&str> = answer.split(' ').filter(|w| !w.is_empty()).collect();
    let mut hits: Vec<(usize, usize, &String)> = Vec::new();
    for label in labelset {
        let norm = normalize_text(label);
        let needle: Vec<&str> = norm.split(' ').filter(|w| !w.is_empty()).collect();
        if needle.is_empty() || needle.len() > words.len() {
            continue;
        }
        for start in 0..=words.len() - needle.len() {
            if words[start..start + needle.len()] == needle[..] {
                hits.push((start, start + needle.len(), label));
            }
        }
    }
    let outer: Vec<&(usize, usize, &String)> = hits
        .iter()
        .filter(|(s, e, _)| {
            !hits
                .iter()
                .any(|(s2, e2, _)| s2 <= s && e <= e2 && (e2 - s2) > (e - s))
        })
        .collect();
    let mut labels: Vec<&String> = outer.iter().map(|(_, _, l)| *l).collect();
    labels.sort();
    labels.dedup();
    match labels.as_slice() {
        [only] => Some((*only).clone()),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeTriple {
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
}

impl RougeTriple {
    pub fn mean(&self) -> f64 {
        (self.rouge1 + self.rouge2 + self.rouge_l) / 3.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub output: String,
    /// Task scalar: accuracy (0/1), SARI overall, or mean ROUGE-1/2/L F1.
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rouge: Option<RougeTriple>,
    pub failed: bool,
}

fn best_rouge(candidate: &str, references: &[String]) -> RougeTriple {
    let best = |v: RougeVariant| {
        references
            .iter()
            .map(|r| metrics::rouge(candidate, r, v).f1)
            .fold(0.0, f64::max)
    };
    RougeTriple {
        rouge1: best(RougeVariant::Rouge1),
        rouge2: best(RougeVariant::Rouge2),
        rouge_l: best(RougeVariant::RougeL),
    }
}

/// Applies the task metric to a model output.
pub fn evaluate_output(
    task: &TaskSpec,
    sample: &Sample,
    output: &str,
) -> (f64, Option<RougeTriple>) {
    match (&sample.gold, task.kind) {
        (Gold::Label(gold), TaskKind::Classification) => {
            let predicted = normalize_label(output, &task.labelset).unwrap_or_default();
            let acc = metrics::accuracy(&[predicted], std::slice::from_ref(gold), &task.labelset)
                .unwrap_or(0.0);
            (acc, None)
        }
        (Gold::References(refs), TaskKind::Simplification) => (
            metrics::sari(&sample.input, output, refs).map_or(0.0, |s| s.overall),
            None,
        ),
        (Gold::References(refs), TaskKind::Summarization) => {
            let triple = best_rouge(output, refs);
            (triple.mean(), Some(triple))
        }
        _ => (0.0, None),
    }
}

/// Runs one sample through the model with scoring settings. A backend
/// failure scores the metric minimum and is flagged.
pub fn score_sample(
    task: &TaskSpec,
    prompt_text: &str,
    sample: &Sample,
    backend: &dyn Backend,
) -> SampleScore {
    match backend.complete(&task.request(prompt_text, &sample.input)) {
        Ok(result) => {
            let (value, rouge) = evaluate_output(task, sample, &result.text);
            SampleScore {
                id: sample.id.clone(),
                output: result.text,
                value,
                rouge,
                failed: false,
            }
        }
        Err(e) => {
            log::warn!("sample {}: scoring failed: {e}", sample.id);
            SampleScore {
                id: sample.id.clone(),
                output: String::new(),
                value: 0.0,
                rouge: (task.kind == TaskKind::Summarization).then_some(RougeTriple {
                    rouge1: 0.0,
                    rouge2: 0.0,
                    rouge_l: 0.0,
                }),
                failed: true,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub dataset: String,
    pub code: String,
    pub prompt_id: String,
    pub metric: TaskMetric,
    pub per_sample: Vec<SampleScore>,
    pub mean: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rouge: Option<RougeTriple>,
    pub count: usize,
    pub failures: usize,
}

impl ScoreReport {
    pub fn from_scores(
        dataset: &str,
        code: &str,
        prompt_id: &str,
        metric: TaskMetric,
        per_sample: Vec<SampleScore>,
    ) -> Self {
        let n = per_sample.len().max(1) as f64;
        let mean = per_sample.iter().map(|s| s.value).sum::<f64>() / n;
        let rouge = (metric == TaskMetric::RougeSuite).then(|| {
            let avg = |f: fn(&RougeTriple) -> f64| {
                per_sample
                    .iter()
                    .filter_map(|s| s.rouge.as_ref())
                    .map(f)
                    .sum::<f64>()
                    / n
            };
            RougeTriple {
                rouge1: avg(|r| r.rouge1),
                rouge2: avg(|r| r.rouge2),
                rouge_l: avg(|r| r.rouge_l),
            }
        });
        ScoreReport {
            dataset: dataset.to_owned(),
            code: code.to_owned(),
            prompt_id: prompt_id.to_owned(),
            metric,
            count: per_sample.len(),
            failures: per_sample.iter().filter(|s| s.failed).count(),
            per_sample,
            mean,
            rouge,
        }
    }

    /// `(metric name, value)` pairs: the ROUGE triplet for summarization,
    /// otherwise the single task metric.
    pub fn metric_values(&self) -> Vec<(&'static str, f64)> {
        match &self.rouge {
            Some(r) => vec![
                ("rouge1", r.rouge1),
                ("rouge2", r.rouge2),
                ("rougeL", r.rouge_l),
            ],
            None => vec![(self.metric.name(), self.mean)],
        }
    }

    pub const CSV_HEADER: &'static str = "dataset,code,prompt_id,metric,value";

    pub fn csv_rows(&self) -> Vec<String> {
        self.metric_values()
            .into_iter()
            .map(|(metric, value)| {
                format!(
                    "{},{},{},{},{:.6}",
                    self.dataset, self.code, self.prompt_id, metric, value
                )
            })
            .collect()
    }
}

/// Scores `prompt` over `samples`. Calls run in parallel; the report is
/// assembled in sample order.
pub fn score(
    task: &TaskSpec,
    prompt: &Prompt,
    samples: &[Sample],
    backend: &dyn Backend,
    dataset: &str,
    code: &str,
) -> Result<ScoreReport, TaskError> {
    if samples.is_empty() {
        return Err(TaskError::NoSamples);
    }
    let per_sample: Vec<SampleScore> = samples
        .par_iter()
        .map(|s| score_sample(task, &prompt.text, s, backend))
        .collect();
    Ok(ScoreReport::from_scores(
        dataset,
        code,
        &prompt.id,
        task.metric,
        per_sample,
    ))
}
