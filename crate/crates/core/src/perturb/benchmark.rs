use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    perturb_iterative, perturb_long_text, AttackContext, Category, PerturbConfig, PerturbError,
    PerturbationCode, PerturbationSpec, PerturbedSample, SensitivityMatrix,
};
use crate::backend::{derive_seed, Backend};
use crate::metrics::{lev_similarity, semantic_similarity};
use crate::tasks::{Dataset, TaskKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedSample {
    pub id: String,
    pub reason: String,
}

/// One sub-dataset per perturbation code, plus skipped codes and per-sample
/// failures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbedDataset {
    pub name: String,
    pub task: TaskKind,
    pub subsets: BTreeMap<PerturbationCode, Vec<PerturbedSample>>,
    pub failures: BTreeMap<PerturbationCode, Vec<FailedSample>>,
    pub skipped: Vec<PerturbationCode>,
}

impl PerturbedDataset {
    pub fn file_name(&self, code: PerturbationCode) -> String {
        format!("{}.{}.jsonl", self.name, code)
    }

    /// Writes `{dataset}.{code}.jsonl` for every sub-dataset.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, PerturbError> {
        std::fs::create_dir_all(dir).map_err(|source| PerturbError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        let mut written = Vec::new();
        for (code, samples) in &self.subsets {
            let path = dir.join(self.file_name(*code));
            let body: String = samples
                .iter()
                .map(|s| format!("{}\n", serde_json::to_string(s).expect("sample serializes")))
                .collect();
            std::fs::write(&path, body).map_err(|source| PerturbError::Io {
                path: path.display().to_string(),
                source,
            })?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Builds one perturbed sub-dataset per perturbation type the task is sensitive to
/// (or every spec with `force_all`). Per-sample failures are logged and
/// skipped; a sub-dataset fails outright once more than
/// `max_failure_fraction` of its samples fail.
pub fn build_benchmark(
    dataset: &Dataset,
    specs: &[PerturbationSpec],
    sensitivity: &SensitivityMatrix,
    config: &PerturbConfig,
    prompt_text: &str,
    backend: &dyn Backend,
) -> Result<PerturbedDataset, PerturbError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(PerturbError::Invalid("empty dataset".into()));
    }
    let kind = dataset.task.kind;
    let mut out = PerturbedDataset {
        name: dataset.name.clone(),
        task: kind,
        subsets: BTreeMap::new(),
        failures: BTreeMap::new(),
        skipped: Vec::new(),
    };
    for spec in specs {
        if !config.force_all && !sensitivity.is_sensitive(kind, spec.code) {
            log::info!(
                "{}: {kind} is robust to {}, skipping",
                dataset.name,
                spec.code
            );
            out.skipped.push(spec.code);
            continue;
        }
        let salt = format!("build:{}", dataset.name);
        let ctx = AttackContext {
            task: &dataset.task,
            prompt_text,
            backend,
            config,
            salt: &salt,
        };
        let results: Vec<Result<PerturbedSample, PerturbError>> = dataset
            .samples
            .par_iter()
            .map(|sample| {
                if kind.is_long_text() {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                        config.seed,
                        &[&dataset.name, spec.code.as_str(), &sample.id],
                    ));
                    perturb_long_text(
                        &sample.id,
                        &sample.input,
                        &sample.gold,
                        spec,
                        config.rounds,
                        &ctx,
                        &mut rng,
                    )
                } else {
                    perturb_iterative(
                        &sample.id,
                        &sample.input,
                        &sample.gold,
                        spec,
                        config.rounds,
                        &ctx,
                    )
                }
            })
            .collect();

        let mut kept = Vec::new();
        let mut failed = Vec::new();
        for (sample, result) in dataset.samples.iter().zip(results) {
            match result {
                Ok(p) => kept.push(p),
                Err(e) => {
                    log::warn!(
                        "{}/{}: sample {} skipped: {e}",
                        dataset.name,
                        spec.code,
                        sample.id
                    );
                    failed.push(FailedSample {
                        id: sample.id.clone(),
                        reason: e.to_string(),
                    });
                }
            }
        }
        let total = dataset.len();
        if failed.len() as f64 > config.max_failure_fraction * total as f64 {
            return Err(PerturbError::TooManyFailures {
                code: spec.code,
                failed: failed.len(),
                total,
            });
        }
        out.subsets.insert(spec.code, kept);
        if !failed.is_empty() {
            out.failures.insert(spec.code, failed);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRow {
    pub dataset: String,
    /// A perturbation code, or `all` for the whole dataset.
    pub code: String,
    pub lev_sim_pct: f64,
    pub sem_sim_pct: f64,
    /// Mean similarity of the gating kind fell below the category threshold.
    pub below_target: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub rows: Vec<SimilarityRow>,
}

impl SimilarityReport {
    pub const CSV_HEADER: &'static str = "dataset,code,lev_sim_pct,sem_sim_pct";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{:.2},{:.2}\n",
                row.dataset, row.code, row.lev_sim_pct, row.sem_sim_pct
            ));
        }
        out
    }
}

/// Mean Levenshtein and semantic similarity (as percentages) between each
/// perturbed text and its source, per code and over the whole dataset.
pub fn similarity_report(
    dataset: &PerturbedDataset,
    config: &PerturbConfig,
    embedder: &dyn Backend,
) -> Result<SimilarityReport, PerturbError> {
    let total: usize = dataset.subsets.values().map(Vec::len).sum();
    if total == 0 {
        return Err(PerturbError::Invalid(
            "similarity report needs at least one sample".into(),
        ));
    }
    let long = dataset.task.is_long_text();
    let mut rows = Vec::new();
    let (mut lev_all, mut sem_all) = (0.0, 0.0);
    for (code, samples) in &dataset.subsets {
        if samples.is_empty() {
            continue;
        }
        let mut lev_sum = 0.0;
        let mut sem_sum = 0.0;
        for s in samples {
            lev_sum += lev_similarity(&s.original, &s.perturbed);
            sem_sum += semantic_similarity(&s.original, &s.perturbed, embedder)?;
        }
        lev_all += lev_sum;
        sem_all += sem_sum;
        let n = samples.len() as f64;
        let (lev, sem) = (lev_sum / n, sem_sum / n);
        let gated = if code.category() == Category::P1 {
            lev
        } else {
            sem
        };
        let below = gated < config.epsilon(code.category(), long);
        if below {
            log::warn!(
                "{}/{code}: mean similarity {gated:.4} is below its gate threshold",
                dataset.name
            );
        }
        rows.push(SimilarityRow {
            dataset: dataset.name.clone(),
            code: code.to_string(),
            lev_sim_pct: 100.0 * lev,
            sem_sim_pct: 100.0 * sem,
            below_target: below,
        });
    }
    let n = total as f64;
    rows.push(SimilarityRow {
        dataset: dataset.name.clone(),
        code: "all".into(),
        lev_sim_pct: 100.0 * lev_all / n,
        sem_sim_pct: 100.0 * sem_all / n,
        below_target: rows.iter().any(|r| r.below_target),
    });
    Ok(SimilarityReport { rows })
}
