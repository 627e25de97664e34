use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::steps::mean_score;
use super::{
    combined_mode, evaluate_prompt_loss, extract_differences, generate_gradient, mix_mode,
    paraphrase, propose_prompts, DifferenceNote, GradientNote, LossReport, PgoConfig, PgoError,
    Prompt,
};
use crate::backend::{derive_seed, Backend, CostLedger, LedgerSummary, Phase};
use crate::perturb::{
    AttackContext, Category, FailedSample, PerturbationCode, PerturbationSpec, PerturbedSample,
};
use crate::tasks::{Sample, TaskSpec};

/// Everything that determines a run. Resuming requires an identical manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub task: TaskSpec,
    pub category: Category,
    pub codes: Vec<PerturbationCode>,
    pub guides: Vec<PerturbationSpec>,
    pub config: PgoConfig,
    pub initial: Prompt,
    pub train_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub prompt: Prompt,
    pub loss: LossReport,
    /// Loss reused from an earlier evaluation of the same text.
    pub cached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u32,
    pub batch: Vec<String>,
    pub perturbed: Vec<PerturbedSample>,
    pub failures: Vec<FailedSample>,
    /// Guides no sample in the batch could use.
    pub skipped_guides: Vec<PerturbationCode>,
    /// Guides out of play from the next iteration on.
    pub dropped_guides: Vec<PerturbationCode>,
    pub differences: Vec<DifferenceNote>,
    pub gradient: Option<GradientNote>,
    pub candidates: Vec<CandidateRecord>,
    pub incumbent: Prompt,
    pub incumbent_loss: LossReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalSelection {
    pub prompt: Prompt,
    /// Mean score on every perturbed training sample seen during the run.
    pub training_score: f64,
    pub training_samples: usize,
    pub validation: LossReport,
    /// Iteration after which this prompt first became the incumbent.
    pub chosen_iteration: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationRun {
    pub manifest: RunManifest,
    pub records: Vec<IterationRecord>,
    pub selection: FinalSelection,
    pub ledger: LedgerSummary,
}

impl OptimizationRun {
    /// Validation score of the incumbent after each iteration.
    pub fn trajectory(&self) -> Vec<f64> {
        self.records
            .iter()
            .map(|r| r.incumbent_loss.score())
            .collect()
    }
}

/// On-disk checkpoints of one run: `run.json`, `iter-{n}.json`,
/// `ledger.json` and `final.json`.
#[derive(Debug, Clone)]
pub struct RunStore {
    dir: PathBuf,
}

/// Held while a run writes to its directory.
pub struct RunLock {
    path: PathBuf,
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PgoError + '_ {
    move |source| PgoError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl RunStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        RunStore { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn iteration_path(&self, iteration: u32) -> PathBuf {
        self.dir.join(format!("iter-{iteration}.json"))
    }

    pub fn has_run(&self) -> bool {
        self.dir.join("run.json").exists()
    }

    pub fn lock(&self) -> Result<RunLock, PgoError> {
        fs::create_dir_all(&self.dir).map_err(io_err(&self.dir))?;
        let path = self.dir.join(".lock");
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(PgoError::Locked(self.dir.display().to_string()))
            }
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    fn write(&self, name: &str, body: &str) -> Result<(), PgoError> {
        let path = self.dir.join(name);
        let tmp = self.dir.join(format!(".{name}.tmp"));
        fs::write(&tmp, body).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), PgoError> {
        let mut body = serde_json::to_string_pretty(value).expect("checkpoint serializes");
        body.push('\n');
        self.write(name, &body)
    }

    fn read_json<T: DeserializeOwned>(&self, name: &str) -> Result<T, PgoError> {
        let path = self.dir.join(name);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|source| PgoError::Json {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn write_manifest(&self, manifest: &RunManifest) -> Result<(), PgoError> {
        self.write_json("run.json", manifest)
    }

    pub fn read_manifest(&self) -> Result<RunManifest, PgoError> {
        self.read_json("run.json")
    }

    pub fn write_iteration(&self, record: &IterationRecord) -> Result<(), PgoError> {
        self.write_json(&format!("iter-{}.json", record.iteration), record)
    }

    /// Consecutive iteration checkpoints starting at 1.
    pub fn read_iterations(&self) -> Result<Vec<IterationRecord>, PgoError> {
        let mut out = Vec::new();
        for t in 1.. {
            if !self.iteration_path(t).exists() {
                break;
            }
            out.push(self.read_json(&format!("iter-{t}.json"))?);
        }
        Ok(out)
    }

    pub fn write_ledger(&self, ledger: &CostLedger) -> Result<(), PgoError> {
        let mut body = ledger.to_json();
        body.push('\n');
        self.write("ledger.json", &body)
    }

    pub fn read_ledger(&self) -> Result<Option<CostLedger>, PgoError> {
        let path = self.dir.join("ledger.json");
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        CostLedger::from_json(&text)
            .map(Some)
            .map_err(|source| PgoError::Json {
                path: path.display().to_string(),
                source,
            })
    }

    pub fn write_final(&self, run: &OptimizationRun) -> Result<(), PgoError> {
        self.write_json("final.json", run)
    }

    pub fn read_final(&self) -> Result<Option<OptimizationRun>, PgoError> {
        if !self.dir.join("final.json").exists() {
            return Ok(None);
        }
        self.read_json("final.json").map(Some)
    }
}

/// A configured optimizer. `codes` are the validation sub-datasets the loss
/// sums over; `guides` perturb the training batches.
pub struct Optimizer<'a> {
    pub task: &'a TaskSpec,
    pub category: Category,
    pub codes: Vec<PerturbationCode>,
    pub guides: Vec<PerturbationSpec>,
    pub config: &'a PgoConfig,
    pub backend: &'a dyn Backend,
    pub ledger: &'a CostLedger,
}

/// Guide bookkeeping carried between iterations: a guide skipped in two
/// consecutive iterations is dropped.
#[derive(Default)]
struct GuideState {
    strikes: BTreeSet<PerturbationCode>,
    dropped: BTreeSet<PerturbationCode>,
}

impl GuideState {
    fn from_record(record: &IterationRecord) -> Self {
        let dropped: BTreeSet<_> = record.dropped_guides.iter().copied().collect();
        let strikes = record
            .skipped_guides
            .iter()
            .copied()
            .filter(|c| !dropped.contains(c))
            .collect();
        GuideState { strikes, dropped }
    }

    fn update(&mut self, active: &[PerturbationCode], skipped: &BTreeSet<PerturbationCode>) {
        for code in active {
            if skipped.contains(code) {
                if !self.strikes.insert(*code) {
                    log::warn!("guide {code} skipped twice in a row, dropping it");
                    self.strikes.remove(code);
                    self.dropped.insert(*code);
                }
            } else {
                self.strikes.remove(code);
            }
        }
    }
}

/// Lowest loss wins; ties go to the shorter prompt, then to the earlier
/// entry (the incumbent comes first).
fn select_best(pool: &[(Prompt, LossReport)]) -> usize {
    let mut best = 0;
    for (i, (prompt, loss)) in pool.iter().enumerate().skip(1) {
        let (bp, bl) = &pool[best];
        let shorter = prompt.text.chars().count() < bp.text.chars().count();
        if loss.total_loss < bl.total_loss || (loss.total_loss == bl.total_loss && shorter) {
            best = i;
        }
    }
    best
}

impl Optimizer<'_> {
    fn manifest(&self, initial: &Prompt, train: &[Sample]) -> RunManifest {
        RunManifest {
            task: self.task.clone(),
            category: self.category,
            codes: self.codes.clone(),
            guides: self.guides.clone(),
            config: self.config.clone(),
            initial: initial.clone(),
            train_ids: train.iter().map(|s| s.id.clone()).collect(),
        }
    }

    fn validate(&self, train: &[Sample]) -> Result<(), PgoError> {
        self.config.validate()?;
        self.task
            .validate()
            .map_err(|e| PgoError::Invalid(e.to_string()))?;
        if train.is_empty() {
            return Err(PgoError::Invalid("empty training set".into()));
        }
        if self.codes.is_empty() || self.guides.is_empty() {
            return Err(PgoError::Invalid(format!(
                "no {} perturbation types to optimize against",
                self.category
            )));
        }
        if let Some(g) = self.guides.iter().find(|g| g.category != self.category) {
            return Err(PgoError::Invalid(format!(
                "guide {} is not {}",
                g.code, self.category
            )));
        }
        Ok(())
    }

    /// Runs the optimization loop. With a store, every iteration is
    /// checkpointed; with `resume`, completed iterations are loaded and the
    /// loop continues after the last one.
    pub fn run(
        &self,
        initial: Prompt,
        train: &[Sample],
        validation: &BTreeMap<PerturbationCode, Vec<Sample>>,
        store: Option<&RunStore>,
        resume: bool,
    ) -> Result<OptimizationRun, PgoError> {
        self.validate(train)?;
        for &code in &self.codes {
            if validation.get(&code).is_none_or(Vec::is_empty) {
                return Err(PgoError::MissingCode(code));
            }
        }
        let manifest = self.manifest(&initial, train);
        let _lock = store.map(RunStore::lock).transpose()?;
        let mut records = Vec::new();
        if let Some(store) = store {
            if resume && store.has_run() {
                let stored = store.read_manifest()?;
                if stored != manifest {
                    return Err(PgoError::ResumeMismatch(format!(
                        "{} was produced with different settings or data",
                        store.dir().join("run.json").display()
                    )));
                }
                if let Some(done) = store.read_final()? {
                    return Ok(done);
                }
                records = store.read_iterations()?;
                let calls = store.read_ledger()?.map(|l| l.calls()).unwrap_or_default();
                self.ledger.replace(calls);
                self.ledger.truncate_after(records.len() as u32);
                log::info!("resuming after iteration {}", records.len());
            } else if store.has_run() {
                return Err(PgoError::ResumeMismatch(format!(
                    "{} already holds a run; resume it or choose another directory",
                    store.dir().display()
                )));
            } else {
                store.write_manifest(&manifest)?;
            }
        }

        let mut cache: HashMap<String, LossReport> = HashMap::new();
        for record in &records {
            for c in &record.candidates {
                cache
                    .entry(c.prompt.text.clone())
                    .or_insert_with(|| c.loss.clone());
            }
        }
        let mut guides = records
            .last()
            .map(GuideState::from_record)
            .unwrap_or_default();
        let mut incumbent = records
            .last()
            .map_or(initial.clone(), |r| r.incumbent.clone());

        for t in records.len() as u32 + 1..=self.config.iterations {
            match self.iteration(t, &incumbent, train, validation, &mut cache, &mut guides) {
                Ok(record) => {
                    log::info!(
                        "iteration {t}: incumbent {} with validation score {:.4}",
                        record.incumbent.id,
                        record.incumbent_loss.score()
                    );
                    incumbent = record.incumbent.clone();
                    if let Some(store) = store {
                        store.write_iteration(&record)?;
                        store.write_ledger(self.ledger)?;
                    }
                    records.push(record);
                }
                Err(e) => {
                    if let Some(store) = store {
                        store.write_ledger(self.ledger)?;
                    }
                    return Err(e);
                }
            }
        }

        let before_final = self.ledger.calls();
        let selection = match self.select_final(&initial, &records, train, validation, &cache) {
            Ok(s) => s,
            Err(e) => {
                if let Some(store) = store {
                    self.ledger.replace(before_final);
                    store.write_ledger(self.ledger)?;
                }
                return Err(e);
            }
        };
        let run = OptimizationRun {
            manifest,
            records,
            selection,
            ledger: self.ledger.summary(),
        };
        if let Some(store) = store {
            store.write_ledger(self.ledger)?;
            store.write_final(&run)?;
        }
        Ok(run)
    }

    fn attack_seed(&self, parts: &[&str]) -> u64 {
        derive_seed(self.config.seed, parts)
    }

    fn perturb_batch(
        &self,
        t: u32,
        incumbent: &Prompt,
        batch: &[&Sample],
        active: &[PerturbationSpec],
    ) -> Result<(Vec<PerturbedSample>, Vec<FailedSample>), PgoError> {
        let metered = self.ledger.meter(self.backend, Phase::Perturb, t);
        let mut attack = self.config.perturb.clone();
        attack.seed = self.config.seed;
        let salt = format!("pgo:{t}");
        let ctx = AttackContext {
            task: self.task,
            prompt_text: &incumbent.text,
            backend: &metered,
            config: &attack,
            salt: &salt,
        };
        let results: Vec<Result<Vec<PerturbedSample>, PgoError>> = batch
            .par_iter()
            .map(|sample| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.attack_seed(&[
                    "sentence",
                    &t.to_string(),
                    &sample.id,
                ]));
                match self.category {
                    Category::P1 => mix_mode(sample, active, &ctx, &mut rng).map(|p| vec![p]),
                    Category::P2 => combined_mode(sample, active, &ctx, &mut rng),
                }
            })
            .collect();
        let mut perturbed = Vec::new();
        let mut failures = Vec::new();
        for (sample, result) in batch.iter().zip(results) {
            match result {
                Ok(mut p) => perturbed.append(&mut p),
                Err(e) if e.is_resumable() => return Err(e),
                Err(e) => {
                    log::warn!("iteration {t}: sample {} not perturbed: {e}", sample.id);
                    failures.push(FailedSample {
                        id: sample.id.clone(),
                        reason: e.to_string(),
                    });
                }
            }
        }
        Ok((perturbed, failures))
    }

    fn iteration(
        &self,
        t: u32,
        incumbent: &Prompt,
        train: &[Sample],
        validation: &BTreeMap<PerturbationCode, Vec<Sample>>,
        cache: &mut HashMap<String, LossReport>,
        guides: &mut GuideState,
    ) -> Result<IterationRecord, PgoError> {
        let ts = t.to_string();
        let batch_size = match self.category {
            Category::P1 => self.config.batch_p1,
            Category::P2 => self.config.batch_p2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.attack_seed(&["batch", &ts]));
        let mut indices =
            rand::seq::index::sample(&mut rng, train.len(), batch_size.min(train.len())).into_vec();
        indices.sort_unstable();
        let batch: Vec<&Sample> = indices.iter().map(|&i| &train[i]).collect();

        let active: Vec<PerturbationSpec> = self
            .guides
            .iter()
            .filter(|g| !guides.dropped.contains(&g.code))
            .cloned()
            .collect();
        let (perturbed, failures) = if active.is_empty() {
            (Vec::new(), Vec::new())
        } else {
            self.perturb_batch(t, incumbent, &batch, &active)?
        };
        let used: BTreeSet<PerturbationCode> = perturbed
            .iter()
            .flat_map(|p| p.applied_guides.iter().copied())
            .collect();
        let active_codes: Vec<PerturbationCode> = active.iter().map(|g| g.code).collect();
        let skipped: BTreeSet<PerturbationCode> = active_codes
            .iter()
            .copied()
            .filter(|c| !used.contains(c))
            .collect();
        guides.update(&active_codes, &skipped);

        let metered = self.ledger.meter(self.backend, Phase::Optimize, t);
        let templates = &self.config.templates;
        let tag = format!("iter-{t}");
        let mut differences = Vec::new();
        let mut gradient = None;
        let mut pool: Vec<Prompt> = vec![incumbent.clone()];
        if perturbed.is_empty() {
            log::warn!("iteration {t}: nothing perturbed, keeping the incumbent");
        } else {
            let notes: Vec<Result<DifferenceNote, PgoError>> = perturbed
                .par_iter()
                .enumerate()
                .map(|(i, p)| {
                    extract_differences(
                        &format!("d{t}-{}", i + 1),
                        &p.source_id,
                        &p.original,
                        &p.perturbed,
                        templates,
                        &metered,
                        self.attack_seed(&["difference", &ts, &i.to_string()]),
                        &tag,
                    )
                })
                .collect();
            for note in notes {
                match note {
                    Ok(n) => differences.push(n),
                    Err(e) if e.is_resumable() => return Err(e),
                    Err(e) => log::warn!("iteration {t}: {e}"),
                }
            }
            let g = generate_gradient(
                t,
                &differences,
                &incumbent.text,
                templates,
                &metered,
                self.attack_seed(&["gradient", &ts]),
            )?;
            let proposals = propose_prompts(
                incumbent,
                &g,
                self.config.proposals,
                templates,
                &metered,
                self.attack_seed(&["propose", &ts]),
            )?;
            for proposal in proposals {
                let seed = self.attack_seed(&["paraphrase", &ts, &proposal.id]);
                let rewrites = paraphrase(
                    &proposal,
                    self.config.paraphrases,
                    templates,
                    &metered,
                    seed,
                    &tag,
                )?;
                pool.push(proposal);
                for r in rewrites {
                    if !pool.iter().any(|p| p.text == r.text) {
                        pool.push(r);
                    }
                }
            }
            gradient = Some(g);
        }

        let fresh: Vec<&Prompt> = {
            let mut seen = BTreeSet::new();
            pool.iter()
                .filter(|p| !cache.contains_key(&p.text) && seen.insert(p.text.clone()))
                .collect()
        };
        let evaluated: Vec<Result<LossReport, PgoError>> = fresh
            .par_iter()
            .map(|p| evaluate_prompt_loss(&p.text, validation, &self.codes, self.task, &metered))
            .collect();
        let fresh_texts: BTreeSet<String> = fresh.iter().map(|p| p.text.clone()).collect();
        for (p, loss) in fresh.iter().zip(evaluated) {
            cache.insert(p.text.clone(), loss?);
        }
        let scored: Vec<(Prompt, LossReport)> = pool
            .iter()
            .map(|p| (p.clone(), cache[&p.text].clone()))
            .collect();
        let best = select_best(&scored);
        let candidates = scored
            .iter()
            .map(|(prompt, loss)| CandidateRecord {
                prompt: prompt.clone(),
                loss: loss.clone(),
                cached: !fresh_texts.contains(&prompt.text),
            })
            .collect();
        let (winner, winner_loss) = scored[best].clone();
        Ok(IterationRecord {
            iteration: t,
            batch: batch.iter().map(|s| s.id.clone()).collect(),
            perturbed,
            failures,
            skipped_guides: skipped.into_iter().collect(),
            dropped_guides: guides.dropped.iter().copied().collect(),
            differences,
            gradient,
            candidates,
            incumbent: winner,
            incumbent_loss: winner_loss,
        })
    }

    /// Among the initial prompt and every per-iteration incumbent, picks the
    /// best on the perturbed training samples gathered during the run. Ties
    /// go to the lower validation loss, then the shorter, then the earlier.
    fn select_final(
        &self,
        initial: &Prompt,
        records: &[IterationRecord],
        train: &[Sample],
        validation_sets: &BTreeMap<PerturbationCode, Vec<Sample>>,
        cache: &HashMap<String, LossReport>,
    ) -> Result<FinalSelection, PgoError> {
        let last = records.last().map_or(0, |r| r.iteration);
        let metered = self.ledger.meter(self.backend, Phase::Optimize, last);
        let mut samples: Vec<Sample> = records
            .iter()
            .flat_map(|r| r.perturbed.iter().map(PerturbedSample::as_sample))
            .collect();
        if samples.is_empty() {
            samples = train.to_vec();
        }
        let mut contenders: Vec<(Prompt, u32)> = vec![(initial.clone(), 0)];
        for r in records {
            if !contenders.iter().any(|(p, _)| p.text == r.incumbent.text) {
                contenders.push((r.incumbent.clone(), r.iteration));
            }
        }
        let training: Vec<f64> = contenders
            .par_iter()
            .map(|(p, _)| mean_score(&p.text, &samples, self.task, &metered))
            .collect::<Result<_, _>>()?;
        let validation: Vec<LossReport> = contenders
            .iter()
            .map(|(p, _)| match cache.get(&p.text) {
                Some(l) => Ok(l.clone()),
                None => {
                    evaluate_prompt_loss(&p.text, validation_sets, &self.codes, self.task, &metered)
                }
            })
            .collect::<Result<_, _>>()?;
        let mut best = 0;
        for i in 1..contenders.len() {
            let better = training[i] > training[best]
                || (training[i] == training[best]
                    && (validation[i].total_loss < validation[best].total_loss
                        || (validation[i].total_loss == validation[best].total_loss
                            && contenders[i].0.text.chars().count()
                                < contenders[best].0.text.chars().count())));
            if better {
                best = i;
            }
        }
        Ok(FinalSelection {
            prompt: contenders[best].0.clone(),
            training_score: training[best],
            training_samples: samples.len(),
            validation: validation[best].clone(),
            chosen_iteration: contenders[best].1,
        })
    }
}

/// One-shot optimization without checkpoints, metered into a fresh ledger.
#[allow(clippy::too_many_arguments)]
pub fn optimize(
    task: &TaskSpec,
    category: Category,
    codes: &[PerturbationCode],
    guides: &[PerturbationSpec],
    initial: Prompt,
    train: &[Sample],
    validation: &BTreeMap<PerturbationCode, Vec<Sample>>,
    config: &PgoConfig,
    backend: &dyn Backend,
) -> Result<OptimizationRun, PgoError> {
    let ledger = CostLedger::new();
    Optimizer {
        task,
        category,
        codes: codes.to_vec(),
        guides: guides.to_vec(),
        config,
        backend,
        ledger: &ledger,
    }
    .run(initial, train, validation, None, false)
}
