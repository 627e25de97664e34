use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use pertforge::backend::{CostLedger, Phase};
use pertforge::perturb::{build_benchmark, similarity_report, FailedSample, PerturbationCode};
use pertforge::tasks::load_dataset;
use serde::Serialize;
use std::collections::BTreeMap;

use crate::config::{parse_codes, RunConfig};
use crate::error::{CliError, CliResult};

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Clean JSON-Lines dataset to perturb.
    pub dataset: PathBuf,
    /// Comma-separated perturbation codes (default: all nine).
    #[arg(long)]
    pub codes: Option<String>,
    /// Output directory (default: `paths.data_dir`, else `perturbed`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Build codes the task is marked robust to as well.
    #[arg(long)]
    pub force_all: bool,
    /// Prompt the adversarial selection scores against.
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long)]
    pub prompt_file: Option<PathBuf>,
}

#[derive(Serialize)]
struct BuildSummary<'a> {
    dataset: &'a str,
    task: String,
    built: Vec<PerturbationCode>,
    skipped: &'a [PerturbationCode],
    failures: &'a BTreeMap<PerturbationCode, Vec<FailedSample>>,
    files: Vec<String>,
    tokens: u64,
}

fn write(path: &Path, body: &str) -> CliResult<()> {
    fs::write(path, body).map_err(|e| CliError::io(path, e))
}

pub fn run(config: &RunConfig, args: &BuildArgs) -> CliResult<()> {
    let codes = match &args.codes {
        Some(list) => parse_codes(list)?,
        None => PerturbationCode::ALL.to_vec(),
    };
    let task = config.task_spec();
    let prompt = config.prompt_text(args.prompt.as_deref(), args.prompt_file.as_deref())?;
    let dataset = load_dataset(&args.dataset, &task)?;
    let out = config.dir(args.out.as_deref(), &config.paths.data_dir, "perturbed");
    let mut perturb = config.perturb.clone();
    perturb.force_all |= args.force_all;

    let backend = config.backend()?;
    let ledger = CostLedger::new();
    let metered = ledger.meter(backend.as_ref(), Phase::Perturb, 0);
    let specs = config.guide_book().specs(&codes);
    let built = build_benchmark(
        &dataset,
        &specs,
        &config.sensitivity(),
        &perturb,
        &prompt,
        &metered,
    )?;

    let files = built.write(&out)?;
    let report = similarity_report(&built, &perturb, backend.as_ref())?;
    let csv_path = out.join(format!("{}.similarity.csv", dataset.name));
    write(&csv_path, &report.to_csv())?;

    let summary = BuildSummary {
        dataset: &dataset.name,
        task: task.kind.to_string(),
        built: built.subsets.keys().copied().collect(),
        skipped: &built.skipped,
        failures: &built.failures,
        files: files
            .iter()
            .map(|p| {
                p.file_name()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .into_owned()
            })
            .collect(),
        tokens: ledger.total(),
    };
    let summary_path = out.join(format!("{}.build.json", dataset.name));
    write(
        &summary_path,
        &(serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n"),
    )?;

    for (code, samples) in &built.subsets {
        let failed = built.failures.get(code).map_or(0, Vec::len);
        println!(
            "{code}: {} samples, {failed} failed -> {}",
            samples.len(),
            out.join(built.file_name(*code)).display()
        );
    }
    if !built.skipped.is_empty() {
        let skipped: Vec<&str> = built.skipped.iter().map(|c| c.as_str()).collect();
        println!("skipped (task is robust): {}", skipped.join(" "));
    }
    println!("similarity report -> {}", csv_path.display());
    print!("{}", report.to_csv());
    println!(
        "perturbation tokens: {}",
        pertforge::backend::format_millions(ledger.total())
    );
    Ok(())
}
