use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use pertforge::backend::CostLedger;
use pertforge::perturb::{Category, PerturbationCode};
use pertforge::pgo::{Optimizer, Prompt, RunStore};
use pertforge::tasks::{load_dataset, parse_dataset, Sample, TaskSpec};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    /// Clean training split.
    #[arg(long)]
    pub train: PathBuf,
    /// Clean validation split; its perturbed sub-datasets must already exist.
    #[arg(long)]
    pub val: PathBuf,
    /// Directory holding `{val}.{code}.jsonl` (default: `paths.data_dir`, else `perturbed`).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Perturbation category to optimize against.
    #[arg(long, default_value = "P1")]
    pub category: Category,
    /// Run directory (default: `paths.run_dir`, else `run`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long)]
    pub prompt_file: Option<PathBuf>,
}

/// Dataset name of a JSON-Lines path: the file name up to its first dot.
pub fn stem(path: &Path) -> String {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("dataset");
    name.split('.').next().unwrap_or(name).to_owned()
}

pub fn perturbed_path(dir: &Path, dataset: &str, code: PerturbationCode) -> PathBuf {
    dir.join(format!("{dataset}.{code}.jsonl"))
}

fn load_validation(
    dir: &Path,
    dataset: &str,
    codes: &[PerturbationCode],
    task: &TaskSpec,
) -> CliResult<BTreeMap<PerturbationCode, Vec<Sample>>> {
    let mut out = BTreeMap::new();
    for &code in codes {
        let path = perturbed_path(dir, dataset, code);
        let text = std::fs::read_to_string(&path).map_err(|_| {
            CliError::validation(format!(
                "no validation data for {code}: {} not found (run `pertforge build` on the validation split)",
                path.display()
            ))
        })?;
        let data = parse_dataset(dataset, &text, task)
            .map_err(|e| CliError::validation(format!("{code}: {}: {e}", path.display())))?;
        out.insert(code, data.samples);
    }
    Ok(out)
}

pub fn run(config: &RunConfig, args: &OptimizeArgs, resume: Option<&Path>) -> CliResult<()> {
    let task = config.task_spec();
    let initial =
        Prompt::initial(config.prompt_text(args.prompt.as_deref(), args.prompt_file.as_deref())?);
    let codes = config.sensitivity().sensitive_in(task.kind, args.category);
    if codes.is_empty() {
        return Err(CliError::validation(format!(
            "{} is robust to every {} perturbation; nothing to optimize",
            task.kind, args.category
        )));
    }
    let train = load_dataset(&args.train, &task)?;
    let data_dir = config.dir(
        args.data_dir.as_deref(),
        &config.paths.data_dir,
        "perturbed",
    );
    let validation = load_validation(&data_dir, &stem(&args.val), &codes, &task)?;

    let run_dir = match resume {
        Some(dir) => dir.to_path_buf(),
        None => config.dir(args.out.as_deref(), &config.paths.run_dir, "run"),
    };
    let store = RunStore::new(&run_dir);
    let backend = config.backend()?;
    let ledger = CostLedger::new();
    let pgo = config.pgo_config();
    let optimizer = Optimizer {
        task: &task,
        category: args.category,
        codes: codes.clone(),
        guides: config.guide_book().specs(&codes),
        config: &pgo,
        backend: backend.as_ref(),
        ledger: &ledger,
    };
    let run = optimizer
        .run(
            initial,
            &train.samples,
            &validation,
            Some(&store),
            resume.is_some(),
        )
        .map_err(|e| CliError::from_pgo(e, Some(run_dir.clone())))?;

    let selection = &run.selection;
    println!(
        "final prompt ({}, iteration {}):",
        selection.prompt.id, selection.chosen_iteration
    );
    println!("{}", selection.prompt.text);
    println!();
    println!("{:<6} {:>8}", "code", "score");
    for (code, score) in &selection.validation.per_code {
        println!("{:<6} {:>8.4}", code.as_str(), score);
    }
    println!("{:<6} {:>8.4}", "loss", selection.validation.total_loss);
    println!(
        "training score {:.4} over {} perturbed samples",
        selection.training_score, selection.training_samples
    );
    println!("{}", run.ledger.report_line());
    println!("run directory: {}", run_dir.display());
    Ok(())
}
