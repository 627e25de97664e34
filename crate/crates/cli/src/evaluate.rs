use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use pertforge::backend::{format_millions, CostLedger, Phase};
use pertforge::perturb::PerturbationCode;
use pertforge::pgo::{Prompt, RunStore};
use pertforge::tasks::{load_dataset, parse_dataset, score, ScoreReport};

use crate::config::{parse_codes, RunConfig};
use crate::error::{CliError, CliResult};
use crate::optimize::{perturbed_path, stem};

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Clean JSON-Lines datasets; perturbed siblings are picked up from `--data-dir`.
    #[arg(long = "data", required = true)]
    pub datasets: Vec<PathBuf>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Score the final prompt of a run and report its cost ledger.
    #[arg(long, conflicts_with_all = ["prompt", "prompt_file"])]
    pub run: Option<PathBuf>,
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long)]
    pub prompt_file: Option<PathBuf>,
    /// Comma-separated codes to score (default: every sub-dataset found).
    #[arg(long)]
    pub codes: Option<String>,
    /// Output directory (default: `paths.report_dir`, else `report`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Relative change of a perturbed score against the clean baseline.
pub fn relative_change(clean: f64, perturbed: f64) -> Option<f64> {
    (clean != 0.0).then(|| (perturbed - clean) / clean)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_owned(), |v| format!("{v:.6}"))
}

/// `dataset,code,metric,score,relative_change`: one baseline row per
/// dataset and metric, then one row per perturbation code.
pub fn heatmap_csv(reports: &[ScoreReport]) -> String {
    let mut out = String::from("dataset,code,metric,score,relative_change\n");
    for clean in reports.iter().filter(|r| r.code == "clean") {
        let baseline = clean.metric_values();
        for (metric, value) in &baseline {
            writeln!(
                out,
                "{},clean,{metric},{value:.6},{}",
                clean.dataset,
                cell(Some(0.0))
            )
            .unwrap();
        }
        for r in reports
            .iter()
            .filter(|r| r.dataset == clean.dataset && r.code != "clean")
        {
            for ((metric, value), (_, base)) in r.metric_values().iter().zip(&baseline) {
                writeln!(
                    out,
                    "{},{},{metric},{value:.6},{}",
                    r.dataset,
                    r.code,
                    cell(relative_change(*base, *value))
                )
                .unwrap();
            }
        }
    }
    out
}

fn write(path: &Path, body: &str) -> CliResult<()> {
    std::fs::write(path, body).map_err(|e| CliError::io(path, e))
}

pub fn run(config: &RunConfig, args: &EvaluateArgs) -> CliResult<()> {
    let task = config.task_spec();
    let (prompt, run_ledger) = match &args.run {
        Some(dir) => {
            let store = RunStore::new(dir);
            let run = store
                .read_final()
                .map_err(|e| CliError::from_pgo(e, None))?
                .ok_or_else(|| {
                    CliError::validation(format!("{} has no final.json", dir.display()))
                })?;
            (run.selection.prompt, Some(run.ledger))
        }
        None => (
            Prompt::initial(
                config.prompt_text(args.prompt.as_deref(), args.prompt_file.as_deref())?,
            ),
            None,
        ),
    };
    let wanted = args.codes.as_deref().map(parse_codes).transpose()?;
    let data_dir = config.dir(
        args.data_dir.as_deref(),
        &config.paths.data_dir,
        "perturbed",
    );
    let out = config.dir(args.out.as_deref(), &config.paths.report_dir, "report");
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;

    let backend = config.backend()?;
    let ledger = CostLedger::new();
    let metered = ledger.meter(backend.as_ref(), Phase::Optimize, 0);
    let mut reports = Vec::new();
    for path in &args.datasets {
        let clean = load_dataset(path, &task)?;
        let name = stem(path);
        reports.push(score(
            &task,
            &prompt,
            &clean.samples,
            &metered,
            &name,
            "clean",
        )?);
        for code in wanted
            .clone()
            .unwrap_or_else(|| PerturbationCode::ALL.to_vec())
        {
            let file = perturbed_path(&data_dir, &name, code);
            let text = match std::fs::read_to_string(&file) {
                Ok(text) => text,
                Err(_) if wanted.is_none() => continue,
                Err(_) => {
                    return Err(CliError::validation(format!(
                        "no data for {code}: {} not found",
                        file.display()
                    )))
                }
            };
            let data = parse_dataset(&name, &text, &task)?;
            reports.push(score(
                &task,
                &prompt,
                &data.samples,
                &metered,
                &name,
                code.as_str(),
            )?);
        }
    }

    write(
        &out.join("scores.json"),
        &(serde_json::to_string_pretty(&reports).expect("reports serialize") + "\n"),
    )?;
    let mut csv = format!("{}\n", ScoreReport::CSV_HEADER);
    for r in &reports {
        for row in r.csv_rows() {
            csv.push_str(&row);
            csv.push('\n');
        }
    }
    write(&out.join("scores.csv"), &csv)?;
    let heatmap = heatmap_csv(&reports);
    write(&out.join("heatmap.csv"), &heatmap)?;

    let mut cost = format!(
        "evaluation: {} over {} calls\n",
        format_millions(ledger.total()),
        ledger.summary().calls
    );
    if let Some(summary) = &run_ledger {
        writeln!(cost, "{}", summary.report_line()).unwrap();
    }
    write(&out.join("cost.txt"), &cost)?;

    print!("{csv}");
    println!();
    print!("{heatmap}");
    println!();
    print!("{cost}");
    println!("reports -> {}", out.display());
    Ok(())
}
