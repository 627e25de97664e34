use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use pertforge::backend::{format_millions, CostLedger};
use pertforge::pgo::{IterationRecord, Prompt, RunStore};

use crate::error::{CliError, CliResult};

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directory written by `optimize`.
    pub run: PathBuf,
    /// Also write `trajectory.csv` and `cost.csv` here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// `iteration,incumbent,score,candidates,perturb_tokens,optimize_tokens`
pub fn trajectory_csv(records: &[IterationRecord], ledger: &CostLedger) -> String {
    let summary = ledger.summary();
    let mut out =
        String::from("iteration,incumbent,score,candidates,perturb_tokens,optimize_tokens\n");
    for r in records {
        let cost = summary
            .iterations
            .get(&r.iteration)
            .cloned()
            .unwrap_or_default();
        writeln!(
            out,
            "{},{},{:.6},{},{},{}",
            r.iteration,
            r.incumbent.id,
            r.incumbent_loss.score(),
            r.candidates.len(),
            cost.perturb,
            cost.optimize
        )
        .unwrap();
    }
    out
}

/// Ids from `prompt` back to the initial prompt.
fn lineage(prompt: &Prompt, records: &[IterationRecord]) -> Vec<String> {
    let known: BTreeMap<&str, &Prompt> = records
        .iter()
        .flat_map(|r| {
            r.candidates
                .iter()
                .map(|c| (c.prompt.id.as_str(), &c.prompt))
        })
        .collect();
    let mut chain = vec![prompt.id.clone()];
    let mut parent = prompt.parent.as_deref();
    while let Some(id) = parent {
        chain.push(id.to_owned());
        parent = known.get(id).and_then(|p| p.parent.as_deref());
    }
    chain
}

pub fn run(args: &ReportArgs) -> CliResult<()> {
    let store = RunStore::new(&args.run);
    let pgo = |e| CliError::from_pgo(e, None);
    if !store.has_run() {
        return Err(CliError::validation(format!(
            "{} is not a run directory",
            args.run.display()
        )));
    }
    let manifest = store.read_manifest().map_err(pgo)?;
    let records = store.read_iterations().map_err(pgo)?;
    let ledger = store.read_ledger().map_err(pgo)?.unwrap_or_default();
    let finished = store.read_final().map_err(pgo)?;

    println!(
        "{} run over {} ({}), {} of {} iterations",
        manifest.task.kind,
        manifest.category,
        manifest
            .codes
            .iter()
            .map(|c| c.as_str())
            .collect::<Vec<_>>()
            .join(" "),
        records.len(),
        manifest.config.iterations
    );
    let trajectory = trajectory_csv(&records, &ledger);
    print!("{trajectory}");

    let summary = ledger.summary();
    let mut cost = String::from("iteration,A,O\n");
    for (i, c) in &summary.iterations {
        writeln!(
            cost,
            "{i},{},{}",
            format_millions(c.perturb),
            format_millions(c.optimize)
        )
        .unwrap();
    }
    println!("{}", summary.report_line());

    match &finished {
        Some(run) => {
            let s = &run.selection;
            println!(
                "final prompt {} (lineage {}):",
                s.prompt.id,
                lineage(&s.prompt, &run.records).join(" <- ")
            );
            println!("{}", s.prompt.text);
            for (code, score) in &s.validation.per_code {
                println!("  {code}: {score:.4}");
            }
            println!(
                "training score {:.4} over {} samples",
                s.training_score, s.training_samples
            );
        }
        None => println!(
            "run has not finished; continue it with `pertforge optimize --resume {}`",
            args.run.display()
        ),
    }

    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
        for (name, body) in [("trajectory.csv", &trajectory), ("cost.csv", &cost)] {
            let path = out.join(name);
            std::fs::write(&path, body).map_err(|e| CliError::io(&path, e))?;
        }
    }
    Ok(())
}
