use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use fairpareto_core::asha::RungLadder;
use fairpareto_core::configspace::SearchSpace;
use fairpareto_core::error::Error;
use fairpareto_core::fairmetrics::{compute_ranks, fairness_metric, multi_group_metric, pearson, EmbeddingSet, FairnessMetric};
use fairpareto_core::objectives::{ObjectiveVector, Objectives};
use fairpareto_core::orchestrator::{derive_seed, run_search, SearchBudget, SearchOptions};
use fairpareto_core::paretostats::{aggregate_seeds, write_front_csv, AggregatedPoint, Filter, FrontRow, ParetoFront};
use fairpareto_core::runner::{evaluate, EvalRequest, ObjectiveBackend};
use fairpareto_core::scalarize::DEFAULT_RHO;
use fairpareto_core::store::{RunLog, RunLogWriter, TrialRecord, TrialStatus};

/// Multi-objective, multi-fidelity search over accuracy and fairness.
#[derive(Debug, Parser)]
#[command(name = "fairpareto", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a search and print the final front as CSV.
    Search(SearchArgs),
    /// Compute fairness metrics for an embedding file.
    EvalEmbeddings(EvalArgs),
    /// Extract the Pareto front from a run log.
    Pareto(ParetoArgs),
    /// Print the Pearson correlation between two objectives of a run log.
    Report(ReportArgs),
    /// Re-evaluate front members of a run log with several seeds.
    Reevaluate(ReevaluateArgs),
}

#[derive(Debug, Args)]
struct SearchArgs {
    /// Preset name or path to a space file.
    #[arg(long, default_value = "dpn_fair_v1")]
    space: String,
    /// builtin:zdt1, worker:"<cmd>" or embeddings:<path-template>.
    #[arg(long, default_value = "builtin:zdt1")]
    backend: String,
    #[arg(long, default_value_t = 25)]
    min_fidelity: u32,
    #[arg(long, default_value_t = 100)]
    max_fidelity: u32,
    #[arg(long, default_value_t = 2)]
    eta: u32,
    #[arg(long, default_value_t = DEFAULT_RHO)]
    rho: f64,
    /// Maximum number of evaluations, promotions included.
    #[arg(long)]
    budget_trials: Option<usize>,
    /// Maximum training cost in full-fidelity equivalents.
    #[arg(long)]
    budget_fidelity: Option<f64>,
    /// Wall-clock limit in seconds; running trials are cancelled when it passes.
    #[arg(long)]
    budget_seconds: Option<f64>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-evaluation timeout in seconds.
    #[arg(long)]
    timeout: Option<f64>,
    /// Consecutive failed evaluations after which the search gives up.
    #[arg(long, default_value_t = 5)]
    max_failures: usize,
    /// Run log to write (truncated if present).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// CSV or JSON Lines embedding file.
    #[arg(long)]
    file: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "rank_disparity,disparity,ratio,rank_ratio,error_ratio")]
    metrics: Vec<String>,
    /// Maximum over all group pairs; required with more than two groups.
    #[arg(long)]
    multi_group: bool,
}

#[derive(Debug, Args)]
struct RunSelection {
    #[arg(long)]
    runs: PathBuf,
    /// Only records with this fidelity; defaults to the highest reported one.
    #[arg(long)]
    fidelity: Option<u32>,
    /// Conjunction of `objective < value` clauses joined by `&&`.
    #[arg(long)]
    filter: Option<String>,
}

#[derive(Debug, Args)]
struct ParetoArgs {
    #[command(flatten)]
    select: RunSelection,
    #[arg(long, value_delimiter = ',', default_value = "error,rank_disparity")]
    objectives: Vec<String>,
    /// Average repeated evaluations of a configuration over seeds.
    #[arg(long)]
    aggregate_seeds: bool,
    /// Output CSV; standard output if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[command(flatten)]
    select: RunSelection,
    #[arg(long, value_delimiter = ',', default_value = "error,rank_disparity")]
    correlation: Vec<String>,
}

#[derive(Debug, Args)]
struct ReevaluateArgs {
    #[arg(long)]
    runs: PathBuf,
    #[arg(long, default_value = "dpn_fair_v1")]
    space: String,
    #[arg(long, default_value = "builtin:zdt1")]
    backend: String,
    #[arg(long, default_value_t = 4)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    timeout: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

/// Maps an error chain to the documented exit status.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Backend(_) | Error::Timeout(_) | Error::Protocol { .. }) => 3,
        Some(Error::Scheduler(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FAIRPARETO_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Search(a) => cmd_search(a),
        Command::EvalEmbeddings(a) => cmd_eval_embeddings(a),
        Command::Pareto(a) => cmd_pareto(a),
        Command::Report(a) => cmd_report(a),
        Command::Reevaluate(a) => cmd_reevaluate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn seconds(flag: &str, s: Option<f64>) -> anyhow::Result<Option<Duration>> {
    s.map(|s| Duration::try_from_secs_f64(s).with_context(|| format!("--{flag} must be a non-negative number of seconds")))
        .transpose()
}

fn cmd_search(a: SearchArgs) -> anyhow::Result<()> {
    let space = SearchSpace::resolve(&a.space)?;
    let backend: ObjectiveBackend = a.backend.parse()?;
    let ladder = RungLadder::new(a.min_fidelity, a.max_fidelity, a.eta)?;
    if !(a.rho >= 0.0 && a.rho.is_finite()) {
        return Err(Error::InvalidInput(format!("--rho {} must be non-negative", a.rho)).into());
    }
    let budget = SearchBudget {
        max_trials: a.budget_trials,
        max_fidelity_equivalents: a.budget_fidelity,
        wall_clock: seconds("budget-seconds", a.budget_seconds)?,
    };
    let mut opts = SearchOptions::new(ladder, budget, a.seed);
    opts.rho = a.rho;
    opts.n_workers = a.workers;
    opts.trial_timeout = seconds("timeout", a.timeout)?;
    opts.max_consecutive_failures = a.max_failures.max(1);
    budget.check()?;

    let mut log = RunLogWriter::create(&a.out)?;
    let out = run_search(&space, &backend, &opts, Some(&mut log))?;
    log::info!(
        "{} evaluations, {:.2} full-fidelity equivalents, {} on front",
        out.history.len(),
        out.fidelity_equivalents,
        out.front.len()
    );
    let rows: Vec<FrontRow> = out
        .front
        .members
        .iter()
        .map(|p| FrontRow {
            point: p.clone(),
            on_front: true,
        })
        .collect();
    write_front_csv(io::stdout().lock(), &out.objectives, &rows)?;
    Ok(())
}

fn cmd_eval_embeddings(a: EvalArgs) -> anyhow::Result<()> {
    let metrics = a
        .metrics
        .iter()
        .map(|m| m.trim().parse::<FairnessMetric>())
        .collect::<Result<Vec<_>, _>>()?;
    let set = EmbeddingSet::from_path(&a.file)?;
    let report = compute_ranks(&set)?;
    let groups = report.group_names();
    if groups.len() < 2 {
        bail!(Error::InvalidInput(format!(
            "{}: need at least two groups with evaluable probes, found {}",
            a.file.display(),
            groups.len()
        )));
    }
    if groups.len() > 2 && !a.multi_group {
        bail!(Error::InvalidInput(format!(
            "{}: {} groups found; pass --multi-group for the max-pairwise value",
            a.file.display(),
            groups.len()
        )));
    }
    let mut out = io::stdout().lock();
    writeln!(out, "metric,value")?;
    for m in metrics {
        let v = if a.multi_group {
            multi_group_metric(&report, m, &groups)?
        } else {
            fairness_metric(&report, m, &groups[0], &groups[1])?
        };
        writeln!(out, "{},{}", m.name(), v.value)?;
    }
    Ok(())
}

/// Reported records at the selected fidelity that pass the filter.
fn select_records(sel: &RunSelection, needed: &[String]) -> anyhow::Result<(u32, Vec<TrialRecord>)> {
    let log = RunLog::load(&sel.runs)?;
    let filter = sel.filter.as_deref().map(str::parse::<Filter>).transpose()?;
    let known: std::collections::BTreeSet<&str> = log
        .reported()
        .flat_map(|r| r.objectives.iter().flat_map(|o| o.keys().map(String::as_str)))
        .collect();
    let wanted = needed
        .iter()
        .map(String::as_str)
        .chain(filter.iter().flat_map(|f| f.objectives()));
    for name in wanted {
        if !known.contains(name) {
            bail!(Error::UnknownObjective(name.to_string()));
        }
    }
    let fidelity = match sel.fidelity.or_else(|| log.max_fidelity()) {
        Some(f) => f,
        None => bail!(Error::InvalidInput(format!("{}: no reported trials", sel.runs.display()))),
    };
    let mut records = Vec::new();
    for r in log.records.into_iter() {
        if r.status != TrialStatus::Reported || r.fidelity != fidelity {
            continue;
        }
        let objectives: &Objectives = r.objectives.as_ref().expect("reported records carry objectives");
        let keep = match &filter {
            Some(f) => {
                // a record lacking a filtered objective cannot satisfy the filter
                if f.objectives().any(|n| !objectives.contains_key(n)) {
                    false
                } else {
                    f.matches(objectives)?
                }
            }
            None => true,
        };
        if keep {
            records.push(r);
        }
    }
    Ok((fidelity, records))
}

fn cmd_pareto(a: ParetoArgs) -> anyhow::Result<()> {
    let objectives: Vec<String> = a.objectives.iter().map(|s| s.trim().to_string()).collect();
    let (fidelity, records) = select_records(&a.select, &objectives)?;
    let points: Vec<AggregatedPoint> = if a.aggregate_seeds {
        aggregate_seeds(&records, fidelity, &objectives)
    } else {
        records
            .iter()
            .filter_map(|r| {
                let v = ObjectiveVector::select(r.objectives.as_ref()?, &objectives)?;
                Some(AggregatedPoint::single(r.config.key(), v))
            })
            .collect()
    };
    let (front, flags) = ParetoFront::extract(&points, &objectives)?;
    log::info!("{} of {} points on the front at fidelity {fidelity}", front.len(), points.len());
    let rows: Vec<FrontRow> = points
        .into_iter()
        .zip(flags)
        .map(|(point, on_front)| FrontRow { point, on_front })
        .collect();
    match &a.out {
        Some(path) => {
            let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
            write_front_csv(BufWriter::new(f), &objectives, &rows)?;
        }
        None => write_front_csv(io::stdout().lock(), &objectives, &rows)?,
    }
    Ok(())
}

fn cmd_report(a: ReportArgs) -> anyhow::Result<()> {
    let names: Vec<String> = a.correlation.iter().map(|s| s.trim().to_string()).collect();
    if names.len() != 2 {
        bail!(Error::InvalidInput(format!(
            "--correlation takes two objectives, got {}",
            names.len()
        )));
    }
    let (_, records) = select_records(&a.select, &names)?;
    let pairs: Vec<Vec<f64>> = records
        .iter()
        .filter_map(|r| ObjectiveVector::select(r.objectives.as_ref()?, &names))
        .map(|v| v.values_in(&names))
        .collect::<Result<_, _>>()?;
    let xs: Vec<f64> = pairs.iter().map(|p| p[0]).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p[1]).collect();
    let rho = pearson(&xs, &ys)?;
    let mut out = io::stdout().lock();
    writeln!(out, "x,y,n,pearson")?;
    writeln!(out, "{},{},{},{rho}", names[0], names[1], xs.len())?;
    Ok(())
}

fn cmd_reevaluate(a: ReevaluateArgs) -> anyhow::Result<()> {
    let space = SearchSpace::resolve(&a.space)?;
    let backend: ObjectiveBackend = a.backend.parse()?;
    let objectives = backend.objective_names();
    let log = RunLog::load(&a.runs)?;
    let Some(fidelity) = log.max_fidelity() else {
        bail!(Error::InvalidInput(format!("{}: no reported trials", a.runs.display())));
    };
    let finals: Vec<&TrialRecord> = log.reported().filter(|r| r.fidelity == fidelity).collect();
    let points: Vec<ObjectiveVector> = finals
        .iter()
        .filter_map(|r| ObjectiveVector::select(r.objectives.as_ref()?, &objectives))
        .collect();
    let candidates: Vec<&TrialRecord> = finals
        .iter()
        .copied()
        .filter(|r| r.objectives.as_ref().and_then(|o| ObjectiveVector::select(o, &objectives)).is_some())
        .collect();
    let front = fairpareto_core::paretostats::pareto_front(&points)?;
    let timeout = seconds("timeout", a.timeout)?;
    let mut writer = RunLogWriter::create(&a.out)?;
    let mut counter = 0u64;
    for &i in &front {
        let member = candidates[i];
        for k in 0..a.seeds {
            let seed = derive_seed(a.seed, counter);
            counter += 1;
            let mut req = EvalRequest::new(
                &format!("{}-s{k}", member.trial_id),
                member.config.clone(),
                fidelity,
                fidelity,
                seed,
            );
            req.timeout = timeout;
            let record = match evaluate(&backend, &space, &req) {
                Ok(e) => TrialRecord::reported(req.trial_id, req.config, seed, fidelity, e.objectives, e.wall_time_s),
                Err(e) => {
                    log::warn!("{}: {e}", req.trial_id);
                    TrialRecord::failed(req.trial_id, req.config, seed, fidelity, 0.0)
                }
            };
            writer.append(&record)?;
        }
    }
    log::info!("re-evaluated {} front member(s) with {} seed(s) each", front.len(), a.seeds);
    Ok(())
}
