//! The `epruner` command line.
//!
//! Exit codes: 0 on success, 1 when the command fails, 2 on usage errors.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::affinity::{run_ap, ApOptions, SimilarityMatrix, DEFAULT_DAMPING, DEFAULT_ITERATIONS};
use crate::arch::{builtin, parse_graph, ArchitectureGraph, BUILTIN_NAMES};
use crate::bundle::{read_bundle, write_bundle};
use crate::error::{Error, Result};
use crate::init::{prune_bundle, InitConfig, InitStrategy};
use crate::metrics::count;
use crate::plan::{plan, PruningPlan};

#[derive(Debug, Parser)]
#[command(name = "epruner", version, about = "Exemplar-based filter pruning")]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true, env = "EPRUNER_THREADS", value_parser = clap::value_parser!(u16).range(1..))]
    threads: Option<u16>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Select exemplar filters and write a pruning plan.
    Plan(PlanArgs),
    /// Apply a plan (or plan on the fly) and write the pruned bundle.
    Prune(PruneArgs),
    /// Report channels, FLOPs and parameters.
    Metrics(MetricsArgs),
    /// Run exemplar selection on a similarity matrix file.
    Ap(ApArgs),
}

#[derive(Debug, Args)]
struct SelectionArgs {
    /// Message damping in [0, 1].
    #[arg(long, default_value_t = DEFAULT_DAMPING)]
    damping: f64,
    /// Number of message-passing rounds.
    #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
    iterations: usize,
    /// Stop once assignments are unchanged for 20 rounds.
    #[arg(long)]
    early_exit: bool,
}

impl SelectionArgs {
    fn options(&self) -> ApOptions {
        ApOptions {
            damping: self.damping,
            iterations: self.iterations,
            early_exit: self.early_exit,
        }
    }
}

#[derive(Debug, Args)]
struct PlanArgs {
    /// Architecture descriptor file, or `builtin:<name>`.
    #[arg(long)]
    arch: String,
    /// Model bundle with the trained weights.
    #[arg(long)]
    bundle: PathBuf,
    /// Preference scale in (0, 1].
    #[arg(long)]
    beta: f64,
    #[command(flatten)]
    selection: SelectionArgs,
    /// Plan output file; printed to stdout when omitted.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PruneArgs {
    /// Architecture descriptor file, or `builtin:<name>`.
    #[arg(long)]
    arch: String,
    /// Model bundle with the trained weights.
    #[arg(long)]
    bundle: PathBuf,
    /// Existing plan file.
    #[arg(long, conflicts_with = "beta", required_unless_present = "beta")]
    plan: Option<PathBuf>,
    /// Plan on the fly with this preference scale.
    #[arg(long)]
    beta: Option<f64>,
    #[command(flatten)]
    selection: SelectionArgs,
    /// Weight initialization of the pruned network.
    #[arg(long, value_enum, default_value_t = InitArg::Exemplar)]
    init: InitArg,
    /// Seed for the `proj` and `random` strategies.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pruned bundle output file.
    #[arg(long, short)]
    out: PathBuf,
    /// Also write the applied plan here.
    #[arg(long)]
    plan_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum InitArg {
    Exemplar,
    Proj,
    L1,
    Random,
}

impl From<InitArg> for InitStrategy {
    fn from(a: InitArg) -> Self {
        match a {
            InitArg::Exemplar => InitStrategy::Exemplar,
            InitArg::Proj => InitStrategy::RandomProjection,
            InitArg::L1 => InitStrategy::L1Norm,
            InitArg::Random => InitStrategy::RandomGaussian,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Json,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    /// Architecture descriptor file, or `builtin:<name>`.
    #[arg(long)]
    arch: String,
    /// Count the network as pruned by this plan.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
    /// Shorthand for `--format json`.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct ApArgs {
    /// Square matrix, one whitespace-separated row per line; `#` starts a
    /// comment. The diagonal holds the preferences.
    matrix: PathBuf,
    #[command(flatten)]
    selection: SelectionArgs,
}

/// Runs the CLI on the process arguments.
pub fn main() -> i32 {
    run(std::env::args_os())
}

/// Runs the CLI on `args` (including the program name) and returns the exit
/// code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        pool = pool.num_threads(n.into());
    }
    let result = match pool.build() {
        Ok(pool) => pool.install(|| dispatch(cli.command)),
        Err(e) => Err(Error::Parameter(format!("cannot start worker threads: {e}"))),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Plan(a) => cmd_plan(a),
        Command::Prune(a) => cmd_prune(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Ap(a) => cmd_ap(a),
    }
}

/// Loads `builtin:<name>` or a descriptor file.
pub fn load_arch(spec: &str) -> Result<ArchitectureGraph> {
    if let Some(name) = spec.strip_prefix("builtin:") {
        return builtin(name).ok_or_else(|| {
            Error::Parameter(format!(
                "unknown built-in architecture `{name}` (available: {})",
                BUILTIN_NAMES.join(", ")
            ))
        });
    }
    parse_graph(&read_text(Path::new(spec))?)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn stdout(text: &str) -> Result<()> {
    std::io::stdout()
        .lock()
        .write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

fn plan_summary(plan: &PruningPlan) -> String {
    let rows: Vec<_> = plan.layers.iter().filter(|l| l.prunable).collect();
    let width = rows.iter().map(|l| l.name.len()).chain([5]).max().unwrap_or(5);
    let mut out = format!("{:<width$}  {:>6}  {:>8}\n", "layer", "kept", "baseline");
    for l in rows {
        out += &format!(
            "{:<width$}  {:>6}  {:>8}\n",
            l.name,
            l.kept_outputs(),
            l.baseline_outputs
        );
    }
    out += &format!(
        "{:<width$}  {:>6}  {:>8}\n",
        "total", plan.totals.kept, plan.totals.baseline
    );
    out
}

fn cmd_plan(a: PlanArgs) -> Result<()> {
    let arch = load_arch(&a.arch)?;
    let bundle = read_bundle(&a.bundle)?;
    let p = plan(&arch, &bundle, a.beta, &a.selection.options())?;
    match &a.out {
        Some(path) => {
            write_text(path, &p.to_json())?;
            stdout(&plan_summary(&p))
        }
        None => {
            eprint!("{}", plan_summary(&p));
            stdout(&p.to_json())
        }
    }
}

fn cmd_prune(a: PruneArgs) -> Result<()> {
    let arch = load_arch(&a.arch)?;
    let bundle = read_bundle(&a.bundle)?;
    let p = match (&a.plan, a.beta) {
        (Some(path), _) => PruningPlan::from_json(&read_text(path)?)?,
        (None, Some(beta)) => plan(&arch, &bundle, beta, &a.selection.options())?,
        (None, None) => unreachable!("clap requires --plan or --beta"),
    };
    let cfg = InitConfig {
        strategy: a.init.into(),
        seed: a.seed,
        projection_density: None,
    };
    let pruned = prune_bundle(&arch, &bundle, &p, &cfg)?;
    write_bundle(&pruned.bundle, &a.out)?;
    if let Some(path) = &a.plan_out {
        write_text(path, &pruned.plan.to_json())?;
    }
    stdout(&plan_summary(&pruned.plan))
}

fn cmd_metrics(a: MetricsArgs) -> Result<()> {
    let arch = load_arch(&a.arch)?;
    let p = match &a.plan {
        Some(path) => Some(PruningPlan::from_json(&read_text(path)?)?),
        None => None,
    };
    let report = count(&arch, p.as_ref())?;
    match (a.json, a.format) {
        (true, _) | (false, Format::Json) => stdout(&report.to_json()),
        (false, Format::Table) => stdout(&report.to_table()),
    }
}

fn cmd_ap(a: ApArgs) -> Result<()> {
    let s = SimilarityMatrix::from_text(&read_text(&a.matrix)?)?;
    let result = run_ap(&s, &a.selection.options())?;
    let text: String = result.exemplars.iter().map(|e| format!("{e}\n")).collect();
    stdout(&text)
}
