//! `bcfl` — solve, audit, and verify the two-stage pricing mechanism
//! from the command line.
//!
//! Exit codes: 0 = success and every enabled check passed; 1 = a
//! well-formed request hit an infeasibility (unpriceable bounds,
//! infeasible prices, empty search set, unwritable output); 2 = a
//! verification check ran and failed its tolerance; 3 = usage or
//! config-parse error.

mod commands;
mod config;

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};

use bcfl_core::stackelberg::Scenario;

use config::RunConfig;

/// Command-line front end for the two-stage incentive-mechanism solver.
///
/// Without --config, every command runs the canonical instance: 50
/// identical clients (demand 10, unit cost 0.01, rate cap 100), horizon
/// 15, block size 5, round budget 1500 with 5 per client reserved for
/// mining, cost weight 0.1, target performance 10.
#[derive(Parser)]
#[command(name = "bcfl", version, disable_help_subcommand = true)]
struct Cli {
    /// Path to a JSON run configuration (strict: all keys required,
    /// unknown keys rejected).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output root for run directories (overrides BCFL_OUT_DIR;
    /// default ./bcfl-out).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

/// Information regime to solve.
#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScenarioArg {
    Complete,
    Incomplete,
}

impl From<ScenarioArg> for Scenario {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::Complete => Scenario::Complete,
            ScenarioArg::Incomplete => Scenario::Incomplete,
        }
    }
}

/// Information regime(s) to run.
#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScenarioSet {
    Complete,
    Incomplete,
    Both,
}

impl ScenarioSet {
    fn list(self) -> Vec<Scenario> {
        match self {
            ScenarioSet::Complete => vec![Scenario::Complete],
            ScenarioSet::Incomplete => vec![Scenario::Incomplete],
            ScenarioSet::Both => vec![Scenario::Complete, Scenario::Incomplete],
        }
    }
    fn label(self) -> &'static str {
        match self {
            ScenarioSet::Complete => "complete",
            ScenarioSet::Incomplete => "incomplete",
            ScenarioSet::Both => "both",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Solve one instance and print the per-client equilibrium table.
    Solve {
        /// Regime to solve (default: the config's `scenario`).
        #[arg(long, value_enum)]
        scenario: Option<ScenarioArg>,
        /// Also write the full equilibrium as JSON to this path.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Check the closed forms against brute-force searches and
    /// first-order certificates; write a machine-readable report.
    Verify {
        /// Regime(s) to verify.
        #[arg(long, value_enum, default_value = "both")]
        scenario: ScenarioSet,
        /// Grid points per axis for the searches.
        #[arg(long)]
        points: Option<usize>,
        /// Relative tolerance for the follower-search gap.
        #[arg(long, default_value_t = 1e-3)]
        stage2_tol: f64,
        /// Relative tolerance for the leader-search gap.
        #[arg(long, default_value_t = 1e-3)]
        stage1_tol: f64,
        /// Relative tolerance for first-order residuals.
        #[arg(long, default_value_t = 1e-8)]
        kkt_tol: f64,
        /// Relative tolerance for the nested (fully independent) search.
        #[arg(long, default_value_t = 5e-2)]
        nested_tol: f64,
        /// Verify these hand-entered prices "p_t,p_m" instead of the
        /// closed forms (negative control: wrong prices must fail).
        #[arg(long, value_name = "P_T,P_M")]
        prices_override: Option<String>,
        /// Also run the nested search (inner grid replaces the
        /// closed-form follower) with this many points per axis.
        #[arg(long, value_name = "POINTS", num_args = 0..=1, default_missing_value = "50")]
        nested_grid: Option<usize>,
    },
    /// Run one parameter sweep and write its CSV table.
    Sweep {
        /// Sweep kind: demand_blocksize, price_grid, demand,
        /// train_price, or blocksize.
        #[arg(long)]
        kind: String,
        /// Points per swept axis (defaults: 26 for the two-axis sweeps,
        /// 51 for the single-axis ones).
        #[arg(long)]
        points: Option<usize>,
        /// Regime to sweep (default: the config's `scenario`).
        #[arg(long, value_enum)]
        scenario: Option<ScenarioArg>,
        /// Seed override (default: the config's `seed`).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Play the four {optimal,random}^2 strategy pairs over seeded
    /// trials and write the utility table.
    Tournament {
        /// Trials per strategy pair.
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Regime(s) to play.
        #[arg(long, value_enum, default_value = "both")]
        scenario: ScenarioSet,
        /// Seed override (default: the config's `seed`).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compute reward shares (Shapley values) and training bounds.
    Shapley {
        /// Require exact enumeration (error above the size limit)
        /// instead of switching to the sampled estimator.
        #[arg(long)]
        exact: bool,
        /// Permutation samples for the sampled estimator.
        #[arg(long)]
        samples: Option<usize>,
        /// Seed override (default: the config's `seed`).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Audit truth-telling: re-solve the mechanism for a grid of
    /// misreported demands and tabulate each report's realized gain.
    AuditIc {
        /// Roster index of the audited client.
        #[arg(long, default_value_t = 0)]
        client: usize,
        /// Misreport grid "lo:hi:step".
        #[arg(long, default_value = "5:15:0.5")]
        grid: String,
        /// Permutation samples for sampled reward shares.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Run the full deterministic reproduction: every experiment table
    /// plus a machine-readable summary of the checks they support.
    Reproduce {
        /// Seed override (default: the config's `seed`).
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// CLI-level error with its exit code.
#[derive(Debug)]
pub enum CliError {
    Core(bcfl_core::Error),
    Io { path: PathBuf, source: std::io::Error },
    Usage(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            CliError::Usage(msg) => write!(f, "{msg}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        use bcfl_core::Error::*;
        match self {
            CliError::Core(e) => match e {
                InfeasiblePrice { .. }
                | InfeasibleBudget { .. }
                | MechanismRejects { .. }
                | DegenerateCoalition
                | EmptyFeasibleSet(_) => 1,
                _ => 3,
            },
            CliError::Io { .. } => 1,
            CliError::Usage(_) => 3,
        }
    }
}

impl From<bcfl_core::Error> for CliError {
    fn from(e: bcfl_core::Error) -> Self {
        CliError::Core(e)
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp
                | ErrorKind::DisplayVersion
                | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => 0,
                _ => 3,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn run(cli: Cli) -> Result<i32, CliError> {
    // Load the configuration; without --config, the canonical defaults.
    let (config, base_dir) = match &cli.config {
        Some(path) => {
            let cfg = RunConfig::load(path)?;
            let base = path.parent().map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
            (cfg, base)
        }
        None => (RunConfig::default(), PathBuf::from(".")),
    };
    let out_root = cli
        .out_dir
        .or_else(|| std::env::var_os("BCFL_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("bcfl-out"));

    let ctx = commands::Context { config, base_dir, out_root };
    match cli.command {
        Command::Solve { scenario, output } => {
            commands::solve(&ctx, scenario.map(Scenario::from), output.as_deref())
        }
        Command::Verify {
            scenario,
            points,
            stage2_tol,
            stage1_tol,
            kkt_tol,
            nested_tol,
            prices_override,
            nested_grid,
        } => commands::verify(
            &ctx,
            commands::VerifyArgs {
                scenarios: scenario.list(),
                scenario_label: scenario.label(),
                points,
                stage2_tol,
                stage1_tol,
                kkt_tol,
                nested_tol,
                prices_override,
                nested_grid,
            },
        ),
        Command::Sweep { kind, points, scenario, seed } => {
            commands::sweep(&ctx, &kind, points, scenario.map(Scenario::from), seed)
        }
        Command::Tournament { trials, scenario, seed } => {
            commands::tournament(&ctx, trials, scenario.list(), scenario.label(), seed)
        }
        Command::Shapley { exact, samples, seed } => {
            commands::shapley(&ctx, exact, samples, seed)
        }
        Command::AuditIc { client, grid, samples } => {
            commands::audit_ic(&ctx, client, &grid, samples)
        }
        Command::Reproduce { seed } => commands::reproduce(&ctx, seed),
    }
}
