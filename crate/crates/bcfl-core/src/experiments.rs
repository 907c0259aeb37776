//! Deterministic experiment drivers.
//!
//! Every driver is a pure function of its spec and seed: randomness comes
//! from counter-mode streams keyed by (seed, sample index), reductions
//! run in canonical order regardless of thread count, and output tables
//! are byte-stable. CSV files use `\n` line endings, `true`/`false` for
//! booleans, 12-significant-digit scientific notation for floats, and
//! empty fields where a value does not exist (infeasible rows). Each
//! table ships with a `.meta` sidecar of `key=value` lines recording the
//! spec, seed, floors, and accounting totals.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{
    client_utility, mo_utility, ClientProfile, MiningBudget, PerfFn, PowerPair, PricePair,
    SystemConfig,
};
use crate::oracle::{
    default_power_grid, grid_best_response, grid_optimal_prices, kkt_residuals_stage1,
    kkt_residuals_stage2,
};
use crate::shapley::{reward_bounds, BoundsOptions, CoalitionValues};
use crate::stackelberg::{
    best_response, ic_audit, optimal_prices_complete, optimal_prices_incomplete,
    run_algorithm_complete, run_algorithm_incomplete, MisreportGrid, Scenario,
};

/// Floor substituted for zero endpoints of swept ranges (the closed
/// forms divide by the swept quantities).
pub const SWEEP_FLOOR: f64 = 1e-3;

/// Canonical system settings used throughout the examples and tests:
/// horizon 15, block size 5, round budget 1500 with 5 per client
/// reserved for mining, unit-cost weight 0.1, target performance 10.
pub fn canonical_config() -> SystemConfig {
    SystemConfig {
        horizon: 15.0,
        psi: 5.0,
        budget_total: 1500.0,
        mining: MiningBudget::PerClient(5.0),
        xi: 0.1,
        target_perf: 10.0,
        perf_fn: PerfFn::Identity,
    }
}

/// A roster of `n` identical clients (demand `mu`, unit cost 0.01, cap 100).
pub fn identical_roster(n: usize, mu: f64) -> Vec<ClientProfile> {
    (0..n).map(|i| ClientProfile::new(i, mu, 0.01, 100.0).expect("valid profile")).collect()
}

/// Canonical roster: 50 identical clients with demand 10.
pub fn canonical_roster() -> Vec<ClientProfile> {
    identical_roster(50, 10.0)
}

fn fmt_f(x: f64) -> String {
    format!("{x:.11e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f).unwrap_or_default()
}

fn fmt_bool_opt(b: Option<bool>) -> String {
    match b {
        Some(true) => "true".into(),
        Some(false) => "false".into(),
        None => String::new(),
    }
}

/// An in-memory CSV table plus its sidecar metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    /// File stem the table wants on disk (no extension).
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    /// key=value pairs for the sidecar, in emission order.
    pub meta: Vec<(String, String)>,
}

impl Table {
    /// Empty table with the given file stem and column names.
    pub fn new(name: &str, header: &[&str]) -> Self {
        Table {
            name: name.to_string(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
            meta: Vec::new(),
        }
    }

    /// Appends one sidecar `key=value` entry.
    pub fn push_meta(&mut self, key: &str, value: impl std::fmt::Display) {
        self.meta.push((key.to_string(), value.to_string()));
    }

    /// CSV bytes: header then rows, `\n` endings throughout.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.header.join(","));
        for row in &self.rows {
            debug_assert_eq!(row.len(), self.header.len());
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }

    /// Sidecar bytes: `key=value` lines.
    pub fn to_meta(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.meta {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    /// Writes `<dir>/<name>.csv` and `<dir>/<name>.meta`; returns the CSV path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let csv = dir.join(format!("{}.csv", self.name));
        let meta = dir.join(format!("{}.meta", self.name));
        std::fs::write(&csv, self.to_csv())
            .map_err(|e| Error::Config(format!("cannot write {}: {e}", csv.display())))?;
        std::fs::write(&meta, self.to_meta())
            .map_err(|e| Error::Config(format!("cannot write {}: {e}", meta.display())))?;
        Ok(csv)
    }

    /// Column index by name.
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

/// Which side(s) play their equilibrium strategy in a tournament pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Optimal,
    Random,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Strategy::Optimal => write!(f, "optimal"),
            Strategy::Random => write!(f, "random"),
        }
    }
}

const PAIRS: [(Strategy, Strategy); 4] = [
    (Strategy::Optimal, Strategy::Optimal),
    (Strategy::Optimal, Strategy::Random),
    (Strategy::Random, Strategy::Optimal),
    (Strategy::Random, Strategy::Random),
];

/// Mean and standard deviation of one strategy pair's utilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairStats {
    pub client_strategy: Strategy,
    pub mo_strategy: Strategy,
    pub trials: usize,
    pub skipped: usize,
    pub client_mean: f64,
    pub client_std: f64,
    pub mo_mean: f64,
    pub mo_std: f64,
}

/// Tournament outcome: per-trial rows plus per-pair aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct Tournament {
    pub scenario: Scenario,
    pub stats: Vec<PairStats>,
    pub table: Table,
}

/// Upper bound of the uniform price box random operators draw from.
pub const RANDOM_PRICE_HI: f64 = 10.0;
const MAX_RETRIES: usize = 1000;

/// Draws a price pair uniformly from (0, 10]^2 until the training price
/// admits a follower response; None when retries run out.
fn draw_prices(
    rng: &mut ChaCha8Rng,
    profile: &ClientProfile,
    config: &SystemConfig,
) -> Option<PricePair> {
    let min_p_t = profile.rho * (profile.mu / config.horizon).powi(3);
    for _ in 0..MAX_RETRIES {
        let p_t = rng.random_range(0.0..RANDOM_PRICE_HI);
        let p_m = rng.random_range(0.0..RANDOM_PRICE_HI);
        if p_t > min_p_t && p_m >= SWEEP_FLOOR {
            return Some(PricePair { p_t, p_m });
        }
    }
    None
}

/// Draws CPU rates uniformly from the feasible region at `prices` (both
/// payoffs non-negative, time within the horizon) by rejection from its
/// bounding box; None when retries run out.
fn draw_powers(
    rng: &mut ChaCha8Rng,
    profile: &ClientProfile,
    config: &SystemConfig,
    prices: PricePair,
) -> Option<PowerPair> {
    let q_t_lo = profile.mu / config.horizon;
    let q_t_hi = (prices.p_t / profile.rho).cbrt();
    let q_m_lo = config.psi / config.horizon;
    let q_m_hi = (prices.p_m / profile.rho).cbrt();
    if !(q_t_hi > q_t_lo) || !(q_m_hi > q_m_lo) {
        return None;
    }
    for _ in 0..MAX_RETRIES {
        let q_t = rng.random_range(q_t_lo..=q_t_hi);
        let q_m = rng.random_range(q_m_lo..=q_m_hi);
        if profile.mu / q_t + config.psi / q_m <= config.horizon {
            return Some(PowerPair { q_t, q_m });
        }
    }
    None
}

/// Plays the four {optimal, random}^2 strategy pairs for `trials` seeded
/// rounds on an identical roster and reports utilities per pair.
///
/// Optimal operators price by the scenario's closed form from the
/// roster's reward bounds; random operators draw one price pair per
/// trial uniformly from (0, 10]^2 (resampled until the follower's
/// problem is feasible). Optimal clients best-respond to whatever prices
/// they face; random clients draw rates uniformly from the feasible
/// region, independently per client. Draws that exhaust their retry
/// budget skip the trial and are counted in the table metadata.
pub fn strategy_tournament(
    profiles: &[ClientProfile],
    config: &SystemConfig,
    scenario: Scenario,
    trials: usize,
    seed: u64,
) -> Result<Tournament> {
    if trials == 0 {
        return Err(Error::Config("tournament needs at least one trial".into()));
    }
    let n = profiles.len();
    let values = CoalitionValues::from_profiles(profiles, config)?;
    let bounds = reward_bounds(profiles, config, &values, &BoundsOptions::default())?;
    let optimal_prices: Vec<PricePair> = profiles
        .iter()
        .enumerate()
        .map(|(i, p)| match scenario {
            Scenario::Complete => optimal_prices_complete(p, config, bounds.train[i], bounds.mine),
            Scenario::Incomplete => {
                optimal_prices_incomplete(p, config, bounds.train[i], bounds.mine)
            }
        })
        .collect::<Result<_>>()?;

    // One RNG stream per (trial, pair): draws inside a trial-pair are
    // sequential, trials are embarrassingly parallel.
    #[derive(Clone, Copy)]
    enum Outcome {
        Played { client: f64, mo: f64 },
        Skipped,
    }
    let play = |trial: usize, pair_ix: usize| -> Result<Outcome> {
        let (client_s, mo_s) = PAIRS[pair_ix];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((trial * PAIRS.len() + pair_ix) as u64);

        let prices: Vec<PricePair> = match mo_s {
            Strategy::Optimal => optimal_prices.clone(),
            Strategy::Random => {
                // One draw per trial: every client faces the same posted pair.
                match draw_prices(&mut rng, &profiles[0], config) {
                    Some(p) => vec![p; n],
                    None => return Ok(Outcome::Skipped),
                }
            }
        };
        let mut powers = Vec::with_capacity(n);
        for (i, p) in profiles.iter().enumerate() {
            let q = match client_s {
                Strategy::Optimal => best_response(p, config, prices[i])?,
                Strategy::Random => match draw_powers(&mut rng, p, config, prices[i]) {
                    Some(q) => q,
                    None => return Ok(Outcome::Skipped),
                },
            };
            powers.push(q);
        }
        let mut client_total = 0.0;
        for (i, p) in profiles.iter().enumerate() {
            let (u, _) = client_utility(p, config, prices[i], powers[i])?;
            client_total += u;
        }
        let mo = mo_utility(profiles, config, &prices, &powers)?;
        Ok(Outcome::Played { client: client_total / n as f64, mo })
    };

    let outcomes: Vec<Result<Outcome>> = (0..trials * PAIRS.len())
        .into_par_iter()
        .map(|k| play(k / PAIRS.len(), k % PAIRS.len()))
        .collect();

    let mut table = Table::new(
        "strategy_tournament",
        &["scenario", "client_strategy", "mo_strategy", "trial", "client_utility", "mo_utility", "seed"],
    );
    let mut per_pair: Vec<Vec<(f64, f64)>> = vec![Vec::new(); PAIRS.len()];
    let mut skipped = vec![0usize; PAIRS.len()];
    for (k, outcome) in outcomes.into_iter().enumerate() {
        let (trial, pair_ix) = (k / PAIRS.len(), k % PAIRS.len());
        let (client_s, mo_s) = PAIRS[pair_ix];
        match outcome? {
            Outcome::Played { client, mo } => {
                per_pair[pair_ix].push((client, mo));
                table.rows.push(vec![
                    scenario.to_string(),
                    client_s.to_string(),
                    mo_s.to_string(),
                    trial.to_string(),
                    fmt_f(client),
                    fmt_f(mo),
                    seed.to_string(),
                ]);
            }
            Outcome::Skipped => skipped[pair_ix] += 1,
        }
    }

    let stats: Vec<PairStats> = PAIRS
        .iter()
        .enumerate()
        .map(|(ix, &(client_s, mo_s))| {
            let xs = &per_pair[ix];
            let m = xs.len().max(1) as f64;
            let (cm, mm) = xs.iter().fold((0.0, 0.0), |a, x| (a.0 + x.0, a.1 + x.1));
            let (cm, mm) = (cm / m, mm / m);
            let (cv, mv) = xs.iter().fold((0.0, 0.0), |a, x| {
                (a.0 + (x.0 - cm) * (x.0 - cm), a.1 + (x.1 - mm) * (x.1 - mm))
            });
            let denom = (xs.len().saturating_sub(1)).max(1) as f64;
            PairStats {
                client_strategy: client_s,
                mo_strategy: mo_s,
                trials: xs.len(),
                skipped: skipped[ix],
                client_mean: cm,
                client_std: (cv / denom).sqrt(),
                mo_mean: mm,
                mo_std: (mv / denom).sqrt(),
            }
        })
        .collect();

    table.push_meta("experiment", "strategy_tournament");
    table.push_meta("scenario", scenario);
    table.push_meta("trials", trials);
    table.push_meta("seed", seed);
    table.push_meta("clients", n);
    table.push_meta("price_box", format!("(0,{RANDOM_PRICE_HI}]^2"));
    table.push_meta("price_floor", SWEEP_FLOOR);
    table.push_meta("max_retries", MAX_RETRIES);
    table.push_meta("version", env!("CARGO_PKG_VERSION"));
    let total_skipped: usize = skipped.iter().sum();
    table.push_meta("rows_total", trials * PAIRS.len());
    table.push_meta("rows_played", trials * PAIRS.len() - total_skipped);
    table.push_meta("rows_skipped", total_skipped);
    Ok(Tournament { scenario, stats, table })
}

/// The swept quantity of a parameter sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    /// Training demand x block size grid, full mechanism per point.
    DemandBlocksize,
    /// Posted-price grid with the client best-responding.
    PriceGrid,
    /// Training demand sweep, full mechanism per point.
    Demand,
    /// Training-price sweep at fixed mining price; response columns.
    TrainPrice,
    /// Block-size sweep at fixed prices; response columns.
    Blocksize,
}

impl SweepKind {
    pub fn name(self) -> &'static str {
        match self {
            SweepKind::DemandBlocksize => "demand_blocksize",
            SweepKind::PriceGrid => "price_grid",
            SweepKind::Demand => "demand",
            SweepKind::TrainPrice => "train_price",
            SweepKind::Blocksize => "blocksize",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "demand_blocksize" => Some(SweepKind::DemandBlocksize),
            "price_grid" => Some(SweepKind::PriceGrid),
            "demand" => Some(SweepKind::Demand),
            "train_price" => Some(SweepKind::TrainPrice),
            "blocksize" => Some(SweepKind::Blocksize),
            _ => None,
        }
    }

    /// Names of the swept columns, in emission order.
    fn swept_columns(self) -> &'static [&'static str] {
        match self {
            SweepKind::DemandBlocksize => &["mu", "psi"],
            SweepKind::PriceGrid => &["swept_p_t", "swept_p_m"],
            SweepKind::Demand => &["mu"],
            SweepKind::TrainPrice => &["swept_p_t"],
            SweepKind::Blocksize => &["psi"],
        }
    }
}

/// Sweep request. `axis_points` counts samples per swept axis; zero
/// yields an empty table with a valid header.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepSpec {
    pub kind: SweepKind,
    pub scenario: Scenario,
    pub axis_points: usize,
    pub seed: u64,
}

impl SweepSpec {
    pub fn new(kind: SweepKind, scenario: Scenario) -> Self {
        let axis_points = match kind {
            SweepKind::DemandBlocksize | SweepKind::PriceGrid => 26,
            _ => 51,
        };
        SweepSpec { kind, scenario, axis_points, seed: 0 }
    }
}

/// Linear sweep values: `points` samples from 0 to `hi` with the zero
/// endpoint floored at [`SWEEP_FLOOR`].
fn floored_range(hi: f64, points: usize) -> Vec<f64> {
    (0..points)
        .map(|k| {
            let v = hi * k as f64 / (points - 1).max(1) as f64;
            if v < SWEEP_FLOOR {
                SWEEP_FLOOR
            } else {
                v
            }
        })
        .collect()
}

struct RowVals {
    swept: Vec<f64>,
    prices: Option<PricePair>,
    powers: Option<PowerPair>,
    client_utility: Option<f64>,
    mo_utility: Option<f64>,
    time_binds: Option<bool>,
    ir_binds: Option<bool>,
}

impl RowVals {
    fn infeasible(swept: Vec<f64>) -> Self {
        RowVals {
            swept,
            prices: None,
            powers: None,
            client_utility: None,
            mo_utility: None,
            time_binds: None,
            ir_binds: None,
        }
    }
}

/// Runs one sweep and returns its table. Every grid point yields exactly
/// one row; points the mechanism cannot solve are emitted with
/// `feasible=false` and empty value fields rather than dropped.
pub fn run_sweep(spec: &SweepSpec) -> Result<Table> {
    let config = canonical_config();
    let header: Vec<&str> = ["scenario"]
        .iter()
        .chain(spec.kind.swept_columns())
        .chain(
            [
                "p_t", "p_m", "q_t", "q_m", "client_utility", "mo_utility", "time_binds",
                "ir_binds", "feasible", "trial", "seed",
            ]
            .iter(),
        )
        .copied()
        .collect();
    let mut table = Table::new(spec.kind.name(), &header);

    // Grid of swept value tuples, row-major in canonical order.
    let grid: Vec<Vec<f64>> = match spec.kind {
        SweepKind::DemandBlocksize => {
            let mus = floored_range(5.0, spec.axis_points);
            let psis = floored_range(5.0, spec.axis_points);
            mus.iter().flat_map(|&m| psis.iter().map(move |&s| vec![m, s])).collect()
        }
        SweepKind::PriceGrid => {
            let ps = floored_range(10.0, spec.axis_points);
            ps.iter().flat_map(|&a| ps.iter().map(move |&b| vec![a, b])).collect()
        }
        SweepKind::Demand => floored_range(5.0, spec.axis_points).into_iter().map(|m| vec![m]).collect(),
        SweepKind::TrainPrice => {
            floored_range(10.0, spec.axis_points).into_iter().map(|p| vec![p]).collect()
        }
        SweepKind::Blocksize => {
            floored_range(5.0, spec.axis_points).into_iter().map(|s| vec![s]).collect()
        }
    };

    // Fixed prices for the response sweeps: the canonical complete-
    // information equilibrium prices, with the training-price sweep
    // holding the mining price at 1.
    let canonical_prices = {
        let roster = canonical_roster();
        let p = &roster[0];
        optimal_prices_complete(p, &config, 25.0, 5.0)?
    };

    let solve_point = |swept: &[f64]| -> Result<RowVals> {
        match spec.kind {
            SweepKind::DemandBlocksize | SweepKind::Demand => {
                let mu = swept[0];
                let mut cfg = config.clone();
                if spec.kind == SweepKind::DemandBlocksize {
                    cfg.psi = swept[1];
                }
                let roster = identical_roster(50, mu);
                let run = match spec.scenario {
                    Scenario::Complete => {
                        run_algorithm_complete(&roster, &cfg, &BoundsOptions::default())
                    }
                    Scenario::Incomplete => {
                        let reports: Vec<f64> = roster.iter().map(|p| p.mu).collect();
                        run_algorithm_incomplete(&roster, &cfg, &reports, &BoundsOptions::default())
                    }
                };
                match run {
                    Ok(eq) => {
                        let c = &eq.clients[0];
                        Ok(RowVals {
                            swept: swept.to_vec(),
                            prices: Some(c.prices),
                            powers: Some(c.powers),
                            client_utility: Some(c.utility),
                            mo_utility: Some(eq.mo_utility),
                            time_binds: Some(c.flags.time_binds),
                            ir_binds: Some(c.flags.ir_binds),
                        })
                    }
                    Err(
                        Error::InfeasiblePrice { .. }
                        | Error::InfeasibleBudget { .. }
                        | Error::MechanismRejects { .. },
                    ) => Ok(RowVals::infeasible(swept.to_vec())),
                    Err(e) => Err(e),
                }
            }
            SweepKind::PriceGrid | SweepKind::TrainPrice | SweepKind::Blocksize => {
                let mut cfg = config.clone();
                let prices = match spec.kind {
                    SweepKind::PriceGrid => PricePair { p_t: swept[0], p_m: swept[1] },
                    SweepKind::TrainPrice => PricePair { p_t: swept[0], p_m: 1.0 },
                    SweepKind::Blocksize => {
                        cfg.psi = swept[0];
                        canonical_prices
                    }
                    _ => unreachable!(),
                };
                let roster = canonical_roster();
                let profile = &roster[0];
                match best_response(profile, &cfg, prices) {
                    Ok(powers) => {
                        let (u, b) = client_utility(profile, &cfg, prices, powers)?;
                        let all_prices = vec![prices; roster.len()];
                        let all_powers = vec![powers; roster.len()];
                        let mo = mo_utility(&roster, &cfg, &all_prices, &all_powers)?;
                        Ok(RowVals {
                            swept: swept.to_vec(),
                            prices: Some(prices),
                            powers: Some(powers),
                            client_utility: Some(u),
                            mo_utility: Some(mo),
                            time_binds: Some(
                                (b.total_time() - cfg.horizon).abs() <= 1e-9 * cfg.horizon,
                            ),
                            ir_binds: Some(u.abs() <= 1e-9 * (b.cost_train + b.cost_mine)),
                        })
                    }
                    Err(Error::InfeasiblePrice { .. } | Error::InvalidPrice { .. }) => {
                        Ok(RowVals::infeasible(swept.to_vec()))
                    }
                    Err(e) => Err(e),
                }
            }
        }
    };

    let solved: Vec<Result<RowVals>> = grid.par_iter().map(|pt| solve_point(pt)).collect();
    let mut feasible_rows = 0usize;
    for vals in solved {
        let vals = vals?;
        let feasible = vals.prices.is_some();
        feasible_rows += feasible as usize;
        let mut row = vec![spec.scenario.to_string()];
        row.extend(vals.swept.iter().map(|v| fmt_f(*v)));
        row.extend([
            fmt_opt(vals.prices.map(|p| p.p_t)),
            fmt_opt(vals.prices.map(|p| p.p_m)),
            fmt_opt(vals.powers.map(|q| q.q_t)),
            fmt_opt(vals.powers.map(|q| q.q_m)),
            fmt_opt(vals.client_utility),
            fmt_opt(vals.mo_utility),
            fmt_bool_opt(vals.time_binds),
            fmt_bool_opt(vals.ir_binds),
            if feasible { "true".into() } else { "false".into() },
            "0".to_string(),
            spec.seed.to_string(),
        ]);
        table.rows.push(row);
    }

    table.push_meta("experiment", spec.kind.name());
    table.push_meta("scenario", spec.scenario);
    table.push_meta("axis_points", spec.axis_points);
    table.push_meta("seed", spec.seed);
    table.push_meta("floor", SWEEP_FLOOR);
    if matches!(spec.kind, SweepKind::TrainPrice) {
        table.push_meta("fixed_p_m", 1.0);
    }
    if matches!(spec.kind, SweepKind::Blocksize) {
        table.push_meta("fixed_p_t", fmt_f(canonical_prices.p_t));
        table.push_meta("fixed_p_m", fmt_f(canonical_prices.p_m));
    }
    table.push_meta("version", env!("CARGO_PKG_VERSION"));
    table.push_meta("rows_total", table.rows.len());
    table.push_meta("rows_feasible", feasible_rows);
    table.push_meta("rows_infeasible", table.rows.len() - feasible_rows);
    Ok(table)
}

/// Renders an incentive audit as a table (one row per candidate report).
pub fn audit_table(audit: &crate::stackelberg::IcAudit, seed: u64) -> Table {
    let mut table = Table::new(
        "ic_audit",
        &["reported_mu", "truthful", "feasible", "p_t", "p_m", "utility", "gain"],
    );
    for row in &audit.rows {
        table.rows.push(vec![
            fmt_f(row.reported_mu),
            if row.truthful { "true".into() } else { "false".into() },
            if row.feasible { "true".into() } else { "false".into() },
            fmt_opt(row.prices.map(|p| p.p_t)),
            fmt_opt(row.prices.map(|p| p.p_m)),
            fmt_opt(row.utility),
            fmt_f(row.gain),
        ]);
    }
    table.push_meta("experiment", "ic_audit");
    table.push_meta("client", audit.client);
    table.push_meta("seed", seed);
    table.push_meta("truthful_utility", fmt_f(audit.truthful_utility));
    table.push_meta("best_report", fmt_f(audit.best_report));
    table.push_meta("best_gain", fmt_f(audit.best_gain));
    table.push_meta("version", env!("CARGO_PKG_VERSION"));
    table.push_meta("rows_total", audit.rows.len());
    table.push_meta("rows_feasible", audit.rows.iter().filter(|r| r.feasible).count());
    table.push_meta(
        "rows_infeasible",
        audit.rows.iter().filter(|r| !r.feasible).count(),
    );
    table
}

/// Dominance comparison for one side of the tournament.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DominanceCheck {
    pub scenario: Scenario,
    pub side: String,
    /// (optimal, optimal) mean minus the best other pair's mean.
    pub margin: f64,
    pub holds: bool,
}

/// Machine-readable digest of one reproduction run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub seed: u64,
    pub version: String,
    pub dominance: Vec<DominanceCheck>,
    pub tournament: Vec<PairStats>,
    /// Strict-monotonicity verdicts over emitted sweep columns.
    pub monotonic_train_rate_in_price: bool,
    pub monotonic_mine_rate_in_price: bool,
    pub monotonic_mine_rate_in_blocksize: bool,
    /// Largest binding-identity residual at the canonical equilibria.
    pub max_binding_residual: f64,
    /// Largest first-order-condition residual at the canonical equilibria.
    pub max_kkt_residual: f64,
    /// Brute-force search vs closed form at the canonical instance:
    /// (search - closed) / max(1, |closed|) per scenario; positive means
    /// the search found prices the closed form's utility does not reach.
    pub stage1_gap_complete: f64,
    pub stage1_gap_incomplete: f64,
    /// Same comparison for the follower problem at the canonical
    /// complete-information prices.
    pub stage2_gap: f64,
    /// Best misreport gain measured by the incentive audit (grid 5..15
    /// by 0.5) and the report achieving it.
    pub ic_best_gain: f64,
    pub ic_best_report: f64,
    pub ic_truthful_utility: f64,
    /// Full audit table, one entry per candidate report.
    pub ic_rows: Vec<crate::stackelberg::AuditRow>,
    /// Paths of the tables written, relative to the output directory.
    pub files: Vec<String>,
}

fn monotone<F: Fn(&[String]) -> Option<(f64, f64)>>(
    table: &Table,
    extract: F,
    strictly_increasing: bool,
) -> bool {
    let pairs: Vec<(f64, f64)> = table.rows.iter().filter_map(|r| extract(r)).collect();
    if pairs.len() < 2 {
        return false;
    }
    pairs.windows(2).all(|w| {
        debug_assert!(w[1].0 > w[0].0);
        if strictly_increasing {
            w[1].1 > w[0].1
        } else {
            w[1].1 < w[0].1
        }
    })
}

/// Runs the full reproduction: one tournament table (both regimes),
/// five sweep tables, and a summary of every check the tables support.
/// All outputs are byte-deterministic in (seed).
pub fn reproduce_all(out_dir: &Path, seed: u64) -> Result<Summary> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", out_dir.display())))?;
    let config = canonical_config();
    let roster = canonical_roster();
    let mut files = Vec::new();

    // Tournament, both information regimes in one table.
    let t_complete = strategy_tournament(&roster, &config, Scenario::Complete, 100, seed)?;
    let t_incomplete = strategy_tournament(&roster, &config, Scenario::Incomplete, 100, seed)?;
    let mut tournament_table = t_complete.table.clone();
    tournament_table.rows.extend(t_incomplete.table.rows.iter().cloned());
    tournament_table.meta = Vec::new();
    tournament_table.push_meta("experiment", "strategy_tournament");
    tournament_table.push_meta("scenario", "complete+incomplete");
    tournament_table.push_meta("trials", 100);
    tournament_table.push_meta("seed", seed);
    tournament_table.push_meta("clients", roster.len());
    tournament_table.push_meta("price_box", format!("(0,{RANDOM_PRICE_HI}]^2"));
    tournament_table.push_meta("max_retries", MAX_RETRIES);
    tournament_table.push_meta("version", env!("CARGO_PKG_VERSION"));
    let skipped: usize =
        t_complete.stats.iter().chain(&t_incomplete.stats).map(|s| s.skipped).sum();
    tournament_table.push_meta("rows_total", 2 * 4 * 100);
    tournament_table.push_meta("rows_played", 2 * 4 * 100 - skipped);
    tournament_table.push_meta("rows_skipped", skipped);
    files.push(tournament_table.write(out_dir)?);

    let mut dominance = Vec::new();
    let mut all_stats = Vec::new();
    for t in [&t_complete, &t_incomplete] {
        let oo = &t.stats[0];
        let best_other_client =
            t.stats[1..].iter().map(|s| s.client_mean).fold(f64::NEG_INFINITY, f64::max);
        let best_other_mo =
            t.stats[1..].iter().map(|s| s.mo_mean).fold(f64::NEG_INFINITY, f64::max);
        dominance.push(DominanceCheck {
            scenario: t.scenario,
            side: "client".into(),
            margin: oo.client_mean - best_other_client,
            holds: oo.client_mean >= best_other_client,
        });
        dominance.push(DominanceCheck {
            scenario: t.scenario,
            side: "operator".into(),
            margin: oo.mo_mean - best_other_mo,
            holds: oo.mo_mean >= best_other_mo,
        });
        all_stats.extend(t.stats.iter().cloned());
    }

    // Sweeps. The mechanism sweeps run both regimes into one table per
    // kind; the response sweeps are regime-free (fixed prices).
    let mut sweep_tables: Vec<Table> = Vec::new();
    for kind in [SweepKind::DemandBlocksize, SweepKind::Demand] {
        let mut table = run_sweep(&SweepSpec { seed, ..SweepSpec::new(kind, Scenario::Complete) })?;
        let inc = run_sweep(&SweepSpec { seed, ..SweepSpec::new(kind, Scenario::Incomplete) })?;
        table.rows.extend(inc.rows.iter().cloned());
        // Rebuild accounting over the merged rows.
        let feasible = table
            .rows
            .iter()
            .filter(|r| r[table.header.len() - 3] == "true")
            .count();
        table.meta.retain(|(k, _)| !k.starts_with("rows_") && k != "scenario");
        table.meta.insert(1, ("scenario".into(), "complete+incomplete".into()));
        table.push_meta("rows_total", table.rows.len());
        table.push_meta("rows_feasible", feasible);
        table.push_meta("rows_infeasible", table.rows.len() - feasible);
        sweep_tables.push(table);
    }
    for kind in [SweepKind::PriceGrid, SweepKind::TrainPrice, SweepKind::Blocksize] {
        sweep_tables.push(run_sweep(&SweepSpec { seed, ..SweepSpec::new(kind, Scenario::Complete) })?);
    }

    let train_price_table = sweep_tables
        .iter()
        .find(|t| t.name == SweepKind::TrainPrice.name())
        .expect("train price sweep present");
    let blocksize_table = sweep_tables
        .iter()
        .find(|t| t.name == SweepKind::Blocksize.name())
        .expect("blocksize sweep present");

    let col = |t: &Table, name: &str| t.column(name).expect("column present");
    let parse = |s: &String| s.parse::<f64>().ok();
    let (sw, qt, qm, feas) = (
        col(train_price_table, "swept_p_t"),
        col(train_price_table, "q_t"),
        col(train_price_table, "q_m"),
        col(train_price_table, "feasible"),
    );
    let monotonic_train_rate_in_price = monotone(
        train_price_table,
        |r| {
            if r[feas] == "true" {
                Some((parse(&r[sw])?, parse(&r[qt])?))
            } else {
                None
            }
        },
        true,
    );
    let monotonic_mine_rate_in_price = monotone(
        train_price_table,
        |r| {
            if r[feas] == "true" {
                Some((parse(&r[sw])?, parse(&r[qm])?))
            } else {
                None
            }
        },
        false,
    );
    let (bsw, bqm, bfeas) = (
        col(blocksize_table, "psi"),
        col(blocksize_table, "q_m"),
        col(blocksize_table, "feasible"),
    );
    let monotonic_mine_rate_in_blocksize = monotone(
        blocksize_table,
        |r| {
            if r[bfeas] == "true" {
                Some((parse(&r[bsw])?, parse(&r[bqm])?))
            } else {
                None
            }
        },
        true,
    );

    for t in &sweep_tables {
        files.push(t.write(out_dir)?);
    }

    // Binding identities and first-order residuals at the canonical
    // equilibria of both regimes.
    let mut max_binding = 0.0f64;
    let mut max_kkt = 0.0f64;
    let complete = run_algorithm_complete(&roster, &config, &BoundsOptions::default())?;
    let reports: Vec<f64> = roster.iter().map(|p| p.mu).collect();
    let incomplete =
        run_algorithm_incomplete(&roster, &config, &reports, &BoundsOptions::default())?;
    for eq in [&complete, &incomplete] {
        for c in &eq.clients {
            let b = &c.breakdown;
            max_binding = max_binding
                .max((b.total_time() - config.horizon).abs() / config.horizon);
            if eq.scenario == Scenario::Complete {
                max_binding = max_binding
                    .max((b.reward_train - c.train_bound).abs() / c.train_bound.max(1.0))
                    .max((b.reward_mine - c.mine_bound).abs() / c.mine_bound.max(1.0));
            } else {
                max_binding =
                    max_binding.max(c.utility.abs() / (b.cost_train + b.cost_mine).max(1.0));
            }
            let profile = &roster[c.id];
            let s2 = kkt_residuals_stage2(profile, &config, c.prices, c.powers)?;
            let s1 = kkt_residuals_stage1(
                profile,
                &config,
                c.train_bound,
                c.mine_bound,
                c.prices,
                eq.scenario,
            )?;
            max_kkt = max_kkt.max(s2.max_residual).max(s1.max_residual);
        }
    }

    // Brute-force vs closed form at the canonical instance.
    let values = CoalitionValues::from_profiles(&roster, &config)?;
    let bounds = reward_bounds(&roster, &config, &values, &BoundsOptions::default())?;
    let one = &roster[..1];
    let single_bounds = crate::shapley::RewardBounds {
        train: vec![bounds.train[0]],
        ..bounds.clone()
    };
    let gap = |scenario: Scenario, closed: f64| -> Result<f64> {
        let search = grid_optimal_prices(one, &config, &single_bounds, scenario, 200)?;
        // Per-client comparison: subtract the shared accuracy term.
        Ok((search.mo_utility - closed) / closed.abs().max(1.0))
    };
    let closed_mo_one = |eq: &crate::stackelberg::Equilibrium| -> f64 {
        let c = &eq.clients[0];
        let t = c.breakdown.t_train + c.breakdown.t_mine;
        config.perf_fn.eval(roster[0].mu)
            - config.xi * (t + c.breakdown.reward_train + c.breakdown.reward_mine)
    };
    let complete_one = run_algorithm_complete(one, &{
        let mut c = config.clone();
        c.budget_total = 30.0;
        c
    }, &BoundsOptions::default())?;
    let incomplete_one = run_algorithm_incomplete(
        one,
        &{
            let mut c = config.clone();
            c.budget_total = 30.0;
            c
        },
        &reports[..1],
        &BoundsOptions::default(),
    )?;
    let stage1_gap_complete = gap(Scenario::Complete, closed_mo_one(&complete_one))?;
    let stage1_gap_incomplete = gap(Scenario::Incomplete, closed_mo_one(&incomplete_one))?;

    let stage2_gap = {
        let profile = &roster[0];
        let prices = complete.clients[0].prices;
        let grid = default_power_grid(profile, &config, prices, 200)?;
        let best = grid_best_response(profile, &config, prices, &grid)?;
        let closed = complete.clients[0].utility;
        (best.objective - closed) / closed.abs().max(1.0)
    };

    // Incentive audit at the canonical roster.
    let audit = ic_audit(
        &roster,
        &config,
        0,
        &MisreportGrid { lo: 5.0, hi: 15.0, step: 0.5 },
        &BoundsOptions::default(),
    )?;

    let summary = Summary {
        seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        dominance,
        tournament: all_stats,
        monotonic_train_rate_in_price,
        monotonic_mine_rate_in_price,
        monotonic_mine_rate_in_blocksize,
        max_binding_residual: max_binding,
        max_kkt_residual: max_kkt,
        stage1_gap_complete,
        stage1_gap_incomplete,
        stage2_gap,
        ic_best_gain: audit.best_gain,
        ic_best_report: audit.best_report,
        ic_truthful_utility: audit.truthful_utility,
        ic_rows: audit.rows.clone(),
        files: files
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect(),
    };
    let summary_path = out_dir.join("summary.json");
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Config(format!("cannot serialize summary: {e}")))?;
    std::fs::write(&summary_path, json + "\n")
        .map_err(|e| Error::Config(format!("cannot write {}: {e}", summary_path.display())))?;
    Ok(summary)
}
