//! Closed-form solutions of the two-stage pricing game.
//!
//! The game runs by backward induction. Stage II: given posted prices, a
//! client maximizes its utility over CPU rates subject to non-negative
//! payoffs and the time budget; the maximizer is
//!
//! ```text
//! q_t* = (p_t / rho)^(1/3)
//! q_m* = psi / (T - mu * (rho / p_t)^(1/3))
//! ```
//!
//! which exists iff p_t > rho * (mu/T)^3 (otherwise training alone would
//! overrun the horizon) and spends the whole time budget. Stage I: the
//! operator, anticipating that response, prices each client so that its
//! per-round reward bounds are met with equality:
//!
//! ```text
//! p_t* = (1/rho)^(1/2) * (Rt/mu)^(3/2)            (both regimes)
//! p_m* = Rm / (T - mu * (rho/p_t*)^(1/3))         (complete information)
//! p_m* = rho * psi^3 / (T - mu*(rho/p_t*)^(1/3))^3  (incomplete information)
//! ```
//!
//! Under complete information the operator observes each client's demand
//! mu and drives both reward payouts to their bounds. Under incomplete
//! information clients report mu themselves, and the operator instead
//! prices mining so a truthfully reporting client nets exactly zero
//! utility (its participation constraint binds), which removes any
//! incentive to misreport; [`ic_audit`] measures that claim rather than
//! assuming it.
//!
//! Substituting q_t* back into the training payoff gives
//! (mu/q_t*) p_t - rho mu q_t*^2 = 0 identically, so at the response the
//! client earns its margin from mining alone. Tests pin these identities
//! down numerically; the [`crate::oracle`] module re-derives all of them
//! by brute force.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    client_utility, mo_utility, ClientProfile, PowerPair, PricePair, RoundBreakdown,
    SystemConfig, REL_TOL,
};
use crate::shapley::{reward_bounds, BoundsOptions, CoalitionValues, RewardBounds};

/// Information regime the mechanism runs under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// The operator observes every client's true training demand.
    Complete,
    /// Clients self-report their training demand.
    Incomplete,
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Scenario::Complete => write!(f, "complete"),
            Scenario::Incomplete => write!(f, "incomplete"),
        }
    }
}

/// Smallest training price that leaves the client any time to mine:
/// rho * (mu / T)^3.
pub fn min_feasible_train_price(profile: &ClientProfile, config: &SystemConfig) -> f64 {
    profile.rho * (profile.mu / config.horizon).powi(3)
}

/// Smallest training-reward bound whose induced price is feasible:
/// rho * mu^3 / T^2.
pub fn min_train_bound(profile: &ClientProfile, config: &SystemConfig) -> f64 {
    profile.rho * profile.mu.powi(3) / (config.horizon * config.horizon)
}

/// Time left for mining after training at the rate induced by `p_t`.
fn mining_window(profile: &ClientProfile, config: &SystemConfig, p_t: f64) -> f64 {
    config.horizon - profile.mu * (profile.rho / p_t).cbrt()
}

/// Stage-II best response: the client's utility-maximizing CPU rates at
/// the posted prices, spending the entire time budget.
pub fn best_response(
    profile: &ClientProfile,
    config: &SystemConfig,
    prices: PricePair,
) -> Result<PowerPair> {
    if !(prices.p_t > 0.0) || !prices.p_t.is_finite() || !prices.p_m.is_finite() || prices.p_m < 0.0
    {
        return Err(Error::InvalidPrice { id: profile.id, p_t: prices.p_t, p_m: prices.p_m });
    }
    let window = mining_window(profile, config, prices.p_t);
    if window <= 0.0 {
        return Err(Error::InfeasiblePrice {
            id: profile.id,
            p_t: prices.p_t,
            min_p_t: min_feasible_train_price(profile, config),
        });
    }
    Ok(PowerPair { q_t: (prices.p_t / profile.rho).cbrt(), q_m: config.psi / window })
}

/// Stage-I prices under complete information: both the training and the
/// mining payout hit their bounds exactly at the induced response.
pub fn optimal_prices_complete(
    profile: &ClientProfile,
    config: &SystemConfig,
    train_bound: f64,
    mine_bound: f64,
) -> Result<PricePair> {
    let p_t = feasible_train_price(profile, config, train_bound)?;
    let window = mining_window(profile, config, p_t);
    Ok(PricePair { p_t, p_m: mine_bound / window })
}

/// Stage-I prices under incomplete information: the training price is
/// unchanged, and the mining price is lowered until a truthful client's
/// utility is exactly zero.
pub fn optimal_prices_incomplete(
    profile: &ClientProfile,
    config: &SystemConfig,
    train_bound: f64,
    _mine_bound: f64,
) -> Result<PricePair> {
    let p_t = feasible_train_price(profile, config, train_bound)?;
    let window = mining_window(profile, config, p_t);
    Ok(PricePair { p_t, p_m: profile.rho * config.psi.powi(3) / window.powi(3) })
}

/// The training price that makes the training payout equal `train_bound`
/// at the induced response, with its feasibility check.
fn feasible_train_price(
    profile: &ClientProfile,
    config: &SystemConfig,
    train_bound: f64,
) -> Result<f64> {
    let min_bound = min_train_bound(profile, config);
    if !train_bound.is_finite() || train_bound <= min_bound {
        return Err(Error::InfeasibleBudget { id: profile.id, bound: train_bound, min_bound });
    }
    Ok((1.0 / profile.rho).sqrt() * (train_bound / profile.mu).powf(1.5))
}

/// Which constraints hold with equality at the solved point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BindingFlags {
    /// Training plus mining time equals the horizon (relative 1e-9).
    pub time_binds: bool,
    /// Training payout equals its bound.
    pub train_reward_binds: bool,
    /// Mining payout equals its bound.
    pub mine_reward_binds: bool,
    /// Realized client utility is zero (participation binds).
    pub ir_binds: bool,
}

/// One client's slice of the equilibrium.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientOutcome {
    pub id: usize,
    /// Training demand the operator planned with (differs from the true
    /// value only for misreporting clients under incomplete information).
    pub reported_mu: f64,
    /// Per-round reward bounds backing the prices.
    pub train_bound: f64,
    pub mine_bound: f64,
    pub prices: PricePair,
    pub powers: PowerPair,
    pub breakdown: RoundBreakdown,
    /// Realized utility, computed from the client's true profile.
    pub utility: f64,
    /// Utility the operator expects, computed from the reported demand.
    pub expected_utility: f64,
    pub flags: BindingFlags,
    /// True when either solved rate exceeds the client's hardware cap.
    pub q_cap_exceeded: bool,
}

/// Full solved round: per-client outcomes plus the operator's utility.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Equilibrium {
    pub scenario: Scenario,
    pub clients: Vec<ClientOutcome>,
    pub mo_utility: f64,
    pub bounds: RewardBounds,
}

fn binding_flags(
    config: &SystemConfig,
    b: &RoundBreakdown,
    train_bound: f64,
    mine_bound: f64,
) -> BindingFlags {
    let close = |x: f64, y: f64| (x - y).abs() <= REL_TOL * x.abs().max(y.abs()).max(1.0);
    BindingFlags {
        time_binds: (b.total_time() - config.horizon).abs() <= REL_TOL * config.horizon,
        train_reward_binds: close(b.reward_train, train_bound),
        mine_reward_binds: close(b.reward_mine, mine_bound),
        ir_binds: b.utility().abs() <= REL_TOL * (b.cost_train + b.cost_mine),
    }
}

/// Solves one client end to end for a given regime and reward bounds.
fn solve_client(
    profile: &ClientProfile,
    config: &SystemConfig,
    scenario: Scenario,
    reported_mu: f64,
    train_bound: f64,
    mine_bound: f64,
) -> Result<ClientOutcome> {
    // The operator prices against the demand it believes.
    let planning = ClientProfile::new(profile.id, reported_mu, profile.rho, profile.q_cap)?;
    let prices = match scenario {
        Scenario::Complete => optimal_prices_complete(&planning, config, train_bound, mine_bound),
        Scenario::Incomplete => {
            optimal_prices_incomplete(&planning, config, train_bound, mine_bound)
        }
    }?;

    // The operator's forecast of the client's response and utility uses
    // the reported demand; participation is gated on that forecast.
    let expected_powers = best_response(&planning, config, prices)?;
    let (expected_utility, _) = client_utility(&planning, config, prices, expected_powers)?;
    if scenario == Scenario::Incomplete && expected_utility < -REL_TOL * train_bound.abs().max(1.0)
    {
        return Err(Error::MechanismRejects { id: profile.id, utility: expected_utility });
    }

    // The client itself responds knowing its true demand.
    let powers = best_response(profile, config, prices)?;
    let (utility, breakdown) = client_utility(profile, config, prices, powers)?;
    Ok(ClientOutcome {
        id: profile.id,
        reported_mu,
        train_bound,
        mine_bound,
        prices,
        powers,
        breakdown,
        utility,
        expected_utility,
        flags: binding_flags(config, &breakdown, train_bound, mine_bound),
        q_cap_exceeded: powers.q_t > profile.q_cap || powers.q_m > profile.q_cap,
    })
}

fn assemble(
    profiles: &[ClientProfile],
    config: &SystemConfig,
    scenario: Scenario,
    reports: &[f64],
    bounds: RewardBounds,
) -> Result<Equilibrium> {
    let solved: Vec<Result<ClientOutcome>> = profiles
        .par_iter()
        .enumerate()
        .map(|(i, p)| solve_client(p, config, scenario, reports[i], bounds.train[i], bounds.mine))
        .collect();
    // All-or-nothing: the first failing client (in roster order) aborts
    // the round, so errors are deterministic under parallel evaluation.
    let mut clients = Vec::with_capacity(solved.len());
    for outcome in solved {
        clients.push(outcome?);
    }
    let prices: Vec<PricePair> = clients.iter().map(|c| c.prices).collect();
    let powers: Vec<PowerPair> = clients.iter().map(|c| c.powers).collect();
    let mo = mo_utility(profiles, config, &prices, &powers)?;
    Ok(Equilibrium { scenario, clients, mo_utility: mo, bounds })
}

/// Runs the complete-information mechanism: score contributions, split
/// the budget into reward bounds, price every client so both payouts
/// bind, and let clients respond.
pub fn run_algorithm_complete(
    profiles: &[ClientProfile],
    config: &SystemConfig,
    opts: &BoundsOptions,
) -> Result<Equilibrium> {
    for p in profiles {
        p.validate()?;
    }
    let values = CoalitionValues::from_profiles(profiles, config)?;
    let bounds = reward_bounds(profiles, config, &values, opts)?;
    let reports: Vec<f64> = profiles.iter().map(|p| p.mu).collect();
    assemble(profiles, config, Scenario::Complete, &reports, bounds)
}

/// Runs the incomplete-information mechanism on self-reported demands:
/// contributions, bounds, and prices all derive from `reported_mu`,
/// while realized responses and utilities use the true profiles. A
/// client whose forecast utility is negative aborts the round
/// ([`Error::MechanismRejects`]).
pub fn run_algorithm_incomplete(
    profiles: &[ClientProfile],
    config: &SystemConfig,
    reported_mu: &[f64],
    opts: &BoundsOptions,
) -> Result<Equilibrium> {
    if reported_mu.len() != profiles.len() {
        return Err(Error::LengthMismatch { expected: profiles.len(), got: reported_mu.len() });
    }
    for p in profiles {
        p.validate()?;
    }
    if let Some(bad) = reported_mu.iter().find(|m| !m.is_finite() || **m <= 0.0) {
        return Err(Error::Config(format!("reported demand must be positive, got {bad}")));
    }
    let perf: Vec<f64> = reported_mu.iter().map(|m| config.perf_fn.eval(*m)).collect();
    let values = CoalitionValues::from_values(perf, config.target_perf)?;
    let bounds = reward_bounds(profiles, config, &values, opts)?;
    assemble(profiles, config, Scenario::Incomplete, reported_mu, bounds)
}

/// Misreport grid for [`ic_audit`]: `lo, lo+step, ..` up to `hi`
/// (inclusive within floating-point slack), plus the true value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MisreportGrid {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl MisreportGrid {
    pub fn points(&self) -> Result<Vec<f64>> {
        if !(self.lo > 0.0) || !(self.hi >= self.lo) || !(self.step > 0.0) {
            return Err(Error::Config(format!(
                "misreport grid needs 0 < lo <= hi and step > 0, got {}:{}:{}",
                self.lo, self.hi, self.step
            )));
        }
        let n = ((self.hi - self.lo) / self.step).round() as usize;
        let mut pts: Vec<f64> = (0..=n)
            .map(|k| self.lo + k as f64 * self.step)
            .filter(|m| *m <= self.hi * (1.0 + REL_TOL))
            .collect();
        if pts.is_empty() {
            pts.push(self.lo);
        }
        Ok(pts)
    }
}

/// One audited misreport.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditRow {
    /// Demand the audited client reported.
    pub reported_mu: f64,
    /// Whether this row is the truthful report.
    pub truthful: bool,
    /// False when the mechanism could not price this report (the client
    /// is left out of the round and earns nothing).
    pub feasible: bool,
    pub prices: Option<PricePair>,
    /// Realized utility under the client's true profile; None when the
    /// report was infeasible.
    pub utility: Option<f64>,
    /// Realized utility minus the truthful row's utility (0 for
    /// infeasible reports earns-nothing outcome included).
    pub gain: f64,
}

/// Audit verdict: what the best misreport earns over truth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IcAudit {
    /// Index of the audited client in the roster.
    pub client: usize,
    pub truthful_utility: f64,
    /// Report achieving the highest gain (the truth when no misreport
    /// strictly beats it).
    pub best_report: f64,
    pub best_gain: f64,
    pub rows: Vec<AuditRow>,
}

/// Measures incentive compatibility under incomplete information: for
/// every report on the grid (truth included), the reward pipeline and
/// prices are recomputed from scratch as the mechanism would run them,
/// and the audited client's realized utility is tabulated. Reports the
/// mechanism cannot price leave the client out of the round, earning
/// zero. The audit asserts nothing; `best_gain` is the verdict.
pub fn ic_audit(
    profiles: &[ClientProfile],
    config: &SystemConfig,
    client: usize,
    grid: &MisreportGrid,
    opts: &BoundsOptions,
) -> Result<IcAudit> {
    if client >= profiles.len() {
        return Err(Error::BadCoalitionMember(client));
    }
    let truth = profiles[client].mu;
    let mut points = grid.points()?;
    if !points.iter().any(|m| *m == truth) {
        points.push(truth);
        points.sort_by(|a, b| a.partial_cmp(b).unwrap());
    }

    let mut truthful: Vec<f64> = profiles.iter().map(|p| p.mu).collect();
    let utility_of = |report: f64, reports: &mut Vec<f64>| -> Result<Option<(PricePair, f64)>> {
        reports[client] = report;
        match run_algorithm_incomplete(profiles, config, reports, opts) {
            Ok(eq) => {
                let c = &eq.clients[client];
                Ok(Some((c.prices, c.utility)))
            }
            Err(
                Error::InfeasiblePrice { .. }
                | Error::InfeasibleBudget { .. }
                | Error::MechanismRejects { .. }
                | Error::DegenerateCoalition,
            ) => Ok(None),
            Err(e) => Err(e),
        }
    };

    let truthful_utility = match utility_of(truth, &mut truthful)? {
        Some((_, u)) => u,
        None => {
            return Err(Error::Config(
                "mechanism cannot price the truthful report; audit is moot".into(),
            ))
        }
    };

    let mut rows = Vec::with_capacity(points.len());
    for m in points {
        let row = match utility_of(m, &mut truthful)? {
            Some((prices, u)) => AuditRow {
                reported_mu: m,
                truthful: m == truth,
                feasible: true,
                prices: Some(prices),
                utility: Some(u),
                gain: u - truthful_utility,
            },
            None => AuditRow {
                reported_mu: m,
                truthful: m == truth,
                feasible: false,
                prices: None,
                utility: None,
                gain: 0.0 - truthful_utility,
            },
        };
        rows.push(row);
    }

    let best = rows
        .iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| {
            a.gain.partial_cmp(&b.gain).unwrap().then_with(|| j.cmp(i))
        })
        .map(|(_, r)| (r.reported_mu, r.gain))
        .unwrap_or((truth, 0.0));

    Ok(IcAudit {
        client,
        truthful_utility,
        best_report: best.0,
        best_gain: best.1,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MiningBudget, PerfFn};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn profile(mu: f64) -> ClientProfile {
        ClientProfile::new(0, mu, 0.01, 100.0).unwrap()
    }

    fn config() -> SystemConfig {
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

    #[test]
    fn response_hits_exact_cube() {
        let powers =
            best_response(&profile(10.0), &config(), PricePair { p_t: 0.08, p_m: 1.0 }).unwrap();
        assert_relative_eq!(powers.q_t, 2.0, max_relative = 1e-12);
        assert_relative_eq!(powers.q_m, 0.5, max_relative = 1e-12);
    }

    #[test]
    fn unit_price_ratio_gives_unit_rate() {
        for rho in [0.001, 0.01, 0.5, 2.0] {
            let p = ClientProfile::new(0, 1.0, rho, 100.0).unwrap();
            let powers = best_response(&p, &config(), PricePair { p_t: rho, p_m: 1.0 }).unwrap();
            assert_eq!(powers.q_t, 1.0);
        }
    }

    #[test]
    fn response_rejects_prices_below_feasibility() {
        let p = profile(10.0);
        let cfg = config();
        let min = min_feasible_train_price(&p, &cfg);
        assert_relative_eq!(min, 0.01 * (10.0f64 / 15.0).powi(3), max_relative = 1e-12);
        let err = best_response(&p, &cfg, PricePair { p_t: min * 0.999, p_m: 1.0 }).unwrap_err();
        match err {
            Error::InfeasiblePrice { id, p_t, min_p_t } => {
                assert_eq!(id, 0);
                assert!(p_t < min_p_t);
                assert_relative_eq!(min_p_t, min);
            }
            other => panic!("unexpected error {other:?}"),
        }
        assert!(matches!(
            best_response(&p, &cfg, PricePair { p_t: 0.0, p_m: 1.0 }),
            Err(Error::InvalidPrice { .. })
        ));
    }

    #[test]
    fn complete_prices_match_hand_computation() {
        // rho = 0.01, mu = 10, train bound 40 -> p_t = 10 * 4^(3/2) = 80,
        // mining window 15 - 10*(0.01/80)^(1/3) = 14.5, p_m = 5/14.5.
        let prices =
            optimal_prices_complete(&profile(10.0), &config(), 40.0, 5.0).unwrap();
        assert_relative_eq!(prices.p_t, 80.0, max_relative = 1e-12);
        assert_relative_eq!(prices.p_m, 0.3448275862068966, max_relative = 1e-12);
    }

    #[test]
    fn incomplete_prices_match_hand_computation() {
        let prices =
            optimal_prices_incomplete(&profile(10.0), &config(), 40.0, 5.0).unwrap();
        assert_relative_eq!(prices.p_t, 80.0, max_relative = 1e-12);
        assert_relative_eq!(prices.p_m, 1.25 / (14.5f64.powi(3)), max_relative = 1e-12);
        assert_relative_eq!(prices.p_m, 4.100209110664644e-4, max_relative = 1e-12);
    }

    #[test]
    fn canonical_instance_closed_forms() {
        let p = profile(10.0);
        let cfg = config();
        let complete = optimal_prices_complete(&p, &cfg, 25.0, 5.0).unwrap();
        assert_relative_eq!(complete.p_t, 39.52847075210474, max_relative = 1e-12);
        assert_relative_eq!(complete.p_m, 0.3480065790746589, max_relative = 1e-12);
        let powers = best_response(&p, &cfg, complete).unwrap();
        assert_relative_eq!(powers.q_t, 15.811388300841893, max_relative = 1e-12);
        assert_relative_eq!(powers.q_m, 0.3480065790746589, max_relative = 1e-12);
        let incomplete = optimal_prices_incomplete(&p, &cfg, 25.0, 5.0).unwrap();
        assert_relative_eq!(incomplete.p_t, complete.p_t);
        assert_relative_eq!(incomplete.p_m, 4.2146582301961474e-4, max_relative = 1e-12);
    }

    #[test]
    fn rewards_bind_under_complete_prices() {
        for (mu, rho, rt, rm) in
            [(10.0, 0.01, 25.0, 5.0), (3.0, 0.05, 12.0, 2.0), (18.0, 0.002, 60.0, 9.0)]
        {
            let p = ClientProfile::new(1, mu, rho, 1e9).unwrap();
            let cfg = config();
            let prices = optimal_prices_complete(&p, &cfg, rt, rm).unwrap();
            let powers = best_response(&p, &cfg, prices).unwrap();
            let (_, b) = client_utility(&p, &cfg, prices, powers).unwrap();
            assert_relative_eq!(b.reward_train, rt, max_relative = 1e-12);
            assert_relative_eq!(b.reward_mine, rm, max_relative = 1e-12);
            assert_relative_eq!(b.total_time(), cfg.horizon, max_relative = 1e-12);
            // Training payout exactly covers training cost at the response.
            assert_relative_eq!(b.cost_train, rt, max_relative = 1e-12);
        }
    }

    #[test]
    fn utility_vanishes_under_incomplete_prices() {
        for (mu, rho, rt) in [(10.0, 0.01, 25.0), (3.0, 0.05, 12.0), (18.0, 0.002, 60.0)] {
            let p = ClientProfile::new(1, mu, rho, 1e9).unwrap();
            let cfg = config();
            let prices = optimal_prices_incomplete(&p, &cfg, rt, 5.0).unwrap();
            let powers = best_response(&p, &cfg, prices).unwrap();
            let (u, b) = client_utility(&p, &cfg, prices, powers).unwrap();
            assert!(u.abs() <= 1e-9 * (b.cost_train + b.cost_mine));
        }
    }

    #[test]
    fn bound_below_threshold_is_rejected() {
        let p = profile(10.0);
        let cfg = config();
        let min = min_train_bound(&p, &cfg);
        assert_relative_eq!(min, 0.01 * 1000.0 / 225.0, max_relative = 1e-12);
        let err = optimal_prices_complete(&p, &cfg, min * 0.999, 5.0).unwrap_err();
        assert!(matches!(err, Error::InfeasibleBudget { .. }));
        let err = optimal_prices_incomplete(&p, &cfg, -3.0, 5.0).unwrap_err();
        assert!(matches!(err, Error::InfeasibleBudget { .. }));
    }

    #[test]
    fn identical_roster_complete_equilibrium() {
        let profiles: Vec<ClientProfile> =
            (0..50).map(|i| ClientProfile::new(i, 10.0, 0.01, 100.0).unwrap()).collect();
        let eq = run_algorithm_complete(&profiles, &config(), &BoundsOptions::default()).unwrap();
        assert_eq!(eq.scenario, Scenario::Complete);
        assert!(eq.bounds.symmetric_split);
        assert_relative_eq!(eq.mo_utility, 275.0, max_relative = 1e-12);
        let first = &eq.clients[0];
        assert_relative_eq!(first.utility, 4.993944571046052, max_relative = 1e-9);
        for c in &eq.clients {
            assert_eq!(c.prices, first.prices);
            assert_eq!(c.powers, first.powers);
            assert_relative_eq!(c.train_bound, 25.0, max_relative = 1e-12);
            assert_relative_eq!(c.mine_bound, 5.0, max_relative = 1e-12);
            assert!(c.flags.time_binds);
            assert!(c.flags.train_reward_binds);
            assert!(c.flags.mine_reward_binds);
            assert!(!c.flags.ir_binds);
            assert!(!c.q_cap_exceeded);
        }
    }

    #[test]
    fn identical_roster_incomplete_equilibrium() {
        let profiles: Vec<ClientProfile> =
            (0..50).map(|i| ClientProfile::new(i, 10.0, 0.01, 100.0).unwrap()).collect();
        let reports: Vec<f64> = profiles.iter().map(|p| p.mu).collect();
        let eq = run_algorithm_incomplete(&profiles, &config(), &reports, &BoundsOptions::default())
            .unwrap();
        assert_eq!(eq.scenario, Scenario::Incomplete);
        assert_relative_eq!(eq.mo_utility, 299.9697228552302, max_relative = 1e-9);
        for c in &eq.clients {
            assert!(c.flags.ir_binds, "client {} utility {}", c.id, c.utility);
            assert!(c.flags.time_binds);
            assert_relative_eq!(c.utility, 0.0, epsilon = 1e-9);
            assert_relative_eq!(c.expected_utility, 0.0, epsilon = 1e-9);
            assert_relative_eq!(c.breakdown.reward_mine, 0.0060554289539623395, max_relative = 1e-9);
        }
    }

    #[test]
    fn single_client_run_composes_the_three_steps() {
        let profiles = vec![profile(10.0)];
        let mut cfg = config();
        // Budget 30 with 5 reserved for mining leaves a 25 training bound,
        // matching the direct closed-form calls below.
        cfg.budget_total = 30.0;
        let eq = run_algorithm_complete(&profiles, &cfg, &BoundsOptions::default()).unwrap();
        let prices = optimal_prices_complete(&profiles[0], &cfg, 25.0, 5.0).unwrap();
        let powers = best_response(&profiles[0], &cfg, prices).unwrap();
        let (u, _) = client_utility(&profiles[0], &cfg, prices, powers).unwrap();
        assert_eq!(eq.clients.len(), 1);
        assert_relative_eq!(eq.clients[0].prices.p_t, prices.p_t);
        assert_relative_eq!(eq.clients[0].prices.p_m, prices.p_m);
        assert_relative_eq!(eq.clients[0].powers.q_t, powers.q_t);
        assert_relative_eq!(eq.clients[0].powers.q_m, powers.q_m);
        assert_relative_eq!(eq.clients[0].utility, u);
    }

    #[test]
    fn cap_violations_flag_but_do_not_error() {
        let p = ClientProfile::new(0, 10.0, 0.01, 3.0).unwrap();
        let cfg = config();
        let prices = optimal_prices_complete(&p, &cfg, 25.0, 5.0).unwrap();
        let powers = best_response(&p, &cfg, prices).unwrap();
        assert!(powers.q_t > 3.0);
        let eq = {
            let mut c = cfg.clone();
            c.budget_total = 30.0;
            run_algorithm_complete(&[p], &c, &BoundsOptions::default()).unwrap()
        };
        assert!(eq.clients[0].q_cap_exceeded);
    }

    #[test]
    fn misreport_grid_covers_truth_and_endpoints() {
        let grid = MisreportGrid { lo: 5.0, hi: 15.0, step: 0.5 };
        let pts = grid.points().unwrap();
        assert_eq!(pts.len(), 21);
        assert_relative_eq!(pts[0], 5.0);
        assert_relative_eq!(pts[20], 15.0);
        assert!(pts.iter().any(|m| *m == 10.0));
        assert!(MisreportGrid { lo: 0.0, hi: 1.0, step: 0.1 }.points().is_err());
    }

    #[test]
    fn audit_on_identical_roster_finds_no_profitable_misreport() {
        let profiles: Vec<ClientProfile> =
            (0..5).map(|i| ClientProfile::new(i, 10.0, 0.01, 100.0).unwrap()).collect();
        let grid = MisreportGrid { lo: 8.0, hi: 12.0, step: 1.0 };
        let audit =
            ic_audit(&profiles, &config(), 2, &grid, &BoundsOptions::default()).unwrap();
        assert_eq!(audit.client, 2);
        assert_relative_eq!(audit.truthful_utility, 0.0, epsilon = 1e-9);
        assert!(audit.best_gain <= 1e-9, "best gain {}", audit.best_gain);
        let truthful_row = audit.rows.iter().find(|r| r.truthful).unwrap();
        assert!(truthful_row.feasible);
        // Any deviation scores the deviant negatively, so its training
        // bound is unpriceable and the row is recorded infeasible.
        for r in audit.rows.iter().filter(|r| !r.truthful) {
            assert!(!r.feasible);
            assert!(r.utility.is_none());
        }
    }

    #[test]
    fn audit_tabulates_feasible_misreports_on_mixed_rosters() {
        let profiles = vec![
            ClientProfile::new(0, 8.0, 0.01, 100.0).unwrap(),
            ClientProfile::new(1, 12.0, 0.01, 100.0).unwrap(),
            ClientProfile::new(2, 9.0, 0.01, 100.0).unwrap(),
        ];
        let grid = MisreportGrid { lo: 6.0, hi: 12.0, step: 2.0 };
        let audit =
            ic_audit(&profiles, &config(), 0, &grid, &BoundsOptions::default()).unwrap();
        assert!(audit.rows.iter().any(|r| r.truthful));
        assert!(audit.rows.iter().filter(|r| r.feasible).count() >= 1);
        for r in &audit.rows {
            if let Some(u) = r.utility {
                assert!(u.is_finite());
                assert_relative_eq!(r.gain, u - audit.truthful_utility, max_relative = 1e-12);
            } else {
                assert_relative_eq!(r.gain, -audit.truthful_utility, max_relative = 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn training_rate_scales_with_cube_of_price(
            rho in 1e-3..0.1f64,
            p_t in 0.01..10.0f64,
            lambda in 0.2..5.0f64,
        ) {
            let client = ClientProfile::new(0, 1.0, rho, 1e12).unwrap();
            let mut cfg = config();
            cfg.horizon = 1e6; // keep every price feasible
            let base = best_response(&client, &cfg, PricePair { p_t, p_m: 1.0 })?;
            let scaled = best_response(
                &client,
                &cfg,
                PricePair { p_t: lambda.powi(3) * p_t, p_m: 1.0 },
            )?;
            prop_assert!((scaled.q_t - lambda * base.q_t).abs() <= 1e-9 * scaled.q_t.abs());
        }

        #[test]
        fn response_time_budget_always_binds(
            mu in 1.0..20.0f64,
            rho in 1e-3..0.1f64,
            psi in 1.0..10.0f64,
            horizon in 5.0..30.0f64,
            scale in 1.001..100.0f64,
        ) {
            let client = ClientProfile::new(0, mu, rho, 1e12).unwrap();
            let mut cfg = config();
            cfg.psi = psi;
            cfg.horizon = horizon;
            let p_t = scale * min_feasible_train_price(&client, &cfg);
            let powers = best_response(&client, &cfg, PricePair { p_t, p_m: 1.0 })?;
            let time = mu / powers.q_t + psi / powers.q_m;
            prop_assert!((time - horizon).abs() <= 1e-9 * horizon);
        }

        #[test]
        fn response_is_monotone_in_prices_and_blocksize(
            mu in 1.0..20.0f64,
            rho in 1e-3..0.1f64,
            psi in 1.0..10.0f64,
            horizon in 5.0..30.0f64,
            scale in 1.001..50.0f64,
            bump in 1.01..3.0f64,
        ) {
            let client = ClientProfile::new(0, mu, rho, 1e12).unwrap();
            let mut cfg = config();
            cfg.psi = psi;
            cfg.horizon = horizon;
            let p_t = scale * min_feasible_train_price(&client, &cfg);
            let lo = best_response(&client, &cfg, PricePair { p_t, p_m: 1.0 })?;
            let hi = best_response(&client, &cfg, PricePair { p_t: p_t * bump, p_m: 1.0 })?;
            prop_assert!(hi.q_t > lo.q_t);
            prop_assert!(hi.q_m < lo.q_m);
            let mut wider = cfg.clone();
            wider.psi = psi * bump;
            let big = best_response(&client, &wider, PricePair { p_t, p_m: 1.0 })?;
            prop_assert!(big.q_m > lo.q_m);
        }

        #[test]
        fn binding_identities_hold_across_parameters(
            mu in 1.0..20.0f64,
            rho in 1e-3..0.1f64,
            psi in 1.0..10.0f64,
            horizon in 5.0..30.0f64,
            margin in 1.01..50.0f64,
            rm in 0.1..10.0f64,
        ) {
            let client = ClientProfile::new(0, mu, rho, 1e12).unwrap();
            let mut cfg = config();
            cfg.psi = psi;
            cfg.horizon = horizon;
            let rt = margin * min_train_bound(&client, &cfg);
            let prices = optimal_prices_complete(&client, &cfg, rt, rm)?;
            let powers = best_response(&client, &cfg, prices)?;
            let (_, b) = client_utility(&client, &cfg, prices, powers)?;
            prop_assert!((b.reward_train - rt).abs() <= 1e-9 * rt);
            prop_assert!((b.reward_mine - rm).abs() <= 1e-9 * rm);
            let incomplete = optimal_prices_incomplete(&client, &cfg, rt, rm)?;
            let powers = best_response(&client, &cfg, incomplete)?;
            let (u, b) = client_utility(&client, &cfg, incomplete, powers)?;
            prop_assert!(u.abs() <= 1e-9 * (b.cost_train + b.cost_mine));
        }
    }
}
