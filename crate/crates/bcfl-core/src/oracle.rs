//! Independent verifiers for the closed forms in [`crate::stackelberg`].
//!
//! Two kinds of evidence are produced, neither of which reuses the
//! closed-form algebra it is checking:
//!
//! - **Brute force.** [`grid_best_response`] exhaustively scores a
//!   client's feasible CPU-rate grid at fixed prices, and
//!   [`grid_optimal_prices`] scores the operator's price grid with the
//!   follower responding inside the evaluation (the game's actual order
//!   of play). Argmaxes are deterministic: ties break toward the
//!   lexicographically smallest grid index regardless of how the work is
//!   partitioned across threads.
//! - **First-order conditions.** [`kkt_residuals_stage2`] and
//!   [`kkt_residuals_stage1`] evaluate stationarity, complementary
//!   slackness, active-constraint binding, and primal feasibility at a
//!   proposed point, with multipliers recovered from the stationarity
//!   system itself. Every multiplier is reported even when its sign
//!   violates the usual non-negativity requirement: the report judges,
//!   the solver does not hide.
//!
//! Residuals are normalized by the natural scale of each condition (the
//! magnitudes of the terms entering it, floored at 1), so thresholds read
//! as relative tolerances.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{mo_utility, ClientProfile, PowerPair, PricePair, SystemConfig};
use crate::shapley::RewardBounds;
use crate::stackelberg::{
    best_response, optimal_prices_complete, optimal_prices_incomplete,
    Scenario,
};

/// Relative slack used when testing feasibility of grid points, so that
/// optima sitting exactly on a constraint boundary are not excluded by
/// rounding.
pub const BOUNDARY_TOL: f64 = 1e-9;

/// One sampled axis of a search grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
    /// Geometric spacing (requires lo > 0); linear otherwise.
    pub log: bool,
}

impl Axis {
    pub fn linear(lo: f64, hi: f64, points: usize) -> Result<Self> {
        Axis { lo, hi, points, log: false }.checked()
    }

    pub fn log(lo: f64, hi: f64, points: usize) -> Result<Self> {
        Axis { lo, hi, points, log: true }.checked()
    }

    fn checked(self) -> Result<Self> {
        if !(self.lo > 0.0) || !(self.hi >= self.lo) || !self.hi.is_finite() {
            return Err(Error::Config(format!(
                "axis needs 0 < lo <= hi < inf, got [{}, {}]",
                self.lo, self.hi
            )));
        }
        if self.points < 2 {
            return Err(Error::Config(format!("axis needs >= 2 points, got {}", self.points)));
        }
        Ok(self)
    }

    /// The k-th sample. Doubling resolution as `points - 1 -> 2(points - 1)`
    /// reproduces every existing sample bit-for-bit, so refined searches
    /// can only improve on coarse ones.
    pub fn value(&self, k: usize) -> f64 {
        let t = k as f64 / (self.points - 1) as f64;
        if self.log {
            self.lo * (self.hi / self.lo).powf(t)
        } else {
            self.lo + (self.hi - self.lo) * t
        }
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.points).map(|k| self.value(k)).collect()
    }

    /// Same range with `2*(points-1) + 1` samples (a strict superset).
    pub fn refined(&self) -> Self {
        Axis { points: 2 * (self.points - 1) + 1, ..*self }
    }
}

/// Two-axis search grid. For CPU-rate searches x is the training rate
/// and y the mining rate; for price searches x is the training price and
/// y the mining price.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x: Axis,
    pub y: Axis,
}

impl GridSpec {
    /// Rate grid centered on a proposed response: linear, 0.5x to 1.5x
    /// in each coordinate.
    pub fn around_powers(powers: PowerPair, points: usize) -> Result<Self> {
        Ok(GridSpec {
            x: Axis::linear(0.5 * powers.q_t, 1.5 * powers.q_t, points)?,
            y: Axis::linear(0.5 * powers.q_m, 1.5 * powers.q_m, points)?,
        })
    }

    /// Price grid centered on proposed prices: geometric, 0.1x to 10x in
    /// each coordinate (closed forms live on cube roots of price ratios,
    /// so resolution belongs on the ratio scale).
    pub fn around_prices(prices: PricePair, points: usize) -> Result<Self> {
        Ok(GridSpec {
            x: Axis::log(0.1 * prices.p_t, 10.0 * prices.p_t, points)?,
            y: Axis::log(0.1 * prices.p_m, 10.0 * prices.p_m, points)?,
        })
    }

    pub fn refined(&self) -> Self {
        GridSpec { x: self.x.refined(), y: self.y.refined() }
    }
}

/// Default per-axis sample count for desk-scale certification.
pub const DEFAULT_GRID_POINTS: usize = 500;

/// Winning point of a grid search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridBest {
    /// Grid indices of the argmax (x-axis, y-axis).
    pub index: (usize, usize),
    /// Coordinates of the argmax.
    pub at: (f64, f64),
    /// Objective at the argmax.
    pub objective: f64,
    /// Number of grid points passing the feasibility filter.
    pub feasible: usize,
    /// Total grid points examined.
    pub examined: usize,
}

/// Generic deterministic argmax over a 2-D grid: `eval` returns the
/// objective for feasible points and None for infeasible ones. Rows are
/// scored in parallel; ties break to the smallest (ix, iy).
fn grid_argmax<F>(grid: &GridSpec, eval: F) -> Result<GridBest>
where
    F: Fn(f64, f64) -> Option<f64> + Sync,
{
    let xs = grid.x.values();
    let ys = grid.y.values();
    struct RowBest {
        iy: usize,
        objective: f64,
        feasible: usize,
    }
    let rows: Vec<Option<RowBest>> = xs
        .par_iter()
        .map(|&x| {
            let mut best: Option<RowBest> = None;
            let mut feasible = 0usize;
            for (iy, &y) in ys.iter().enumerate() {
                if let Some(u) = eval(x, y) {
                    feasible += 1;
                    let better = match &best {
                        Some(b) => u > b.objective,
                        None => true,
                    };
                    if better {
                        best = Some(RowBest { iy, objective: u, feasible: 0 });
                    }
                }
            }
            best.map(|mut b| {
                b.feasible = feasible;
                b
            })
        })
        .collect();

    let mut winner: Option<(usize, RowBest)> = None;
    let mut feasible = 0usize;
    for (ix, row) in rows.into_iter().enumerate() {
        if let Some(b) = row {
            feasible += b.feasible;
            let better = match &winner {
                Some((_, w)) => b.objective > w.objective,
                None => true,
            };
            if better {
                winner = Some((ix, b));
            }
        }
    }
    let examined = xs.len() * ys.len();
    match winner {
        Some((ix, b)) => Ok(GridBest {
            index: (ix, b.iy),
            at: (xs[ix], ys[b.iy]),
            objective: b.objective,
            feasible,
            examined,
        }),
        None => Err(Error::EmptyFeasibleSet(format!(
            "no feasible point on the {}x{} grid x in [{}, {}], y in [{}, {}]",
            grid.x.points, grid.y.points, grid.x.lo, grid.x.hi, grid.y.lo, grid.y.hi
        ))),
    }
}

/// Feasibility-filtered client utility, written out directly so the
/// search is independent of the solver code paths. Returns None for
/// infeasible rate pairs.
fn client_objective(
    profile: &ClientProfile,
    config: &SystemConfig,
    prices: PricePair,
    q_t: f64,
    q_m: f64,
) -> Option<f64> {
    let train_payoff = profile.mu * (prices.p_t / q_t - profile.rho * q_t * q_t);
    let mine_payoff = config.psi * (prices.p_m / q_m - profile.rho * q_m * q_m);
    let train_scale = profile.mu * (prices.p_t / q_t + profile.rho * q_t * q_t);
    let mine_scale = config.psi * (prices.p_m / q_m + profile.rho * q_m * q_m);
    let time = profile.mu / q_t + config.psi / q_m;
    if train_payoff < -BOUNDARY_TOL * train_scale.max(1.0)
        || mine_payoff < -BOUNDARY_TOL * mine_scale.max(1.0)
        || time > config.horizon * (1.0 + BOUNDARY_TOL)
    {
        return None;
    }
    Some(train_payoff + mine_payoff)
}

/// Default rate grid for [`grid_best_response`]: linear axes centered on
/// the closed-form response at these prices.
pub fn default_power_grid(
    profile: &ClientProfile,
    config: &SystemConfig,
    prices: PricePair,
    points: usize,
) -> Result<GridSpec> {
    GridSpec::around_powers(best_response(profile, config, prices)?, points)
}

/// Brute-force Stage-II search: scores every feasible (training rate,
/// mining rate) pair on the grid at the posted prices and returns the
/// deterministic argmax.
pub fn grid_best_response(
    profile: &ClientProfile,
    config: &SystemConfig,
    prices: PricePair,
    grid: &GridSpec,
) -> Result<GridBest> {
    if !(prices.p_t > 0.0) || prices.p_m < 0.0 {
        return Err(Error::InvalidPrice { id: profile.id, p_t: prices.p_t, p_m: prices.p_m });
    }
    grid_argmax(grid, |q_t, q_m| client_objective(profile, config, prices, q_t, q_m))
}

/// One client's slice of a Stage-I price search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClientPriceBest {
    pub id: usize,
    pub best: GridBest,
    pub prices: PricePair,
    /// The follower response embedded in the winning evaluation.
    pub powers: PowerPair,
}

/// Result of a Stage-I price search over the whole roster.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PriceSearch {
    pub scenario: Scenario,
    pub per_client: Vec<ClientPriceBest>,
    /// Operator utility with every client at its winning grid prices.
    pub mo_utility: f64,
}

/// Operator's per-client search objective at a candidate price pair:
/// the negated per-client outlay -xi*(time + payouts), with the follower
/// responding optimally inside the evaluation. The shared accuracy term
/// of the operator's utility does not depend on prices, so maximizing
/// this per client maximizes the joint objective. Returns None where the
/// candidate violates the scenario's constraint set.
fn operator_objective(
    profile: &ClientProfile,
    config: &SystemConfig,
    train_bound: f64,
    mine_bound: f64,
    scenario: Scenario,
    p_t: f64,
    p_m: f64,
) -> Option<(f64, PowerPair)> {
    let window = config.horizon - profile.mu * (profile.rho / p_t).cbrt();
    if window <= 0.0 {
        return None;
    }
    let q_t = (p_t / profile.rho).cbrt();
    let q_m = config.psi / window;
    let train_payout = profile.mu / q_t * p_t;
    let mine_payout = window * p_m;
    if train_payout > train_bound + BOUNDARY_TOL * train_bound.abs().max(1.0) {
        return None;
    }
    if mine_payout > mine_bound + BOUNDARY_TOL * mine_bound.abs().max(1.0) {
        return None;
    }
    if scenario == Scenario::Incomplete {
        // Participation filter: the responding client's utility is its
        // mining margin (training pays at cost at the response).
        let mine_cost = profile.rho * config.psi * q_m * q_m;
        let scale = mine_payout.abs() + mine_cost;
        if mine_payout - mine_cost < -BOUNDARY_TOL * scale.max(1.0) {
            return None;
        }
    }
    let time = profile.mu / q_t + config.psi / q_m;
    let outlay = time + train_payout + mine_payout;
    Some((-config.xi * outlay, PowerPair { q_t, q_m }))
}

/// Default price grid for [`grid_optimal_prices`]: log axes centered on
/// the scenario's closed-form prices for this client.
pub fn default_price_grid(
    profile: &ClientProfile,
    config: &SystemConfig,
    train_bound: f64,
    mine_bound: f64,
    scenario: Scenario,
    points: usize,
) -> Result<GridSpec> {
    let closed = match scenario {
        Scenario::Complete => optimal_prices_complete(profile, config, train_bound, mine_bound)?,
        Scenario::Incomplete => {
            optimal_prices_incomplete(profile, config, train_bound, mine_bound)?
        }
    };
    GridSpec::around_prices(closed, points)
}

/// Brute-force Stage-I search for one client on an explicit grid.
pub fn grid_client_prices(
    profile: &ClientProfile,
    config: &SystemConfig,
    train_bound: f64,
    mine_bound: f64,
    scenario: Scenario,
    grid: &GridSpec,
) -> Result<ClientPriceBest> {
    let best = grid_argmax(grid, |p_t, p_m| {
        operator_objective(profile, config, train_bound, mine_bound, scenario, p_t, p_m)
            .map(|(u, _)| u)
    })?;
    let prices = PricePair { p_t: best.at.0, p_m: best.at.1 };
    let powers = best_response(profile, config, prices)?;
    Ok(ClientPriceBest { id: profile.id, best, prices, powers })
}

/// Brute-force Stage-I search over the roster: each client's price pair
/// is searched on a log grid centered on its closed form (the operator's
/// objective separates per client), with the follower responding inside
/// the evaluation. Scenario `incomplete` additionally filters candidate
/// prices whose responding client would net negative utility.
pub fn grid_optimal_prices(
    profiles: &[ClientProfile],
    config: &SystemConfig,
    bounds: &RewardBounds,
    scenario: Scenario,
    points: usize,
) -> Result<PriceSearch> {
    if bounds.train.len() != profiles.len() {
        return Err(Error::LengthMismatch { expected: profiles.len(), got: bounds.train.len() });
    }
    let per_client: Vec<ClientPriceBest> = profiles
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let grid =
                default_price_grid(p, config, bounds.train[i], bounds.mine, scenario, points)?;
            grid_client_prices(p, config, bounds.train[i], bounds.mine, scenario, &grid)
        })
        .collect::<Result<_>>()?;
    let prices: Vec<PricePair> = per_client.iter().map(|c| c.prices).collect();
    let powers: Vec<PowerPair> = per_client.iter().map(|c| c.powers).collect();
    let mo = mo_utility(profiles, config, &prices, &powers)?;
    Ok(PriceSearch { scenario, per_client, mo_utility: mo })
}

/// Fully independent Stage-I search: instead of embedding the
/// closed-form follower response, every candidate price pair is answered
/// by an inner brute-force rate search whose bounds come from the
/// constraints alone (training rate within [mu/T, (p_t/rho)^(1/3)],
/// mining rate within [psi/T, (p_m/rho)^(1/3)]). Cost is
/// outer^2 * inner^2 evaluations, capped at 50^4.
pub fn grid_optimal_prices_nested(
    profile: &ClientProfile,
    config: &SystemConfig,
    train_bound: f64,
    mine_bound: f64,
    scenario: Scenario,
    outer: &GridSpec,
    inner_points: usize,
) -> Result<ClientPriceBest> {
    let cost = outer.x.points * outer.y.points * inner_points * inner_points;
    if inner_points < 2 || cost > 50usize.pow(4) {
        return Err(Error::Config(format!(
            "nested search needs 2 <= inner and outer^2*inner^2 <= 50^4, got {cost} evaluations"
        )));
    }
    let respond = |p_t: f64, p_m: f64| -> Option<(PowerPair, f64)> {
        let q_t_hi = (p_t / profile.rho).cbrt();
        let q_m_hi = (p_m / profile.rho).cbrt();
        let q_t_lo = profile.mu / config.horizon;
        let q_m_lo = config.psi / config.horizon;
        if !(q_t_hi > q_t_lo) || !(q_m_hi > q_m_lo) {
            return None;
        }
        let inner = GridSpec {
            x: Axis::linear(q_t_lo, q_t_hi, inner_points).ok()?,
            y: Axis::linear(q_m_lo, q_m_hi, inner_points).ok()?,
        };
        let best =
            grid_argmax(&inner, |q_t, q_m| client_objective(profile, config, prices_of(p_t, p_m), q_t, q_m))
                .ok()?;
        Some((PowerPair { q_t: best.at.0, q_m: best.at.1 }, best.objective))
    };
    fn prices_of(p_t: f64, p_m: f64) -> PricePair {
        PricePair { p_t, p_m }
    }

    let best = grid_argmax(outer, |p_t, p_m| {
        let (powers, client_u) = respond(p_t, p_m)?;
        let train_payout = profile.mu / powers.q_t * p_t;
        let mine_payout = config.psi / powers.q_m * p_m;
        if train_payout > train_bound + BOUNDARY_TOL * train_bound.abs().max(1.0)
            || mine_payout > mine_bound + BOUNDARY_TOL * mine_bound.abs().max(1.0)
        {
            return None;
        }
        if scenario == Scenario::Incomplete && client_u < -BOUNDARY_TOL {
            return None;
        }
        let time = profile.mu / powers.q_t + config.psi / powers.q_m;
        Some(-config.xi * (time + train_payout + mine_payout))
    })?;
    let prices = PricePair { p_t: best.at.0, p_m: best.at.1 };
    let (powers, _) = respond(prices.p_t, prices.p_m).ok_or_else(|| {
        Error::EmptyFeasibleSet("winning price cell lost its inner response".into())
    })?;
    Ok(ClientPriceBest { id: profile.id, best, prices, powers })
}

/// One checked first-order condition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KktCondition {
    pub name: String,
    /// Normalized residual: 0 means satisfied exactly.
    pub residual: f64,
}

/// One recovered multiplier.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KktMultiplier {
    pub name: String,
    pub value: f64,
}

/// First-order-condition audit of a proposed solution.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KktReport {
    pub conditions: Vec<KktCondition>,
    pub multipliers: Vec<KktMultiplier>,
    /// Names of multipliers that came out negative. A dual-feasible
    /// certificate requires this list to be empty; entries here mean the
    /// stationarity system is only satisfiable with sign violations,
    /// which the report surfaces rather than suppresses.
    pub negative_multipliers: Vec<String>,
    pub max_residual: f64,
}

impl KktReport {
    fn build(conditions: Vec<KktCondition>, multipliers: Vec<KktMultiplier>) -> Self {
        let negative_multipliers = multipliers
            .iter()
            .filter(|m| m.value < 0.0)
            .map(|m| m.name.clone())
            .collect();
        let max_residual =
            conditions.iter().map(|c| c.residual).fold(0.0f64, f64::max);
        KktReport { conditions, multipliers, negative_multipliers, max_residual }
    }

    pub fn condition(&self, name: &str) -> Option<f64> {
        self.conditions.iter().find(|c| c.name == name).map(|c| c.residual)
    }
}

fn rel(residual: f64, scale: f64) -> f64 {
    residual.abs() / scale.abs().max(1.0)
}

/// Stage-II first-order audit at a proposed rate pair.
///
/// Active case: the time budget binds with multiplier lambda_time, the
/// mining-payoff constraint is slack (lambda_mine_payoff = 0), and
/// lambda_time, lambda_train_payoff are recovered from the two
/// stationarity relations lambda_time/q^2 = 2(1 + lambda)*rho*q. The
/// stationarity rows therefore vanish by construction; the informative
/// rows are the binding, complementary-slackness, and feasibility
/// residuals, plus the recovered multiplier signs.
pub fn kkt_residuals_stage2(
    profile: &ClientProfile,
    config: &SystemConfig,
    prices: PricePair,
    powers: PowerPair,
) -> Result<KktReport> {
    let PowerPair { q_t, q_m } = powers;
    if !(q_t > 0.0) || !(q_m > 0.0) {
        return Err(Error::NonPositivePower { id: profile.id, q_t, q_m });
    }
    let rho = profile.rho;
    let (mu, psi, horizon) = (profile.mu, config.psi, config.horizon);

    let lambda_mine = 0.0f64;
    let lambda_time = 2.0 * (1.0 + lambda_mine) * rho * q_m.powi(3);
    let lambda_train = lambda_time / (2.0 * rho * q_t.powi(3)) - 1.0;

    let stat_t = -2.0 * (1.0 + lambda_train) * rho * mu * q_t + lambda_time * mu / (q_t * q_t);
    let stat_t_scale =
        2.0 * (1.0 + lambda_train).abs() * rho * mu * q_t + lambda_time.abs() * mu / (q_t * q_t);
    let stat_m = -2.0 * (1.0 + lambda_mine) * rho * psi * q_m + lambda_time * psi / (q_m * q_m);
    let stat_m_scale =
        2.0 * (1.0 + lambda_mine).abs() * rho * psi * q_m + lambda_time.abs() * psi / (q_m * q_m);

    let train_payoff = mu * (prices.p_t / q_t - rho * q_t * q_t);
    let train_scale = mu * (prices.p_t / q_t + rho * q_t * q_t);
    let mine_payoff = psi * (prices.p_m / q_m - rho * q_m * q_m);
    let mine_scale = psi * (prices.p_m / q_m + rho * q_m * q_m);
    let time = mu / q_t + psi / q_m;

    let conditions = vec![
        KktCondition { name: "stationarity_train_rate".into(), residual: rel(stat_t, stat_t_scale) },
        KktCondition { name: "stationarity_mine_rate".into(), residual: rel(stat_m, stat_m_scale) },
        KktCondition {
            name: "complementary_train_payoff".into(),
            residual: rel(lambda_train * train_payoff, lambda_train.abs() * train_scale),
        },
        KktCondition {
            name: "complementary_mine_payoff".into(),
            residual: rel(lambda_mine * mine_payoff, lambda_mine.abs() * mine_scale),
        },
        KktCondition {
            name: "complementary_time".into(),
            residual: rel(lambda_time * (horizon - time), lambda_time.abs() * horizon),
        },
        KktCondition { name: "binding_time".into(), residual: rel(time - horizon, horizon) },
        KktCondition {
            name: "feasible_train_payoff".into(),
            residual: rel((-train_payoff).max(0.0), train_scale),
        },
        KktCondition {
            name: "feasible_mine_payoff".into(),
            residual: rel((-mine_payoff).max(0.0), mine_scale),
        },
        KktCondition {
            name: "feasible_time".into(),
            residual: rel((time - horizon).max(0.0), horizon),
        },
    ];
    let multipliers = vec![
        KktMultiplier { name: "lambda_train_payoff".into(), value: lambda_train },
        KktMultiplier { name: "lambda_mine_payoff".into(), value: lambda_mine },
        KktMultiplier { name: "lambda_time".into(), value: lambda_time },
    ];
    Ok(KktReport::build(conditions, multipliers))
}

/// Stage-I first-order audit at proposed prices for one client.
///
/// Complete information: both payout bounds are treated as active; the
/// two multipliers are recovered from stationarity in each price (both
/// come out equal to -xi — a sign violation the report flags, consistent
/// with the brute-force finding that the closed form is a stationary
/// boundary point rather than the grid maximum). Incomplete information:
/// the training bound and the participation constraint are treated as
/// active, the mining-bound multiplier is zero, and the remaining two
/// multipliers are recovered from stationarity.
pub fn kkt_residuals_stage1(
    profile: &ClientProfile,
    config: &SystemConfig,
    train_bound: f64,
    mine_bound: f64,
    prices: PricePair,
    scenario: Scenario,
) -> Result<KktReport> {
    let powers = best_response(profile, config, prices)?;
    let (mu, psi, rho, xi) = (profile.mu, config.psi, profile.rho, config.xi);
    let window = config.horizon - mu * (rho / prices.p_t).cbrt();
    let train_payout = mu / powers.q_t * prices.p_t;
    let mine_payout = window * prices.p_m;

    // d(train payout)/dp_t and d(window)/dp_t at the responding client.
    let dtrain = (2.0 / 3.0) * mu * rho.cbrt() * prices.p_t.powf(-1.0 / 3.0);
    let dwindow = (mu / 3.0) * rho.cbrt() * prices.p_t.powf(-4.0 / 3.0);

    let mut conditions = Vec::new();
    let mut multipliers = Vec::new();
    match scenario {
        Scenario::Complete => {
            let theta_mine = -xi;
            let theta_train = -xi - (xi + theta_mine) * dwindow * prices.p_m / dtrain;
            let stat_t = -(xi + theta_train) * dtrain - (xi + theta_mine) * dwindow * prices.p_m;
            let stat_t_scale = (xi + theta_train).abs() * dtrain
                + (xi + theta_mine).abs() * dwindow * prices.p_m;
            let stat_m = -(xi + theta_mine) * window;
            let stat_m_scale = (xi + theta_mine).abs() * window + xi * window;
            conditions.extend([
                KktCondition {
                    name: "stationarity_train_price".into(),
                    residual: rel(stat_t, stat_t_scale),
                },
                KktCondition {
                    name: "stationarity_mine_price".into(),
                    residual: rel(stat_m, stat_m_scale),
                },
                KktCondition {
                    name: "binding_train_bound".into(),
                    residual: rel(train_payout - train_bound, train_bound),
                },
                KktCondition {
                    name: "binding_mine_bound".into(),
                    residual: rel(mine_payout - mine_bound, mine_bound),
                },
                KktCondition {
                    name: "complementary_train_bound".into(),
                    residual: rel(
                        theta_train * (train_bound - train_payout),
                        theta_train.abs() * train_bound,
                    ),
                },
                KktCondition {
                    name: "complementary_mine_bound".into(),
                    residual: rel(
                        theta_mine * (mine_bound - mine_payout),
                        theta_mine.abs() * mine_bound,
                    ),
                },
                KktCondition {
                    name: "feasible_train_bound".into(),
                    residual: rel((train_payout - train_bound).max(0.0), train_bound),
                },
                KktCondition {
                    name: "feasible_mine_bound".into(),
                    residual: rel((mine_payout - mine_bound).max(0.0), mine_bound),
                },
            ]);
            multipliers.extend([
                KktMultiplier { name: "theta_train_bound".into(), value: theta_train },
                KktMultiplier { name: "theta_mine_bound".into(), value: theta_mine },
            ]);
        }
        Scenario::Incomplete => {
            let alpha_mine = 0.0f64;
            let alpha_ir = xi + alpha_mine;
            // Client utility at the response is its mining margin.
            let mine_cost = rho * psi * powers.q_m * powers.q_m;
            let client_u = mine_payout - mine_cost;
            let du_dpt = dwindow * (prices.p_m + 2.0 * rho * powers.q_m.powi(3));
            let alpha_train = (-xi * (dtrain + dwindow * prices.p_m)
                - alpha_mine * dwindow * prices.p_m
                + alpha_ir * du_dpt)
                / dtrain;
            let stat_t = -xi * (dtrain + dwindow * prices.p_m) - alpha_train * dtrain
                - alpha_mine * dwindow * prices.p_m
                + alpha_ir * du_dpt;
            let stat_t_scale = xi * (dtrain + dwindow * prices.p_m)
                + alpha_train.abs() * dtrain
                + alpha_ir.abs() * du_dpt.abs();
            let stat_m = -xi * window - alpha_mine * window + alpha_ir * window;
            let stat_m_scale = xi * window + alpha_ir.abs() * window;
            let u_scale = mine_payout.abs() + mine_cost + train_payout.abs();
            conditions.extend([
                KktCondition {
                    name: "stationarity_train_price".into(),
                    residual: rel(stat_t, stat_t_scale),
                },
                KktCondition {
                    name: "stationarity_mine_price".into(),
                    residual: rel(stat_m, stat_m_scale),
                },
                KktCondition {
                    name: "binding_train_bound".into(),
                    residual: rel(train_payout - train_bound, train_bound),
                },
                KktCondition {
                    name: "binding_participation".into(),
                    residual: rel(client_u, u_scale),
                },
                KktCondition {
                    name: "complementary_train_bound".into(),
                    residual: rel(
                        alpha_train * (train_bound - train_payout),
                        alpha_train.abs() * train_bound,
                    ),
                },
                KktCondition {
                    name: "complementary_mine_bound".into(),
                    residual: rel(
                        alpha_mine * (mine_bound - mine_payout),
                        alpha_mine.abs() * mine_bound,
                    ),
                },
                KktCondition {
                    name: "complementary_participation".into(),
                    residual: rel(alpha_ir * client_u, alpha_ir.abs() * u_scale),
                },
                KktCondition {
                    name: "feasible_train_bound".into(),
                    residual: rel((train_payout - train_bound).max(0.0), train_bound),
                },
                KktCondition {
                    name: "feasible_mine_bound".into(),
                    residual: rel((mine_payout - mine_bound).max(0.0), mine_bound),
                },
                KktCondition {
                    name: "feasible_participation".into(),
                    residual: rel((-client_u).max(0.0), u_scale),
                },
            ]);
            multipliers.extend([
                KktMultiplier { name: "alpha_train_bound".into(), value: alpha_train },
                KktMultiplier { name: "alpha_mine_bound".into(), value: alpha_mine },
                KktMultiplier { name: "alpha_participation".into(), value: alpha_ir },
            ]);
        }
    }
    Ok(KktReport::build(conditions, multipliers))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{client_utility, MiningBudget, PerfFn};
    use crate::shapley::{reward_bounds, BoundsOptions, CoalitionValues};
    use approx::assert_relative_eq;

    fn profile(mu: f64) -> ClientProfile {
        ClientProfile::new(0, mu, 0.01, 1e9).unwrap()
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
    fn axis_samples_nest_under_refinement() {
        for axis in [
            Axis::linear(0.5, 1.5, 501).unwrap(),
            Axis::log(0.1, 10.0, 501).unwrap(),
        ] {
            let fine = axis.refined();
            assert_eq!(fine.points, 1001);
            for k in 0..axis.points {
                assert_eq!(axis.value(k).to_bits(), fine.value(2 * k).to_bits());
            }
        }
    }

    #[test]
    fn axis_rejects_degenerate_ranges() {
        assert!(Axis::linear(0.0, 1.0, 10).is_err());
        assert!(Axis::linear(2.0, 1.0, 10).is_err());
        assert!(Axis::linear(1.0, 2.0, 1).is_err());
        assert!(Axis::log(1.0, f64::INFINITY, 10).is_err());
        // A zero-width axis is allowed: every sample is the same point.
        let a = Axis::linear(2.0, 2.0, 2).unwrap();
        assert_eq!(a.value(0), 2.0);
        assert_eq!(a.value(1), 2.0);
    }

    #[test]
    fn degenerate_grid_returns_the_closed_form() {
        let p = profile(10.0);
        let cfg = config();
        let prices = PricePair { p_t: 0.08, p_m: 1.0 };
        let closed = best_response(&p, &cfg, prices).unwrap();
        let grid = GridSpec {
            x: Axis::linear(closed.q_t, closed.q_t, 2).unwrap(),
            y: Axis::linear(closed.q_m, closed.q_m, 2).unwrap(),
        };
        let best = grid_best_response(&p, &cfg, prices, &grid).unwrap();
        assert_eq!(best.index, (0, 0));
        assert_relative_eq!(best.at.0, closed.q_t);
        assert_relative_eq!(best.at.1, closed.q_m);
        let (u, _) = client_utility(&p, &cfg, prices, closed).unwrap();
        assert_relative_eq!(best.objective, u, max_relative = 1e-12);
    }

    #[test]
    fn closed_form_point_is_feasible_on_its_own_boundary() {
        // The response sits exactly on the zero-training-payoff and
        // time-budget boundaries; the filter's slack must keep it.
        let p = profile(10.0);
        let cfg = config();
        let prices = PricePair { p_t: 0.08, p_m: 1.0 };
        let closed = best_response(&p, &cfg, prices).unwrap();
        assert!(client_objective(&p, &cfg, prices, closed.q_t, closed.q_m).is_some());
    }

    #[test]
    fn empty_feasible_set_is_an_error() {
        let p = profile(10.0);
        let cfg = config();
        // Rates far too slow to finish anything inside the horizon.
        let grid = GridSpec {
            x: Axis::linear(1e-6, 2e-6, 4).unwrap(),
            y: Axis::linear(1e-6, 2e-6, 4).unwrap(),
        };
        let err =
            grid_best_response(&p, &cfg, PricePair { p_t: 0.08, p_m: 1.0 }, &grid).unwrap_err();
        assert!(matches!(err, Error::EmptyFeasibleSet(_)));
    }

    #[test]
    fn refinement_never_lowers_the_grid_maximum() {
        let p = profile(10.0);
        let cfg = config();
        let prices = PricePair { p_t: 0.08, p_m: 1.0 };
        let grid = default_power_grid(&p, &cfg, prices, 501).unwrap();
        let coarse = grid_best_response(&p, &cfg, prices, &grid).unwrap();
        let fine = grid_best_response(&p, &cfg, prices, &grid.refined()).unwrap();
        assert!(fine.objective >= coarse.objective);
    }

    #[test]
    fn argmax_is_thread_count_independent() {
        let p = profile(10.0);
        let cfg = config();
        let prices = PricePair { p_t: 0.08, p_m: 1.0 };
        let grid = default_power_grid(&p, &cfg, prices, 301).unwrap();
        let a = grid_best_response(&p, &cfg, prices, &grid).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| grid_best_response(&p, &cfg, prices, &grid).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn tie_break_takes_the_smallest_index() {
        // Constant objective over a fully feasible grid: every point ties.
        let grid = GridSpec {
            x: Axis::linear(1.0, 2.0, 5).unwrap(),
            y: Axis::linear(1.0, 2.0, 5).unwrap(),
        };
        let best = grid_argmax(&grid, |_, _| Some(1.0)).unwrap();
        assert_eq!(best.index, (0, 0));
        assert_eq!(best.feasible, 25);
    }

    #[test]
    fn stage1_search_reports_roster_and_operator_utility() {
        let profiles: Vec<ClientProfile> =
            (0..3).map(|i| ClientProfile::new(i, 10.0, 0.01, 1e9).unwrap()).collect();
        let cfg = config();
        let values = CoalitionValues::from_profiles(&profiles, &cfg).unwrap();
        let bounds = reward_bounds(&profiles, &cfg, &values, &BoundsOptions::default()).unwrap();
        let search =
            grid_optimal_prices(&profiles, &cfg, &bounds, Scenario::Complete, 101).unwrap();
        assert_eq!(search.per_client.len(), 3);
        // Identical clients and bounds must land on identical cells.
        let first = search.per_client[0].best.index;
        for c in &search.per_client {
            assert_eq!(c.best.index, first);
        }
        assert!(search.mo_utility.is_finite());
    }

    #[test]
    fn nested_search_rejects_oversized_budgets() {
        let p = profile(10.0);
        let cfg = config();
        let outer = GridSpec {
            x: Axis::log(1.0, 100.0, 51).unwrap(),
            y: Axis::log(0.01, 1.0, 51).unwrap(),
        };
        let err = grid_optimal_prices_nested(&p, &cfg, 25.0, 5.0, Scenario::Complete, &outer, 51)
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn nested_search_reports_an_empty_set_under_tight_bounds() {
        // With the follower modeled by an independent inner search, its
        // chosen training payout exceeds a 25-unit bound at every price
        // in the default window: the independent follower takes more
        // training margin than the closed-form response concedes. The
        // honest verdict is infeasibility, not a forced match.
        let p = profile(10.0);
        let cfg = config();
        let outer = GridSpec {
            x: Axis::log(3.9, 390.0, 50).unwrap(),
            y: Axis::log(0.034, 3.4, 50).unwrap(),
        };
        let err = grid_optimal_prices_nested(&p, &cfg, 25.0, 5.0, Scenario::Complete, &outer, 50)
            .unwrap_err();
        assert!(matches!(err, Error::EmptyFeasibleSet(_)));
    }

    #[test]
    fn nested_search_finds_points_under_loose_bounds() {
        let p = profile(10.0);
        let cfg = config();
        let outer = GridSpec {
            x: Axis::log(1.0, 100.0, 40).unwrap(),
            y: Axis::log(0.01, 1.0, 40).unwrap(),
        };
        let nested =
            grid_optimal_prices_nested(&p, &cfg, 400.0, 20.0, Scenario::Complete, &outer, 40)
                .unwrap();
        assert!(nested.best.objective.is_finite());
        assert!(nested.best.feasible > 0);
        assert!(nested.powers.q_t > 0.0 && nested.powers.q_m > 0.0);
    }

    #[test]
    fn stage2_kkt_residuals_vanish_at_the_closed_form() {
        for (mu, p_t, p_m) in [(10.0, 0.08, 1.0), (10.0, 39.52847075210474, 0.3480065790746589), (5.0, 2.0, 0.3)] {
            let p = profile(mu);
            let cfg = config();
            let prices = PricePair { p_t, p_m };
            let powers = best_response(&p, &cfg, prices).unwrap();
            let report = kkt_residuals_stage2(&p, &cfg, prices, powers).unwrap();
            assert!(
                report.max_residual <= 1e-8,
                "max residual {} at p_t={p_t}",
                report.max_residual
            );
            // The recovered training-payoff multiplier violates dual
            // feasibility whenever the mining rate is below the training
            // rate; the report must flag it rather than hide it.
            if powers.q_m < powers.q_t {
                assert!(report
                    .negative_multipliers
                    .contains(&"lambda_train_payoff".to_string()));
            }
        }
    }

    #[test]
    fn stage2_kkt_flags_a_perturbed_point() {
        let p = profile(10.0);
        let cfg = config();
        let prices = PricePair { p_t: 0.08, p_m: 1.0 };
        let mut powers = best_response(&p, &cfg, prices).unwrap();
        powers.q_t *= 1.1;
        let report = kkt_residuals_stage2(&p, &cfg, prices, powers).unwrap();
        let time = p.mu / powers.q_t + cfg.psi / powers.q_m;
        let expected = (time - cfg.horizon).abs() / cfg.horizon;
        assert_relative_eq!(
            report.condition("binding_time").unwrap(),
            expected,
            max_relative = 1e-12
        );
        assert!(report.max_residual > 1e-3);
    }

    #[test]
    fn stage1_kkt_complete_binds_both_payouts() {
        let p = profile(10.0);
        let cfg = config();
        let prices = optimal_prices_complete(&p, &cfg, 25.0, 5.0).unwrap();
        let report =
            kkt_residuals_stage1(&p, &cfg, 25.0, 5.0, prices, Scenario::Complete).unwrap();
        assert!(report.max_residual <= 1e-8, "max residual {}", report.max_residual);
        assert_eq!(
            report.negative_multipliers,
            vec!["theta_train_bound".to_string(), "theta_mine_bound".to_string()]
        );
        for m in &report.multipliers {
            assert_relative_eq!(m.value, -0.1, max_relative = 1e-9);
        }
    }

    #[test]
    fn stage1_kkt_incomplete_binds_training_and_participation() {
        let p = profile(10.0);
        let cfg = config();
        let prices = optimal_prices_incomplete(&p, &cfg, 25.0, 5.0).unwrap();
        let report =
            kkt_residuals_stage1(&p, &cfg, 25.0, 5.0, prices, Scenario::Incomplete).unwrap();
        assert!(report.max_residual <= 1e-8, "max residual {}", report.max_residual);
        assert!(report.condition("binding_participation").unwrap() <= 1e-12);
        assert!(report.negative_multipliers.contains(&"alpha_train_bound".to_string()));
        let alpha_ir = report
            .multipliers
            .iter()
            .find(|m| m.name == "alpha_participation")
            .unwrap()
            .value;
        assert_relative_eq!(alpha_ir, cfg.xi);
    }

    #[test]
    fn stage1_kkt_flags_non_optimal_prices() {
        let p = profile(10.0);
        let cfg = config();
        let optimal = optimal_prices_complete(&p, &cfg, 25.0, 5.0).unwrap();
        let off = PricePair { p_t: optimal.p_t * 0.5, p_m: optimal.p_m * 0.5 };
        let report = kkt_residuals_stage1(&p, &cfg, 25.0, 5.0, off, Scenario::Complete).unwrap();
        assert!(report.condition("binding_train_bound").unwrap() > 1e-3);
    }
}
