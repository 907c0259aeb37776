//! Core quantities of one allocation round: who computes what, at which
//! price, and what each side earns.
//!
//! A round has two kinds of work. Each client i must spend `mu_i` cycles of
//! training work and `psi` cycles of mining work within a shared deadline
//! `horizon`. The client chooses CPU rates `q_t` and `q_m` (cycles per
//! minute, in the same cycle unit as the work), so training takes
//! `mu / q_t` minutes and mining `psi / q_m`. The operator pays per minute
//! of work at unit prices `p_t` and `p_m`; running at rate q costs the
//! client `rho * work * q^2` in energy.
//!
//! Client utility for one round:
//!
//! ```text
//! U_i = (mu/q_t) p_t + (psi/q_m) p_m - rho mu q_t^2 - rho psi q_m^2
//! ```
//!
//! Operator utility aggregates a performance value of the collected
//! training work against the time and reward cost of every client:
//!
//! ```text
//! U_mo = f(sum_i mu_i) - xi * sum_i (mu_i/q_ti + psi/q_mi
//!         + (mu_i/q_ti) p_ti + (psi/q_mi) p_mi)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance used by the binding/consistency checks in this crate.
pub const REL_TOL: f64 = 1e-9;

fn pos_finite(x: f64) -> bool {
    x.is_finite() && x > 0.0
}

/// Training workload stated as dataset size, cycles per sample, and local
/// iterations; total training work is their product.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingWorkload {
    /// Samples held by the client.
    pub data_size: f64,
    /// Cycles needed per sample per iteration.
    pub cycles_per_sample: f64,
    /// Local training iterations per round.
    pub iterations: f64,
}

impl TrainingWorkload {
    /// Total training cycles `iterations * cycles_per_sample * data_size`.
    pub fn total_cycles(&self) -> f64 {
        self.iterations * self.cycles_per_sample * self.data_size
    }
}

/// One client's fixed characteristics for a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientProfile {
    /// Stable identifier used in reports and error messages.
    pub id: usize,
    /// Total training cycles the client must spend this round.
    pub mu: f64,
    /// Energy cost coefficient; energy per unit work grows as rho * q^2.
    pub rho: f64,
    /// Physical CPU rate limit. Not a solver constraint: responses above
    /// it are flagged, not clipped.
    pub q_cap: f64,
    /// Optional workload decomposition; when present it must reproduce
    /// `mu` to 1e-12 relative.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workload: Option<TrainingWorkload>,
}

impl ClientProfile {
    pub fn new(id: usize, mu: f64, rho: f64, q_cap: f64) -> Result<Self> {
        let profile = ClientProfile { id, mu, rho, q_cap, workload: None };
        profile.validate()?;
        Ok(profile)
    }

    /// Builds a profile whose `mu` is derived from a workload decomposition.
    pub fn from_workload(id: usize, rho: f64, q_cap: f64, workload: TrainingWorkload) -> Result<Self> {
        let profile = ClientProfile { id, mu: workload.total_cycles(), rho, q_cap, workload: Some(workload) };
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<()> {
        if !pos_finite(self.mu) {
            return Err(Error::Config(format!("client {}: mu must be positive and finite, got {}", self.id, self.mu)));
        }
        if !pos_finite(self.rho) {
            return Err(Error::Config(format!("client {}: rho must be positive and finite, got {}", self.id, self.rho)));
        }
        if !pos_finite(self.q_cap) {
            return Err(Error::Config(format!("client {}: q_cap must be positive and finite, got {}", self.id, self.q_cap)));
        }
        if let Some(w) = &self.workload {
            if !pos_finite(w.data_size) || !pos_finite(w.cycles_per_sample) || !pos_finite(w.iterations) {
                return Err(Error::Config(format!("client {}: workload fields must be positive and finite", self.id)));
            }
            let derived = w.total_cycles();
            if (derived - self.mu).abs() > 1e-12 * derived.abs().max(self.mu.abs()) {
                return Err(Error::Config(format!(
                    "client {}: mu = {} disagrees with workload product {}",
                    self.id, self.mu, derived
                )));
            }
        }
        Ok(())
    }
}

/// Monotone value of the total collected training work.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PerfFn {
    /// f(x) = x.
    Identity,
    /// f(x) = kappa * x.
    Scaled { kappa: f64 },
    /// f(x) = a * ln(1 + b x); saturating returns to extra work.
    LogSaturating { a: f64, b: f64 },
}

impl PerfFn {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            PerfFn::Identity => x,
            PerfFn::Scaled { kappa } => kappa * x,
            PerfFn::LogSaturating { a, b } => a * (1.0 + b * x).ln(),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            PerfFn::Identity => Ok(()),
            PerfFn::Scaled { kappa } if pos_finite(kappa) => Ok(()),
            PerfFn::LogSaturating { a, b } if pos_finite(a) && pos_finite(b) => Ok(()),
            _ => Err(Error::Config(format!("performance function parameters must be positive and finite: {self:?}"))),
        }
    }
}

impl Default for PerfFn {
    fn default() -> Self {
        PerfFn::Identity
    }
}

/// Mining reward budget, given either in total or already per client.
/// The per-client bound is always total / N.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MiningBudget {
    /// Total mining budget split evenly across N clients.
    Total(f64),
    /// Per-client mining reward bound, identical for every client.
    PerClient(f64),
}

impl MiningBudget {
    /// Per-client mining reward bound for a roster of `n` clients.
    pub fn per_client(&self, n: usize) -> f64 {
        match *self {
            MiningBudget::Total(eta_m) => eta_m / n as f64,
            MiningBudget::PerClient(bound) => bound,
        }
    }

    /// Total mining budget for a roster of `n` clients.
    pub fn total(&self, n: usize) -> f64 {
        match *self {
            MiningBudget::Total(eta_m) => eta_m,
            MiningBudget::PerClient(bound) => bound * n as f64,
        }
    }
}

/// Round-level parameters shared by every client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    /// Deadline for finishing both tasks, in minutes.
    pub horizon: f64,
    /// Mining cycles each client must contribute per round.
    pub psi: f64,
    /// Total reward budget for the round (training + mining).
    pub budget_total: f64,
    /// Mining share of the budget.
    pub mining: MiningBudget,
    /// Operator's cost weight on time and reward outlays.
    pub xi: f64,
    /// Target per-client performance the coalition is scored against.
    pub target_perf: f64,
    /// Value of collected training work.
    #[serde(default)]
    pub perf_fn: PerfFn,
}

impl SystemConfig {
    pub fn validate(&self, n_clients: usize) -> Result<()> {
        if !pos_finite(self.horizon) {
            return Err(Error::Config(format!("horizon must be positive and finite, got {}", self.horizon)));
        }
        if !pos_finite(self.psi) {
            return Err(Error::Config(format!("psi must be positive and finite, got {}", self.psi)));
        }
        if !pos_finite(self.budget_total) {
            return Err(Error::Config(format!("budget_total must be positive and finite, got {}", self.budget_total)));
        }
        if !pos_finite(self.xi) {
            return Err(Error::Config(format!("xi must be positive and finite, got {}", self.xi)));
        }
        if !self.target_perf.is_finite() {
            return Err(Error::Config(format!("target_perf must be finite, got {}", self.target_perf)));
        }
        self.perf_fn.validate()?;
        if n_clients > 0 {
            let eta_m = self.mining.total(n_clients);
            if !(eta_m > 0.0 && eta_m < self.budget_total) {
                return Err(Error::Config(format!(
                    "mining budget {} must lie strictly between 0 and the total budget {}",
                    eta_m, self.budget_total
                )));
            }
        }
        Ok(())
    }
}

/// Per-minute prices offered to one client.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PricePair {
    pub p_t: f64,
    pub p_m: f64,
}

/// CPU rates one client commits to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerPair {
    pub q_t: f64,
    pub q_m: f64,
}

/// Itemized account of one client's round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundBreakdown {
    /// Minutes spent training, mu / q_t.
    pub t_train: f64,
    /// Minutes spent mining, psi / q_m.
    pub t_mine: f64,
    /// Training payment, t_train * p_t.
    pub reward_train: f64,
    /// Mining payment, t_mine * p_m.
    pub reward_mine: f64,
    /// Training energy cost, rho * mu * q_t^2.
    pub cost_train: f64,
    /// Mining energy cost, rho * psi * q_m^2.
    pub cost_mine: f64,
}

impl RoundBreakdown {
    /// Recombines the itemized terms into the client utility.
    pub fn utility(&self) -> f64 {
        self.reward_train + self.reward_mine - self.cost_train - self.cost_mine
    }

    /// Total minutes the round takes.
    pub fn total_time(&self) -> f64 {
        self.t_train + self.t_mine
    }

    /// Whether both tasks finish within `horizon` minutes (up to REL_TOL).
    pub fn fits_in(&self, horizon: f64) -> bool {
        self.total_time() <= horizon * (1.0 + REL_TOL)
    }
}

fn check_inputs(profile: &ClientProfile, prices: PricePair, powers: PowerPair) -> Result<()> {
    if !(powers.q_t.is_finite() && powers.q_m.is_finite() && powers.q_t > 0.0 && powers.q_m > 0.0) {
        return Err(Error::NonPositivePower { id: profile.id, q_t: powers.q_t, q_m: powers.q_m });
    }
    if !(prices.p_t.is_finite() && prices.p_m.is_finite() && prices.p_t >= 0.0 && prices.p_m >= 0.0) {
        return Err(Error::InvalidPrice { id: profile.id, p_t: prices.p_t, p_m: prices.p_m });
    }
    Ok(())
}

/// Itemizes one client's round at the given prices and rates.
pub fn round_breakdown(
    profile: &ClientProfile,
    config: &SystemConfig,
    prices: PricePair,
    powers: PowerPair,
) -> Result<RoundBreakdown> {
    check_inputs(profile, prices, powers)?;
    let t_train = profile.mu / powers.q_t;
    let t_mine = config.psi / powers.q_m;
    Ok(RoundBreakdown {
        t_train,
        t_mine,
        reward_train: t_train * prices.p_t,
        reward_mine: t_mine * prices.p_m,
        cost_train: profile.rho * profile.mu * powers.q_t * powers.q_t,
        cost_mine: profile.rho * config.psi * powers.q_m * powers.q_m,
    })
}

/// Client utility for one round, with its itemized breakdown.
pub fn client_utility(
    profile: &ClientProfile,
    config: &SystemConfig,
    prices: PricePair,
    powers: PowerPair,
) -> Result<(f64, RoundBreakdown)> {
    let breakdown = round_breakdown(profile, config, prices, powers)?;
    Ok((breakdown.utility(), breakdown))
}

/// Operator utility over the whole roster at the given prices and rates.
///
/// The three slices must be parallel (one entry per client, same order).
pub fn mo_utility(
    profiles: &[ClientProfile],
    config: &SystemConfig,
    prices: &[PricePair],
    powers: &[PowerPair],
) -> Result<f64> {
    if prices.len() != profiles.len() {
        return Err(Error::LengthMismatch { expected: profiles.len(), got: prices.len() });
    }
    if powers.len() != profiles.len() {
        return Err(Error::LengthMismatch { expected: profiles.len(), got: powers.len() });
    }
    let mut total_mu = 0.0;
    let mut cost = 0.0;
    for ((profile, &price), &power) in profiles.iter().zip(prices).zip(powers) {
        let b = round_breakdown(profile, config, price, power)?;
        total_mu += profile.mu;
        cost += b.t_train + b.t_mine + b.reward_train + b.reward_mine;
    }
    Ok(config.perf_fn.eval(total_mu) - config.xi * cost)
}
