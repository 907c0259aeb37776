use thiserror::Error;

/// Errors shared across the solver, oracle, and experiment layers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// CPU allocations must be strictly positive and finite before any
    /// utility is evaluated; 1/q terms make zero a pole, not a boundary.
    #[error("client {id}: CPU allocation must be positive and finite, got q_t = {q_t}, q_m = {q_m}")]
    NonPositivePower { id: usize, q_t: f64, q_m: f64 },

    /// Prices themselves must be non-negative and finite.
    #[error("client {id}: prices must be non-negative and finite, got p_t = {p_t}, p_m = {p_m}")]
    InvalidPrice { id: usize, p_t: f64, p_m: f64 },

    /// The follower's response exists only for p_t > rho * (mu / T)^3;
    /// at or below that price, training alone exhausts the time budget.
    #[error("client {id}: training price {p_t} is infeasible; the minimum feasible price is rho*(mu/T)^3 = {min_p_t}")]
    InfeasiblePrice { id: usize, p_t: f64, min_p_t: f64 },

    /// A training-reward bound at or below rho * mu^3 / T^2 prices the
    /// client out of its own time budget; no leader price can satisfy it.
    #[error("client {id}: training reward bound {bound} is infeasible; the minimum workable bound is rho*mu^3/T^2 = {min_bound}")]
    InfeasibleBudget { id: usize, bound: f64, min_bound: f64 },

    /// Reward shares are SV_i / v(N); a zero grand-coalition value with
    /// unequal performances would leave them undefined.
    #[error("grand coalition value is zero with unequal performances; reward shares are undefined")]
    DegenerateCoalition,

    /// Parallel slices (profiles, prices, powers, reports) must line up.
    #[error("expected {expected} entries, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    /// Coalition membership referenced a client outside the roster, or
    /// listed one twice.
    #[error("invalid coalition member index {0}")]
    BadCoalitionMember(usize),

    /// Exact Shapley enumeration is O(2^n); above the limit the caller
    /// must switch to the sampled estimator.
    #[error("{n} clients exceeds the exact enumeration limit of {limit}; use the sampled estimator")]
    ExactLimitExceeded { n: usize, limit: usize },

    /// The screening mechanism only offers a contract when the expected
    /// utility at the reported type is non-negative.
    #[error("mechanism rejected client {id}: expected utility {utility} is negative")]
    MechanismRejects { id: usize, utility: f64 },

    /// Configuration values that violate a documented invariant.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A grid whose feasibility filter rejected every point.
    #[error("empty feasible set: {0}")]
    EmptyFeasibleSet(String),
}

pub type Result<T> = std::result::Result<T, Error>;
