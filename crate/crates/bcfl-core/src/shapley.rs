//! Coalition scoring and Shapley-based reward shares.
//!
//! A coalition S of clients is scored by how close its mean performance is
//! to the target g:
//!
//! ```text
//! v(S) = W - | mean_{i in S} G_i - g |        v(empty) = 0
//! ```
//!
//! where W is the largest such deviation over all non-empty coalitions, so
//! that v is non-negative. Each client's Shapley value
//!
//! ```text
//! SV_i = sum_{S subseteq N\{i}} |S|! (N-|S|-1)! / N! * (v(S u {i}) - v(S))
//! ```
//!
//! is its average marginal contribution over all join orders, and the
//! training reward budget is split in proportion to SV_i / v(N).
//!
//! For scalar per-client performances the deviation of a mean never
//! exceeds the largest single deviation, |sum_{i in S}(G_i - g)| / |S| <=
//! max_i |G_i - g|, with equality at a singleton, so W is computed exactly
//! in O(N) as the maximum singleton deviation. A test enumerates all
//! coalitions on small rosters to pin this down.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClientProfile, SystemConfig};

/// Default roster size above which exact enumeration is refused.
pub const EXACT_ENUMERATION_LIMIT: usize = 20;

/// Scoring context: per-client performances and the shared target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoalitionValues {
    perf: Vec<f64>,
    target: f64,
    w: f64,
}

impl CoalitionValues {
    /// Builds the scoring context from explicit per-client performances.
    pub fn from_values(perf: Vec<f64>, target: f64) -> Result<Self> {
        if perf.is_empty() {
            return Err(Error::Config("coalition scoring needs at least one client".into()));
        }
        if perf.iter().any(|g| !g.is_finite()) || !target.is_finite() {
            return Err(Error::Config("performances and target must be finite".into()));
        }
        let w = perf.iter().map(|g| (g - target).abs()).fold(0.0, f64::max);
        Ok(CoalitionValues { perf, target, w })
    }

    /// Scores clients by their training contribution, G_i = f(mu_i).
    pub fn from_profiles(profiles: &[ClientProfile], config: &SystemConfig) -> Result<Self> {
        let perf = profiles.iter().map(|p| config.perf_fn.eval(p.mu)).collect();
        Self::from_values(perf, config.target_perf)
    }

    pub fn n(&self) -> usize {
        self.perf.len()
    }

    /// The normalizing constant W (largest deviation of any coalition mean).
    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn performances(&self) -> &[f64] {
        &self.perf
    }

    /// Whether every client has the same performance; in that case v is
    /// identically zero and shares degenerate to the symmetric split.
    pub fn all_equal(&self) -> bool {
        self.perf.iter().all(|g| *g == self.perf[0])
    }

    /// v(S) for an explicit member list. Members must be in-range and
    /// distinct; the empty coalition scores 0 by definition.
    pub fn coalition_value(&self, members: &[usize]) -> Result<f64> {
        if members.is_empty() {
            return Ok(0.0);
        }
        let mut seen = vec![false; self.perf.len()];
        let mut sum = 0.0;
        for &i in members {
            if i >= self.perf.len() || seen[i] {
                return Err(Error::BadCoalitionMember(i));
            }
            seen[i] = true;
            sum += self.perf[i];
        }
        Ok(self.value_of(sum, members.len()))
    }

    /// v(S) from a precomputed member sum and count; count must be >= 1.
    fn value_of(&self, sum: f64, count: usize) -> f64 {
        self.w - (sum / count as f64 - self.target).abs()
    }

    /// v(N).
    pub fn grand_value(&self) -> f64 {
        let sum: f64 = self.perf.iter().sum();
        self.value_of(sum, self.perf.len())
    }
}

/// Exact Shapley values by subset enumeration. O(N * 2^N); refuses rosters
/// larger than `limit`.
pub fn shapley_exact(values: &CoalitionValues, limit: usize) -> Result<Vec<f64>> {
    let n = values.n();
    if n > limit || n > 63 {
        return Err(Error::ExactLimitExceeded { n, limit: limit.min(63) });
    }

    // weight[s] = s! (n-s-1)! / n!, via weight[s] / weight[s-1] = s / (n-s).
    let mut weight = vec![0.0f64; n];
    weight[0] = 1.0 / n as f64;
    for s in 1..n {
        weight[s] = weight[s - 1] * s as f64 / (n - s) as f64;
    }

    // Subset sums over bitmasks: sum[m] = sum[m without lowest bit] + G[lowest].
    let full: usize = 1 << n;
    let mut sums = vec![0.0f64; full];
    for mask in 1..full {
        let low = mask.trailing_zeros() as usize;
        sums[mask] = sums[mask & (mask - 1)] + values.perf[low];
    }
    let v = |mask: usize| -> f64 {
        if mask == 0 {
            0.0
        } else {
            values.value_of(sums[mask], mask.count_ones() as usize)
        }
    };

    let sv = (0..n)
        .into_par_iter()
        .map(|i| {
            let bit = 1usize << i;
            let mut acc = 0.0;
            for mask in 0..full {
                if mask & bit == 0 {
                    acc += weight[mask.count_ones() as usize] * (v(mask | bit) - v(mask));
                }
            }
            acc
        })
        .collect();
    Ok(sv)
}

/// Shapley estimates from sampled join orders.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampledShapley {
    /// Per-client estimate of SV_i.
    pub estimates: Vec<f64>,
    /// Per-client standard error of the estimate.
    pub std_errors: Vec<f64>,
    /// Join orders drawn.
    pub samples: u64,
    /// Normalizing constant used in v; exact for scalar performances.
    pub w: f64,
}

/// Monte Carlo Shapley estimator: draws `samples` uniformly random join
/// orders and averages each client's marginal contribution.
///
/// Unbiased for `shapley_exact`. Each sample has its own seeded RNG
/// stream and chunk reductions run in index order, so the result depends
/// only on (values, samples, seed), not on thread count.
pub fn shapley_sampled(values: &CoalitionValues, samples: u64, seed: u64) -> Result<SampledShapley> {
    let n = values.n();
    if samples == 0 {
        return Err(Error::Config("sampled estimator needs at least one sample".into()));
    }

    // Marginal of the first client in an order is v({i}) = W - d_i, a
    // per-client constant, so only a count is accumulated for it.
    #[derive(Clone)]
    struct Acc {
        first_hits: Vec<u64>,
        sum: Vec<f64>,
        sum_sq: Vec<f64>,
    }
    let zero = Acc { first_hits: vec![0; n], sum: vec![0.0; n], sum_sq: vec![0.0; n] };

    const CHUNK: u64 = 4096;
    let chunks: Vec<u64> = (0..samples.div_ceil(CHUNK)).collect();
    let partials: Vec<Acc> = chunks
        .par_iter()
        .map(|&c| {
            let mut acc = zero.clone();
            let mut order: Vec<usize> = (0..n).collect();
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(samples);
            for s in lo..hi {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(s);
                order.shuffle(&mut rng);
                let mut sum = 0.0;
                let mut prev = 0.0;
                for (pos, &i) in order.iter().enumerate() {
                    sum += values.perf[i];
                    let cur = values.value_of(sum, pos + 1);
                    if pos == 0 {
                        acc.first_hits[i] += 1;
                    } else {
                        let m = cur - prev;
                        acc.sum[i] += m;
                        acc.sum_sq[i] += m * m;
                    }
                    prev = cur;
                }
            }
            acc
        })
        .collect();

    let mut total = zero;
    for p in &partials {
        for i in 0..n {
            total.first_hits[i] += p.first_hits[i];
            total.sum[i] += p.sum[i];
            total.sum_sq[i] += p.sum_sq[i];
        }
    }

    let p = samples as f64;
    let mut estimates = vec![0.0; n];
    let mut std_errors = vec![0.0; n];
    for i in 0..n {
        let first_marginal = values.w - (values.perf[i] - values.target).abs();
        let k = total.first_hits[i] as f64;
        let mean = (k * first_marginal + total.sum[i]) / p;
        let s2 = k * first_marginal * first_marginal + total.sum_sq[i];
        let var = if samples > 1 { ((s2 - p * mean * mean) / (p - 1.0)).max(0.0) } else { 0.0 };
        estimates[i] = mean;
        std_errors[i] = (var / p).sqrt();
    }
    Ok(SampledShapley { estimates, std_errors, samples, w: values.w })
}

/// Options for the reward-bound pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundsOptions {
    /// Largest roster solved by exact enumeration.
    pub exact_limit: usize,
    /// Join orders for the sampled estimator above the limit.
    pub samples: u64,
    /// Seed for the sampled estimator.
    pub seed: u64,
}

impl Default for BoundsOptions {
    fn default() -> Self {
        BoundsOptions { exact_limit: EXACT_ENUMERATION_LIMIT, samples: 100_000, seed: 0 }
    }
}

/// Per-round reward bounds offered to each client.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RewardBounds {
    /// Per-client training reward bound, SV_i / v(N) * (eta - eta_m).
    pub train: Vec<f64>,
    /// Per-client mining reward bound, eta_m / N (identical for all).
    pub mine: f64,
    /// Shapley values behind the training shares.
    pub sv: Vec<f64>,
    /// Training shares SV_i / v(N); 1/N under the symmetric split.
    pub shares: Vec<f64>,
    /// v(N).
    pub grand_value: f64,
    /// True when all performances are equal: v is identically zero and
    /// the training budget falls back to the symmetric equal split.
    pub symmetric_split: bool,
    /// True when the Shapley values are sampled estimates.
    pub sampled: bool,
    /// Standard errors of the sampled estimates, when sampled.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std_errors: Option<Vec<f64>>,
}

impl RewardBounds {
    /// Training budget eta - eta_m implied by the bounds.
    pub fn train_budget(&self) -> f64 {
        self.train.iter().sum()
    }
}

/// Splits the round budget into per-client reward bounds: the mining
/// budget evenly, the training budget in proportion to Shapley shares.
///
/// When every client has the same performance, v sends every coalition to
/// zero and all Shapley values vanish; the share SV_i / v(N) is then taken
/// in its symmetric limit 1/N and `symmetric_split` is set.
pub fn reward_bounds(
    profiles: &[ClientProfile],
    config: &SystemConfig,
    values: &CoalitionValues,
    opts: &BoundsOptions,
) -> Result<RewardBounds> {
    let n = profiles.len();
    if n == 0 {
        return Err(Error::Config("reward bounds need at least one client".into()));
    }
    if values.n() != n {
        return Err(Error::LengthMismatch { expected: n, got: values.n() });
    }
    config.validate(n)?;

    let eta = config.budget_total;
    let eta_m = config.mining.total(n);
    let train_budget = eta - eta_m;
    let mine = config.mining.per_client(n);
    let grand_value = values.grand_value();

    if values.all_equal() {
        let share = 1.0 / n as f64;
        return Ok(RewardBounds {
            train: vec![train_budget * share; n],
            mine,
            sv: vec![0.0; n],
            shares: vec![share; n],
            grand_value: 0.0,
            symmetric_split: true,
            sampled: false,
            std_errors: None,
        });
    }
    if grand_value <= 0.0 {
        return Err(Error::DegenerateCoalition);
    }

    let (sv, std_errors, sampled) = if n <= opts.exact_limit {
        (shapley_exact(values, opts.exact_limit)?, None, false)
    } else {
        let s = shapley_sampled(values, opts.samples, opts.seed)?;
        (s.estimates, Some(s.std_errors), true)
    };

    let shares: Vec<f64> = sv.iter().map(|s| s / grand_value).collect();
    let train: Vec<f64> = shares.iter().map(|s| s * train_budget).collect();
    Ok(RewardBounds {
        train,
        mine,
        sv,
        shares,
        grand_value,
        symmetric_split: false,
        sampled,
        std_errors,
    })
}
