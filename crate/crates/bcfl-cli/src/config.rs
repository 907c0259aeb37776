//! Run configuration: a single JSON document that pins every input of a
//! run. All defaults equal the canonical instance the library's
//! experiment drivers use; unknown keys are rejected so a config cannot
//! silently mean something else to a newer binary.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use bcfl_core::model::{ClientProfile, MiningBudget, PerfFn, SystemConfig};
use bcfl_core::stackelberg::Scenario;

use crate::CliError;

/// One client entry in a roster (ids are assigned by position).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientSpec {
    /// Training demand: CPU cycles one training round needs.
    pub mu: f64,
    /// Unit energy cost coefficient.
    pub rho: f64,
    /// Hardware CPU-rate cap (reported as a flag when exceeded).
    pub q_cap: f64,
}

/// The roster: an identical-clients shorthand, a path to an external
/// JSON array of clients, or the array inline.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RosterSpec {
    /// `{"count": 50, "mu": 10.0, "rho": 0.01, "q_cap": 100.0}`
    Identical { count: usize, mu: f64, rho: f64, q_cap: f64 },
    /// `{"path": "roster.json"}` — file holds a JSON array of clients.
    External { path: PathBuf },
    /// `[{"mu": 10.0, "rho": 0.01, "q_cap": 100.0}, ...]`
    Inline(Vec<ClientSpec>),
}

/// Everything a run depends on. Parsing is strict: every field is
/// required and unknown fields are errors, so a config file on disk is
/// a complete, lossless record of the run it produces.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Per-round time budget T (s).
    pub horizon: f64,
    /// CPU cycles to mine one block.
    pub psi: f64,
    /// Total reward budget per round.
    pub budget_total: f64,
    /// Mining budget: `{"per_client": 5.0}` or `{"total": 250.0}`.
    pub mining: MiningBudget,
    /// Operator's unit-cost weight.
    pub xi: f64,
    /// Target global performance.
    pub target_perf: f64,
    /// Performance function, e.g. `{"kind": "identity"}`.
    pub perf_fn: PerfFn,
    /// Information regime solved by default.
    pub scenario: Scenario,
    /// Seed for every randomized component.
    pub seed: u64,
    /// Grid points per axis for oracle searches.
    pub grid_points: usize,
    /// Client roster.
    pub clients: RosterSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            horizon: 15.0,
            psi: 5.0,
            budget_total: 1500.0,
            mining: MiningBudget::PerClient(5.0),
            xi: 0.1,
            target_perf: 10.0,
            perf_fn: PerfFn::Identity,
            scenario: Scenario::Complete,
            seed: 0,
            grid_points: 500,
            clients: RosterSpec::Identical { count: 50, mu: 10.0, rho: 0.01, q_cap: 100.0 },
        }
    }
}

impl RunConfig {
    /// Loads and strictly validates a config file.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io { path: path.to_path_buf(), source: e })?;
        serde_json::from_str(&text).map_err(|e| {
            CliError::Usage(format!("config {}: {e}", path.display()))
        })
    }

    pub fn system(&self) -> SystemConfig {
        SystemConfig {
            horizon: self.horizon,
            psi: self.psi,
            budget_total: self.budget_total,
            mining: self.mining,
            xi: self.xi,
            target_perf: self.target_perf,
            perf_fn: self.perf_fn,
        }
    }

    /// Materializes the roster. `base` is the directory external roster
    /// paths are resolved against (the config file's directory).
    pub fn roster(&self, base: &Path) -> Result<Vec<ClientProfile>, CliError> {
        let specs: Vec<ClientSpec> = match &self.clients {
            RosterSpec::Identical { count, mu, rho, q_cap } => {
                if *count == 0 {
                    return Err(CliError::Usage("roster count must be positive".into()));
                }
                vec![ClientSpec { mu: *mu, rho: *rho, q_cap: *q_cap }; *count]
            }
            RosterSpec::Inline(list) => list.clone(),
            RosterSpec::External { path } => {
                let full = if path.is_absolute() { path.clone() } else { base.join(path) };
                let text = std::fs::read_to_string(&full)
                    .map_err(|e| CliError::Io { path: full.clone(), source: e })?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Usage(format!("roster {}: {e}", full.display())))?
            }
        };
        specs
            .iter()
            .enumerate()
            .map(|(i, s)| ClientProfile::new(i, s.mu, s.rho, s.q_cap).map_err(CliError::Core))
            .collect()
    }

    /// Canonical JSON bytes (stable field order) used for hashing and
    /// for the effective-config file written into every run directory.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

/// Content-addressed run id: a prefix of the digest over the command
/// tag, the effective config, and the command's own arguments. Reruns
/// of an identical request map to the identical directory.
pub fn run_id(tag: &str, config: &RunConfig, args: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(tag.as_bytes());
    hasher.update(b"\n");
    hasher.update(config.canonical_json().as_bytes());
    hasher.update(b"\n");
    hasher.update(args.as_bytes());
    let digest = hasher.finalize();
    let mut id = String::with_capacity(12);
    for byte in digest.iter().take(6) {
        id.push_str(&format!("{byte:02x}"));
    }
    id
}
