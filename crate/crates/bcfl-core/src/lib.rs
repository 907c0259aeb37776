//! Stackelberg pricing and Shapley reward bounds for joint training/mining
//! resource allocation in blockchain-based federated learning.
//!
//! Each round, a model owner posts unit prices for training and for mining
//! (block consensus), and clients split a fixed time budget between the two
//! jobs by choosing CPU rates. The crate provides:
//!
//! - the round economics: client and operator utilities ([`model`]);
//! - Shapley-value reward bounds that split the round budget by measured
//!   contribution ([`shapley`]);
//! - closed-form follower responses and leader prices under complete and
//!   incomplete information, plus the end-to-end mechanism ([`stackelberg`]);
//! - independent brute-force and first-order-condition checkers used to
//!   validate the closed forms ([`oracle`]);
//! - deterministic experiment drivers that write CSV artifacts
//!   ([`experiments`]).

pub mod error;
pub mod experiments;
pub mod model;
pub mod oracle;
pub mod shapley;
pub mod stackelberg;

pub use error::{Error, Result};
