//! The user guide, compiled. Each module below embeds one chapter of the
//! mdBook under `book/` (`mdbook build book` renders it standalone), so
//! every code block in the book runs as a documentation test and the
//! prose can never drift from the library it documents.
//!
//! ---
#![doc = include_str!("../../../book/src/introduction.md")]

#[doc = include_str!("../../../book/src/model.md")]
pub mod round_model {}

#[doc = include_str!("../../../book/src/rewards.md")]
pub mod scoring_and_reward_bounds {}

#[doc = include_str!("../../../book/src/pricing.md")]
pub mod prices_and_responses {}

#[doc = include_str!("../../../book/src/verification.md")]
pub mod independent_verification {}

#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments_and_reproduction {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod command_line {}
