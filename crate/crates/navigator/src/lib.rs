//! Desk-scale testbed for trajectory-level reinforcement learning over a
//! multi-turn generate/review loop.
//!
//! A navigator policy chooses stop/refine/regenerate actions against a
//! seeded simulated generator and reviewer. Whole trajectories are rewarded
//! by peak quality, final-score retention, turn efficiency, and format
//! correctness, then optimized with group-relative clipped policy gradients.
//! The crate also ships the branch-and-select data-construction pipeline,
//! an n-gram/cosine contamination audit, trajectory diagnostics, and a CLI
//! that makes every run reproducible from its manifest.

pub mod cli;
pub mod contamination;
pub mod datagen;
pub mod env;
pub mod live;
pub mod logio;
pub mod manifest;
pub mod metrics;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod trainer;
pub mod trajectory;

#[doc(hidden)]
pub mod testutil;
