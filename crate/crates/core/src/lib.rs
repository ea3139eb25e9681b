//! Core of a real-time Vickrey-Clarke-Groves mechanism for a shared discrete
//! resource, such as the light level of an office zone.
//!
//! Everything in this crate is pure and deterministic and builds without `std`
//! (an allocator is required). IO, persistence, the HTTP service and the CLI
//! live in the companion `vcglight` crate.
//!
//! * [`mechanism`]: welfare, outcome selection, payments with the
//!   `n * lambda_max` pivot term, ballot mapping and individual-rationality
//!   diagnostics.
//! * [`engine`]: event-sourced session state machine that turns the one-shot
//!   mechanism into per-hour rates and accrues points per segment.
//! * [`rewards`]: threshold detection and points-proportional lotteries.
//! * [`simulator`]: deviation oracle, IR sweeps and agent scenarios.
//! * [`analytics`]: energy savings and correlation statistics.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod analytics;
pub mod engine;
pub mod mechanism;
pub mod rewards;
pub mod simulator;

mod user;

pub use engine::{
    ActuatorCommand, Engine, EngineConfig, EngineError, EngineState, EventKind, ReplayError,
    Segment, SessionEvent, StateDigest, Transition,
};
pub use mechanism::{
    Allocation, Ballot, MechanismConfig, MechanismError, OutcomeSetting, Profile, TieBreak,
    TypeVector,
};
pub use rewards::{PointsAccount, RewardConfig, RewardError, RewardEvent};
pub use user::UserId;

/// Milli-points per point.
pub const MILLI: u64 = 1_000;

/// Milliseconds per hour.
pub const HOUR_MS: u64 = 3_600_000;
