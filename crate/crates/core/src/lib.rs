//! Desk-scale policy-optimization laboratory.
//!
//! The centerpiece is [`gating`], a two-scale importance-ratio gate that
//! separates trajectory-level drift (a piecewise-linear gate on sign-channel
//! aggregates) from token-level deviation (a log-space clip on the
//! mean-centered residual). Around it sit tabular softmax policies,
//! synthetic verifiable-reward tasks, PPO/GRPO/GSPO baselines, a Gaussian
//! difficulty curriculum and a deterministic training loop with telemetry.

pub mod error;
pub mod gating;
pub mod checks;
pub mod curriculum;
pub mod env;
pub mod numeric;
pub mod objectives;
pub mod policy;
pub mod telemetry;
pub mod trainer;

pub use error::{Error, Result};
pub use gating::{
    GatedTrajectory, GatingConfig, GlobalRegime, LocalRegime, RegimeTag, Sign,
    TrajectoryAggregates, Zone,
};
