//! Resolution-ratio and diffusion-step allocation for edge AIGC services.
//!
//! The crate models the per-user QoE of a generative video service, solves the
//! budget-constrained allocation with a conditional diffusion actor trained
//! against double-Q critics, and ships the reference solvers it is measured
//! against (exhaustive grid oracle, greedy, random, SAC-lite, PPO-lite).

pub mod baselines;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod rng;
pub mod scenario;
pub mod trainer;

pub use error::{Error, Result};
pub use scenario::{
    preset_scenario, sample_scenario, Decision, ModelConstants, PresetMeta, QoEReport,
    SamplerConfig, Scenario, StateEncoder, R_MIN,
};
