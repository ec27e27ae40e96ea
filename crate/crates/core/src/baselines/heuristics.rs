use rand::Rng;

use crate::error::Result;
use crate::scenario::{Decision, Scenario, R_MIN};

/// Everyone at full resolution and the maximum step, then projected.
pub fn greedy_allocate(scenario: &Scenario) -> Result<Decision> {
    let n = scenario.num_users;
    scenario.project_feasible(&Decision {
        resolution_ratio: vec![1.0; n],
        diffusion_step: vec![scenario.max_diffusion_step; n],
    })
}

/// Uniform ratios in `[R_MIN, 1]` and uniform integer steps, then projected.
pub fn random_policy<R: Rng + ?Sized>(scenario: &Scenario, rng: &mut R) -> Result<Decision> {
    let n = scenario.num_users;
    let resolution_ratio = (0..n)
        .map(|_| R_MIN + (1.0 - R_MIN) * rng.random::<f64>())
        .collect();
    let diffusion_step = (0..n)
        .map(|_| rng.random_range(1..=scenario.max_diffusion_step))
        .collect();
    scenario.project_feasible(&Decision {
        resolution_ratio,
        diffusion_step,
    })
}
