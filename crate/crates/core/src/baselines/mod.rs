//! Reference solvers: exhaustive oracle, simple heuristics and two
//! conventional actor-critic learners sharing the network stack.

mod heuristics;
mod oracle;
mod ppo;
mod sac;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use heuristics::{greedy_allocate, random_policy};
pub use oracle::{
    default_r_levels, oracle_best, oracle_grid_dp, oracle_grid_search, OracleResult,
    ORACLE_GRID_BOUND, TIE_TOL,
};
pub use ppo::{
    clip_ratio, clipped_surrogate, ppo_policy_loss, train_ppo_lite, train_ppo_lite_with_progress,
    PpoOutcome, PpoPolicy,
};
pub use sac::{
    sac_policy_loss, train_sac_lite, train_sac_lite_with_progress, SacOutcome, SacPolicy,
};

use crate::diffusion::decode_decision;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scenario::{Decision, Scenario, StateEncoder};
use crate::trainer::{Policy, PolicyEvaluation};

/// Every solver addressable by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Codi,
    Sac,
    Ppo,
    Greedy,
    Random,
    Oracle,
}

impl SolverKind {
    pub const ALL: [SolverKind; 6] = [
        SolverKind::Codi,
        SolverKind::Sac,
        SolverKind::Ppo,
        SolverKind::Greedy,
        SolverKind::Random,
        SolverKind::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Codi => "codi",
            SolverKind::Sac => "sac",
            SolverKind::Ppo => "ppo",
            SolverKind::Greedy => "greedy",
            SolverKind::Random => "random",
            SolverKind::Oracle => "oracle",
        }
    }

    /// Whether the solver has a training phase.
    pub fn is_learned(self) -> bool {
        matches!(self, SolverKind::Codi | SolverKind::Sac | SolverKind::Ppo)
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SolverKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = SolverKind::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!(
                    "unknown solver `{s}` (expected one of {})",
                    names.join(", ")
                ))
            })
    }
}

/// A non-diffusion solver ready to make decisions.
#[derive(Debug, Clone, PartialEq)]
pub enum BaselinePolicy {
    Random,
    Greedy,
    Sac(SacPolicy),
    Ppo(PpoPolicy),
}

impl BaselinePolicy {
    pub fn kind(&self) -> SolverKind {
        match self {
            BaselinePolicy::Random => SolverKind::Random,
            BaselinePolicy::Greedy => SolverKind::Greedy,
            BaselinePolicy::Sac(_) => SolverKind::Sac,
            BaselinePolicy::Ppo(_) => SolverKind::Ppo,
        }
    }

    /// A feasible decision for `scenario`. Only the random policy draws from `rng`.
    pub fn decide<R: Rng + ?Sized>(
        &self,
        scenario: &Scenario,
        encoder: &StateEncoder,
        rng: &mut R,
    ) -> Result<Decision> {
        let learned = |p: &dyn Policy| -> Result<Decision> {
            let raw = p.act(&Tensor::row_vector(encoder.encode(scenario)))?;
            scenario.project_feasible(&decode_decision(raw.data(), scenario)?)
        };
        match self {
            BaselinePolicy::Random => random_policy(scenario, rng),
            BaselinePolicy::Greedy => greedy_allocate(scenario),
            BaselinePolicy::Sac(p) => learned(p),
            BaselinePolicy::Ppo(p) => learned(p),
        }
    }
}

/// Mean reward and reports of a baseline over `scenarios`, in order.
pub fn evaluate_baseline<R: Rng + ?Sized>(
    policy: &BaselinePolicy,
    scenarios: &[Scenario],
    encoder: &StateEncoder,
    rng: &mut R,
) -> Result<PolicyEvaluation> {
    let reports = scenarios
        .iter()
        .map(|s| s.evaluate(&policy.decide(s, encoder, rng)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(PolicyEvaluation::from_reports(reports))
}

/// The oracle's best decision on every scenario, via [`oracle_best`].
pub fn evaluate_oracle(scenarios: &[Scenario]) -> Result<PolicyEvaluation> {
    let reports = scenarios
        .iter()
        .map(|s| s.evaluate(&oracle_best(s)?.decision))
        .collect::<Result<Vec<_>>>()?;
    Ok(PolicyEvaluation::from_reports(reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_roundtrip() {
        for k in SolverKind::ALL {
            assert_eq!(k.name().parse::<SolverKind>().unwrap(), k);
        }
        let err = "dqn".parse::<SolverKind>().unwrap_err();
        assert!(err.to_string().contains("dqn"));
    }
}
