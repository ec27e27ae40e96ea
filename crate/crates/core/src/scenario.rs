//! Allocation problem instances, the QoE model, constraint handling and the
//! state encoding shared by every solver.
//!
//! A user's QoE is a weighted sum of a normalized bitrate term (linear in the
//! resolution ratio) and a similarity term (affine in the service-side
//! diffusion step). Bandwidth and computation budgets are hard constraints that
//! [`Scenario::project_feasible`] can enforce; per-user QoE thresholds are soft
//! and only enter the reward through the penalty.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound on every resolution ratio.
pub const R_MIN: f64 = 0.1;

/// Relative slack applied to budget comparisons so that exact-budget
/// allocations survive floating-point rounding.
pub const FEASIBILITY_TOL: f64 = 1e-9;

/// Absolute slack for QoE threshold comparisons.
pub const THRESHOLD_TOL: f64 = 1e-12;

/// Version of the [`StateEncoder`] layout `[B/B_norm, C/C_norm, θ_1..θ_N]`.
pub const STATE_LAYOUT_VERSION: u32 = 1;

/// Descriptive latency/reliability targets attached to a preset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresetMeta {
    pub latency_budget_ms: f64,
    pub reliability_target: f64,
}

/// QoE model constants shared by all scenarios of a family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConstants {
    pub weight_bitrate: f64,
    pub weight_similarity: f64,
    /// Mbit/s delivered at resolution ratio 1.
    pub max_bitrate: f64,
    /// Mbit/s at which the bitrate term saturates.
    pub ref_bitrate: f64,
    pub similarity_floor: f64,
    pub similarity_ceiling: f64,
    pub max_diffusion_step: u32,
    /// Compute units consumed per diffusion step.
    pub step_compute_cost: f64,
    pub penalty_coeff: f64,
}

impl Default for ModelConstants {
    fn default() -> Self {
        Self {
            weight_bitrate: 0.5,
            weight_similarity: 0.5,
            max_bitrate: 10.0,
            ref_bitrate: 10.0,
            similarity_floor: 0.2,
            similarity_ceiling: 1.0,
            max_diffusion_step: 10,
            step_compute_cost: 1.0,
            penalty_coeff: 10.0,
        }
    }
}

impl ModelConstants {
    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: &str| Err(Error::Config(msg.to_string()));
        let in_unit = |x: f64| (0.0..=1.0).contains(&x);
        if !in_unit(self.weight_bitrate) || !in_unit(self.weight_similarity) {
            return cfg("QoE weights must lie in [0, 1]");
        }
        if (self.weight_bitrate + self.weight_similarity - 1.0).abs() > 1e-9 {
            return cfg("weight_bitrate + weight_similarity must equal 1");
        }
        if !(self.max_bitrate > 0.0 && self.max_bitrate.is_finite()) {
            return cfg("max_bitrate must be positive");
        }
        if !(self.ref_bitrate > 0.0 && self.ref_bitrate.is_finite()) {
            return cfg("ref_bitrate must be positive");
        }
        if !(0.0..1.0).contains(&self.similarity_floor) {
            return cfg("similarity_floor must lie in [0, 1)");
        }
        if !(self.similarity_ceiling > self.similarity_floor && self.similarity_ceiling <= 1.0) {
            return cfg("similarity_ceiling must lie in (similarity_floor, 1]");
        }
        if self.max_diffusion_step == 0 {
            return cfg("max_diffusion_step must be positive");
        }
        if !(self.step_compute_cost > 0.0 && self.step_compute_cost.is_finite()) {
            return cfg("step_compute_cost must be positive");
        }
        if !(self.penalty_coeff >= 0.0 && self.penalty_coeff.is_finite()) {
            return cfg("penalty_coeff must be non-negative");
        }
        Ok(())
    }
}

/// One allocation problem instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub num_users: usize,
    /// Mbit/s shared by all users.
    pub bandwidth_budget: f64,
    /// Compute units per decision round.
    pub compute_budget: f64,
    pub qoe_threshold: Vec<f64>,
    pub weight_bitrate: f64,
    pub weight_similarity: f64,
    pub max_bitrate: f64,
    pub ref_bitrate: f64,
    pub similarity_floor: f64,
    pub similarity_ceiling: f64,
    pub max_diffusion_step: u32,
    pub step_compute_cost: f64,
    pub penalty_coeff: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset_meta: Option<PresetMeta>,
}

/// Per-user resolution ratios and diffusion steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub resolution_ratio: Vec<f64>,
    pub diffusion_step: Vec<u32>,
}

impl Decision {
    pub fn num_users(&self) -> usize {
        self.resolution_ratio.len()
    }
}

/// Everything [`Scenario::evaluate`] computes for a decision.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QoEReport {
    pub per_user_bitrate: Vec<f64>,
    pub per_user_similarity: Vec<f64>,
    pub per_user_qoe: Vec<f64>,
    pub threshold_met: Vec<bool>,
    pub bandwidth_used: f64,
    pub bandwidth_feasible: bool,
    pub compute_used: f64,
    pub compute_feasible: bool,
    pub total_qoe: f64,
    pub penalty: f64,
    pub reward: f64,
}

impl QoEReport {
    pub fn resource_feasible(&self) -> bool {
        self.bandwidth_feasible && self.compute_feasible
    }

    pub fn all_constraints_met(&self) -> bool {
        self.resource_feasible() && self.threshold_met.iter().all(|&m| m)
    }
}

fn within_budget(used: f64, budget: f64) -> bool {
    used <= budget * (1.0 + FEASIBILITY_TOL)
}

impl Scenario {
    /// Builds a scenario from a constant set and the per-instance quantities.
    pub fn new(
        bandwidth_budget: f64,
        compute_budget: f64,
        qoe_threshold: Vec<f64>,
        model: &ModelConstants,
    ) -> Result<Self> {
        let s = Self {
            num_users: qoe_threshold.len(),
            bandwidth_budget,
            compute_budget,
            qoe_threshold,
            weight_bitrate: model.weight_bitrate,
            weight_similarity: model.weight_similarity,
            max_bitrate: model.max_bitrate,
            ref_bitrate: model.ref_bitrate,
            similarity_floor: model.similarity_floor,
            similarity_ceiling: model.similarity_ceiling,
            max_diffusion_step: model.max_diffusion_step,
            step_compute_cost: model.step_compute_cost,
            penalty_coeff: model.penalty_coeff,
            preset_meta: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn model_constants(&self) -> ModelConstants {
        ModelConstants {
            weight_bitrate: self.weight_bitrate,
            weight_similarity: self.weight_similarity,
            max_bitrate: self.max_bitrate,
            ref_bitrate: self.ref_bitrate,
            similarity_floor: self.similarity_floor,
            similarity_ceiling: self.similarity_ceiling,
            max_diffusion_step: self.max_diffusion_step,
            step_compute_cost: self.step_compute_cost,
            penalty_coeff: self.penalty_coeff,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_users == 0 {
            return Err(Error::Config("num_users must be positive".into()));
        }
        if self.qoe_threshold.len() != self.num_users {
            return Err(Error::Config(format!(
                "qoe_threshold has {} entries for {} users",
                self.qoe_threshold.len(),
                self.num_users
            )));
        }
        if self.qoe_threshold.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config(
                "qoe_threshold entries must lie in [0, 1]".into(),
            ));
        }
        if !(self.bandwidth_budget > 0.0 && self.bandwidth_budget.is_finite()) {
            return Err(Error::Config("bandwidth_budget must be positive".into()));
        }
        if !(self.compute_budget > 0.0 && self.compute_budget.is_finite()) {
            return Err(Error::Config("compute_budget must be positive".into()));
        }
        self.model_constants().validate()
    }

    /// Delivered bitrate (Mbit/s) at resolution ratio `r`.
    pub fn bitrate(&self, r: f64) -> Result<f64> {
        if !(R_MIN - 1e-12..=1.0 + 1e-12).contains(&r) {
            return Err(Error::Domain(format!(
                "resolution ratio {r} outside [{R_MIN}, 1]"
            )));
        }
        Ok(self.max_bitrate * r)
    }

    /// Similarity of the reconstructed stream after `d` service diffusion steps.
    pub fn similarity(&self, d: u32) -> Result<f64> {
        if d == 0 || d > self.max_diffusion_step {
            return Err(Error::Domain(format!(
                "diffusion step {d} outside [1, {}]",
                self.max_diffusion_step
            )));
        }
        let frac = d as f64 / self.max_diffusion_step as f64;
        Ok(self.similarity_floor + (self.similarity_ceiling - self.similarity_floor) * frac)
    }

    pub fn user_qoe(&self, r: f64, d: u32) -> Result<f64> {
        let rate_term = (self.bitrate(r)? / self.ref_bitrate).min(1.0);
        Ok(self.weight_bitrate * rate_term + self.weight_similarity * self.similarity(d)?)
    }

    fn check_dims(&self, decision: &Decision) -> Result<()> {
        if decision.resolution_ratio.len() != self.num_users
            || decision.diffusion_step.len() != self.num_users
        {
            return Err(Error::Contract(format!(
                "decision has {}/{} entries for {} users",
                decision.resolution_ratio.len(),
                decision.diffusion_step.len(),
                self.num_users
            )));
        }
        Ok(())
    }

    /// Evaluates a decision: per-user quantities, resource usage, penalty and reward.
    pub fn evaluate(&self, decision: &Decision) -> Result<QoEReport> {
        self.check_dims(decision)?;
        let n = self.num_users;
        let mut per_user_bitrate = Vec::with_capacity(n);
        let mut per_user_similarity = Vec::with_capacity(n);
        let mut per_user_qoe = Vec::with_capacity(n);
        let mut threshold_met = Vec::with_capacity(n);
        let mut shortfall = 0.0;
        for i in 0..n {
            let r = decision.resolution_ratio[i];
            let d = decision.diffusion_step[i];
            let b = self.bitrate(r)?;
            let s = self.similarity(d)?;
            let q =
                self.weight_bitrate * (b / self.ref_bitrate).min(1.0) + self.weight_similarity * s;
            let theta = self.qoe_threshold[i];
            let met = q + THRESHOLD_TOL >= theta;
            if !met {
                shortfall += theta - q;
            }
            per_user_bitrate.push(b);
            per_user_similarity.push(s);
            per_user_qoe.push(q);
            threshold_met.push(met);
        }
        let bandwidth_used: f64 = per_user_bitrate.iter().sum();
        let compute_used: f64 = decision
            .diffusion_step
            .iter()
            .map(|&d| self.step_compute_cost * d as f64)
            .sum();
        let bandwidth_feasible = within_budget(bandwidth_used, self.bandwidth_budget);
        let compute_feasible = within_budget(compute_used, self.compute_budget);
        let mut violation = shortfall;
        if !bandwidth_feasible {
            violation += (bandwidth_used - self.bandwidth_budget) / self.bandwidth_budget;
        }
        if !compute_feasible {
            violation += (compute_used - self.compute_budget) / self.compute_budget;
        }
        let penalty = self.penalty_coeff * violation;
        let total_qoe: f64 = per_user_qoe.iter().sum();
        Ok(QoEReport {
            per_user_bitrate,
            per_user_similarity,
            per_user_qoe,
            threshold_met,
            bandwidth_used,
            bandwidth_feasible,
            compute_used,
            compute_feasible,
            total_qoe,
            penalty,
            reward: total_qoe - penalty,
        })
    }

    /// Repairs a decision so both resource budgets hold.
    ///
    /// Bandwidth: all ratios are scaled by `B_total / used` and clamped to
    /// `[R_MIN, 1]`; if clamping at `R_MIN` leaves an overshoot, the scaling is
    /// repeated over the unclamped users with the clamped demand removed.
    /// Compute: one diffusion step at a time is removed from the user holding
    /// the most steps (ties go to the highest index). Thresholds are untouched.
    pub fn project_feasible(&self, decision: &Decision) -> Result<Decision> {
        self.check_dims(decision)?;
        let n = self.num_users;
        for (&r, &d) in decision
            .resolution_ratio
            .iter()
            .zip(&decision.diffusion_step)
        {
            self.bitrate(r)?;
            self.similarity(d)?;
        }
        let min_bw = n as f64 * R_MIN * self.max_bitrate;
        if !within_budget(min_bw, self.bandwidth_budget) {
            return Err(Error::Infeasible {
                budget: "bandwidth",
                required: min_bw,
                available: self.bandwidth_budget,
            });
        }
        let min_compute = n as f64 * self.step_compute_cost;
        if !within_budget(min_compute, self.compute_budget) {
            return Err(Error::Infeasible {
                budget: "compute",
                required: min_compute,
                available: self.compute_budget,
            });
        }

        let mut r = decision.resolution_ratio.clone();
        let used = |r: &[f64]| r.iter().map(|x| x * self.max_bitrate).sum::<f64>();
        let total = used(&r);
        if !within_budget(total, self.bandwidth_budget) {
            let factor = self.bandwidth_budget / total;
            for x in r.iter_mut() {
                *x = (*x * factor).clamp(R_MIN, 1.0);
            }
            // Each pass pins at least one more user at R_MIN or lands on the budget.
            for _ in 0..=n {
                if within_budget(used(&r), self.bandwidth_budget) {
                    break;
                }
                let pinned = r.iter().filter(|&&x| x <= R_MIN).count();
                let free_demand: f64 = r
                    .iter()
                    .filter(|&&x| x > R_MIN)
                    .map(|x| x * self.max_bitrate)
                    .sum();
                let free_budget = self.bandwidth_budget - pinned as f64 * R_MIN * self.max_bitrate;
                let factor = free_budget / free_demand;
                for x in r.iter_mut().filter(|x| **x > R_MIN) {
                    *x = (*x * factor).clamp(R_MIN, 1.0);
                }
            }
        }

        let mut d = decision.diffusion_step.clone();
        let compute = |d: &[u32]| {
            d.iter()
                .map(|&x| self.step_compute_cost * x as f64)
                .sum::<f64>()
        };
        while !within_budget(compute(&d), self.compute_budget) {
            let (idx, _) = d
                .iter()
                .enumerate()
                .filter(|(_, &x)| x > 1)
                .max_by_key(|&(i, &x)| (x, i))
                .expect("minimum demand was checked feasible");
            d[idx] -= 1;
        }

        Ok(Decision {
            resolution_ratio: r,
            diffusion_step: d,
        })
    }
}

/// Named scenario presets.
pub fn preset_scenario(name: &str) -> Result<Scenario> {
    let model = ModelConstants::default();
    let (threshold, meta) = match name {
        "default" => (0.5, None),
        "surgery" => (
            0.7,
            Some(PresetMeta {
                latency_budget_ms: 1.0,
                reliability_target: 0.999_999_99,
            }),
        ),
        "outpatient" => (
            0.6,
            Some(PresetMeta {
                latency_budget_ms: 2.0,
                reliability_target: 0.999_99,
            }),
        ),
        other => {
            return Err(Error::Config(format!(
                "unknown preset `{other}` (expected default, surgery or outpatient)"
            )))
        }
    };
    let mut s = Scenario::new(40.0, 40.0, vec![threshold; 4], &model)?;
    s.preset_meta = meta;
    Ok(s)
}

/// Uniform sampling ranges for a scenario family.
///
/// Budget ranges are given per user; the drawn totals are `num_users` times a
/// uniform draw from the per-user range, so one configuration describes a
/// family for every user count.
/// Missing fields in a config table fall back to the default 3-user family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub num_users: usize,
    /// Per-user bandwidth range (Mbit/s).
    pub bandwidth_per_user: [f64; 2],
    /// Per-user compute range (compute units).
    pub compute_per_user: [f64; 2],
    /// Range each user's QoE threshold is drawn from.
    pub qoe_threshold: [f64; 2],
    pub model: ModelConstants,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self::family(3)
    }
}

impl SamplerConfig {
    /// The default scenario family for `num_users` users.
    pub fn family(num_users: usize) -> Self {
        Self {
            num_users,
            bandwidth_per_user: [2.5, 8.0],
            compute_per_user: [3.0, 8.0],
            qoe_threshold: [0.3, 0.7],
            model: ModelConstants::default(),
        }
    }

    /// A family whose every draw equals `scenario` (uniform thresholds only).
    pub fn fixed(scenario: &Scenario) -> Result<Self> {
        let theta = scenario.qoe_threshold[0];
        if scenario.qoe_threshold.iter().any(|&t| t != theta) {
            return Err(Error::Config(
                "a fixed sampler needs identical thresholds for all users".into(),
            ));
        }
        let n = scenario.num_users as f64;
        Ok(Self {
            num_users: scenario.num_users,
            bandwidth_per_user: [scenario.bandwidth_budget / n; 2],
            compute_per_user: [scenario.compute_budget / n; 2],
            qoe_threshold: [theta; 2],
            model: scenario.model_constants(),
        })
    }

    pub fn with_users(&self, num_users: usize) -> Self {
        Self {
            num_users,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_users == 0 {
            return Err(Error::Config("sampler num_users must be positive".into()));
        }
        let check = |name: &str, [lo, hi]: [f64; 2], positive: bool| {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(Error::Config(format!(
                    "{name} range [{lo}, {hi}] is empty or inverted"
                )));
            }
            if positive && lo <= 0.0 {
                return Err(Error::Config(format!("{name} range must be positive")));
            }
            Ok(())
        };
        check("bandwidth_per_user", self.bandwidth_per_user, true)?;
        check("compute_per_user", self.compute_per_user, true)?;
        check("qoe_threshold", self.qoe_threshold, false)?;
        if self.qoe_threshold[0] < 0.0 || self.qoe_threshold[1] > 1.0 {
            return Err(Error::Config(
                "qoe_threshold range must lie in [0, 1]".into(),
            ));
        }
        self.model.validate()
    }

    /// Normalizers taken from the upper bounds of the budget ranges.
    pub fn encoder(&self) -> StateEncoder {
        let n = self.num_users as f64;
        StateEncoder {
            num_users: self.num_users,
            bandwidth_norm: n * self.bandwidth_per_user[1],
            compute_norm: n * self.compute_per_user[1],
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        lo + (hi - lo) * rng.random::<f64>()
    }
}

/// Draws a scenario: bandwidth, then compute, then each threshold in user order.
pub fn sample_scenario<R: Rng + ?Sized>(rng: &mut R, config: &SamplerConfig) -> Result<Scenario> {
    config.validate()?;
    let n = config.num_users as f64;
    let bandwidth = n * uniform(rng, config.bandwidth_per_user);
    let compute = n * uniform(rng, config.compute_per_user);
    let thresholds = (0..config.num_users)
        .map(|_| uniform(rng, config.qoe_threshold))
        .collect();
    Scenario::new(bandwidth, compute, thresholds, &config.model)
}

/// Fixed-layout state vector `[B_total/B_norm, C_total/C_norm, θ_1, …, θ_N]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateEncoder {
    pub num_users: usize,
    pub bandwidth_norm: f64,
    pub compute_norm: f64,
}

impl StateEncoder {
    pub fn dim(&self) -> usize {
        2 + self.num_users
    }

    pub fn encode(&self, scenario: &Scenario) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 + scenario.num_users);
        v.push(scenario.bandwidth_budget / self.bandwidth_norm);
        v.push(scenario.compute_budget / self.compute_norm);
        v.extend_from_slice(&scenario.qoe_threshold);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12
    }

    fn scenario(n: usize, bw: f64, compute: f64) -> Scenario {
        Scenario::new(bw, compute, vec![0.5; n], &ModelConstants::default()).unwrap()
    }

    #[test]
    fn bitrate_is_linear() {
        let mut s = scenario(1, 100.0, 100.0);
        s.max_bitrate = 25.0;
        assert!(close(s.bitrate(1.0).unwrap(), 25.0));
        assert!(close(s.bitrate(0.5).unwrap(), 12.5));
        s.max_bitrate = 10.0;
        assert!(close(s.bitrate(0.1).unwrap(), 1.0));
        assert!(matches!(s.bitrate(0.05), Err(Error::Domain(_))));
        assert!(matches!(s.bitrate(1.2), Err(Error::Domain(_))));
    }

    #[test]
    fn similarity_interpolates() {
        let mut s = scenario(1, 100.0, 100.0);
        assert!(close(s.similarity(10).unwrap(), 1.0));
        assert!(close(s.similarity(5).unwrap(), 0.6));
        assert!(matches!(s.similarity(0), Err(Error::Domain(_))));
        assert!(matches!(s.similarity(11), Err(Error::Domain(_))));
        s.max_diffusion_step = 1;
        s.similarity_floor = 0.37;
        s.similarity_ceiling = 0.81;
        assert!(close(s.similarity(1).unwrap(), 0.81));
    }

    #[test]
    fn user_qoe_examples() {
        let mut s = scenario(1, 100.0, 100.0);
        assert!(close(s.user_qoe(1.0, 10).unwrap(), 1.0));
        assert!(close(s.user_qoe(0.5, 5).unwrap(), 0.55));
        s.weight_bitrate = 1.0;
        s.weight_similarity = 0.0;
        assert!(close(s.user_qoe(0.3, 4).unwrap(), 0.3));
    }

    #[test]
    fn evaluate_feasible_maximum() {
        let s = scenario(1, 1e6, 1e6);
        let rep = s
            .evaluate(&Decision {
                resolution_ratio: vec![1.0],
                diffusion_step: vec![10],
            })
            .unwrap();
        assert!(close(rep.total_qoe, 1.0));
        assert_eq!(rep.penalty, 0.0);
        assert!(close(rep.reward, 1.0));
        assert!(rep.all_constraints_met());
    }

    #[test]
    fn evaluate_penalizes_double_bandwidth() {
        // 2 users at r=1 use 20 Mbit/s against a 10 Mbit/s budget.
        let s = scenario(2, 10.0, 1e6);
        let rep = s
            .evaluate(&Decision {
                resolution_ratio: vec![1.0, 1.0],
                diffusion_step: vec![10, 10],
            })
            .unwrap();
        assert!(!rep.bandwidth_feasible);
        assert!(rep.penalty >= 10.0 - 1e-12);
        assert!(rep.reward < rep.total_qoe);
    }

    #[test]
    fn evaluate_rejects_dimension_mismatch() {
        let s = scenario(2, 10.0, 10.0);
        let bad = Decision {
            resolution_ratio: vec![1.0],
            diffusion_step: vec![1, 1],
        };
        assert!(matches!(s.evaluate(&bad), Err(Error::Contract(_))));
    }

    #[test]
    fn threshold_shortfall_is_penalized() {
        let s = Scenario::new(100.0, 100.0, vec![0.9], &ModelConstants::default()).unwrap();
        let rep = s
            .evaluate(&Decision {
                resolution_ratio: vec![0.5],
                diffusion_step: vec![5],
            })
            .unwrap();
        assert!(!rep.threshold_met[0]);
        assert!(close(rep.penalty, 10.0 * (0.9 - 0.55)));
    }

    #[test]
    fn projection_examples() {
        let s = scenario(2, 10.0, 1e6);
        let out = s
            .project_feasible(&Decision {
                resolution_ratio: vec![1.0, 1.0],
                diffusion_step: vec![10, 10],
            })
            .unwrap();
        assert!(close(out.resolution_ratio[0], 0.5));
        assert!(close(out.resolution_ratio[1], 0.5));

        let s = scenario(2, 1e6, 19.0);
        let out = s
            .project_feasible(&Decision {
                resolution_ratio: vec![1.0, 1.0],
                diffusion_step: vec![10, 10],
            })
            .unwrap();
        assert_eq!(out.diffusion_step, vec![10, 9]);

        let feasible = Decision {
            resolution_ratio: vec![0.3, 0.4],
            diffusion_step: vec![3, 4],
        };
        assert_eq!(s.project_feasible(&feasible).unwrap(), feasible);
    }

    #[test]
    fn projection_repins_after_clamping() {
        // Uniform scaling would push user 2 below R_MIN; the repair pass must
        // take the clamped demand out of user 1's share.
        let s = scenario(2, 5.0, 1e6);
        let out = s
            .project_feasible(&Decision {
                resolution_ratio: vec![1.0, 0.1],
                diffusion_step: vec![1, 1],
            })
            .unwrap();
        assert_eq!(out.resolution_ratio[1], R_MIN);
        assert!(close(out.resolution_ratio[0], 0.4));
        assert!(s.evaluate(&out).unwrap().bandwidth_feasible);
    }

    #[test]
    fn projection_reports_violated_budget() {
        let s = scenario(3, 2.0, 100.0);
        let d = Decision {
            resolution_ratio: vec![1.0; 3],
            diffusion_step: vec![1; 3],
        };
        match s.project_feasible(&d) {
            Err(Error::Infeasible { budget, .. }) => assert_eq!(budget, "bandwidth"),
            other => panic!("unexpected {other:?}"),
        }
        let s = scenario(3, 100.0, 2.0);
        match s.project_feasible(&d) {
            Err(Error::Infeasible { budget, .. }) => assert_eq!(budget, "compute"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn encode_state_layout() {
        let cfg = SamplerConfig {
            num_users: 1,
            bandwidth_per_user: [5.0, 20.0],
            compute_per_user: [5.0, 30.0],
            qoe_threshold: [0.5, 0.5],
            model: ModelConstants::default(),
        };
        let enc = cfg.encoder();
        let s = Scenario::new(20.0, 30.0, vec![0.5], &cfg.model).unwrap();
        assert_eq!(enc.encode(&s), vec![1.0, 1.0, 0.5]);
        let z = Scenario::new(10.0, 15.0, vec![0.0], &cfg.model).unwrap();
        assert_eq!(enc.encode(&z), vec![0.5, 0.5, 0.0]);
        assert_eq!(enc.encode(&s.clone()), enc.encode(&s));
    }

    #[test]
    fn sampler_degenerate_and_seeded() {
        let base = preset_scenario("default").unwrap();
        let cfg = SamplerConfig::fixed(&base).unwrap();
        let mut rng = crate::rng::substream(3, 0);
        let drawn = sample_scenario(&mut rng, &cfg).unwrap();
        assert_eq!(drawn, base);

        let fam = SamplerConfig::family(3);
        let a = sample_scenario(&mut crate::rng::substream(11, 2), &fam).unwrap();
        let b = sample_scenario(&mut crate::rng::substream(11, 2), &fam).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampler_rejects_inverted_ranges() {
        let mut cfg = SamplerConfig::family(2);
        cfg.compute_per_user = [5.0, 1.0];
        let mut rng = crate::rng::substream(0, 0);
        assert!(matches!(
            sample_scenario(&mut rng, &cfg),
            Err(Error::Config(_))
        ));
        cfg.compute_per_user = [f64::NAN, 1.0];
        assert!(matches!(
            sample_scenario(&mut rng, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn threshold_sample_mean() {
        let mut cfg = SamplerConfig::family(1);
        cfg.qoe_threshold = [0.3, 0.7];
        let mut rng = crate::rng::substream(42, 9);
        let draws = 10_000;
        let mean = (0..draws)
            .map(|_| sample_scenario(&mut rng, &cfg).unwrap().qoe_threshold[0])
            .sum::<f64>()
            / draws as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn presets() {
        let s = preset_scenario("surgery").unwrap();
        assert_eq!(
            s.preset_meta,
            Some(PresetMeta {
                latency_budget_ms: 1.0,
                reliability_target: 0.99999999
            })
        );
        let o = preset_scenario("outpatient").unwrap();
        assert_eq!(o.preset_meta.unwrap().latency_budget_ms, 2.0);
        assert_eq!(o.preset_meta.unwrap().reliability_target, 0.99999);
        let d = preset_scenario("default").unwrap();
        assert!(d.preset_meta.is_none());
        assert_eq!(d.num_users, 4);
        assert_eq!(d.bandwidth_budget, 40.0);
        assert_eq!(d.compute_budget, 40.0);
        assert_eq!(d.qoe_threshold, vec![0.5; 4]);
        assert_eq!(d.max_diffusion_step, 10);
        assert!(matches!(preset_scenario("icu"), Err(Error::Config(_))));
    }
}
