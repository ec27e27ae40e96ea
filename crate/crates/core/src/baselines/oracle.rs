//! Exhaustive grid oracle and an exact dynamic-programming twin for grids
//! too large to enumerate.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::thread_cap;
use crate::scenario::{Decision, Scenario, FEASIBILITY_TOL, R_MIN};

/// Largest grid the exhaustive search accepts.
pub const ORACLE_GRID_BOUND: f64 = 1e7;

/// Rewards closer than this count as ties.
pub const TIE_TOL: f64 = 1e-9;

/// Default resolution grid `{0.1, 0.2, …, 1.0}`.
pub fn default_r_levels() -> Vec<f64> {
    (1..=10).map(|k| k as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleResult {
    pub decision: Decision,
    pub total_qoe: f64,
    pub reward: f64,
    /// Full grid size `(levels · T_max)^N`.
    pub grid_size: f64,
    /// Resource-feasible grid points whose reward was computed.
    pub points_evaluated: u64,
    /// Decisions sharing the best reward; `None` when ties are not enumerated.
    pub tie_count: Option<u64>,
}

/// Per-user, per-choice score `qoe − λ·shortfall` tables.
struct UserTables {
    levels: Vec<f64>,
    bandwidth: Vec<f64>,
    t_max: u32,
    /// `score[user][level][d - 1]`
    score: Vec<Vec<Vec<f64>>>,
}

impl UserTables {
    fn new(scenario: &Scenario, levels: &[f64]) -> Result<Self> {
        let t_max = scenario.max_diffusion_step;
        let mut score = Vec::with_capacity(scenario.num_users);
        for &theta in &scenario.qoe_threshold {
            let mut per_level = Vec::with_capacity(levels.len());
            for &r in levels {
                let row = (1..=t_max)
                    .map(|d| {
                        let q = scenario.user_qoe(r, d)?;
                        let shortfall = (theta - q).max(0.0);
                        let shortfall = if shortfall <= crate::scenario::THRESHOLD_TOL {
                            0.0
                        } else {
                            shortfall
                        };
                        Ok(q - scenario.penalty_coeff * shortfall)
                    })
                    .collect::<Result<Vec<_>>>()?;
                per_level.push(row);
            }
            score.push(per_level);
        }
        Ok(Self {
            levels: levels.to_vec(),
            bandwidth: levels.iter().map(|r| r * scenario.max_bitrate).collect(),
            t_max,
            score,
        })
    }
}

fn check_levels(levels: &[f64]) -> Result<()> {
    if levels.is_empty() {
        return Err(Error::Config("resolution grid is empty".into()));
    }
    if levels.iter().any(|r| !(R_MIN..=1.0).contains(r)) {
        return Err(Error::Config(format!(
            "resolution grid must lie in [{R_MIN}, 1]"
        )));
    }
    if levels.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config(
            "resolution grid must be strictly increasing".into(),
        ));
    }
    Ok(())
}

/// Best decision found in one slice of the enumeration.
#[derive(Debug, Clone)]
struct Partial {
    best: f64,
    levels: Vec<usize>,
    steps: Vec<u32>,
    ties: u64,
    evaluated: u64,
}

impl Partial {
    fn empty() -> Self {
        Self {
            best: f64::NEG_INFINITY,
            levels: Vec::new(),
            steps: Vec::new(),
            ties: 0,
            evaluated: 0,
        }
    }

    /// Candidates arrive in lexicographic order, so the first of a tie is kept.
    fn offer(&mut self, score: f64, levels: &[usize], steps: &[u32]) {
        self.evaluated += 1;
        if score > self.best + TIE_TOL {
            self.best = score;
            self.levels = levels.to_vec();
            self.steps = steps.to_vec();
            self.ties = 1;
        } else if score >= self.best - TIE_TOL {
            self.ties += 1;
        }
    }
}

struct Search<'a> {
    tables: &'a UserTables,
    n: usize,
    bandwidth_cap: f64,
    compute_cap: f64,
    step_cost: f64,
}

impl Search<'_> {
    fn levels(&self, user: usize, used: f64, levels: &mut Vec<usize>, out: &mut Partial) {
        if user == self.n {
            let mut steps = Vec::with_capacity(self.n);
            self.steps(0, 0.0, 0.0, levels, &mut steps, out);
            return;
        }
        for (li, &bw) in self.tables.bandwidth.iter().enumerate() {
            let total = used + bw;
            // Costs are positive, so every extension of an over-budget prefix is infeasible too.
            if total > self.bandwidth_cap {
                break;
            }
            levels.push(li);
            self.levels(user + 1, total, levels, out);
            levels.pop();
        }
    }

    fn steps(
        &self,
        user: usize,
        used: f64,
        score: f64,
        levels: &[usize],
        steps: &mut Vec<u32>,
        out: &mut Partial,
    ) {
        if user == self.n {
            out.offer(score, levels, steps);
            return;
        }
        for d in 1..=self.tables.t_max {
            let total = used + self.step_cost * d as f64;
            if total > self.compute_cap {
                break;
            }
            steps.push(d);
            let s = score + self.tables.score[user][levels[user]][d as usize - 1];
            self.steps(user + 1, total, s, levels, steps, out);
            steps.pop();
        }
    }
}

fn finish(
    scenario: &Scenario,
    decision: Decision,
    grid_size: f64,
    evaluated: u64,
    ties: Option<u64>,
) -> Result<OracleResult> {
    let report = scenario.evaluate(&decision)?;
    debug_assert!(report.resource_feasible());
    Ok(OracleResult {
        decision,
        total_qoe: report.total_qoe,
        reward: report.reward,
        grid_size,
        points_evaluated: evaluated,
        tie_count: ties,
    })
}

/// Enumerates every grid decision, skips resource-infeasible ones and keeps
/// the best reward; ties go to the lexicographically smallest `(r, d)`.
///
/// The leading user's resolution level partitions the work across threads;
/// partitions are merged in order, so the result is thread-count independent.
pub fn oracle_grid_search(scenario: &Scenario, r_levels: &[f64]) -> Result<OracleResult> {
    scenario.validate()?;
    check_levels(r_levels)?;
    let per_user = (r_levels.len() as f64) * scenario.max_diffusion_step as f64;
    let grid_size = per_user.powi(scenario.num_users as i32);
    if grid_size > ORACLE_GRID_BOUND {
        return Err(Error::Capacity {
            size: grid_size,
            bound: ORACLE_GRID_BOUND,
        });
    }
    let tables = UserTables::new(scenario, r_levels)?;
    let search = Search {
        tables: &tables,
        n: scenario.num_users,
        bandwidth_cap: scenario.bandwidth_budget * (1.0 + FEASIBILITY_TOL),
        compute_cap: scenario.compute_budget * (1.0 + FEASIBILITY_TOL),
        step_cost: scenario.step_compute_cost,
    };
    let run = |first: usize| {
        let mut out = Partial::empty();
        let bw = tables.bandwidth[first];
        if bw <= search.bandwidth_cap {
            let mut levels = vec![first];
            search.levels(1, bw, &mut levels, &mut out);
        }
        out
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_cap())
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let parts: Vec<Partial> =
        pool.install(|| (0..r_levels.len()).into_par_iter().map(run).collect());

    let best = parts
        .iter()
        .map(|p| p.best)
        .fold(f64::NEG_INFINITY, f64::max);
    if !best.is_finite() {
        return Err(Error::Infeasible {
            budget: "bandwidth/compute",
            required: scenario.num_users as f64 * r_levels[0] * scenario.max_bitrate,
            available: scenario.bandwidth_budget,
        });
    }
    let evaluated = parts.iter().map(|p| p.evaluated).sum();
    let tied: Vec<&Partial> = parts.iter().filter(|p| p.best >= best - TIE_TOL).collect();
    let ties = tied.iter().map(|p| p.ties).sum();
    let winner = tied[0];
    let decision = Decision {
        resolution_ratio: winner.levels.iter().map(|&l| tables.levels[l]).collect(),
        diffusion_step: winner.steps.clone(),
    };
    finish(scenario, decision, grid_size, evaluated, Some(ties))
}

/// Exact optimum over the uniform grid `{k·step} ∩ [R_MIN, 1]` by dynamic
/// programming over users. The reward is separable once budgets hold, so the
/// optimum matches [`oracle_grid_search`] while scaling to any user count.
/// Ties are not enumerated.
pub fn oracle_grid_dp(scenario: &Scenario, r_step: f64) -> Result<OracleResult> {
    scenario.validate()?;
    if !(r_step > 0.0 && r_step <= 1.0 - R_MIN) {
        return Err(Error::Config(format!(
            "resolution step {r_step} out of range"
        )));
    }
    let first = (R_MIN / r_step - 1e-9).ceil() as usize;
    let last = (1.0 / r_step + 1e-9).floor() as usize;
    let units: Vec<usize> = (first.max(1)..=last).collect();
    let levels: Vec<f64> = units.iter().map(|&k| k as f64 * r_step).collect();
    check_levels(&levels)?;
    let tables = UserTables::new(scenario, &levels)?;

    let unit_bw = r_step * scenario.max_bitrate;
    let bw_cap =
        (scenario.bandwidth_budget * (1.0 + FEASIBILITY_TOL) / unit_bw + 1e-9).floor() as usize;
    let cp_cap = (scenario.compute_budget * (1.0 + FEASIBILITY_TOL) / scenario.step_compute_cost
        + 1e-9)
        .floor() as usize;
    let (n, t_max) = (scenario.num_users, scenario.max_diffusion_step as usize);
    let width = cp_cap + 1;
    let cells = (bw_cap + 1) * width;

    let mut value = vec![f64::NEG_INFINITY; cells];
    value[0] = 0.0;
    // choice[user][cell] = (level index, d, previous cell)
    let mut choice: Vec<Vec<(u16, u16, u32)>> = Vec::with_capacity(n);
    let mut points = 0u64;
    for user in 0..n {
        let mut next = vec![f64::NEG_INFINITY; cells];
        let mut pick = vec![(0u16, 0u16, 0u32); cells];
        for b in 0..=bw_cap {
            for c in 0..=cp_cap {
                let base = value[b * width + c];
                if base == f64::NEG_INFINITY {
                    continue;
                }
                for (li, &u) in units.iter().enumerate() {
                    let nb = b + u;
                    if nb > bw_cap {
                        break;
                    }
                    for d in 1..=t_max {
                        let nc = c + d;
                        if nc > cp_cap {
                            break;
                        }
                        points += 1;
                        let v = base + tables.score[user][li][d - 1];
                        let cell = nb * width + nc;
                        if v > next[cell] {
                            next[cell] = v;
                            pick[cell] = (li as u16, d as u16, (b * width + c) as u32);
                        }
                    }
                }
            }
        }
        value = next;
        choice.push(pick);
    }
    let (mut cell, best) =
        value.iter().enumerate().fold(
            (0, f64::NEG_INFINITY),
            |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
        );
    if best == f64::NEG_INFINITY {
        return Err(Error::Infeasible {
            budget: "bandwidth/compute",
            required: n as f64 * levels[0] * scenario.max_bitrate,
            available: scenario.bandwidth_budget,
        });
    }
    let mut r = vec![0.0; n];
    let mut d = vec![0u32; n];
    for user in (0..n).rev() {
        let (li, step, prev) = choice[user][cell];
        r[user] = levels[li as usize];
        d[user] = step as u32;
        cell = prev as usize;
    }
    let grid_size = (levels.len() as f64 * t_max as f64).powi(n as i32);
    finish(
        scenario,
        Decision {
            resolution_ratio: r,
            diffusion_step: d,
        },
        grid_size,
        points,
        None,
    )
}

/// Best grid reward: exhaustive search when tractable, the DP otherwise.
pub fn oracle_best(scenario: &Scenario) -> Result<OracleResult> {
    match oracle_grid_search(scenario, &default_r_levels()) {
        Err(Error::Capacity { .. }) => oracle_grid_dp(scenario, 0.1),
        other => other,
    }
}
