//! Double-Q critics, replay, and the actor-critic loop that trains the
//! diffusion actor.
//!
//! Each episode is one scenario, one action, one reward, so critics regress
//! directly onto observed rewards (no bootstrapping, no discount). The actor
//! maximizes the minimum of the two critics.

use std::sync::OnceLock;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    actor_loss, decode_decision, DiffusionActor, NoiseSchedule, SampleMode, ACTION_CLAMP,
};
use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, Graph, Mlp, Tensor, Var};
use crate::rng::{self, stream, SimRng};
use crate::scenario::{sample_scenario, QoEReport, SamplerConfig, Scenario, StateEncoder};

/// A deterministic map from encoded states to raw actions.
pub trait Policy: Sync {
    /// One raw action row per state row.
    fn act(&self, states: &Tensor) -> Result<Tensor>;
}

/// Soft-actor-critic knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SacParams {
    /// Fixed entropy temperature.
    pub temperature: f64,
    pub log_std_min: f64,
    pub log_std_max: f64,
}

impl Default for SacParams {
    fn default() -> Self {
        Self {
            temperature: 0.2,
            log_std_min: -5.0,
            log_std_max: 2.0,
        }
    }
}

/// Proximal-policy-optimization knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoParams {
    pub clip: f64,
    /// Fresh single-step episodes collected per update.
    pub rollout: usize,
    pub epochs: usize,
    pub minibatch: usize,
    pub initial_log_std: f64,
    /// Policy step size. Separate from `lr_actor` because an update pass
    /// happens only once per rollout.
    pub learning_rate: f64,
}

impl Default for PpoParams {
    fn default() -> Self {
        Self {
            clip: 0.2,
            rollout: 256,
            epochs: 4,
            minibatch: 64,
            initial_log_std: -0.5,
            learning_rate: 3e-4,
        }
    }
}

/// Hyper-parameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub tau: f64,
    pub warmup_steps: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub seed: u64,
    /// Reverse-chain length `K` of the diffusion actor.
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Exploration noise std, decayed linearly from the first to the second value.
    pub exploration_noise: [f64; 2],
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub actor_activation: Activation,
    pub critic_activation: Activation,
    pub sampler: SamplerConfig,
    pub sac: SacParams,
    pub ppo: PpoParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 20_000,
            batch_size: 64,
            replay_capacity: 50_000,
            lr_actor: 1e-4,
            lr_critic: 1e-3,
            tau: 0.005,
            warmup_steps: 1_000,
            eval_every: 1_000,
            eval_episodes: 100,
            seed: 0,
            diffusion_steps: 5,
            beta_start: 1e-4,
            beta_end: 0.1,
            exploration_noise: [0.1, 0.01],
            actor_hidden: vec![64, 64],
            critic_hidden: vec![64, 64],
            actor_activation: Activation::Tanh,
            critic_activation: Activation::Relu,
            sampler: SamplerConfig::family(3),
            sac: SacParams::default(),
            ppo: PpoParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.replay_capacity == 0 {
            return fail("batch_size and replay_capacity must be positive".into());
        }
        if self.batch_size > self.replay_capacity {
            return fail(format!(
                "batch_size {} exceeds replay_capacity {}",
                self.batch_size, self.replay_capacity
            ));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return fail(format!("tau must lie in (0, 1], got {}", self.tau));
        }
        if !(self.lr_actor > 0.0 && self.lr_critic > 0.0) {
            return fail("learning rates must be positive".into());
        }
        if self.eval_every == 0 || self.eval_episodes == 0 {
            return fail("eval_every and eval_episodes must be positive".into());
        }
        let [hi, lo] = self.exploration_noise;
        if !(hi >= 0.0 && lo >= 0.0) {
            return fail("exploration noise must be non-negative".into());
        }
        if self.actor_hidden.contains(&0) || self.critic_hidden.contains(&0) {
            return fail("hidden layer sizes must be positive".into());
        }
        let p = &self.ppo;
        let counts_ok = p.rollout > 0 && p.epochs > 0 && p.minibatch > 0;
        if !(p.clip > 0.0 && p.clip < 1.0 && p.learning_rate > 0.0) || !counts_ok {
            return fail("ppo clip must lie in (0, 1) and rollout/epochs/minibatch/learning_rate be positive".into());
        }
        let s = &self.sac;
        if !(s.temperature >= 0.0 && s.log_std_min < s.log_std_max) {
            return fail(
                "sac temperature must be non-negative and log_std_min < log_std_max".into(),
            );
        }
        NoiseSchedule::new(self.diffusion_steps, self.beta_start, self.beta_end)?;
        self.sampler.validate()
    }

    pub fn num_users(&self) -> usize {
        self.sampler.num_users
    }

    pub fn action_dim(&self) -> usize {
        2 * self.sampler.num_users
    }

    pub fn encoder(&self) -> StateEncoder {
        self.sampler.encoder()
    }

    /// Exploration std at training step `step` (1-based).
    pub fn exploration_std(&self, step: u64) -> f64 {
        let [start, end] = self.exploration_noise;
        let frac = if self.total_steps <= 1 {
            0.0
        } else {
            (step.saturating_sub(1)) as f64 / (self.total_steps - 1) as f64
        };
        start + (end - start) * frac.min(1.0)
    }
}

/// `(training step, mean evaluation reward)` pairs.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LearningCurve {
    pub points: Vec<(u64, f64)>,
}

impl LearningCurve {
    pub fn push(&mut self, step: u64, reward: f64) -> Result<()> {
        if let Some(&(last, _)) = self.points.last() {
            if step <= last {
                return Err(Error::Contract(format!(
                    "curve steps must increase: {step} after {last}"
                )));
            }
        }
        self.points.push((step, reward));
        Ok(())
    }

    pub fn final_reward(&self) -> Option<f64> {
        self.points.last().map(|p| p.1)
    }

    /// First step at which the curve reaches `fraction` of its final value.
    pub fn steps_to_fraction_of_final(&self, fraction: f64) -> Option<u64> {
        let target = fraction * self.final_reward()?;
        self.points.iter().find(|p| p.1 >= target).map(|p| p.0)
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }
}

/// Twin critics with target copies.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticPair {
    pub q1: Mlp,
    pub q2: Mlp,
    pub target1: Mlp,
    pub target2: Mlp,
    tau: f64,
}

/// Loss value and gradients of both online critics.
#[derive(Debug, Clone)]
pub struct CriticLoss {
    pub loss: f64,
    pub grads1: Vec<Tensor>,
    pub grads2: Vec<Tensor>,
}

impl CriticPair {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        activation: Activation,
        tau: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let q1 = Mlp::new(&sizes, activation, Activation::Identity, rng)?;
        let q2 = Mlp::new(&sizes, activation, Activation::Identity, rng)?;
        Self::from_nets(q1, q2, tau)
    }

    pub fn from_nets(q1: Mlp, q2: Mlp, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1], got {tau}")));
        }
        if q1.sizes() != q2.sizes() || q1.output_dim() != 1 {
            return Err(Error::Contract(
                "critics must share a shape with scalar output".into(),
            ));
        }
        Ok(Self {
            target1: q1.clone(),
            target2: q2.clone(),
            q1,
            q2,
            tau,
        })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn input_dim(&self) -> usize {
        self.q1.input_dim()
    }

    /// `(Q1, Q2)` for `[B, state ‖ action]` inputs.
    pub fn q_values(&self, inputs: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((self.q1.forward(inputs)?, self.q2.forward(inputs)?))
    }

    /// Records `min(Q1, Q2)` on `g` with both critics held constant.
    pub fn min_q_graph(&self, g: &mut Graph, input: Var) -> Result<Var> {
        let b1 = self.q1.bind(g, false);
        let b2 = self.q2.bind(g, false);
        let v1 = self.q1.forward_graph(g, &b1, input)?;
        let v2 = self.q2.forward_graph(g, &b2, input)?;
        g.min(v1, v2)
    }

    /// `mean((Q1 − y)²) + mean((Q2 − y)²)` with `y` the observed reward.
    pub fn critic_loss(&self, inputs: &Tensor, rewards: &Tensor) -> Result<CriticLoss> {
        if inputs.rows() == 0 || inputs.is_empty() {
            return Err(Error::Contract(
                "critic loss needs a non-empty batch".into(),
            ));
        }
        if rewards.len() != inputs.rows() {
            return Err(Error::Contract(format!(
                "{} rewards for {} transitions",
                rewards.len(),
                inputs.rows()
            )));
        }
        let mut g = Graph::new();
        let b1 = self.q1.bind(&mut g, true);
        let b2 = self.q2.bind(&mut g, true);
        let x = g.constant(inputs.clone());
        let y = g.constant(Tensor::matrix(inputs.rows(), 1, rewards.data().to_vec())?);
        let mut total = None;
        for (net, bound) in [(&self.q1, &b1), (&self.q2, &b2)] {
            let q = net.forward_graph(&mut g, bound, x)?;
            let diff = g.sub(q, y)?;
            let sq = g.square(diff);
            let m = g.mean(sq);
            total = Some(match total {
                None => m,
                Some(t) => g.add(t, m)?,
            });
        }
        let loss = total.expect("two critics");
        let grads = g.backward(loss)?;
        Ok(CriticLoss {
            loss: g.value(loss).item()?,
            grads1: self.q1.collect_grads(&grads, &b1),
            grads2: self.q2.collect_grads(&grads, &b2),
        })
    }

    /// `target ← (1 − τ)·target + τ·online`.
    pub fn soft_update(&mut self) -> Result<()> {
        self.target1.blend_from(&self.q1, self.tau)?;
        self.target2.blend_from(&self.q2, self.tau)
    }
}

/// Adam states for both critics.
#[derive(Debug, Clone)]
pub struct CriticOptimizer {
    opt1: Adam,
    opt2: Adam,
}

impl CriticOptimizer {
    pub fn new(critics: &CriticPair, lr: f64) -> Self {
        Self {
            opt1: critics.q1.adam(lr),
            opt2: critics.q2.adam(lr),
        }
    }

    /// One regression step; returns the pre-update loss.
    pub fn step(
        &mut self,
        critics: &mut CriticPair,
        inputs: &Tensor,
        rewards: &Tensor,
    ) -> Result<f64> {
        let loss = critics.critic_loss(inputs, rewards)?;
        if !loss.loss.is_finite() {
            return Err(Error::NonFinite(format!("critic loss = {}", loss.loss)));
        }
        critics.q1.apply_adam(&mut self.opt1, &loss.grads1)?;
        critics.q2.apply_adam(&mut self.opt2, &loss.grads2)?;
        Ok(loss.loss)
    }
}

/// One single-step transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
}

/// Fixed-capacity FIFO ring of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            next: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends, evicting the oldest transition when full.
    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// Transitions from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.items.len() < self.capacity {
            0
        } else {
            self.next
        };
        self.items[split..].iter().chain(&self.items[..split])
    }

    /// `batch` indices drawn uniformly with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, rng: &mut R, batch: usize) -> Result<Vec<usize>> {
        if self.items.is_empty() {
            return Err(Error::Contract(
                "cannot sample from an empty replay buffer".into(),
            ));
        }
        Ok((0..batch)
            .map(|_| rng.random_range(0..self.items.len()))
            .collect())
    }

    /// `(states, actions, rewards)` for the given indices.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Tensor, Tensor)> {
        let states: Vec<&[f64]> = indices
            .iter()
            .map(|&i| self.items[i].state.as_slice())
            .collect();
        let actions: Vec<&[f64]> = indices
            .iter()
            .map(|&i| self.items[i].action.as_slice())
            .collect();
        let rewards = indices.iter().map(|&i| self.items[i].reward).collect();
        Ok((
            Tensor::from_rows(&states)?,
            Tensor::from_rows(&actions)?,
            Tensor::matrix(indices.len(), 1, rewards)?,
        ))
    }
}

/// Row-wise `[states ‖ actions]`.
pub fn join_columns(left: &Tensor, right: &Tensor) -> Result<Tensor> {
    if left.rows() != right.rows() {
        return Err(Error::Contract("row counts differ".into()));
    }
    let cols = left.cols() + right.cols();
    let mut data = Vec::with_capacity(left.rows() * cols);
    for (l, r) in left.rows_iter().zip(right.rows_iter()) {
        data.extend_from_slice(l);
        data.extend_from_slice(r);
    }
    Tensor::matrix(left.rows(), cols, data)
}

/// Decode, project onto the budgets, evaluate.
pub fn realize(raw: &[f64], scenario: &Scenario) -> Result<QoEReport> {
    let decision = scenario.project_feasible(&decode_decision(raw, scenario)?)?;
    scenario.evaluate(&decision)
}

/// The held-out evaluation scenarios of a run, drawn from a dedicated stream.
pub fn eval_scenarios(config: &TrainConfig) -> Result<Vec<Scenario>> {
    let mut rng = rng::substream(config.seed, stream::EVAL_SCENARIOS);
    (0..config.eval_episodes)
        .map(|_| sample_scenario(&mut rng, &config.sampler))
        .collect()
}

/// Mean reward and per-scenario reports of a policy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyEvaluation {
    pub mean_reward: f64,
    pub mean_total_qoe: f64,
    pub reports: Vec<QoEReport>,
}

impl PolicyEvaluation {
    pub fn from_reports(reports: Vec<QoEReport>) -> Self {
        let n = reports.len().max(1) as f64;
        Self {
            mean_reward: reports.iter().map(|r| r.reward).sum::<f64>() / n,
            mean_total_qoe: reports.iter().map(|r| r.total_qoe).sum::<f64>() / n,
            reports,
        }
    }
}

/// Scenarios per evaluation work unit. Fixed so results do not depend on the
/// number of worker threads.
const EVAL_CHUNK: usize = 32;

fn worker_pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(rng::thread_cap())
            .build()
            .expect("thread pool")
    })
}

/// Deterministic-policy evaluation: act, decode, project, evaluate.
/// Work is fanned out in fixed-size chunks and merged in scenario order.
pub fn evaluate_policy(
    policy: &dyn Policy,
    scenarios: &[Scenario],
    encoder: &StateEncoder,
) -> Result<PolicyEvaluation> {
    let chunks: Vec<&[Scenario]> = scenarios.chunks(EVAL_CHUNK).collect();
    let per_chunk: Vec<Result<Vec<QoEReport>>> = worker_pool().install(|| {
        chunks
            .par_iter()
            .map(|chunk| {
                let states: Vec<Vec<f64>> = chunk.iter().map(|s| encoder.encode(s)).collect();
                let actions = policy.act(&Tensor::from_rows(&states)?)?;
                chunk
                    .iter()
                    .zip(actions.rows_iter())
                    .map(|(s, a)| realize(a, s))
                    .collect()
            })
            .collect()
    });
    let mut reports = Vec::with_capacity(scenarios.len());
    for chunk in per_chunk {
        reports.extend(chunk?);
    }
    Ok(PolicyEvaluation::from_reports(reports))
}

/// Samples training scenarios and their encoded states.
pub(crate) struct ScenarioStream {
    sampler: SamplerConfig,
    encoder: StateEncoder,
    rng: SimRng,
}

impl ScenarioStream {
    pub(crate) fn new(config: &TrainConfig) -> Self {
        Self {
            sampler: config.sampler.clone(),
            encoder: config.encoder(),
            rng: rng::substream(config.seed, stream::TRAIN_SCENARIOS),
        }
    }

    pub(crate) fn next(&mut self) -> Result<(Scenario, Vec<f64>)> {
        let s = sample_scenario(&mut self.rng, &self.sampler)?;
        let state = self.encoder.encode(&s);
        Ok((s, state))
    }
}

pub(crate) fn gaussian_matrix<R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
) -> Result<Tensor> {
    let data = (0..rows * cols)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    Tensor::matrix(rows, cols, data)
}

/// Everything a CODI training run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub actor: DiffusionActor,
    pub critics: CriticPair,
    pub curve: LearningCurve,
}

/// Trains the diffusion actor against double-Q critics.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(config, |_, _| {})
}

/// [`train`], calling `progress(step, mean_eval_reward)` at every evaluation.
pub fn train_with_progress(
    config: &TrainConfig,
    mut progress: impl FnMut(u64, f64),
) -> Result<TrainOutcome> {
    config.validate()?;
    let encoder = config.encoder();
    let (state_dim, action_dim) = (encoder.dim(), config.action_dim());
    let mut init_rng = rng::substream(config.seed, stream::INIT);
    let schedule = NoiseSchedule::new(config.diffusion_steps, config.beta_start, config.beta_end)?;
    let mut actor = DiffusionActor::new(
        state_dim,
        action_dim,
        &config.actor_hidden,
        config.actor_activation,
        schedule,
        &mut init_rng,
    )?;
    let mut critics = CriticPair::new(
        state_dim + action_dim,
        &config.critic_hidden,
        config.critic_activation,
        config.tau,
        &mut init_rng,
    )?;
    let mut actor_opt = actor.eps_net().adam(config.lr_actor);
    let mut critic_opt = CriticOptimizer::new(&critics, config.lr_critic);

    let eval_set = eval_scenarios(config)?;
    let mut scenarios = ScenarioStream::new(config);
    let mut action_rng = rng::substream(config.seed, stream::ACTIONS);
    let mut batch_rng = rng::substream(config.seed, stream::MINIBATCH);
    let mut replay = ReplayBuffer::new(config.replay_capacity)?;
    let mut curve = LearningCurve::default();

    for step in 1..=config.total_steps {
        let (scenario, state) = scenarios.next()?;
        let states = Tensor::row_vector(state.clone());
        let mut action = actor
            .sample_action(&states, &mut action_rng, SampleMode::Stochastic)?
            .into_data();
        let std = config.exploration_std(step);
        for a in action.iter_mut() {
            let z: f64 = action_rng.sample(StandardNormal);
            *a = (*a + std * z).clamp(-ACTION_CLAMP, ACTION_CLAMP);
        }
        let report = realize(&action, &scenario)?;
        replay.push(Transition {
            state,
            action,
            reward: report.reward,
        });

        if step > config.warmup_steps {
            let idx = replay.sample_indices(&mut batch_rng, config.batch_size)?;
            let (s, a, r) = replay.gather(&idx)?;
            critic_opt.step(&mut critics, &join_columns(&s, &a)?, &r)?;

            let start = gaussian_matrix(&mut batch_rng, s.rows(), action_dim)?;
            let loss = actor_loss(&actor, &critics, &s, start)?;
            if !loss.loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "actor loss = {} at step {step}",
                    loss.loss
                )));
            }
            actor
                .eps_net_mut()
                .apply_adam(&mut actor_opt, &loss.grads)?;
            critics.soft_update()?;
        }

        if step % config.eval_every == 0 {
            let eval = evaluate_policy(&actor, &eval_set, &encoder)?;
            if !eval.mean_reward.is_finite() {
                return Err(Error::NonFinite(format!(
                    "evaluation reward at step {step}"
                )));
            }
            curve.push(step, eval.mean_reward)?;
            progress(step, eval.mean_reward);
        }
    }
    Ok(TrainOutcome {
        actor,
        critics,
        curve,
    })
}
