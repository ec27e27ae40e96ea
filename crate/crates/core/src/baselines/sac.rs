//! Soft actor-critic reduced to the single-step bandit setting.
//!
//! The policy emits a Gaussian over pre-squash actions `u`; critics see the
//! squashed action `tanh(u)`. Decoding applies the same `tanh`, so the raw
//! action handed to [`realize`] is `u` itself.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::{Activation, Graph, Mlp, Tensor, CHECKPOINT_HEADER};
use crate::rng::{self, stream};
use crate::trainer::{
    eval_scenarios, evaluate_policy, gaussian_matrix, join_columns, realize, CriticOptimizer,
    CriticPair, LearningCurve, Policy, ReplayBuffer, ScenarioStream, TrainConfig, Transition,
};

const LOG_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
/// Keeps `log(1 − tanh²u)` finite at saturation.
const SQUASH_EPS: f64 = 1e-6;

/// Gaussian policy head `state → [mean ‖ log_std]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SacPolicy {
    net: Mlp,
    log_std_min: f64,
    log_std_max: f64,
}

impl SacPolicy {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        config: &TrainConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let mut sizes = vec![state_dim];
        sizes.extend(&config.actor_hidden);
        sizes.push(2 * action_dim);
        Ok(Self {
            net: Mlp::new(&sizes, config.actor_activation, Activation::Identity, rng)?,
            log_std_min: config.sac.log_std_min,
            log_std_max: config.sac.log_std_max,
        })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn action_dim(&self) -> usize {
        self.net.output_dim() / 2
    }

    /// `(mean, log_std)` rows with the log-std clamped.
    pub fn heads(&self, states: &Tensor) -> Result<(Tensor, Tensor)> {
        let out = self.net.forward(states)?;
        let a = self.action_dim();
        let mut mean = Vec::with_capacity(states.rows() * a);
        let mut log_std = Vec::with_capacity(states.rows() * a);
        for row in out.rows_iter() {
            mean.extend_from_slice(&row[..a]);
            log_std.extend(
                row[a..]
                    .iter()
                    .map(|v| v.clamp(self.log_std_min, self.log_std_max)),
            );
        }
        Ok((
            Tensor::matrix(states.rows(), a, mean)?,
            Tensor::matrix(states.rows(), a, log_std)?,
        ))
    }

    /// Pre-squash sample `u = mean + std·ξ`.
    pub fn sample<R: Rng + ?Sized>(&self, states: &Tensor, rng: &mut R) -> Result<Tensor> {
        let (mut mean, log_std) = self.heads(states)?;
        for (m, ls) in mean.data_mut().iter_mut().zip(log_std.data()) {
            let z: f64 = rng.sample(StandardNormal);
            *m += ls.exp() * z;
        }
        Ok(mean)
    }

    pub fn write_checkpoint<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "{CHECKPOINT_HEADER}")?;
        writeln!(out, "sac {:e} {:e}", self.log_std_min, self.log_std_max)?;
        self.net.write_body(out)
    }

    pub fn read_checkpoint<R: BufRead>(input: &mut R) -> Result<Self> {
        let mut lines = input.lines();
        let header = crate::nn::next_line(&mut lines)?;
        if header.trim() != CHECKPOINT_HEADER {
            return Err(Error::Checkpoint(format!("unexpected header {header:?}")));
        }
        let meta = crate::nn::next_line(&mut lines)?;
        let fields: Vec<&str> = meta.split_whitespace().collect();
        let bad = || Error::Checkpoint(format!("bad policy line {meta:?}"));
        if fields.len() != 3 || fields[0] != "sac" {
            return Err(bad());
        }
        let log_std_min: f64 = fields[1].parse().map_err(|_| bad())?;
        let log_std_max: f64 = fields[2].parse().map_err(|_| bad())?;
        let net = Mlp::read_body(&mut lines)?;
        if net.output_dim() % 2 != 0 {
            return Err(Error::Checkpoint("policy output width must be even".into()));
        }
        Ok(Self {
            net,
            log_std_min,
            log_std_max,
        })
    }
}

/// Deterministic evaluation uses the mean head only.
impl Policy for SacPolicy {
    fn act(&self, states: &Tensor) -> Result<Tensor> {
        Ok(self.heads(states)?.0)
    }
}

/// Entropy-regularized policy loss `mean(α·log π(a|s) − min Q(s, a))` and its
/// gradients, with `a = tanh(mean + std·ξ)` reparameterized through `noise`.
pub fn sac_policy_loss(
    policy: &SacPolicy,
    critics: &CriticPair,
    states: &Tensor,
    noise: &Tensor,
    temperature: f64,
) -> Result<(f64, Vec<Tensor>)> {
    let a = policy.action_dim();
    if noise.rows() != states.rows() || noise.cols() != a {
        return Err(Error::Contract("noise must be [batch, action_dim]".into()));
    }
    let mut g = Graph::new();
    let bound = policy.net.bind(&mut g, true);
    let s = g.constant(states.clone());
    let out = policy.net.forward_graph(&mut g, &bound, s)?;
    let mean = g.slice_cols(out, 0, a)?;
    let raw_log_std = g.slice_cols(out, a, 2 * a)?;
    let log_std = g.clamp(raw_log_std, policy.log_std_min, policy.log_std_max);
    let std = g.exp(log_std);
    let xi = g.constant(noise.clone());
    let spread = g.mul(std, xi)?;
    let u = g.add(mean, spread)?;
    let squashed = g.tanh(u);

    // log N(u; mean, std) = −ξ²/2 − log_std − log√(2π), then the tanh Jacobian.
    let gauss_const = g.constant(noise.map(|z| -0.5 * z * z - LOG_SQRT_2PI));
    let gauss = g.sub(gauss_const, log_std)?;
    let sq = g.square(squashed);
    let one_minus = g.scale(sq, -1.0);
    let one_minus = g.offset(one_minus, 1.0 + SQUASH_EPS);
    let jac = g.log(one_minus);
    let per_dim = g.sub(gauss, jac)?;
    let log_prob = g.sum_cols(per_dim);

    let input = g.concat(&[s, squashed])?;
    let q = critics.min_q_graph(&mut g, input)?;
    let weighted = g.scale(log_prob, temperature);
    let objective = g.sub(weighted, q)?;
    let loss = g.mean(objective);
    let grads = g.backward(loss)?;
    Ok((
        g.value(loss).item()?,
        policy.net.collect_grads(&grads, &bound),
    ))
}

#[derive(Debug, Clone)]
pub struct SacOutcome {
    pub policy: SacPolicy,
    pub critics: CriticPair,
    pub curve: LearningCurve,
}

pub fn train_sac_lite(config: &TrainConfig) -> Result<SacOutcome> {
    train_sac_lite_with_progress(config, |_, _| {})
}

/// Same replay, warm-up, critic and evaluation protocol as the diffusion
/// trainer; only the actor differs.
pub fn train_sac_lite_with_progress(
    config: &TrainConfig,
    mut progress: impl FnMut(u64, f64),
) -> Result<SacOutcome> {
    config.validate()?;
    let encoder = config.encoder();
    let (state_dim, action_dim) = (encoder.dim(), config.action_dim());
    let mut init_rng = rng::substream(config.seed, stream::INIT);
    let mut policy = SacPolicy::new(state_dim, action_dim, config, &mut init_rng)?;
    let mut critics = CriticPair::new(
        state_dim + action_dim,
        &config.critic_hidden,
        config.critic_activation,
        config.tau,
        &mut init_rng,
    )?;
    let mut policy_opt = policy.net.adam(config.lr_actor);
    let mut critic_opt = CriticOptimizer::new(&critics, config.lr_critic);

    let eval_set = eval_scenarios(config)?;
    let mut scenarios = ScenarioStream::new(config);
    let mut action_rng = rng::substream(config.seed, stream::ACTIONS);
    let mut batch_rng = rng::substream(config.seed, stream::MINIBATCH);
    let mut replay = ReplayBuffer::new(config.replay_capacity)?;
    let mut curve = LearningCurve::default();

    for step in 1..=config.total_steps {
        let (scenario, state) = scenarios.next()?;
        let u = policy
            .sample(&Tensor::row_vector(state.clone()), &mut action_rng)?
            .into_data();
        let report = realize(&u, &scenario)?;
        replay.push(Transition {
            state,
            action: u.iter().map(|v| v.tanh()).collect(),
            reward: report.reward,
        });

        if step > config.warmup_steps {
            let idx = replay.sample_indices(&mut batch_rng, config.batch_size)?;
            let (s, a, r) = replay.gather(&idx)?;
            critic_opt.step(&mut critics, &join_columns(&s, &a)?, &r)?;

            let noise = gaussian_matrix(&mut batch_rng, s.rows(), action_dim)?;
            let (loss, grads) =
                sac_policy_loss(&policy, &critics, &s, &noise, config.sac.temperature)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "policy loss = {loss} at step {step}"
                )));
            }
            policy.net.apply_adam(&mut policy_opt, &grads)?;
            critics.soft_update()?;
        }

        if step % config.eval_every == 0 {
            let eval = evaluate_policy(&policy, &eval_set, &encoder)?;
            if !eval.mean_reward.is_finite() {
                return Err(Error::NonFinite(format!(
                    "evaluation reward at step {step}"
                )));
            }
            curve.push(step, eval.mean_reward)?;
            progress(step, eval.mean_reward);
        }
    }
    Ok(SacOutcome {
        policy,
        critics,
        curve,
    })
}
