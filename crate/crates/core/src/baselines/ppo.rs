//! Clipped-ratio policy optimization on freshly sampled single-step episodes.
//!
//! The advantage of an episode is its reward minus a learned state value;
//! there is nothing to bootstrap.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, Graph, Mlp, Tensor, CHECKPOINT_HEADER};
use crate::rng::{self, stream};
use crate::trainer::{
    eval_scenarios, evaluate_policy, realize, LearningCurve, Policy, ScenarioStream, TrainConfig,
};

const LOG_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// The probability ratio clamped to `[1 − clip, 1 + clip]`.
pub fn clip_ratio(ratio: f64, clip: f64) -> f64 {
    ratio.clamp(1.0 - clip, 1.0 + clip)
}

/// Per-sample surrogate `min(ρ·A, clip(ρ)·A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> f64 {
    (ratio * advantage).min(clip_ratio(ratio, clip) * advantage)
}

/// Gaussian policy with a state-independent log-std, plus a value baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoPolicy {
    mean: Mlp,
    log_std: Tensor,
    value: Mlp,
}

impl PpoPolicy {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        config: &TrainConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let mut sizes = vec![state_dim];
        sizes.extend(&config.actor_hidden);
        sizes.push(action_dim);
        let mean = Mlp::new(&sizes, config.actor_activation, Activation::Identity, rng)?;
        let mut sizes = vec![state_dim];
        sizes.extend(&config.critic_hidden);
        sizes.push(1);
        let value = Mlp::new(&sizes, config.critic_activation, Activation::Identity, rng)?;
        Ok(Self {
            mean,
            log_std: Tensor::filled(&[action_dim], config.ppo.initial_log_std),
            value,
        })
    }

    pub fn mean_net(&self) -> &Mlp {
        &self.mean
    }

    pub fn value_net(&self) -> &Mlp {
        &self.value
    }

    pub fn log_std(&self) -> &[f64] {
        self.log_std.data()
    }

    pub fn action_dim(&self) -> usize {
        self.log_std.len()
    }

    /// Samples raw actions and returns them with their log-probabilities.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        states: &Tensor,
        rng: &mut R,
    ) -> Result<(Tensor, Vec<f64>)> {
        let mut actions = self.mean.forward(states)?;
        let a = self.action_dim();
        let mut log_probs = Vec::with_capacity(states.rows());
        for row in actions.data_mut().chunks_exact_mut(a) {
            let mut lp = 0.0;
            for (x, &ls) in row.iter_mut().zip(self.log_std.data()) {
                let z: f64 = rng.sample(StandardNormal);
                *x += ls.exp() * z;
                lp += -0.5 * z * z - ls - LOG_SQRT_2PI;
            }
            log_probs.push(lp);
        }
        Ok((actions, log_probs))
    }

    pub fn write_checkpoint<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "{CHECKPOINT_HEADER}")?;
        writeln!(out, "ppo {}", self.action_dim())?;
        let ls: Vec<String> = self
            .log_std
            .data()
            .iter()
            .map(|v| format!("{v:e}"))
            .collect();
        writeln!(out, "{}", ls.join(" "))?;
        self.mean.write_body(out)?;
        self.value.write_body(out)
    }

    pub fn read_checkpoint<R: BufRead>(input: &mut R) -> Result<Self> {
        let mut lines = input.lines();
        let header = crate::nn::next_line(&mut lines)?;
        if header.trim() != CHECKPOINT_HEADER {
            return Err(Error::Checkpoint(format!("unexpected header {header:?}")));
        }
        let meta = crate::nn::next_line(&mut lines)?;
        let dim = match meta.split_whitespace().collect::<Vec<_>>().as_slice() {
            ["ppo", d] => d
                .parse::<usize>()
                .map_err(|_| Error::Checkpoint(format!("bad policy line {meta:?}")))?,
            _ => return Err(Error::Checkpoint(format!("bad policy line {meta:?}"))),
        };
        let log_std = Tensor::vector(crate::nn::parse_floats(
            &crate::nn::next_line(&mut lines)?,
            dim,
        )?);
        let mean = Mlp::read_body(&mut lines)?;
        let value = Mlp::read_body(&mut lines)?;
        if mean.output_dim() != dim
            || value.output_dim() != 1
            || value.input_dim() != mean.input_dim()
        {
            return Err(Error::Checkpoint(
                "policy and value network shapes disagree".into(),
            ));
        }
        Ok(Self {
            mean,
            log_std,
            value,
        })
    }
}

/// Deterministic evaluation uses the mean action.
impl Policy for PpoPolicy {
    fn act(&self, states: &Tensor) -> Result<Tensor> {
        self.mean.forward(states)
    }
}

/// `−mean(min(ρ·A, clip(ρ)·A))` with `ρ = π(u|s) / π_old(u|s)`. Returns the
/// loss, the mean-network gradients and the log-std gradient.
pub fn ppo_policy_loss(
    policy: &PpoPolicy,
    states: &Tensor,
    actions: &Tensor,
    old_log_probs: &[f64],
    advantages: &[f64],
    clip: f64,
) -> Result<(f64, Vec<Tensor>, Tensor)> {
    let (b, a) = (states.rows(), policy.action_dim());
    if actions.rows() != b
        || actions.cols() != a
        || old_log_probs.len() != b
        || advantages.len() != b
    {
        return Err(Error::Contract("ppo batch pieces disagree in size".into()));
    }
    let mut g = Graph::new();
    let bound = policy.mean.bind(&mut g, true);
    let log_std = g.param(policy.log_std.clone());
    let s = g.constant(states.clone());
    let mean = policy.mean.forward_graph(&mut g, &bound, s)?;
    let zeros = g.constant(Tensor::zeros(&[b, a]));
    let ls = g.add_row(zeros, log_std)?;
    let neg_ls = g.scale(ls, -1.0);
    let inv_std = g.exp(neg_ls);
    let u = g.constant(actions.clone());
    let diff = g.sub(u, mean)?;
    let z = g.mul(diff, inv_std)?;
    let z2 = g.square(z);
    let half = g.scale(z2, -0.5);
    let per_dim = g.sub(half, ls)?;
    let summed = g.sum_cols(per_dim);
    let log_prob = g.offset(summed, -(a as f64) * LOG_SQRT_2PI);
    let old = g.constant(Tensor::matrix(b, 1, old_log_probs.to_vec())?);
    let log_ratio = g.sub(log_prob, old)?;
    let ratio = g.exp(log_ratio);
    let clipped = g.clamp(ratio, 1.0 - clip, 1.0 + clip);
    let adv = g.constant(Tensor::matrix(b, 1, advantages.to_vec())?);
    let plain = g.mul(ratio, adv)?;
    let bounded = g.mul(clipped, adv)?;
    let surrogate = g.min(plain, bounded)?;
    let mean_surr = g.mean(surrogate);
    let loss = g.scale(mean_surr, -1.0);
    let grads = g.backward(loss)?;
    Ok((
        g.value(loss).item()?,
        policy.mean.collect_grads(&grads, &bound),
        grads.get_or_zeros(log_std, &[a]),
    ))
}

/// `mean((V(s) − r)²)` and the value-network gradients.
fn value_loss(value: &Mlp, states: &Tensor, rewards: &[f64]) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let bound = value.bind(&mut g, true);
    let s = g.constant(states.clone());
    let v = value.forward_graph(&mut g, &bound, s)?;
    let y = g.constant(Tensor::matrix(rewards.len(), 1, rewards.to_vec())?);
    let diff = g.sub(v, y)?;
    let sq = g.square(diff);
    let loss = g.mean(sq);
    let grads = g.backward(loss)?;
    Ok((g.value(loss).item()?, value.collect_grads(&grads, &bound)))
}

fn normalized(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt() + 1e-8;
    values.iter().map(|v| (v - mean) / std).collect()
}

#[derive(Debug, Clone)]
pub struct PpoOutcome {
    pub policy: PpoPolicy,
    pub curve: LearningCurve,
}

pub fn train_ppo_lite(config: &TrainConfig) -> Result<PpoOutcome> {
    train_ppo_lite_with_progress(config, |_, _| {})
}

/// Collects `ppo.rollout` fresh episodes, then runs `ppo.epochs` passes of
/// shuffled minibatch updates over them. Every environment step counts as a
/// training step for the evaluation schedule; the replay and warm-up
/// settings do not apply.
pub fn train_ppo_lite_with_progress(
    config: &TrainConfig,
    mut progress: impl FnMut(u64, f64),
) -> Result<PpoOutcome> {
    config.validate()?;
    let p = &config.ppo;
    let encoder = config.encoder();
    let (state_dim, action_dim) = (encoder.dim(), config.action_dim());
    let mut init_rng = rng::substream(config.seed, stream::INIT);
    let mut policy = PpoPolicy::new(state_dim, action_dim, config, &mut init_rng)?;
    let mut mean_opt = policy.mean.adam(p.learning_rate);
    let mut log_std_opt = Adam::new(&[&policy.log_std], p.learning_rate);
    let mut value_opt = policy.value.adam(config.lr_critic);

    let eval_set = eval_scenarios(config)?;
    let mut scenarios = ScenarioStream::new(config);
    let mut action_rng = rng::substream(config.seed, stream::ACTIONS);
    let mut batch_rng = rng::substream(config.seed, stream::MINIBATCH);
    let mut curve = LearningCurve::default();

    let mut states: Vec<Vec<f64>> = Vec::with_capacity(p.rollout);
    let mut actions: Vec<Vec<f64>> = Vec::with_capacity(p.rollout);
    let mut log_probs = Vec::with_capacity(p.rollout);
    let mut rewards = Vec::with_capacity(p.rollout);

    for step in 1..=config.total_steps {
        let (scenario, state) = scenarios.next()?;
        let (u, lp) = policy.sample(&Tensor::row_vector(state.clone()), &mut action_rng)?;
        let u = u.into_data();
        rewards.push(realize(&u, &scenario)?.reward);
        states.push(state);
        actions.push(u);
        log_probs.push(lp[0]);

        if states.len() == p.rollout || step == config.total_steps {
            update(
                &mut policy,
                (&mut mean_opt, &mut log_std_opt, &mut value_opt),
                (&states, &actions, &log_probs, &rewards),
                p,
                &mut batch_rng,
            )
            .map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("{m} at step {step}")),
                other => other,
            })?;
            states.clear();
            actions.clear();
            log_probs.clear();
            rewards.clear();
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
    Ok(PpoOutcome { policy, curve })
}

type Rollout<'a> = (&'a [Vec<f64>], &'a [Vec<f64>], &'a [f64], &'a [f64]);

fn update<R: Rng + ?Sized>(
    policy: &mut PpoPolicy,
    (mean_opt, log_std_opt, value_opt): (&mut Adam, &mut Adam, &mut Adam),
    (states, actions, log_probs, rewards): Rollout<'_>,
    p: &crate::trainer::PpoParams,
    rng: &mut R,
) -> Result<()> {
    let all_states = Tensor::from_rows(states)?;
    let baseline = policy.value.forward(&all_states)?;
    let raw_adv: Vec<f64> = rewards
        .iter()
        .zip(baseline.data())
        .map(|(r, v)| r - v)
        .collect();
    let advantages = normalized(&raw_adv);

    let mut order: Vec<usize> = (0..states.len()).collect();
    for _ in 0..p.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(p.minibatch) {
            let s = Tensor::from_rows(
                &chunk
                    .iter()
                    .map(|&i| states[i].as_slice())
                    .collect::<Vec<_>>(),
            )?;
            let u = Tensor::from_rows(
                &chunk
                    .iter()
                    .map(|&i| actions[i].as_slice())
                    .collect::<Vec<_>>(),
            )?;
            let old: Vec<f64> = chunk.iter().map(|&i| log_probs[i]).collect();
            let adv: Vec<f64> = chunk.iter().map(|&i| advantages[i]).collect();
            let r: Vec<f64> = chunk.iter().map(|&i| rewards[i]).collect();

            let (loss, mean_grads, ls_grad) = ppo_policy_loss(policy, &s, &u, &old, &adv, p.clip)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("policy loss = {loss}")));
            }
            policy.mean.apply_adam(mean_opt, &mean_grads)?;
            log_std_opt.step(&mut [&mut policy.log_std], &[ls_grad])?;

            let (vloss, vgrads) = value_loss(&policy.value, &s, &r)?;
            if !vloss.is_finite() {
                return Err(Error::NonFinite(format!("value loss = {vloss}")));
            }
            policy.value.apply_adam(value_opt, &vgrads)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn small_config() -> TrainConfig {
        let mut cfg = TrainConfig {
            total_steps: 300,
            eval_every: 100,
            eval_episodes: 20,
            actor_hidden: vec![8],
            critic_hidden: vec![8],
            sampler: crate::scenario::SamplerConfig::family(2),
            ..TrainConfig::default()
        };
        cfg.ppo.rollout = 64;
        cfg.ppo.minibatch = 16;
        cfg
    }

    #[test]
    fn clipped_ratio_stays_in_band() {
        for k in 0..=400 {
            let ratio = k as f64 * 0.01;
            let c = clip_ratio(ratio, 0.2);
            assert!((0.8..=1.2).contains(&c), "{ratio} -> {c}");
            for adv in [-1.5, 0.0, 2.0] {
                let s = clipped_surrogate(ratio, adv, 0.2);
                assert_eq!(s, (ratio * adv).min(c * adv));
                assert!(s <= ratio * adv + 1e-15);
            }
        }
    }

    #[test]
    fn loss_matches_per_sample_surrogate() {
        let cfg = small_config();
        let mut policy = PpoPolicy::new(3, 2, &cfg, &mut substream(7, 0)).unwrap();
        policy.log_std = Tensor::vector(vec![-0.3, 0.2]);
        let states =
            Tensor::from_rows(&[[0.1, 0.2, 0.3], [0.5, 0.4, 0.9], [0.8, 0.1, 0.6]]).unwrap();
        let actions = Tensor::from_rows(&[[0.4, -0.2], [1.5, 0.3], [-0.9, 0.0]]).unwrap();
        let old = [-2.0, -1.5, -4.0];
        let adv = [1.0, -0.5, 0.7];
        let (loss, _, _) = ppo_policy_loss(&policy, &states, &actions, &old, &adv, 0.2).unwrap();

        let mean = policy.mean.forward(&states).unwrap();
        let mut total = 0.0;
        for i in 0..3 {
            let mut lp = 0.0;
            for j in 0..2 {
                let ls = policy.log_std.data()[j];
                let z = (actions.row(i)[j] - mean.row(i)[j]) / ls.exp();
                lp += -0.5 * z * z - ls - LOG_SQRT_2PI;
            }
            total += clipped_surrogate((lp - old[i]).exp(), adv[i], 0.2);
        }
        assert!((loss + total / 3.0).abs() < 1e-12);
    }

    #[test]
    fn sample_log_prob_is_gaussian_density() {
        let cfg = small_config();
        let policy = PpoPolicy::new(3, 2, &cfg, &mut substream(8, 0)).unwrap();
        let states = Tensor::from_rows(&[[0.3, 0.3, 0.3]]).unwrap();
        let (u, lp) = policy.sample(&states, &mut substream(9, 0)).unwrap();
        let (_, from_loss, _) = {
            let (l, g, s) = ppo_policy_loss(&policy, &states, &u, &[lp[0]], &[1.0], 0.2).unwrap();
            (g, l, s)
        };
        // ratio is exactly one, so the surrogate is the advantage itself
        assert!((from_loss + 1.0).abs() < 1e-12);
    }

    #[test]
    fn same_seed_same_curve() {
        let cfg = small_config();
        let a = train_ppo_lite(&cfg).unwrap();
        let b = train_ppo_lite(&cfg).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.curve.len(), 3);
        assert_eq!(a.policy, b.policy);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let cfg = small_config();
        let policy = PpoPolicy::new(4, 4, &cfg, &mut substream(3, 0)).unwrap();
        let mut buf = Vec::new();
        policy.write_checkpoint(&mut buf).unwrap();
        assert_eq!(
            PpoPolicy::read_checkpoint(&mut buf.as_slice()).unwrap(),
            policy
        );
    }
}
