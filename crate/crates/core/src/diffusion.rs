//! Conditional diffusion actor.
//!
//! A raw action `a_K` is drawn from a standard Gaussian and denoised over `K`
//! reverse steps by a noise-prediction network conditioned on the encoded
//! scenario state and a sinusoidal step embedding. The denoised action is
//! squashed into a [`Decision`] by [`decode_decision`].

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::{next_line, Activation, BoundMlp, Graph, Mlp, Tensor, Var, CHECKPOINT_HEADER};
use crate::rng::substream;
use crate::scenario::{Decision, Scenario, R_MIN};
use crate::trainer::{CriticPair, Policy};

/// Width of the sinusoidal step embedding.
pub const STEP_EMBED_DIM: usize = 16;
/// Final denoised actions are clamped to `[-ACTION_CLAMP, ACTION_CLAMP]`.
pub const ACTION_CLAMP: f64 = 3.0;
/// Longest chain the differentiable actor loss accepts.
pub const MAX_CHAIN_LEN: usize = 64;

/// Seed of the noise streams used for deterministic evaluation.
const EVAL_NOISE_SEED: u64 = 0x005E_ED0F_E7A1;

/// Linear beta schedule with its cumulative products.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta_start: f64,
    beta_end: f64,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config(
                "diffusion chain needs at least one step".into(),
            ));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            beta_start,
            beta_end,
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Chain length `K`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }

    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    /// Steps are 1-based, `1..=K`.
    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alphas[k - 1]
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bars[k - 1]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `√ᾱ_k · a0 + √(1 − ᾱ_k) · eps`.
    pub fn forward_noising(&self, a0: &[f64], k: usize, eps: &[f64]) -> Result<Vec<f64>> {
        if k == 0 || k > self.len() {
            return Err(Error::Contract(format!(
                "step {k} outside [1, {}]",
                self.len()
            )));
        }
        if a0.len() != eps.len() {
            return Err(Error::Contract("action and noise lengths differ".into()));
        }
        let ab = self.alpha_bar(k);
        let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(a0.iter().zip(eps).map(|(a, e)| s * a + n * e).collect())
    }

    /// Reverse-step coefficients `(β_k/√(1−ᾱ_k), 1/√α_k, √β_k)`.
    fn reverse_coefficients(&self, k: usize) -> (f64, f64, f64) {
        let beta = self.beta(k);
        (
            beta / (1.0 - self.alpha_bar(k)).sqrt(),
            1.0 / self.alpha(k).sqrt(),
            beta.sqrt(),
        )
    }
}

/// Sinusoidal embedding of chain step `k`.
pub fn step_embedding(k: usize) -> [f64; STEP_EMBED_DIM] {
    let half = STEP_EMBED_DIM / 2;
    let mut out = [0.0; STEP_EMBED_DIM];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let angle = k as f64 * freq;
        out[i] = angle.sin();
        out[half + i] = angle.cos();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// Adds `√β_k · z` at every reverse step.
    Stochastic,
    Deterministic,
}

/// Noise-prediction network plus its schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionActor {
    eps_net: Mlp,
    schedule: NoiseSchedule,
    state_dim: usize,
    action_dim: usize,
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn embedding_rows(k: usize, rows: usize) -> Tensor {
    let emb = step_embedding(k);
    let data = (0..rows).flat_map(|_| emb.iter().copied()).collect();
    Tensor::matrix(rows, STEP_EMBED_DIM, data).expect("rows > 0")
}

impl DiffusionActor {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        activation: Activation,
        schedule: NoiseSchedule,
        rng: &mut R,
    ) -> Result<Self> {
        let mut sizes = vec![state_dim + action_dim + STEP_EMBED_DIM];
        sizes.extend_from_slice(hidden);
        sizes.push(action_dim);
        let eps_net = Mlp::new(&sizes, activation, Activation::Identity, rng)?;
        Self::from_parts(eps_net, schedule, state_dim, action_dim)
    }

    pub fn from_parts(
        eps_net: Mlp,
        schedule: NoiseSchedule,
        state_dim: usize,
        action_dim: usize,
    ) -> Result<Self> {
        if eps_net.input_dim() != state_dim + action_dim + STEP_EMBED_DIM {
            return Err(Error::Contract(format!(
                "noise network takes {} inputs, expected state {state_dim} + action {action_dim} + embedding {STEP_EMBED_DIM}",
                eps_net.input_dim()
            )));
        }
        if eps_net.output_dim() != action_dim {
            return Err(Error::Contract(format!(
                "noise network emits {} values for a {action_dim}-dimensional action",
                eps_net.output_dim()
            )));
        }
        Ok(Self {
            eps_net,
            schedule,
            state_dim,
            action_dim,
        })
    }

    pub fn eps_net(&self) -> &Mlp {
        &self.eps_net
    }

    pub fn eps_net_mut(&mut self) -> &mut Mlp {
        &mut self.eps_net
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn check_states(&self, states: &Tensor) -> Result<()> {
        if states.cols() != self.state_dim {
            return Err(Error::Contract(format!(
                "state has {} entries, actor expects {}",
                states.cols(),
                self.state_dim
            )));
        }
        Ok(())
    }

    /// Runs the reverse chain from `a_k` (`[B, action_dim]`). In stochastic mode
    /// `noise` supplies the per-step Gaussian draws.
    pub fn denoise<R: Rng + ?Sized>(
        &self,
        states: &Tensor,
        start: Tensor,
        mut noise: Option<&mut R>,
    ) -> Result<Tensor> {
        self.check_states(states)?;
        let rows = states.rows();
        if start.rows() != rows || start.cols() != self.action_dim {
            return Err(Error::Contract(format!(
                "initial action is {:?}, expected [{rows}, {}]",
                start.shape(),
                self.action_dim
            )));
        }
        let width = self.state_dim + self.action_dim + STEP_EMBED_DIM;
        let mut a = start;
        let mut input = vec![0.0; rows * width];
        for k in (1..=self.schedule.len()).rev() {
            let emb = step_embedding(k);
            for (r, chunk) in input.chunks_exact_mut(width).enumerate() {
                chunk[..self.state_dim].copy_from_slice(states.row(r));
                chunk[self.state_dim..self.state_dim + self.action_dim].copy_from_slice(a.row(r));
                chunk[self.state_dim + self.action_dim..].copy_from_slice(&emb);
            }
            let eps = self
                .eps_net
                .forward(&Tensor::matrix(rows, width, input.clone())?)?;
            let (c_eps, inv_sqrt_alpha, sigma) = self.schedule.reverse_coefficients(k);
            for (x, e) in a.data_mut().iter_mut().zip(eps.data()) {
                *x = (*x - e * c_eps) * inv_sqrt_alpha;
            }
            if let Some(rng) = noise.as_deref_mut() {
                for x in a.data_mut() {
                    *x += sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        Ok(a.map(|x| x.clamp(-ACTION_CLAMP, ACTION_CLAMP)))
    }

    /// Draws `a_K ~ N(0, I)` per state row and denoises it.
    pub fn sample_action<R: Rng + ?Sized>(
        &self,
        states: &Tensor,
        rng: &mut R,
        mode: SampleMode,
    ) -> Result<Tensor> {
        self.check_states(states)?;
        let start = Tensor::matrix(
            states.rows(),
            self.action_dim,
            standard_normal(rng, states.rows() * self.action_dim),
        )?;
        match mode {
            SampleMode::Deterministic => self.denoise::<R>(states, start, None),
            SampleMode::Stochastic => self.denoise(states, start, Some(rng)),
        }
    }

    /// Records the deterministic chain on `g`. Gradients reach the noise
    /// network at every step.
    pub fn denoise_graph(
        &self,
        g: &mut Graph,
        bound: &BoundMlp,
        states: Var,
        start: Tensor,
    ) -> Result<Var> {
        let rows = g.value(states).rows();
        let mut a = g.constant(start);
        for k in (1..=self.schedule.len()).rev() {
            let emb = g.constant(embedding_rows(k, rows));
            let input = g.concat(&[states, a, emb])?;
            let eps = self.eps_net.forward_graph(g, bound, input)?;
            let (c_eps, inv_sqrt_alpha, _) = self.schedule.reverse_coefficients(k);
            let scaled = g.scale(eps, c_eps);
            let diff = g.sub(a, scaled)?;
            a = g.scale(diff, inv_sqrt_alpha);
        }
        Ok(g.clamp(a, -ACTION_CLAMP, ACTION_CLAMP))
    }

    /// Writes `MLPCKPT v1`, a `schedule K beta_start beta_end` line, a
    /// `dims state action` line, then the noise network body.
    pub fn write_checkpoint<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "{CHECKPOINT_HEADER}")?;
        writeln!(
            out,
            "schedule {} {:e} {:e}",
            self.schedule.len(),
            self.schedule.beta_start,
            self.schedule.beta_end
        )?;
        writeln!(out, "dims {} {}", self.state_dim, self.action_dim)?;
        self.eps_net.write_body(out)
    }

    pub fn read_checkpoint<R: BufRead>(input: &mut R) -> Result<Self> {
        let mut lines = input.lines();
        let header = next_line(&mut lines)?;
        if header.trim_end() != CHECKPOINT_HEADER {
            return Err(Error::Checkpoint(format!("bad header `{header}`")));
        }
        let sched = next_line(&mut lines)?;
        let fields: Vec<&str> = sched.split_whitespace().collect();
        let ["schedule", k, start, end] = fields.as_slice() else {
            return Err(Error::Checkpoint(format!("bad schedule line `{sched}`")));
        };
        let bad = |what: &str| Error::Checkpoint(format!("bad {what} in schedule line"));
        let schedule = NoiseSchedule::new(
            k.parse().map_err(|_| bad("K"))?,
            start.parse().map_err(|_| bad("beta_start"))?,
            end.parse().map_err(|_| bad("beta_end"))?,
        )?;
        let dims = next_line(&mut lines)?;
        let fields: Vec<&str> = dims.split_whitespace().collect();
        let ["dims", s, a] = fields.as_slice() else {
            return Err(Error::Checkpoint(format!("bad dims line `{dims}`")));
        };
        let state_dim = s.parse().map_err(|_| bad("state dim"))?;
        let action_dim = a.parse().map_err(|_| bad("action dim"))?;
        let eps_net = Mlp::read_body(&mut lines)?;
        Self::from_parts(eps_net, schedule, state_dim, action_dim)
    }
}

/// FNV-1a over the bit patterns of a state row.
fn state_fingerprint(state: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in state {
        for byte in v.to_bits().to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// The fixed initial draw `a_K` used when evaluating a policy on `state`:
/// identical states always start from identical noise.
pub fn evaluation_start(state: &[f64], action_dim: usize) -> Vec<f64> {
    let mut rng = substream(EVAL_NOISE_SEED, state_fingerprint(state));
    standard_normal(&mut rng, action_dim)
}

impl Policy for DiffusionActor {
    fn act(&self, states: &Tensor) -> Result<Tensor> {
        let start: Vec<f64> = states
            .rows_iter()
            .flat_map(|s| evaluation_start(s, self.action_dim))
            .collect();
        let start = Tensor::matrix(states.rows(), self.action_dim, start)?;
        self.denoise::<crate::rng::SimRng>(states, start, None)
    }
}

/// Maps a raw `2N` action to an in-bounds decision (not yet budget-projected).
pub fn decode_decision(raw: &[f64], scenario: &Scenario) -> Result<Decision> {
    let n = scenario.num_users;
    if raw.len() != 2 * n {
        return Err(Error::Contract(format!(
            "raw action has {} entries, expected {}",
            raw.len(),
            2 * n
        )));
    }
    let t_max = scenario.max_diffusion_step as f64;
    let unit = |x: f64| (x.tanh() + 1.0) / 2.0;
    let resolution_ratio = raw[..n]
        .iter()
        .map(|&x| (R_MIN + unit(x) * (1.0 - R_MIN)).clamp(R_MIN, 1.0))
        .collect();
    let diffusion_step = raw[n..]
        .iter()
        .map(|&x| {
            let continuous = 1.0 + unit(x) * (t_max - 1.0);
            ((continuous + 0.5).floor()).clamp(1.0, t_max) as u32
        })
        .collect();
    Ok(Decision {
        resolution_ratio,
        diffusion_step,
    })
}

/// Value and parameter gradients of the actor objective.
#[derive(Debug, Clone)]
pub struct ActorLoss {
    pub loss: f64,
    pub grads: Vec<Tensor>,
}

/// `−mean(min(Q1, Q2))` at the deterministic chain's output from `start`,
/// differentiated through every denoising step. Critics are read-only.
pub fn actor_loss(
    actor: &DiffusionActor,
    critics: &CriticPair,
    states: &Tensor,
    start: Tensor,
) -> Result<ActorLoss> {
    actor_loss_on(Graph::new(), actor, critics, states, start)
}

/// [`actor_loss`] recorded on a caller-supplied (possibly fault-injected) tape.
pub(crate) fn actor_loss_on(
    mut g: Graph,
    actor: &DiffusionActor,
    critics: &CriticPair,
    states: &Tensor,
    start: Tensor,
) -> Result<ActorLoss> {
    if actor.schedule.len() > MAX_CHAIN_LEN {
        return Err(Error::Config(format!(
            "chain length {} exceeds the differentiable limit of {MAX_CHAIN_LEN}",
            actor.schedule.len()
        )));
    }
    actor.check_states(states)?;
    let bound = actor.eps_net.bind(&mut g, true);
    let s = g.constant(states.clone());
    let a0 = actor.denoise_graph(&mut g, &bound, s, start)?;
    let input = g.concat(&[s, a0])?;
    let q = critics.min_q_graph(&mut g, input)?;
    let mean_q = g.mean(q);
    let loss = g.scale(mean_q, -1.0);
    let grads = g.backward(loss)?;
    Ok(ActorLoss {
        loss: g.value(loss).item()?,
        grads: actor.eps_net.collect_grads(&grads, &bound),
    })
}
