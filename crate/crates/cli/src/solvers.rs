//! Uniform driver over every registered solver.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use aigc_alloc::baselines::{
    evaluate_baseline, evaluate_oracle, train_ppo_lite_with_progress, train_sac_lite_with_progress,
    BaselinePolicy, PpoOutcome, PpoPolicy, SacOutcome, SacPolicy, SolverKind,
};
use aigc_alloc::diffusion::DiffusionActor;
use aigc_alloc::rng::{stream, substream};
use aigc_alloc::trainer::{
    eval_scenarios, evaluate_policy, train_with_progress, LearningCurve, PolicyEvaluation,
    TrainConfig, TrainOutcome,
};
use aigc_alloc::{Result, Scenario};

use crate::error::CliError;

/// What a solver produced for one seed.
#[derive(Debug, Clone)]
pub enum Model {
    Codi(Box<TrainOutcome>),
    Sac(Box<SacOutcome>),
    Ppo(Box<PpoOutcome>),
    Baseline(BaselinePolicy),
    Oracle,
}

#[derive(Debug, Clone)]
pub struct SolverRun {
    pub kind: SolverKind,
    pub seed: u64,
    pub curve: LearningCurve,
    pub model: Model,
}

/// Trains (or, for fixed solvers, just instantiates) `kind` under `config`.
/// Fixed solvers report the same evaluation at every evaluation step so
/// their curves line up with the learned ones.
pub fn run_solver(
    kind: SolverKind,
    config: &TrainConfig,
    progress: impl FnMut(u64, f64),
) -> Result<SolverRun> {
    let (curve, model) = match kind {
        SolverKind::Codi => {
            let o = train_with_progress(config, progress)?;
            (o.curve.clone(), Model::Codi(Box::new(o)))
        }
        SolverKind::Sac => {
            let o = train_sac_lite_with_progress(config, progress)?;
            (o.curve.clone(), Model::Sac(Box::new(o)))
        }
        SolverKind::Ppo => {
            let o = train_ppo_lite_with_progress(config, progress)?;
            (o.curve.clone(), Model::Ppo(Box::new(o)))
        }
        SolverKind::Greedy | SolverKind::Random | SolverKind::Oracle => {
            config.validate()?;
            let model = match kind {
                SolverKind::Greedy => Model::Baseline(BaselinePolicy::Greedy),
                SolverKind::Random => Model::Baseline(BaselinePolicy::Random),
                _ => Model::Oracle,
            };
            let mut curve = LearningCurve::default();
            if config.total_steps >= config.eval_every {
                let reward = evaluate_model(&model, &eval_scenarios(config)?, config)?.mean_reward;
                let mut progress = progress;
                for step in
                    (config.eval_every..=config.total_steps).step_by(config.eval_every as usize)
                {
                    curve.push(step, reward)?;
                    progress(step, reward);
                }
            }
            (curve, model)
        }
    };
    Ok(SolverRun {
        kind,
        seed: config.seed,
        curve,
        model,
    })
}

/// Deterministic evaluation of a solver's decisions on `scenarios`.
pub fn evaluate_model(
    model: &Model,
    scenarios: &[Scenario],
    config: &TrainConfig,
) -> Result<PolicyEvaluation> {
    let encoder = config.encoder();
    match model {
        Model::Codi(o) => evaluate_policy(&o.actor, scenarios, &encoder),
        Model::Sac(o) => evaluate_policy(&o.policy, scenarios, &encoder),
        Model::Ppo(o) => evaluate_policy(&o.policy, scenarios, &encoder),
        Model::Baseline(p) => {
            let mut rng = substream(config.seed, stream::BASELINE);
            evaluate_baseline(p, scenarios, &encoder, &mut rng)
        }
        Model::Oracle => evaluate_oracle(scenarios),
    }
}

fn checkpoint_names(kind: SolverKind, seed: u64) -> Vec<String> {
    match kind {
        SolverKind::Codi => vec![
            format!("actor_codi_{seed}.ckpt"),
            format!("critic1_codi_{seed}.ckpt"),
            format!("critic2_codi_{seed}.ckpt"),
        ],
        SolverKind::Sac => vec![
            format!("policy_sac_{seed}.ckpt"),
            format!("critic1_sac_{seed}.ckpt"),
            format!("critic2_sac_{seed}.ckpt"),
        ],
        SolverKind::Ppo => vec![format!("policy_ppo_{seed}.ckpt")],
        _ => Vec::new(),
    }
}

fn write_with(
    path: &Path,
    body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> std::result::Result<(), CliError> {
    let file = File::create(path).map_err(CliError::io(path))?;
    let mut out = BufWriter::new(file);
    body(&mut out)
        .and_then(|_| out.flush())
        .map_err(CliError::io(path))
}

impl SolverRun {
    /// Writes every network of the run into `dir`; returns the paths.
    pub fn write_checkpoints(&self, dir: &Path) -> std::result::Result<Vec<PathBuf>, CliError> {
        let paths: Vec<PathBuf> = checkpoint_names(self.kind, self.seed)
            .iter()
            .map(|n| dir.join(n))
            .collect();
        match &self.model {
            Model::Codi(o) => {
                write_with(&paths[0], |w| o.actor.write_checkpoint(w))?;
                write_with(&paths[1], |w| o.critics.q1.write_checkpoint(w))?;
                write_with(&paths[2], |w| o.critics.q2.write_checkpoint(w))?;
            }
            Model::Sac(o) => {
                write_with(&paths[0], |w| o.policy.write_checkpoint(w))?;
                write_with(&paths[1], |w| o.critics.q1.write_checkpoint(w))?;
                write_with(&paths[2], |w| o.critics.q2.write_checkpoint(w))?;
            }
            Model::Ppo(o) => write_with(&paths[0], |w| o.policy.write_checkpoint(w))?,
            Model::Baseline(_) | Model::Oracle => {}
        }
        Ok(paths)
    }
}

/// A deployable policy restored from `dir` (learned solvers) or rebuilt (fixed ones).
pub fn load_model(kind: SolverKind, seed: u64, dir: &Path) -> std::result::Result<Model, CliError> {
    let open = |name: String| -> std::result::Result<BufReader<File>, CliError> {
        let path = dir.join(name);
        File::open(&path)
            .map(BufReader::new)
            .map_err(|e| CliError::Usage(format!("cannot open checkpoint {}: {e}", path.display())))
    };
    let names = checkpoint_names(kind, seed);
    Ok(match kind {
        SolverKind::Codi => {
            let actor = DiffusionActor::read_checkpoint(&mut open(names[0].clone())?)?;
            Model::Codi(Box::new(TrainOutcome {
                critics: read_critics(&names[1..], &open)?,
                actor,
                curve: LearningCurve::default(),
            }))
        }
        SolverKind::Sac => {
            let policy = SacPolicy::read_checkpoint(&mut open(names[0].clone())?)?;
            Model::Sac(Box::new(SacOutcome {
                critics: read_critics(&names[1..], &open)?,
                policy,
                curve: LearningCurve::default(),
            }))
        }
        SolverKind::Ppo => Model::Ppo(Box::new(PpoOutcome {
            policy: PpoPolicy::read_checkpoint(&mut open(names[0].clone())?)?,
            curve: LearningCurve::default(),
        })),
        SolverKind::Greedy => Model::Baseline(BaselinePolicy::Greedy),
        SolverKind::Random => Model::Baseline(BaselinePolicy::Random),
        SolverKind::Oracle => Model::Oracle,
    })
}

fn read_critics(
    names: &[String],
    open: &dyn Fn(String) -> std::result::Result<BufReader<File>, CliError>,
) -> std::result::Result<aigc_alloc::trainer::CriticPair, CliError> {
    use aigc_alloc::nn::Mlp;
    let q1 = Mlp::read_checkpoint(&mut open(names[0].clone())?)?;
    let q2 = Mlp::read_checkpoint(&mut open(names[1].clone())?)?;
    // Targets are not persisted; evaluation never reads them.
    Ok(aigc_alloc::trainer::CriticPair::from_nets(q1, q2, 1.0)?)
}
