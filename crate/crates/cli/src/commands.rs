//! The `train`, `sweep-users`, `oracle`, `gradcheck` and `evaluate` commands.

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use aigc_alloc::baselines::{default_r_levels, oracle_grid_search, SolverKind};
use aigc_alloc::gradcheck::{self, GradCheckOptions, GradCheckReport};
use aigc_alloc::rng::{stream, substream, thread_cap};
use aigc_alloc::sample_scenario;
use aigc_alloc::trainer::eval_scenarios;

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::output::{
    curve_csv, file_name, unix_now, Csv, RunManifest, SeedMetrics, EVAL_HEADER, ORACLE_HEADER,
    SWEEP_HEADER,
};
use crate::solvers::{evaluate_model, load_model, run_solver};

/// Maps `f` over `items` on up to `thread_cap()` scoped threads; results keep
/// the input order and do not depend on the thread count.
pub fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    let workers = thread_cap().min(items.len()).max(1);
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<U>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let out = f(&items[i]);
                slots.lock().expect("result slots")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|u| u.expect("every item processed"))
        .collect()
}

fn prepare_out_dir(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(CliError::io(&cfg.out_dir))?;
    Ok(cfg.out_dir.clone())
}

/// Trains `cfg.solver` once per seed; writes curves, checkpoints and a manifest.
pub fn train(cfg: &ExperimentConfig) -> Result<RunManifest, CliError> {
    let dir = prepare_out_dir(cfg)?;
    let mut manifest = RunManifest::new("train", cfg, unix_now());
    manifest.stem = format!("train_{}", cfg.solver);
    let runs = par_map(&cfg.seeds, |&seed| {
        run_solver(cfg.solver, &cfg.for_seed(seed), |_, _| {})
    });
    for run in runs {
        let run = run?;
        let curve_path = dir.join(format!("curve_{}_{}.csv", run.kind, run.seed));
        curve_csv(&run.curve).write(&curve_path)?;
        manifest.files.push(file_name(&curve_path));
        for p in run.write_checkpoints(&dir)? {
            manifest.files.push(file_name(&p));
        }
        manifest.metrics.push(SeedMetrics {
            solver: run.kind.to_string(),
            seed: run.seed,
            num_users: Some(cfg.train.sampler.num_users),
            final_reward: run.curve.final_reward(),
            total_qoe: None,
        });
    }
    Ok(manifest)
}

/// Every solver in `cfg.sweep_solvers` at every user count, per seed; the
/// reported value is the mean total QoE on the held-out evaluation set.
pub fn sweep_users(cfg: &ExperimentConfig) -> Result<RunManifest, CliError> {
    let dir = prepare_out_dir(cfg)?;
    let mut manifest = RunManifest::new("sweep_users", cfg, unix_now());
    let mut tasks = Vec::new();
    for &n in &cfg.user_counts {
        for &solver in &cfg.sweep_solvers {
            for &seed in &cfg.seeds {
                tasks.push((n, solver, seed));
            }
        }
    }
    let results = par_map(&tasks, |&(n, solver, seed)| -> Result<f64, CliError> {
        let mut tc = cfg.for_seed(seed);
        tc.sampler = tc.sampler.with_users(n);
        let run = run_solver(solver, &tc, |_, _| {})?;
        Ok(evaluate_model(&run.model, &eval_scenarios(&tc)?, &tc)?.mean_total_qoe)
    });
    let mut csv = Csv::new(SWEEP_HEADER);
    for (&(n, solver, seed), qoe) in tasks.iter().zip(results) {
        let qoe = qoe?;
        csv.row(&[&solver, &n, &seed, &qoe]);
        manifest.metrics.push(SeedMetrics {
            solver: solver.to_string(),
            seed,
            num_users: Some(n),
            final_reward: None,
            total_qoe: Some(qoe),
        });
    }
    let path = dir.join("qoe_vs_users.csv");
    csv.write(&path)?;
    manifest.files.push(file_name(&path));
    Ok(manifest)
}

/// Exhaustive grid search on the configured scenario, or on one scenario
/// drawn per seed when none is configured.
pub fn oracle(cfg: &ExperimentConfig) -> Result<(RunManifest, Vec<String>), CliError> {
    let dir = prepare_out_dir(cfg)?;
    let mut manifest = RunManifest::new("oracle", cfg, unix_now());
    let levels = cfg.oracle_r_levels.clone().unwrap_or_else(default_r_levels);
    let mut csv = Csv::new(ORACLE_HEADER);
    let mut echo = Vec::new();
    for &seed in &cfg.seeds {
        let scenario = match &cfg.scenario {
            Some(s) => s.clone(),
            None => sample_scenario(
                &mut substream(seed, stream::EVAL_SCENARIOS),
                &cfg.train.sampler,
            )?,
        };
        let res = oracle_grid_search(&scenario, &levels)?;
        let report = scenario.evaluate(&res.decision)?;
        let ties = res
            .tie_count
            .map_or_else(|| "".to_string(), |t| t.to_string());
        for (user, q) in report.per_user_qoe.iter().enumerate() {
            csv.row(&[
                &seed,
                &user,
                &res.decision.resolution_ratio[user],
                &res.decision.diffusion_step[user],
                q,
                &res.total_qoe,
                &res.reward,
                &ties,
            ]);
        }
        echo.push(format!(
            "seed {seed}: total_qoe {} reward {} tie_count {ties} ({} feasible of {} grid points)",
            res.total_qoe, res.reward, res.points_evaluated, res.grid_size
        ));
        manifest.metrics.push(SeedMetrics {
            solver: SolverKind::Oracle.to_string(),
            seed,
            num_users: Some(scenario.num_users),
            final_reward: Some(res.reward),
            total_qoe: Some(res.total_qoe),
        });
    }
    let path = dir.join("oracle.csv");
    csv.write(&path)?;
    manifest.files.push(file_name(&path));
    Ok((manifest, echo))
}

pub fn gradcheck(inject_tanh_fault: bool) -> Result<GradCheckReport, CliError> {
    Ok(gradcheck::run(&GradCheckOptions {
        inject_tanh_fault,
        ..GradCheckOptions::default()
    })?)
}

/// Re-evaluates checkpoints written by `train` (or rebuilds a fixed solver)
/// on each seed's held-out scenarios.
pub fn evaluate(cfg: &ExperimentConfig) -> Result<RunManifest, CliError> {
    let dir = prepare_out_dir(cfg)?;
    let mut manifest = RunManifest::new("evaluate", cfg, unix_now());
    manifest.stem = format!("evaluate_{}", cfg.solver);
    for &seed in &cfg.seeds {
        let tc = cfg.for_seed(seed);
        let model = load_model(cfg.solver, seed, &dir)?;
        let eval = evaluate_model(&model, &eval_scenarios(&tc)?, &tc)?;
        let mut csv = Csv::new(EVAL_HEADER);
        for (i, r) in eval.reports.iter().enumerate() {
            csv.row(&[
                &i,
                &r.reward,
                &r.total_qoe,
                &r.penalty,
                &r.resource_feasible(),
                &r.all_constraints_met(),
            ]);
        }
        let path = dir.join(format!("eval_{}_{seed}.csv", cfg.solver));
        csv.write(&path)?;
        manifest.files.push(file_name(&path));
        manifest.metrics.push(SeedMetrics {
            solver: cfg.solver.to_string(),
            seed,
            num_users: Some(cfg.train.sampler.num_users),
            final_reward: Some(eval.mean_reward),
            total_qoe: Some(eval.mean_total_qoe),
        });
    }
    Ok(manifest)
}
