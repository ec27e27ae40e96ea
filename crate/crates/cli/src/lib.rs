//! Command-line front end: configuration, solver driver, CSV artifacts.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod solvers;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::ExperimentConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "aigc-alloc",
    version,
    about = "Train and compare edge AIGC resource allocators"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Comma-separated seeds; replaces `seeds` from the config.
    #[arg(long, value_delimiter = ',')]
    pub seed: Vec<u64>,
    /// Output directory; replaces `out_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `dotted.key=value` override, applied after the file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the configured solver once per seed.
    Train(Common),
    /// Total QoE of every sweep solver against the number of users.
    SweepUsers {
        #[command(flatten)]
        common: Common,
        /// Comma-separated user counts; replaces `user_counts` from the config.
        #[arg(long, value_delimiter = ',')]
        users: Vec<usize>,
    },
    /// Exhaustive grid search on the configured scenario.
    Oracle(Common),
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, hide = true)]
        inject_tanh_fault: bool,
    },
    /// Evaluate checkpoints written by `train`.
    Evaluate(Common),
}

impl Common {
    pub fn load(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = ExperimentConfig::load(&self.config, &self.set)?;
        if !self.seed.is_empty() {
            cfg.seeds = self.seed.clone();
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        Ok(cfg)
    }
}

/// Runs a parsed command; returns the process exit status.
pub fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Train(c) => {
            let cfg = c.load()?;
            let manifest = commands::train(&cfg)?;
            for m in &manifest.metrics {
                let r = m.final_reward.map_or("none".to_string(), |r| r.to_string());
                println!("{} seed {}: final reward {r}", m.solver, m.seed);
            }
            println!("wrote {}", manifest.finish(&cfg.out_dir)?.display());
        }
        Command::SweepUsers { common, users } => {
            let mut cfg = common.load()?;
            if !users.is_empty() {
                cfg.user_counts = users;
                cfg.resolve()?;
            }
            let manifest = commands::sweep_users(&cfg)?;
            println!("wrote {}", manifest.finish(&cfg.out_dir)?.display());
        }
        Command::Oracle(c) => {
            let cfg = c.load()?;
            let (manifest, lines) = commands::oracle(&cfg)?;
            for l in lines {
                println!("{l}");
            }
            println!("wrote {}", manifest.finish(&cfg.out_dir)?.display());
        }
        Command::Gradcheck { inject_tanh_fault } => {
            let report = commands::gradcheck(inject_tanh_fault)?;
            print!("{report}");
            return Ok(if report.passed() { 0 } else { 1 });
        }
        Command::Evaluate(c) => {
            let cfg = c.load()?;
            let manifest = commands::evaluate(&cfg)?;
            for m in &manifest.metrics {
                println!(
                    "{} seed {}: mean reward {} mean total QoE {}",
                    m.solver,
                    m.seed,
                    m.final_reward.unwrap_or(f64::NAN),
                    m.total_qoe.unwrap_or(f64::NAN)
                );
            }
            println!("wrote {}", manifest.finish(&cfg.out_dir)?.display());
        }
    }
    Ok(0)
}
