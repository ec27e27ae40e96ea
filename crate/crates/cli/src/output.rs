//! CSV artifacts and run manifests.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use aigc_alloc::rng::PRNG_ALGORITHM;
use aigc_alloc::trainer::LearningCurve;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::CliError;

pub const CURVE_HEADER: &str = "step,mean_reward";
pub const SWEEP_HEADER: &str = "solver,num_users,seed,total_qoe";
pub const ORACLE_HEADER: &str =
    "seed,user,resolution_ratio,diffusion_step,user_qoe,total_qoe,reward,tie_count";
pub const EVAL_HEADER: &str =
    "scenario,reward,total_qoe,penalty,resource_feasible,all_constraints_met";

/// Plain comma-separated text with `\n` line endings; floats use Rust's
/// shortest round-trip formatting.
#[derive(Debug, Clone)]
pub struct Csv {
    text: String,
}

impl Csv {
    pub fn new(header: &str) -> Self {
        Self {
            text: format!("{header}\n"),
        }
    }

    pub fn row(&mut self, fields: &[&dyn std::fmt::Display]) {
        for (i, f) in fields.iter().enumerate() {
            if i > 0 {
                self.text.push(',');
            }
            write!(self.text, "{f}").expect("write to string");
        }
        self.text.push('\n');
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, &self.text).map_err(CliError::io(path))
    }
}

pub fn curve_csv(curve: &LearningCurve) -> Csv {
    let mut csv = Csv::new(CURVE_HEADER);
    for (step, reward) in &curve.points {
        csv.row(&[step, reward]);
    }
    csv
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedMetrics {
    pub solver: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_users: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_reward: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total_qoe: Option<f64>,
}

/// Everything needed to audit or repeat a run.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    /// File-name stem shared by the manifest and its resolved config.
    #[serde(skip)]
    pub stem: String,
    pub tool: String,
    pub version: String,
    pub command: String,
    pub prng: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// A config file that reproduces this run when passed to `--config`.
    pub resolved_config: String,
    pub files: Vec<String>,
    pub metrics: Vec<SeedMetrics>,
    pub config: ExperimentConfig,
}

impl RunManifest {
    pub fn new(command: &str, config: &ExperimentConfig, started_unix: u64) -> Self {
        Self {
            stem: command.to_string(),
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            prng: PRNG_ALGORITHM.to_string(),
            started_unix,
            finished_unix: started_unix,
            resolved_config: String::new(),
            files: Vec::new(),
            metrics: Vec::new(),
            config: config.clone(),
        }
    }

    /// Writes the resolved config and the manifest itself into `dir`, after
    /// checking that every listed artifact exists. Returns the manifest path.
    pub fn finish(mut self, dir: &Path) -> Result<PathBuf, CliError> {
        let config_path = dir.join(format!("resolved_config_{}.toml", self.stem));
        let config_text = toml::to_string(&self.config)
            .map_err(|e| CliError::Failed(format!("cannot serialize config: {e}")))?;
        std::fs::write(&config_path, config_text).map_err(CliError::io(&config_path))?;
        self.resolved_config = file_name(&config_path);

        for f in &self.files {
            if !dir.join(f).is_file() {
                return Err(CliError::Failed(format!("artifact {f} was not written")));
            }
        }
        self.finished_unix = unix_now();
        let path = dir.join(format!("manifest_{}.toml", self.stem));
        let text = toml::to_string(&self)
            .map_err(|e| CliError::Failed(format!("cannot serialize manifest: {e}")))?;
        std::fs::write(&path, text).map_err(CliError::io(&path))?;
        Ok(path)
    }
}

pub fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}
