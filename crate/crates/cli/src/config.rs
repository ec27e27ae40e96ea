//! Experiment configuration: a TOML file plus `--set key=value` overrides.

use std::path::{Path, PathBuf};

use aigc_alloc::baselines::SolverKind;
use aigc_alloc::trainer::TrainConfig;
use aigc_alloc::{preset_scenario, SamplerConfig, Scenario};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

fn default_solver() -> SolverKind {
    SolverKind::Codi
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_user_counts() -> Vec<usize> {
    vec![2, 4, 6]
}

fn default_sweep_solvers() -> Vec<SolverKind> {
    SolverKind::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_solver")]
    pub solver: SolverKind,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Train and evaluate on one named scenario instead of a sampled family.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// Train and evaluate on one explicit scenario.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<Scenario>,
    #[serde(default = "default_user_counts")]
    pub user_counts: Vec<usize>,
    #[serde(default = "default_sweep_solvers")]
    pub sweep_solvers: Vec<SolverKind>,
    /// Resolution grid of the `oracle` command; defaults to `{0.1, …, 1.0}`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_r_levels: Option<Vec<f64>>,
    #[serde(default)]
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            solver: default_solver(),
            seeds: default_seeds(),
            out_dir: default_out_dir(),
            preset: None,
            scenario: None,
            user_counts: default_user_counts(),
            sweep_solvers: default_sweep_solvers(),
            oracle_r_levels: None,
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads `path`, applies `overrides` (`dotted.key=value`), then resolves
    /// presets and validates.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e| CliError::Usage(format!("cannot parse config {}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let mut cfg: ExperimentConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
        cfg.resolve()?;
        Ok(cfg)
    }

    /// Replaces the sampler by a fixed one when a preset or explicit scenario
    /// is given, then validates everything.
    pub fn resolve(&mut self) -> Result<(), CliError> {
        if self.preset.is_some() && self.scenario.is_some() {
            return Err(CliError::Usage(
                "give either `preset` or `scenario`, not both".into(),
            ));
        }
        if let Some(name) = &self.preset {
            self.scenario = Some(preset_scenario(name)?);
            self.preset = None;
        }
        if let Some(s) = &self.scenario {
            s.validate()?;
            self.train.sampler = SamplerConfig::fixed(s)?;
        }
        if self.seeds.is_empty() {
            return Err(CliError::Usage("seed list is empty".into()));
        }
        if self.user_counts.contains(&0) {
            return Err(CliError::Usage("user counts must be positive".into()));
        }
        self.train.validate()?;
        Ok(())
    }

    /// Training configuration for one seed.
    pub fn for_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }
}

/// Sets `key=value` in `doc`, creating intermediate tables. The value is read
/// as a TOML literal, falling back to a plain string.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{assignment}` is not key=value")))?;
    let (key, raw) = (key.trim(), raw.trim());
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));

    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("bad override key `{key}`")));
    }
    let mut table = doc;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("override `{key}`: `{part}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
