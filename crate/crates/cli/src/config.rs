use std::path::{Path, PathBuf};

use clonesim::kernel::{AntigenSupplySpec, ModelParams};
use clonesim::scenarios::{build_experiment, Arm, CohortSpec, Experiment, Group, RunOptions, ScenarioSpec};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Everything a run needs. Missing sections fall back to the reference
/// parameters and the experiment presets.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    pub params: ModelParams,
    pub solver: SolverConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<Experiment>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group: Option<Group>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub antigen_dose: Option<f64>,
    /// Fully specified scenario, used instead of a preset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub custom: Option<CustomScenario>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomScenario {
    pub name: String,
    pub cohorts: Vec<CohortSpec>,
    pub antigen: AntigenSupplySpec,
    pub horizon: f64,
    #[serde(default)]
    pub observation_times: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// Fixed step (h); `tau / 64` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
    /// Relative tolerance of the step-halving check; off when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verify: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Spacing of the trajectory table (h).
    pub grid: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { grid: 0.5, path: None }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Apply `KEY=VALUE` to the model parameters. Keys use the serialized
    /// names (`r_e`, `r_N`, `tau`, `K`, ...).
    pub fn set_param(&mut self, assignment: &str) -> Result<(), CliError> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("expected KEY=VALUE, got '{assignment}'")))?;
        let (key, value) = (key.trim(), value.trim());
        let mut table = toml::Table::try_from(self.params).map_err(|e| CliError::Config(e.to_string()))?;
        let parsed = match table.get(key) {
            Some(toml::Value::Integer(_)) => value
                .parse::<i64>()
                .map(toml::Value::Integer)
                .map_err(|_| CliError::Config(format!("{key} takes an integer, got '{value}'")))?,
            Some(_) => value
                .parse::<f64>()
                .map(toml::Value::Float)
                .map_err(|_| CliError::Config(format!("{key} takes a number, got '{value}'")))?,
            None => return Err(CliError::Config(format!("unknown parameter '{key}'"))),
        };
        table.insert(key.to_string(), parsed);
        self.params = table.try_into().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn run_options(&self) -> RunOptions {
        RunOptions { step: self.solver.step, verify: self.solver.verify }
    }

    pub fn experiment(&self) -> Result<Experiment, CliError> {
        self.scenario
            .preset
            .ok_or_else(|| CliError::Config("no experiment preset given".into()))
    }

    /// Scenario for this config: the custom one, or the preset arm selected by
    /// `group` / `n0`.
    pub fn scenario(&self) -> Result<ScenarioSpec, CliError> {
        let sc = &self.scenario;
        let mut spec = if let Some(custom) = &sc.custom {
            if sc.preset.is_some() {
                return Err(CliError::Config("give either a preset or a custom scenario, not both".into()));
            }
            ScenarioSpec {
                name: custom.name.clone(),
                cohorts: custom.cohorts.clone(),
                antigen: custom.antigen,
                horizon: custom.horizon,
                observation_times: custom.observation_times.clone(),
                params: self.params,
            }
        } else {
            let experiment = self.experiment()?;
            let arm = match experiment {
                Experiment::One => {
                    if sc.group.is_some() {
                        return Err(CliError::Config("experiment1 arms are chosen with n0, not group".into()));
                    }
                    Arm::Precursors(sc.n0.ok_or_else(|| CliError::Config("experiment1 needs n0".into()))?)
                }
                _ => {
                    if sc.n0.is_some() {
                        return Err(CliError::Config(format!("{experiment} arms are chosen with group, not n0")));
                    }
                    Arm::Group(sc.group.ok_or_else(|| CliError::Config(format!("{experiment} needs a group")))?)
                }
            };
            build_experiment(experiment, arm)?.with_params(self.params)
        };
        if let Some(dose) = sc.antigen_dose {
            spec.antigen.dose = dose;
        }
        spec.validate()?;
        Ok(spec)
    }
}
