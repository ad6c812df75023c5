//! Run configuration: a versioned JSON document shared by every subcommand.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mssf::bcrw::{BcrwState, StartRegion, DEFAULT_MAX_STEPS};
use mssf::em::EmConfig;
use mssf::model::Point;
use mssf::sampler::{CovariateFormula, SamplingScheme};
use mssf::study::Estimator;
use mssf::{BcrwScenario, HmmParams, Matrix};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<ScenarioSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landscape: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choice_sets: Option<PathBuf>,
    /// Fit JSON consumed by `decode`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling: Option<SamplingBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub formula: Option<CovariateFormula>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimator: Option<Estimator>,
    #[serde(default)]
    pub em: EmConfig<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub study: Option<StudyBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equivalence: Option<EquivalenceBlock>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingBlock {
    pub scheme: SamplingScheme<f64>,
    pub n_controls: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyBlock {
    pub n_replicates: usize,
    pub n_controls: usize,
    #[serde(default)]
    pub schemes: Vec<SamplingScheme<f64>>,
    pub estimators: Vec<Estimator>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquivalenceBlock {
    pub n_controls: usize,
    pub schemes: Vec<SamplingScheme<f64>>,
}

/// A movement scenario: a named preset with optional overrides, or a full
/// description when `preset` is absent.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub states: Option<Vec<BcrwState<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targets: Option<Vec<Point<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_region: Option<StartRegion<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
}

impl ScenarioSpec {
    pub fn build(&self) -> Result<BcrwScenario> {
        let base = match self.preset.as_deref() {
            Some("table1") => Some(BcrwScenario::table1()),
            Some(other) => bail!("unknown scenario preset '{other}' (known: table1)"),
            None => None,
        };
        let need = |what: &str| anyhow::anyhow!("scenario.{what} is required without a preset");
        let transition = match (&self.transition, &base) {
            (Some(rows), _) => {
                if rows.iter().any(|r| r.len() != rows.len()) {
                    bail!("scenario.transition must be square");
                }
                Matrix::from_rows(rows)
            }
            (None, Some(b)) => b.hmm.transition.clone(),
            (None, None) => return Err(need("transition")),
        };
        let hmm = match (&self.initial, &base) {
            (Some(init), _) => HmmParams::new(transition, init.clone())?,
            (None, Some(b)) if self.transition.is_none() => b.hmm.clone(),
            _ => HmmParams::with_uniform_initial(transition)?,
        };
        let states = match (&self.states, &base) {
            (Some(s), _) => s.clone(),
            (None, Some(b)) => b.states.clone(),
            (None, None) => return Err(need("states")),
        };
        let targets = match (&self.targets, &base) {
            (Some(t), _) => t.clone(),
            (None, Some(b)) => b.targets.clone(),
            (None, None) => return Err(need("targets")),
        };
        let start_region = match (self.start_region, &base) {
            (Some(r), _) => r,
            (None, Some(b)) => b.start_region,
            (None, None) => return Err(need("start_region")),
        };
        let stop_radius = match (self.stop_radius, &base) {
            (Some(r), _) => r,
            (None, Some(b)) => b.stop_radius,
            (None, None) => return Err(need("stop_radius")),
        };
        let max_steps = self.max_steps.unwrap_or(DEFAULT_MAX_STEPS);
        Ok(BcrwScenario::new(
            hmm,
            states,
            targets,
            start_region,
            stop_radius,
            max_steps,
        )?)
    }
}

impl RunConfig {
    /// Parses and checks the version; relative paths are resolved against
    /// the directory holding the config file.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self {
                version: SCHEMA_VERSION,
                ..Self::default()
            });
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if cfg.version != SCHEMA_VERSION {
            bail!(
                "config version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.version
            );
        }
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.trajectory,
            &mut cfg.landscape,
            &mut cfg.choice_sets,
            &mut cfg.fit,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.em.validate()?;
        if let Some(s) = &cfg.sampling {
            s.scheme.validate()?;
            if s.n_controls == 0 {
                bail!("sampling.n_controls must be at least 1");
            }
        }
        Ok(cfg)
    }

    pub fn scenario(&self) -> Result<BcrwScenario> {
        match &self.scenario {
            Some(s) => s.build(),
            None => Ok(BcrwScenario::table1()),
        }
    }

    pub fn require<'a, T>(field: &'a Option<T>, name: &str) -> Result<&'a T> {
        field.as_ref().with_context(|| format!("config lacks '{name}'"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"version": 1, "sed": 3}"#).unwrap_err();
        assert!(err.to_string().contains("unknown field"));
        let err = serde_json::from_str::<RunConfig>(r#"{"version": 1, "em": {"n_state": 2}}"#).unwrap_err();
        assert!(err.to_string().contains("unknown field"));
    }

    #[test]
    fn preset_overrides() {
        let spec: ScenarioSpec = serde_json::from_str(r#"{"preset": "table1", "max_steps": 1}"#).unwrap();
        let s = spec.build().unwrap();
        assert_eq!(s.max_steps, 1);
        assert_eq!(s.states, BcrwScenario::table1().states);
    }

    #[test]
    fn full_scenario_without_preset_needs_every_block() {
        let spec: ScenarioSpec = serde_json::from_str(r#"{"transition": [[1.0]]}"#).unwrap();
        assert!(spec.build().unwrap_err().to_string().contains("states"));
    }
}
