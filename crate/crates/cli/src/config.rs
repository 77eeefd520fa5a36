//! Run configuration: one TOML file, flag overrides on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use windcast_core::abed::AbedConfig;
use windcast_core::evaluator::StrataConfig;
use windcast_core::featurecube::WindowConfig;
use windcast_core::geogrid::{make_grid, GridSpec};
use windcast_core::synthgen::ScenarioConfig;
use windcast_core::trainer::TrainConfig;
use windcast_core::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Input bundle directory.
    pub data: PathBuf,
    /// Artifact directory.
    pub out: PathBuf,
    pub cube: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: PathBuf::from("data"),
            out: PathBuf::from("out"),
            cube: None,
            checkpoint: None,
        }
    }
}

impl Paths {
    pub fn cube(&self) -> PathBuf {
        self.cube.clone().unwrap_or_else(|| self.out.join("cube.wcub"))
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("model.wabd"))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub grid: GridSpec,
    pub window: WindowConfig,
    pub model: AbedConfig,
    pub train: TrainConfig,
    pub strata: StrataConfig,
    /// `grid` and `span_steps` here are replaced by the run's grid and window.
    pub scenario: ScenarioConfig,
    pub paths: Paths,
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    /// Applies flags, ties the scenario to the run grid and window, and validates.
    pub fn resolve(mut self, o: &Overrides) -> Result<Self> {
        if let Some(seed) = o.seed {
            self.train.seed = seed;
            self.scenario.seed = seed;
        }
        if let Some(out) = &o.out {
            self.paths.out = out.clone();
        }
        self.scenario.grid = self.grid;
        self.scenario.span_steps = self.window.span();
        make_grid(self.grid)?;
        self.window.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.strata.validate()?;
        Ok(self)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }
}
