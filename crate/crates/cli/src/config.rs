//! JSON run configuration with defaults for every key.

use std::f64::consts::PI;

use disco::eval::{ThetaMode, DEFAULT_HORIZONS};
use disco::hypernet::HyperConfig;
use disco::integrator::IntegratorConfig;
use disco::pdegen::{CoefficientSampler, FamilyId, GridSpec, IcSampler, PdeFamily};
use disco::train::{GepsConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed of the data generator.
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub generator: FamilyId,
    pub trajectories: usize,
    /// Points per spatial axis.
    pub points: usize,
    pub length: Option<f64>,
    pub frames: Option<usize>,
    pub dt: Option<f64>,
    pub coefficients: Option<CoefficientSampler>,
    pub ic: Option<IcSampler>,
    pub substeps: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            generator: FamilyId::Burgers1d,
            trajectories: 64,
            points: 128,
            length: None,
            frames: None,
            dt: None,
            coefficients: None,
            ic: None,
            substeps: None,
        }
    }
}

impl DataConfig {
    pub fn family(&self) -> PdeFamily {
        let base = match self.generator {
            FamilyId::Burgers1d => PdeFamily::burgers_default(),
            FamilyId::Diffreact2d => PdeFamily::diffreact_default(),
            FamilyId::Heat2d => PdeFamily::heat_default(),
        };
        PdeFamily {
            coefficients: self.coefficients.clone().unwrap_or(base.coefficients),
            ic: self.ic.unwrap_or(base.ic),
            substeps: self.substeps.or(base.substeps),
            frames: self.frames.unwrap_or(base.frames),
            dt: self.dt.unwrap_or(base.dt),
            id: self.generator,
        }
    }

    pub fn grid(&self) -> GridSpec {
        let length = self.length.unwrap_or(match self.generator {
            FamilyId::Burgers1d => 2.0 * PI,
            FamilyId::Diffreact2d => 2.0,
            FamilyId::Heat2d => 1.0,
        });
        match self.generator {
            FamilyId::Burgers1d => GridSpec::periodic_1d(self.points, length),
            FamilyId::Diffreact2d => GridSpec::neumann_2d(self.points, length),
            FamilyId::Heat2d => GridSpec::periodic_2d(self.points, length),
        }
    }

    /// Same settings with every family default written out.
    pub fn resolved(&self) -> DataConfig {
        let f = self.family();
        DataConfig {
            length: Some(self.grid().length[0]),
            frames: Some(f.frames),
            dt: Some(f.dt),
            coefficients: Some(f.coefficients),
            ic: Some(f.ic),
            substeps: f.substeps,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Disco,
    Geps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub depth: usize,
    pub c_start: usize,
    pub hyper: HyperConfig,
    pub integrator: IntegratorConfig,
    pub geps: GepsConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Disco,
            depth: 2,
            c_start: 4,
            hyper: HyperConfig::default(),
            integrator: IntegratorConfig::default(),
            geps: GepsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    #[default]
    Test,
    /// Validation and test together.
    Held,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub horizons: Vec<usize>,
    pub theta_mode: ThetaMode,
    pub split: SplitName,
    /// Code adaptation rate for the shared-plus-code model; chosen on validation windows when absent.
    pub adapt_lr: Option<f64>,
    pub max_windows: Option<usize>,
    /// Seed of the k-means restarts and the label permutations.
    pub cluster_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            horizons: DEFAULT_HORIZONS.to_vec(),
            theta_mode: ThetaMode::Reestimate,
            split: SplitName::Test,
            adapt_lr: None,
            max_windows: None,
            cluster_seed: 0,
        }
    }
}

fn invalid(path: &str, message: impl ToString) -> CliError {
    CliError::Config {
        path: path.into(),
        message: message.to_string(),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            invalid(if path.is_empty() { "." } else { &path }, e.into_inner())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.trajectories == 0 {
            return Err(invalid("data.trajectories", "must be at least 1"));
        }
        if d.points < 2 {
            return Err(invalid("data.points", "must be at least 2"));
        }
        if d.length.is_some_and(|l| !(l > 0.0)) {
            return Err(invalid("data.length", "must be positive"));
        }
        if d.frames == Some(0) {
            return Err(invalid("data.frames", "must be at least 1"));
        }
        if d.dt.is_some_and(|v| !(v > 0.0)) {
            return Err(invalid("data.dt", "must be positive"));
        }
        let m = &self.model;
        m.hyper.validate().map_err(|e| invalid("model.hyper", e))?;
        m.integrator.validate().map_err(|e| invalid("model.integrator", e))?;
        if m.depth == 0 || m.c_start == 0 {
            return Err(invalid("model", "depth and c_start must be positive"));
        }
        if m.geps.code_dim == 0 || m.geps.adapt_lrs.is_empty() {
            return Err(invalid("model.geps", "need a positive code dimension and at least one adaptation rate"));
        }
        self.train.validate().map_err(|e| invalid("train", e))?;
        if self.eval.horizons.is_empty() || self.eval.horizons.contains(&0) {
            return Err(invalid("eval.horizons", "need at least one horizon, all >= 1"));
        }
        Ok(())
    }

    /// Config with family defaults written out, as echoed to sidecar files.
    pub fn resolved(&self) -> RunConfig {
        RunConfig {
            data: self.data.resolved(),
            ..self.clone()
        }
    }
}
