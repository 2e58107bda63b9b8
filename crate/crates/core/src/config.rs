//! Run configuration shared by every command.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ConstraintWeights, GraphConfig};
use crate::imperative::{BlockRates, ImperativeConfig};
use crate::scale::CameraIntrinsics;
use crate::sim::{NoiseSpec, SceneSpec, Shape, TrajectorySpec};
use crate::solver::SolverOptions;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Dataset directories; `train` uses all of them, other commands the first.
    pub datasets: Vec<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds of the independent runs in a multi-seed experiment.
    pub seeds: Vec<u64>,
    /// Moving-average window applied to ATE curves.
    pub smoothing_window: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: (0..10).collect(),
            smoothing_window: 5,
        }
    }
}

/// Every section is optional and unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub trajectory: TrajectorySpec,
    pub noise: NoiseSpec,
    pub scene: SceneSpec,
    pub camera: CameraIntrinsics,
    pub weights: ConstraintWeights,
    /// Hold the first velocity at its known value during optimization.
    pub anchor_initial_velocity: bool,
    pub solver: SolverOptions,
    pub imperative: ImperativeConfig,
    pub paths: PathsConfig,
    pub experiment: ExperimentConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.trajectory.validate()?;
        self.noise.validate()?;
        self.camera.validate()?;
        self.weights.validate()?;
        self.imperative.validate()?;
        if self.experiment.seeds.is_empty() || self.experiment.smoothing_window == 0 {
            return Err(Error::Config("experiment needs at least one seed and a nonzero window".into()));
        }
        Ok(())
    }

    pub fn graph(&self) -> GraphConfig {
        GraphConfig {
            weights: self.weights,
            anchor_initial_velocity: self.anchor_initial_velocity,
        }
    }

    /// Ten seeded 10 s sequences whose odometry carries a constant lateral
    /// translation bias and whose gyroscope carries a constant bias; the
    /// front end starts uncorrected and learns from graph residuals alone.
    pub fn recoverable_bias() -> Self {
        RunConfig {
            trajectory: TrajectorySpec {
                shape: Shape::RandomSpline,
                duration: 10.0,
                ..TrajectorySpec::default()
            },
            noise: NoiseSpec {
                vo_translation_bias: Vector3::new(0.05, 0.0, 0.0),
                gyro_bias: Vector3::new(0.002, 0.0, 0.0),
                ..NoiseSpec::default()
            },
            imperative: ImperativeConfig {
                iterations: 50,
                learning_rate: 1e-3,
                block_rates: BlockRates {
                    vo_rotation_bias: 0.002,
                    vo_translation_scale_log: 0.02,
                    vo_translation_bias: 1.0,
                    accel_bias: 0.5,
                    gyro_bias: 0.1,
                },
                blockwise_moments: true,
                ..ImperativeConfig::default()
            },
            ..RunConfig::default()
        }
    }

    /// Twenty seeded sequences with the default noise model.
    pub fn fusion() -> Self {
        RunConfig {
            experiment: ExperimentConfig {
                seeds: (0..20).collect(),
                ..ExperimentConfig::default()
            },
            ..RunConfig::default()
        }
    }
}
