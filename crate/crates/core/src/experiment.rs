//! Multi-seed experiments on simulated data: fusion against its inputs, and
//! imperative training from a biased initialization.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::frontend::{imu_dead_reckoning, vo_chain, FrontEndParams};
use crate::imperative::{fuse_sequence, imperative_train, moving_average, TrainingSequence, TrainingTrace};
use crate::metrics::ate_rmse;
use crate::par;
use crate::sim::{simulate, SimulatedSequence};

pub fn simulate_seed(config: &RunConfig, seed: u64) -> Result<SimulatedSequence> {
    simulate(&config.trajectory, &config.noise, &config.scene, &config.camera, seed)
        .map_err(|e| e.context(format!("simulating seed {seed}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionOutcome {
    pub seed: u64,
    pub pvgo_ate: f64,
    pub vo_ate: f64,
    pub dead_reckoning_ate: f64,
    pub converged: bool,
}

impl FusionOutcome {
    pub fn pvgo_wins(&self) -> bool {
        self.pvgo_ate < self.vo_ate && self.pvgo_ate < self.dead_reckoning_ate
    }
}

/// Aligned ATE of the optimized graph, the odometry chain and IMU dead
/// reckoning, all from the uncorrected front end.
pub fn fusion_outcome(config: &RunConfig, seed: u64) -> Result<FusionOutcome> {
    let seq = simulate_seed(config, seed)?;
    let gt = &seq.ground_truth.nodes.poses;
    let params = FrontEndParams::default();
    let fused = fuse_sequence(&seq.raw, &params, &config.graph(), &config.solver)?;
    let chain = vo_chain(&fused.output.edges, &seq.raw.initial_pose, gt.len());
    let dead_reckoning = imu_dead_reckoning(&seq.raw, &params.imu_calib)?;
    Ok(FusionOutcome {
        seed,
        pvgo_ate: ate_rmse(&fused.nodes.poses, gt, true)?,
        vo_ate: ate_rmse(&chain, gt, true)?,
        dead_reckoning_ate: ate_rmse(&dead_reckoning.poses, gt, true)?,
        converged: fused.report.converged,
    })
}

pub fn fusion_experiment(config: &RunConfig) -> Result<Vec<FusionOutcome>> {
    par::try_map(config.solver.execution, &config.experiment.seeds, |&s| fusion_outcome(config, s))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingOutcome {
    pub seed: u64,
    pub params: FrontEndParams,
    pub trace: TrainingTrace,
}

impl TrainingOutcome {
    pub fn vo_reduction(&self) -> f64 {
        reduction(&self.trace.vo_curve())
    }

    pub fn pvgo_reduction(&self) -> f64 {
        reduction(&self.trace.pvgo_curve())
    }
}

/// Relative decrease from the first to the last value.
pub fn reduction(curve: &[f64]) -> f64 {
    match (curve.first(), curve.last()) {
        (Some(&a), Some(&b)) if a > 0.0 => 1.0 - b / a,
        _ => 0.0,
    }
}

/// Fraction of consecutive steps of the `window`-point moving average that
/// do not increase. Curves too short to smooth count as non-increasing.
pub fn monotone_fraction(curve: &[f64], window: usize) -> f64 {
    let smoothed = moving_average(curve, window);
    if smoothed.len() < 2 {
        return 1.0;
    }
    let steps = smoothed.len() - 1;
    smoothed.windows(2).filter(|w| w[1] <= w[0]).count() as f64 / steps as f64
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub outcomes: Vec<TrainingOutcome>,
    pub median_vo_reduction: f64,
    pub median_pvgo_reduction: f64,
    /// Front-end ATE averaged over seeds at each iteration.
    pub mean_vo_curve: Vec<f64>,
    pub mean_pvgo_curve: Vec<f64>,
    /// Monotone fraction of the seed-averaged front-end curve.
    pub monotone_fraction: f64,
    /// Smallest per-seed monotone fraction.
    pub worst_seed_monotone_fraction: f64,
}

fn mean_curve(curves: &[Vec<f64>]) -> Vec<f64> {
    let len = curves.iter().map(Vec::len).min().unwrap_or(0);
    (0..len)
        .map(|k| curves.iter().map(|c| c[k]).sum::<f64>() / curves.len() as f64)
        .collect()
}

pub fn train_seed(config: &RunConfig, seed: u64) -> Result<TrainingOutcome> {
    let seq = simulate_seed(config, seed)?;
    let data = [TrainingSequence {
        name: format!("seed {seed}"),
        raw: seq.raw,
        ground_truth: Some(seq.ground_truth.nodes.poses),
    }];
    let (params, trace) = imperative_train(&data, &FrontEndParams::default(), &config.imperative, &config.graph(), &config.solver)?;
    Ok(TrainingOutcome { seed, params, trace })
}

/// Trains every seed independently from the uncorrected front end.
pub fn training_experiment(config: &RunConfig) -> Result<TrainingSummary> {
    // training already runs sequences and finite differences in parallel
    let outcomes = config
        .experiment
        .seeds
        .iter()
        .map(|&s| train_seed(config, s))
        .collect::<Result<Vec<_>>>()?;
    summarize(outcomes, config.experiment.smoothing_window)
}

pub fn summarize(outcomes: Vec<TrainingOutcome>, window: usize) -> Result<TrainingSummary> {
    let vo: Vec<Vec<f64>> = outcomes.iter().map(|o| o.trace.vo_curve()).collect();
    let pvgo: Vec<Vec<f64>> = outcomes.iter().map(|o| o.trace.pvgo_curve()).collect();
    if vo.iter().chain(&pvgo).any(|c| c.is_empty()) {
        return Err(Error::InsufficientData("training experiment needs ground truth on every seed".into()));
    }
    let mean_vo_curve = mean_curve(&vo);
    Ok(TrainingSummary {
        median_vo_reduction: median(&outcomes.iter().map(TrainingOutcome::vo_reduction).collect::<Vec<_>>()),
        median_pvgo_reduction: median(&outcomes.iter().map(TrainingOutcome::pvgo_reduction).collect::<Vec<_>>()),
        monotone_fraction: monotone_fraction(&mean_vo_curve, window),
        worst_seed_monotone_fraction: vo.iter().map(|c| monotone_fraction(c, window)).fold(1.0, f64::min),
        mean_pvgo_curve: mean_curve(&pvgo),
        mean_vo_curve,
        outcomes,
    })
}
