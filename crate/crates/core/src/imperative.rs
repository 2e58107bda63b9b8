//! Bilevel training: front-end forward pass, pose-velocity graph solve, and
//! the one-step gradient of the converged objective back into the front-end
//! parameters. The unrolled and full-pipeline finite-difference gradients
//! are provided as oracles.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{
    frontend_forward_with, frontend_gradient, initial_nodes, layout, vo_chain, FrontEndOutput,
    FrontEndParams, ParamGroup, ParamVector, RawMeasurements, PARAM_COUNT,
};
use crate::graph::{
    assemble_jacobian_with, measurement_gradients, objective, GraphConfig, GraphNodes, OptimizedPoseStore,
    PoseVelocityGraph,
};
use crate::manifold::Pose;
use crate::metrics::ate_rmse;
use crate::par::{self, Execution};
use crate::solver::{damped_step, lm_optimize, SolveReport, SolverOptions};

/// Per-block multipliers on the learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockRates {
    pub vo_rotation_bias: f64,
    pub vo_translation_scale_log: f64,
    pub vo_translation_bias: f64,
    pub accel_bias: f64,
    pub gyro_bias: f64,
}

impl Default for BlockRates {
    fn default() -> Self {
        BlockRates {
            vo_rotation_bias: 1.0,
            vo_translation_scale_log: 1.0,
            vo_translation_bias: 1.0,
            accel_bias: 1.0,
            gyro_bias: 1.0,
        }
    }
}

impl BlockRates {
    pub fn to_vector(&self) -> ParamVector {
        use crate::frontend::layout;
        let mut v = ParamVector::zeros();
        v.rows_mut(layout::VO_ROTATION_BIAS.start, 3).fill(self.vo_rotation_bias);
        v[layout::VO_SCALE_LOG] = self.vo_translation_scale_log;
        v.rows_mut(layout::VO_TRANSLATION_BIAS.start, 3).fill(self.vo_translation_bias);
        v.rows_mut(layout::ACCEL_BIAS.start, 3).fill(self.accel_bias);
        v.rows_mut(layout::GYRO_BIAS.start, 3).fill(self.gyro_bias);
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImperativeConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub block_rates: BlockRates,
    /// Share one second-moment estimate across each parameter block, so a
    /// block moves along its gradient direction instead of its sign.
    pub blockwise_moments: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Parameter groups updated in turn, one per iteration.
    pub schedule: Vec<ParamGroup>,
    /// Upper bound on the infinity norm of `J^T r` at the solved nodes.
    pub stationarity_tolerance: f64,
}

impl Default for ImperativeConfig {
    fn default() -> Self {
        ImperativeConfig {
            iterations: 50,
            learning_rate: 1e-3,
            block_rates: BlockRates::default(),
            blockwise_moments: false,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            schedule: vec![ParamGroup::Vo, ParamGroup::Imu],
            stationarity_tolerance: 1e-6,
        }
    }
}

impl ImperativeConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && !self.schedule.is_empty()
            && self.stationarity_tolerance > 0.0
            && self.block_rates.to_vector().iter().all(|r| r.is_finite() && *r >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid imperative config {self:?}")))
        }
    }

    pub fn group_at(&self, iteration: usize) -> ParamGroup {
        self.schedule[iteration % self.schedule.len()]
    }
}

/// Front-end inputs that stay fixed while the parameters vary.
#[derive(Debug, Clone, PartialEq)]
pub struct BilevelInstance {
    pub raw: RawMeasurements,
    pub graph: GraphConfig,
    pub execution: Execution,
}

impl BilevelInstance {
    pub fn new(raw: RawMeasurements, graph: GraphConfig) -> Self {
        BilevelInstance {
            raw,
            graph,
            execution: Execution::default(),
        }
    }

    pub fn forward(&self, params: &FrontEndParams) -> Result<FrontEndOutput> {
        frontend_forward_with(self.execution, &self.raw, params)
    }

    pub fn build(&self, output: &FrontEndOutput, nodes: GraphNodes) -> Result<PoseVelocityGraph> {
        self.graph.build(nodes, output.edges.clone())
    }
}

/// Infinity norm of `J^T r` at the graph's nodes.
pub fn stationarity(graph: &PoseVelocityGraph, mode: Execution) -> Result<f64> {
    let jac = assemble_jacobian_with(mode, graph)?;
    Ok(jac.gradient().iter().fold(0.0_f64, |m, x| m.max(x.abs())))
}

/// Gradient of the converged objective with respect to the parameters,
/// holding the solved nodes fixed.
pub fn one_step_gradient(
    output: &FrontEndOutput,
    nodes: &GraphNodes,
    config: &GraphConfig,
    tolerance: f64,
) -> Result<ParamVector> {
    let graph = config.build(nodes.clone(), output.edges.clone())?;
    let gradient_norm = stationarity(&graph, Execution::default())?;
    if !(gradient_norm < tolerance) {
        return Err(Error::NonStationary {
            gradient_norm,
            threshold: tolerance,
        });
    }
    frontend_gradient(output, &measurement_gradients(nodes, &output.edges, &config.weights))
}

/// Damping values of the accepted steps, in order.
pub fn frozen_schedule(report: &SolveReport) -> Vec<f64> {
    report.accepted_damping()
}

/// Applies the damped steps of `schedule` in order. Fails if any step would
/// have been rejected.
pub fn replay_graph(graph: &PoseVelocityGraph, schedule: &[f64], mode: Execution) -> Result<GraphNodes> {
    replay_steps(graph, schedule, |g, lambda| damped_step(g, lambda, mode))
}

fn replay_steps(
    graph: &PoseVelocityGraph,
    schedule: &[f64],
    step: impl Fn(&PoseVelocityGraph, f64) -> Result<GraphNodes>,
) -> Result<GraphNodes> {
    let mut graph = graph.clone();
    let mut current = graph.objective();
    for (iteration, &lambda) in schedule.iter().enumerate() {
        let next = step(&graph, lambda)?;
        let value = objective(&next, &graph.edges, &graph.weights);
        if !(value <= current * (1.0 + 1e-10) + f64::MIN_POSITIVE) {
            return Err(Error::ScheduleReplay {
                iteration,
                reason: format!("objective rose from {current:e} to {value:e}"),
            });
        }
        current = value;
        graph.nodes = next;
    }
    Ok(graph.nodes)
}

/// Replays a recorded damping schedule from `initial` on the given front-end output.
pub fn replay(
    instance: &BilevelInstance,
    output: &FrontEndOutput,
    initial: &GraphNodes,
    schedule: &[f64],
) -> Result<GraphNodes> {
    replay_graph(&instance.build(output, initial.clone())?, schedule, instance.execution)
}

/// Objective after replaying `schedule` at the given parameters.
pub fn unrolled_objective(
    instance: &BilevelInstance,
    params: &FrontEndParams,
    initial: &GraphNodes,
    schedule: &[f64],
) -> Result<f64> {
    let output = instance.forward(params)?;
    let nodes = replay(instance, &output, initial, schedule)?;
    Ok(objective(&nodes, &output.edges, &instance.graph.weights))
}

fn central_difference(params: &FrontEndParams, step: f64, f: impl Fn(&FrontEndParams) -> Result<f64> + Sync) -> Result<ParamVector> {
    let base = params.to_vector();
    let columns: Vec<usize> = (0..PARAM_COUNT).collect();
    let parts = par::try_map(Execution::default(), &columns, |&c| {
        let at = |s: f64| {
            let mut v = base;
            v[c] += s;
            f(&params.with_vector(&v))
        };
        Ok::<_, Error>((at(step)? - at(-step)?) / (2.0 * step))
    })?;
    Ok(ParamVector::from_iterator(parts))
}

/// Gradient through `schedule.len()` unrolled solver iterations, by central
/// differences per parameter with the damping schedule frozen.
pub fn unrolled_gradient(
    instance: &BilevelInstance,
    params: &FrontEndParams,
    initial: &GraphNodes,
    schedule: &[f64],
    step: f64,
) -> Result<ParamVector> {
    central_difference(params, step, |p| unrolled_objective(instance, p, initial, schedule))
}

/// Converged objective as a function of the parameters.
pub fn pipeline_objective(
    instance: &BilevelInstance,
    params: &FrontEndParams,
    initial: &GraphNodes,
    options: &SolverOptions,
) -> Result<f64> {
    let output = instance.forward(params)?;
    let (_, report) = lm_optimize(&instance.build(&output, initial.clone())?, options)?;
    if !report.converged {
        return Err(Error::NonStationary {
            gradient_norm: report.gradient_norm,
            threshold: options.gradient_tolerance,
        });
    }
    Ok(report.final_objective)
}

/// Central differences of the full pipeline, re-solving at every evaluation.
pub fn finite_difference_gradient(
    instance: &BilevelInstance,
    params: &FrontEndParams,
    initial: &GraphNodes,
    options: &SolverOptions,
    step: f64,
) -> Result<ParamVector> {
    central_difference(params, step, |p| pipeline_objective(instance, p, initial, options))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientAgreement {
    pub relative_error: f64,
    pub cosine: f64,
}

/// Agreement of `gradient` with `reference`.
pub fn agreement(gradient: &ParamVector, reference: &ParamVector) -> GradientAgreement {
    let denom = reference.norm();
    let cos_denom = gradient.norm() * denom;
    GradientAgreement {
        relative_error: if denom > 0.0 { (gradient - reference).norm() / denom } else { gradient.norm() },
        cosine: if cos_denom > 0.0 { gradient.dot(reference) / cos_denom } else { 1.0 },
    }
}

/// Tight solver settings used by the gradient oracles.
pub fn oracle_solver_options() -> SolverOptions {
    SolverOptions {
        max_iterations: 200,
        residual_tolerance: 1e-12,
        step_tolerance: 1e-12,
        gradient_tolerance: 1e-8,
        ..SolverOptions::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub frames: usize,
    pub unrolled_iterations: usize,
    pub one_step: Vec<f64>,
    pub unrolled: Vec<f64>,
    pub finite_difference: Vec<f64>,
    pub one_step_vs_finite_difference: GradientAgreement,
    pub one_step_vs_unrolled: GradientAgreement,
    pub unrolled_vs_finite_difference: GradientAgreement,
}

/// Compares the three gradients on one instance, starting every solve from
/// `initial`.
pub fn gradient_check(
    instance: &BilevelInstance,
    params: &FrontEndParams,
    initial: &GraphNodes,
    options: &SolverOptions,
    step: f64,
) -> Result<GradientCheck> {
    let output = instance.forward(params)?;
    let (solved, report) = lm_optimize(&instance.build(&output, initial.clone())?, options)?;
    let one = one_step_gradient(&output, &solved, &instance.graph, options.gradient_tolerance.max(1e-8))?;
    let schedule = frozen_schedule(&report);
    let unrolled = unrolled_gradient(instance, params, initial, &schedule, step)?;
    let fd = finite_difference_gradient(instance, params, initial, options, step)?;
    Ok(GradientCheck {
        frames: initial.len(),
        unrolled_iterations: schedule.len(),
        one_step: one.iter().copied().collect(),
        unrolled: unrolled.iter().copied().collect(),
        finite_difference: fd.iter().copied().collect(),
        one_step_vs_finite_difference: agreement(&one, &fd),
        one_step_vs_unrolled: agreement(&one, &unrolled),
        unrolled_vs_finite_difference: agreement(&unrolled, &fd),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientTiming {
    pub frames: usize,
    pub unrolled_iterations: usize,
    pub one_step_seconds: f64,
    pub unrolled_seconds: f64,
    /// Unrolled time over one-step time.
    pub speedup: f64,
}

/// Wall-clock of one full forward-backward pass with each gradient method.
/// The one-step pass solves to convergence and differentiates once; the
/// unrolled pass replays `iterations` damped steps and differentiates through
/// all of them.
pub fn time_gradients(
    instance: &BilevelInstance,
    params: &FrontEndParams,
    initial: &GraphNodes,
    options: &SolverOptions,
    iterations: usize,
    repeats: usize,
) -> Result<GradientTiming> {
    let output = instance.forward(params)?;
    let (_, report) = lm_optimize(&instance.build(&output, initial.clone())?, options)?;
    let mut schedule = frozen_schedule(&report);
    let last = schedule.last().copied().unwrap_or(options.initial_damping);
    schedule.resize(iterations.max(schedule.len()), last);
    schedule.truncate(iterations);

    let time = |f: &dyn Fn() -> Result<()>| -> Result<Duration> {
        let mut best = Duration::MAX;
        for _ in 0..repeats.max(1) {
            let start = Instant::now();
            f()?;
            best = best.min(start.elapsed());
        }
        Ok(best)
    };
    let one = time(&|| {
        let output = instance.forward(params)?;
        let (nodes, _) = lm_optimize(&instance.build(&output, initial.clone())?, options)?;
        one_step_gradient(&output, &nodes, &instance.graph, options.gradient_tolerance.max(1e-6))?;
        Ok(())
    })?;
    let unrolled = time(&|| {
        let output = instance.forward(params)?;
        replay(instance, &output, initial, &schedule)?;
        unrolled_gradient(instance, params, initial, &schedule, 1e-6)?;
        Ok(())
    })?;
    Ok(GradientTiming {
        frames: initial.len(),
        unrolled_iterations: schedule.len(),
        one_step_seconds: one.as_secs_f64(),
        unrolled_seconds: unrolled.as_secs_f64(),
        speedup: unrolled.as_secs_f64() / one.as_secs_f64(),
    })
}

/// Result of fusing one sequence with fixed front-end parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Fusion {
    pub output: FrontEndOutput,
    pub nodes: GraphNodes,
    pub report: SolveReport,
}

/// Runs the front-end and solves the graph from the VO-chained start.
pub fn fuse_sequence(
    raw: &RawMeasurements,
    params: &FrontEndParams,
    graph: &GraphConfig,
    solver: &SolverOptions,
) -> Result<Fusion> {
    let instance = BilevelInstance {
        raw: raw.clone(),
        graph: *graph,
        execution: solver.execution,
    };
    let output = instance.forward(params)?;
    let start = initial_nodes(&output, raw)?;
    let (nodes, report) = lm_optimize(&instance.build(&output, start)?, solver)?;
    Ok(Fusion { output, nodes, report })
}

/// One training sequence. Ground truth is used for evaluation only.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSequence {
    pub name: String,
    pub raw: RawMeasurements,
    pub ground_truth: Option<Vec<Pose>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    /// Mean front-end ATE over sequences with ground truth.
    pub vo_ate: Option<f64>,
    /// Mean optimized ATE over sequences with ground truth.
    pub pvgo_ate: Option<f64>,
    /// Converged objective summed over sequences.
    pub objective: f64,
    /// One-step gradient summed over sequences.
    pub gradient: ParamVector,
    pub group: ParamGroup,
    pub params: FrontEndParams,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingTrace {
    /// One record per completed iteration, evaluated before its update.
    pub records: Vec<TraceRecord>,
    /// Evaluation at the final parameters.
    pub final_record: Option<TraceRecord>,
}

impl TrainingTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Front-end ATE per iteration followed by the final evaluation.
    pub fn vo_curve(&self) -> Vec<f64> {
        self.records
            .iter()
            .chain(&self.final_record)
            .filter_map(|r| r.vo_ate)
            .collect()
    }

    pub fn pvgo_curve(&self) -> Vec<f64> {
        self.records
            .iter()
            .chain(&self.final_record)
            .filter_map(|r| r.pvgo_ate)
            .collect()
    }
}

/// Trailing moving average with window `w`.
pub fn moving_average(xs: &[f64], w: usize) -> Vec<f64> {
    if xs.len() < w || w == 0 {
        return Vec::new();
    }
    xs.windows(w).map(|s| s.iter().sum::<f64>() / w as f64).collect()
}

/// Adaptive-moment optimizer restricted to a parameter mask per step.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    /// Learning rate per parameter.
    pub rates: ParamVector,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    blockwise: bool,
    first: ParamVector,
    second: ParamVector,
    steps: ParamVector,
}

impl Adam {
    pub fn new(config: &ImperativeConfig) -> Self {
        Adam {
            rates: config.block_rates.to_vector() * config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            blockwise: config.blockwise_moments,
            first: ParamVector::zeros(),
            second: ParamVector::zeros(),
            steps: ParamVector::zeros(),
        }
    }

    pub fn step(&mut self, theta: &ParamVector, gradient: &ParamVector, mask: &ParamVector) -> ParamVector {
        let mut squared = gradient.component_mul(gradient);
        if self.blockwise {
            for block in layout::BLOCKS {
                let mean = block.clone().map(|i| squared[i]).sum::<f64>() / block.len() as f64;
                block.for_each(|i| squared[i] = mean);
            }
        }
        let mut out = *theta;
        for i in 0..PARAM_COUNT {
            if mask[i] == 0.0 {
                continue;
            }
            self.steps[i] += 1.0;
            self.first[i] = self.beta1 * self.first[i] + (1.0 - self.beta1) * gradient[i];
            self.second[i] = self.beta2 * self.second[i] + (1.0 - self.beta2) * squared[i];
            let m = self.first[i] / (1.0 - self.beta1.powf(self.steps[i]));
            let v = self.second[i] / (1.0 - self.beta2.powf(self.steps[i]));
            out[i] -= self.rates[i] * m / (v.sqrt() + self.epsilon);
        }
        out
    }
}

struct SequenceState {
    /// Warm start for the next solve.
    nodes: GraphNodes,
}

struct SequenceStep {
    nodes: GraphNodes,
    store: OptimizedPoseStore,
    gradient: ParamVector,
    objective: f64,
    vo_ate: Option<f64>,
    pvgo_ate: Option<f64>,
}

fn solve_sequence(
    seq: &TrainingSequence,
    state: &SequenceState,
    params: &FrontEndParams,
    graph: &GraphConfig,
    solver: &SolverOptions,
    stationarity_tolerance: f64,
) -> Result<SequenceStep> {
    let instance = BilevelInstance {
        raw: seq.raw.clone(),
        graph: *graph,
        execution: solver.execution,
    };
    let output = instance.forward(params)?;
    let (nodes, report) = lm_optimize(&instance.build(&output, state.nodes.clone())?, solver)?;
    let gradient = one_step_gradient(&output, &nodes, graph, stationarity_tolerance)?;
    let mut store = OptimizedPoseStore::new();
    for (k, pose) in nodes.poses.iter().enumerate() {
        store.append(k, *pose)?;
    }
    let (vo_ate, pvgo_ate) = match &seq.ground_truth {
        Some(gt) => {
            let chain = vo_chain(&output.edges, &seq.raw.initial_pose, seq.raw.frame_count());
            (Some(ate_rmse(&chain, gt, true)?), Some(ate_rmse(&nodes.poses, gt, true)?))
        }
        None => (None, None),
    };
    Ok(SequenceStep {
        nodes,
        store,
        gradient,
        objective: report.final_objective,
        vo_ate,
        pvgo_ate,
    })
}

fn mean(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = xs.collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

/// Self-supervised training over several sequences. Each iteration runs the
/// front-end, solves every graph, sums the one-step gradients in sequence
/// order and updates the active parameter group.
pub fn imperative_train(
    dataset: &[TrainingSequence],
    initial: &FrontEndParams,
    config: &ImperativeConfig,
    graph: &GraphConfig,
    solver: &SolverOptions,
) -> Result<(FrontEndParams, TrainingTrace)> {
    imperative_train_with(dataset, initial, config, graph, solver, |_, _| Ok(()))
}

/// [`imperative_train`] with a callback after every iteration, receiving the
/// new trace record and the pose stores of every sequence.
pub fn imperative_train_with(
    dataset: &[TrainingSequence],
    initial: &FrontEndParams,
    config: &ImperativeConfig,
    graph: &GraphConfig,
    solver: &SolverOptions,
    mut on_iteration: impl FnMut(&TraceRecord, &[OptimizedPoseStore]) -> Result<()>,
) -> Result<(FrontEndParams, TrainingTrace)> {
    config.validate()?;
    graph.weights.validate()?;
    solver.validate()?;
    initial.validate()?;
    if dataset.is_empty() {
        return Err(Error::InsufficientData("training needs at least one sequence".into()));
    }
    let mode = solver.execution;

    let mut states = par::try_map(mode, dataset, |seq| {
        let output = frontend_forward_with(mode, &seq.raw, initial)?;
        let nodes = initial_nodes(&output, &seq.raw).map_err(|e| e.context(format!("sequence {}", seq.name)))?;
        Ok::<_, Error>(SequenceState { nodes })
    })?;

    let mut adam = Adam::new(config);
    let mut params = *initial;
    let mut trace = TrainingTrace::default();
    let evaluate = |states: &[SequenceState], params: &FrontEndParams, iteration: usize| {
        let pairs: Vec<(&TrainingSequence, &SequenceState)> = dataset.iter().zip(states).collect();
        par::try_map(mode, &pairs, |(seq, state)| {
            solve_sequence(seq, state, params, graph, solver, config.stationarity_tolerance)
                .map_err(|e| e.context(format!("sequence {}, iteration {iteration}", seq.name)))
        })
    };
    let record = |steps: &[SequenceStep], iteration: usize, params: &FrontEndParams, gradient: &ParamVector| TraceRecord {
        iteration,
        vo_ate: mean(steps.iter().map(|s| s.vo_ate)),
        pvgo_ate: mean(steps.iter().map(|s| s.pvgo_ate)),
        objective: steps.iter().map(|s| s.objective).sum(),
        gradient: *gradient,
        group: config.group_at(iteration),
        params: *params,
    };

    for iteration in 0..config.iterations {
        let steps = evaluate(&states, &params, iteration)?;
        let mut gradient = ParamVector::zeros();
        for s in &steps {
            gradient += s.gradient;
        }
        let rec = record(&steps, iteration, &params, &gradient);
        let stores: Vec<OptimizedPoseStore> = steps.iter().map(|s| s.store.clone()).collect();
        on_iteration(&rec, &stores)?;
        trace.records.push(rec);
        let theta = adam.step(&params.to_vector(), &gradient, &config.group_at(iteration).mask());
        params = params.with_vector(&theta);
        params
            .validate()
            .map_err(|e| e.context(format!("parameter update at iteration {iteration}")))?;
        for (state, step) in states.iter_mut().zip(steps) {
            state.nodes = step.nodes;
        }
    }
    let steps = evaluate(&states, &params, config.iterations)?;
    let mut gradient = ParamVector::zeros();
    for s in &steps {
        gradient += s.gradient;
    }
    trace.final_record = Some(record(&steps, config.iterations, &params, &gradient));
    Ok((params, trace))
}
