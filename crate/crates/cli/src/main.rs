use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use pvgo::config::RunConfig;
use pvgo::experiment::{fusion_experiment, training_experiment};
use pvgo::frontend::{imu_dead_reckoning, initial_nodes, vo_chain, Checkpoint, FrontEndParams};
use pvgo::imperative::{
    fuse_sequence, gradient_check, imperative_train_with, time_gradients, BilevelInstance, TrainingSequence,
};
use pvgo::io::{self, Dataset, StampedTrajectory, TrajectoryFormat};
use pvgo::metrics::{associate, compare, evaluate, EvaluationReport, DEFAULT_SEGMENT_LENGTHS};
use pvgo::sim::simulate;
use pvgo::{Error, Pose, Result};

#[derive(Parser)]
#[command(name = "pvgo", version, about = "Pose-velocity graph optimization with imperative front-end training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic stereo-inertial dataset.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fuse odometry and IMU on one dataset.
    Optimize {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        /// Front-end parameters to apply; zero corrections otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the front end from graph residuals on one or more datasets.
    Train {
        #[arg(long = "dataset")]
        datasets: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        /// Initial parameters; zero corrections otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare an estimated trajectory with a reference.
    Eval {
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, value_enum, default_value = "tum")]
        format: FormatArg,
        /// Frame gap for the relative motion error.
        #[arg(long, default_value_t = 1)]
        delta: usize,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Per-frame aligned errors as CSV.
        #[arg(long)]
        errors: Option<PathBuf>,
    },
    /// Compare one-step, unrolled and finite-difference gradients.
    GradCheck {
        /// Uses a simulated instance from the config when absent.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Frames of the simulated accuracy instance.
        #[arg(long, default_value_t = 6)]
        frames: usize,
        /// Frames of the simulated timing instance.
        #[arg(long, default_value_t = 20)]
        timing_frames: usize,
        /// Unrolled solver iterations in the timing comparison.
        #[arg(long, default_value_t = 10)]
        iterations: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 1e-6)]
        step: f64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run a multi-seed experiment on simulated data.
    Experiment {
        #[arg(long, value_enum)]
        kind: ExperimentKind,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Tum,
    Kitti,
}

impl From<FormatArg> for TrajectoryFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Tum => TrajectoryFormat::Tum,
            FormatArg::Kitti => TrajectoryFormat::Kitti,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ExperimentKind {
    Fusion,
    Training,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn load_params(path: Option<&Path>) -> Result<FrontEndParams> {
    match path {
        Some(p) => Ok(io::read_json::<Checkpoint>(p)?.params),
        None => Ok(FrontEndParams::default()),
    }
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("report serializes"));
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error_code={}: {e}", e.code());
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate { config, output, seed } => cmd_simulate(config.as_deref(), &output, seed),
        Command::Optimize {
            dataset,
            config,
            output,
            checkpoint,
        } => cmd_optimize(&dataset, config.as_deref(), &output, checkpoint.as_deref()),
        Command::Train {
            datasets,
            config,
            output,
            iterations,
            checkpoint,
        } => cmd_train(&datasets, config.as_deref(), &output, iterations, checkpoint.as_deref()),
        Command::Eval {
            estimate,
            reference,
            format,
            delta,
            output,
            errors,
        } => cmd_eval(&estimate, &reference, format.into(), delta, output.as_deref(), errors.as_deref()),
        Command::GradCheck {
            dataset,
            config,
            checkpoint,
            frames,
            timing_frames,
            iterations,
            repeats,
            step,
            output,
        } => {
            let opts = GradCheckOptions {
                frames,
                timing_frames,
                iterations,
                repeats,
                step,
            };
            cmd_grad_check(dataset.as_deref(), config.as_deref(), checkpoint.as_deref(), &opts, output.as_deref())
        }
        Command::Experiment { kind, config, output } => cmd_experiment(kind, config.as_deref(), &output),
    }
}

#[derive(Serialize)]
struct SimulateSummary<'a> {
    output: &'a Path,
    seed: u64,
    frames: usize,
    imu_samples: usize,
}

fn cmd_simulate(config: Option<&Path>, output: &Path, seed: Option<u64>) -> Result<()> {
    let config = load_config(config)?;
    let seed = seed.unwrap_or(config.seed);
    let seq = simulate(&config.trajectory, &config.noise, &config.scene, &config.camera, seed)?;
    io::write_dataset(output, &seq, &config.trajectory, &config.scene)?;
    print_json(&SimulateSummary {
        output,
        seed,
        frames: seq.raw.frame_times.len(),
        imu_samples: seq.raw.imu.len(),
    });
    Ok(())
}

#[derive(Serialize)]
struct Comparison {
    vo: EvaluationReport,
    dead_reckoning: EvaluationReport,
    pvgo: EvaluationReport,
}

#[derive(Serialize)]
struct OptimizeSummary {
    converged: bool,
    iterations: usize,
    initial_objective: f64,
    final_objective: f64,
    comparison: Option<Comparison>,
}

fn evaluate_against(estimate: &[Pose], reference: &[Pose]) -> Result<EvaluationReport> {
    evaluate(estimate, reference, 1, &DEFAULT_SEGMENT_LENGTHS)
}

fn ground_truth_poses(data: &Dataset) -> Result<Option<&[Pose]>> {
    match &data.ground_truth {
        Some(gt) if gt.len() == data.raw.frame_times.len() => Ok(Some(&gt.poses)),
        Some(gt) => Err(Error::InvalidArgument(format!(
            "{}: ground truth has {} poses for {} frames",
            data.dir.display(),
            gt.len(),
            data.raw.frame_times.len()
        ))),
        None => Ok(None),
    }
}

fn cmd_optimize(dataset: &Path, config: Option<&Path>, output: &Path, checkpoint: Option<&Path>) -> Result<()> {
    let config = load_config(config)?;
    let params = load_params(checkpoint)?;
    let data = io::read_dataset(dataset)?;
    let fused = fuse_sequence(&data.raw, &params, &config.graph(), &config.solver)?;
    let times = data.raw.frame_times.clone();
    io::write_trajectory(
        &output.join("optimized.tum"),
        &StampedTrajectory::new(times.clone(), fused.nodes.poses.clone())?,
        TrajectoryFormat::Tum,
    )?;
    let chain = vo_chain(&fused.output.edges, &data.raw.initial_pose, times.len());
    io::write_trajectory(
        &output.join("vo.tum"),
        &StampedTrajectory::new(times, chain.clone())?,
        TrajectoryFormat::Tum,
    )?;
    io::write_json(&output.join("report.json"), &fused.report)?;
    let graph = config.graph().build(fused.nodes.clone(), fused.output.edges.clone())?;
    io::write_graph(&output.join("graph.json"), &graph)?;

    let comparison = match ground_truth_poses(&data)? {
        Some(gt) => {
            let dead_reckoning = imu_dead_reckoning(&data.raw, &params.imu_calib)?;
            let c = Comparison {
                vo: evaluate_against(&chain, gt)?,
                dead_reckoning: evaluate_against(&dead_reckoning.poses, gt)?,
                pvgo: evaluate_against(&fused.nodes.poses, gt)?,
            };
            io::write_json(&output.join("comparison.json"), &c)?;
            Some(c)
        }
        None => None,
    };
    print_json(&OptimizeSummary {
        converged: fused.report.converged,
        iterations: fused.report.iterations_used,
        initial_objective: fused.report.initial_objective,
        final_objective: fused.report.final_objective,
        comparison,
    });
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    iterations: usize,
    datasets: usize,
    initial_vo_ate: Option<f64>,
    final_vo_ate: Option<f64>,
    initial_pvgo_ate: Option<f64>,
    final_pvgo_ate: Option<f64>,
    params: FrontEndParams,
}

fn cmd_train(
    datasets: &[PathBuf],
    config: Option<&Path>,
    output: &Path,
    iterations: Option<usize>,
    checkpoint: Option<&Path>,
) -> Result<()> {
    let mut config = load_config(config)?;
    if let Some(n) = iterations {
        config.imperative.iterations = n;
    }
    let dirs = if datasets.is_empty() { &config.paths.datasets } else { datasets };
    if dirs.is_empty() {
        return Err(Error::Config("train needs at least one --dataset".into()));
    }
    let mut sequences = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let data = io::read_dataset(dir)?;
        let ground_truth = ground_truth_poses(&data)?.map(<[Pose]>::to_vec);
        sequences.push(TrainingSequence {
            name: dir.display().to_string(),
            raw: data.raw,
            ground_truth,
        });
    }
    let initial = load_params(checkpoint)?;
    let checkpoints = output.join("checkpoints");
    let (params, trace) = imperative_train_with(
        &sequences,
        &initial,
        &config.imperative,
        &config.graph(),
        &config.solver,
        |record, _| {
            let path = checkpoints.join(format!("{:06}.json", record.iteration));
            io::write_json(
                &path,
                &Checkpoint {
                    iteration: record.iteration,
                    params: record.params,
                },
            )
        },
    )?;
    io::write_json(
        &output.join("checkpoint.json"),
        &Checkpoint {
            iteration: config.imperative.iterations,
            params,
        },
    )?;
    io::write_text(&output.join("trace.csv"), &io::format_trace_csv(&trace))?;
    io::write_text(
        &output.join("curves.csv"),
        &io::format_curves_csv(&trace, config.experiment.smoothing_window),
    )?;
    io::write_json(&output.join("trace.json"), &trace)?;
    let (vo, pvgo) = (trace.vo_curve(), trace.pvgo_curve());
    print_json(&TrainSummary {
        iterations: config.imperative.iterations,
        datasets: sequences.len(),
        initial_vo_ate: vo.first().copied(),
        final_vo_ate: vo.last().copied(),
        initial_pvgo_ate: pvgo.first().copied(),
        final_pvgo_ate: pvgo.last().copied(),
        params,
    });
    Ok(())
}

/// Pairs poses by timestamp when the two files are stamped differently.
fn matched(estimate: &StampedTrajectory, reference: &StampedTrajectory) -> Result<(Vec<Pose>, Vec<Pose>, Vec<f64>)> {
    if estimate.times == reference.times {
        return Ok((estimate.poses.clone(), reference.poses.clone(), estimate.times.clone()));
    }
    let periods: Vec<f64> = reference.times.windows(2).map(|w| w[1] - w[0]).collect();
    let tolerance = 0.5 * periods.iter().copied().fold(f64::INFINITY, f64::min);
    let pairs = associate(&estimate.times, &reference.times, if tolerance.is_finite() { tolerance } else { 0.0 });
    if pairs.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "only {} estimate timestamps match the reference",
            pairs.len()
        )));
    }
    Ok((
        pairs.iter().map(|&(i, _)| estimate.poses[i]).collect(),
        pairs.iter().map(|&(_, j)| reference.poses[j]).collect(),
        pairs.iter().map(|&(i, _)| estimate.times[i]).collect(),
    ))
}

fn cmd_eval(
    estimate: &Path,
    reference: &Path,
    format: TrajectoryFormat,
    delta: usize,
    output: Option<&Path>,
    errors: Option<&Path>,
) -> Result<()> {
    let est = io::read_trajectory(estimate, format)?;
    let reference_traj = io::read_trajectory(reference, format)?;
    let (est_poses, ref_poses, times) = match format {
        TrajectoryFormat::Tum => matched(&est, &reference_traj)?,
        TrajectoryFormat::Kitti => {
            if est.len() != reference_traj.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} has {} poses but {} has {}",
                    estimate.display(),
                    est.len(),
                    reference.display(),
                    reference_traj.len()
                )));
            }
            (est.poses, reference_traj.poses, est.times)
        }
    };
    let report = evaluate(&est_poses, &ref_poses, delta, &DEFAULT_SEGMENT_LENGTHS)?;
    if let Some(path) = output {
        io::write_json(path, &report)?;
    }
    if let Some(path) = errors {
        let alignment = pvgo::metrics::align_se3(&est_poses, &ref_poses)?;
        io::write_frame_errors_csv(path, &times, &compare(&est_poses, &ref_poses, alignment)?)?;
    }
    print_json(&report);
    Ok(())
}

struct GradCheckOptions {
    frames: usize,
    timing_frames: usize,
    iterations: usize,
    repeats: usize,
    step: f64,
}

#[derive(Serialize)]
struct GradCheckReport {
    accuracy: Option<pvgo::imperative::GradientCheck>,
    accuracy_error: Option<String>,
    timing: pvgo::imperative::GradientTiming,
}

fn simulated_raw(config: &RunConfig, frames: usize) -> Result<pvgo::frontend::RawMeasurements> {
    if frames < 2 {
        return Err(Error::Config("a gradient check needs at least 2 frames".into()));
    }
    let mut spec = config.trajectory;
    spec.duration = (frames - 1) as f64 / spec.camera_rate;
    Ok(simulate(&spec, &config.noise, &config.scene, &config.camera, config.seed)?.raw)
}

fn cmd_grad_check(
    dataset: Option<&Path>,
    config: Option<&Path>,
    checkpoint: Option<&Path>,
    opts: &GradCheckOptions,
    output: Option<&Path>,
) -> Result<()> {
    let config = load_config(config)?;
    let params = load_params(checkpoint)?;
    let (accuracy_raw, timing_raw) = match dataset {
        Some(dir) => {
            let raw = io::read_dataset(dir)?.raw;
            (raw.clone(), raw)
        }
        None => (simulated_raw(&config, opts.frames)?, simulated_raw(&config, opts.timing_frames)?),
    };
    let oracle = pvgo::imperative::oracle_solver_options();
    let solver = pvgo::solver::SolverOptions {
        execution: config.solver.execution,
        ..oracle
    };

    let instance = BilevelInstance::new(accuracy_raw, config.graph());
    let accuracy = instance
        .forward(&params)
        .and_then(|out| initial_nodes(&out, &instance.raw))
        .and_then(|initial| gradient_check(&instance, &params, &initial, &solver, opts.step));

    let timing_instance = BilevelInstance::new(timing_raw, config.graph());
    let initial = initial_nodes(&timing_instance.forward(&params)?, &timing_instance.raw)?;
    let timing = time_gradients(&timing_instance, &params, &initial, &solver, opts.iterations, opts.repeats)?;

    let (accuracy, failure) = match accuracy {
        Ok(a) => (Some(a), None),
        Err(e) => (None, Some(e)),
    };
    let report = GradCheckReport {
        accuracy,
        accuracy_error: failure.as_ref().map(|e| e.to_string()),
        timing,
    };
    if let Some(path) = output {
        io::write_json(path, &report)?;
    }
    print_json(&report);
    match failure {
        Some(e) => Err(e.context("accuracy comparison")),
        None => Ok(()),
    }
}

fn cmd_experiment(kind: ExperimentKind, config: Option<&Path>, output: &Path) -> Result<()> {
    let config = load_config(config)?;
    match kind {
        ExperimentKind::Fusion => {
            let outcomes = fusion_experiment(&config)?;
            let wins = outcomes.iter().filter(|o| o.pvgo_wins()).count();
            #[derive(Serialize)]
            struct Summary<'a> {
                seeds: usize,
                pvgo_wins: usize,
                outcomes: &'a [pvgo::experiment::FusionOutcome],
            }
            let summary = Summary {
                seeds: outcomes.len(),
                pvgo_wins: wins,
                outcomes: &outcomes,
            };
            io::write_json(&output.join("fusion.json"), &summary)?;
            print_json(&summary);
        }
        ExperimentKind::Training => {
            let summary = training_experiment(&config)?;
            io::write_json(&output.join("training.json"), &summary)?;
            let mut csv = String::from("iter,mean_vo_ate,mean_pvgo_ate\n");
            for (k, (v, p)) in summary.mean_vo_curve.iter().zip(&summary.mean_pvgo_curve).enumerate() {
                csv.push_str(&format!("{k},{v},{p}\n"));
            }
            io::write_text(&output.join("mean_curves.csv"), &csv)?;
            for o in &summary.outcomes {
                io::write_text(
                    &output.join(format!("seed_{:03}_curves.csv", o.seed)),
                    &io::format_curves_csv(&o.trace, config.experiment.smoothing_window),
                )?;
            }
            #[derive(Serialize)]
            struct Brief {
                median_vo_reduction: f64,
                median_pvgo_reduction: f64,
                monotone_fraction: f64,
                worst_seed_monotone_fraction: f64,
            }
            print_json(&Brief {
                median_vo_reduction: summary.median_vo_reduction,
                median_pvgo_reduction: summary.median_pvgo_reduction,
                monotone_fraction: summary.monotone_fraction,
                worst_seed_monotone_fraction: summary.worst_seed_monotone_fraction,
            });
        }
    }
    Ok(())
}
