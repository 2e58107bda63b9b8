//! Synthetic stereo-inertial sequences.
//!
//! Trajectories are smooth analytic curves in the horizontal plane (plus a
//! small vertical wave for the random shape). The camera looks along the
//! velocity with zero roll: camera z forward, x right, y down; world z up.
//! IMU samples are exact body kinematics with gravity, injected biases and
//! white noise. VO edges carry the systematic errors that the front-end
//! parameters are meant to cancel, and flow/depth rasters are rendered from a
//! random depth field consistent with the biased translation.

use nalgebra::{Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{FrontEndParams, LoopEdge, RawMeasurements, RawVoEdge};
use crate::graph::GraphNodes;
use crate::imu::{ImuCalibration, ImuSample, DEFAULT_GRAVITY};
use crate::manifold::{Pose, Rotation};
use crate::par::{self, Execution};
use crate::scale::{observations_from_rasters, CameraIntrinsics, Image, PixelSelection, ScaleRasters};

const STREAM_TRAJECTORY: u64 = 1;
const STREAM_IMU: u64 = 2;
const STREAM_LOOPS: u64 = 3;
const STREAM_ATTITUDE: u64 = 4;
const STREAM_VO: u64 = 1 << 32;
const STREAM_SCENE: u64 = 2 << 32;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Straight,
    Circle,
    FigureEight,
    RandomSpline,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectorySpec {
    pub shape: Shape,
    /// Seconds.
    pub duration: f64,
    /// Hz.
    pub camera_rate: f64,
    /// Hz.
    pub imu_rate: f64,
    /// Nominal speed in m/s.
    pub speed: f64,
    /// Radius of the circle and half-width of the figure eight, in meters.
    pub radius: f64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        TrajectorySpec {
            shape: Shape::RandomSpline,
            duration: 10.0,
            camera_rate: 10.0,
            imu_rate: 200.0,
            speed: 1.5,
            radius: 8.0,
        }
    }
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.duration > 0.0
            && self.camera_rate > 0.0
            && self.imu_rate >= 10.0 * self.camera_rate
            && self.speed > 0.0
            && self.radius > 0.0
            && self.frame_count() >= 2;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid trajectory spec {self:?}")))
        }
    }

    pub fn frame_count(&self) -> usize {
        (self.duration * self.camera_rate + 1e-9).floor() as usize + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// m/s^2/sqrt(Hz); the per-sample deviation is density * sqrt(rate).
    pub accel_noise_density: f64,
    /// rad/s/sqrt(Hz)
    pub gyro_noise_density: f64,
    pub accel_bias: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
    /// Per-axis deviation of the rotation noise on each VO edge, rad.
    pub vo_rotation_noise: f64,
    /// Per-axis deviation of the translation noise on each VO edge, m.
    pub vo_translation_noise: f64,
    pub vo_rotation_bias: Vector3<f64>,
    pub vo_translation_scale_log: f64,
    pub vo_translation_bias: Vector3<f64>,
    /// Pixels.
    pub flow_noise: f64,
    /// Per-axis deviation of the orientation reference, rad.
    pub attitude_noise: f64,
    /// Frame pairs `(i, j)` that receive a metric loop edge.
    pub loop_edges: Vec<[usize; 2]>,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            accel_noise_density: 2e-3,
            gyro_noise_density: 2e-4,
            accel_bias: Vector3::zeros(),
            gyro_bias: Vector3::new(0.002, 0.0, 0.0),
            vo_rotation_noise: 2e-3,
            vo_translation_noise: 5e-3,
            vo_rotation_bias: Vector3::zeros(),
            vo_translation_scale_log: 0.0,
            vo_translation_bias: Vector3::zeros(),
            flow_noise: 0.1,
            attitude_noise: 3e-3,
            loop_edges: Vec::new(),
        }
    }
}

impl NoiseSpec {
    pub fn noiseless() -> Self {
        NoiseSpec {
            accel_noise_density: 0.0,
            gyro_noise_density: 0.0,
            accel_bias: Vector3::zeros(),
            gyro_bias: Vector3::zeros(),
            vo_rotation_noise: 0.0,
            vo_translation_noise: 0.0,
            vo_rotation_bias: Vector3::zeros(),
            vo_translation_scale_log: 0.0,
            vo_translation_bias: Vector3::zeros(),
            flow_noise: 0.0,
            attitude_noise: 0.0,
            loop_edges: Vec::new(),
        }
    }

    /// Keeps the systematic errors and zeroes every random one.
    pub fn without_random_noise(&self) -> Self {
        NoiseSpec {
            accel_noise_density: 0.0,
            gyro_noise_density: 0.0,
            vo_rotation_noise: 0.0,
            vo_translation_noise: 0.0,
            flow_noise: 0.0,
            attitude_noise: 0.0,
            ..self.clone()
        }
    }

    /// Front-end parameters that exactly cancel the injected systematic errors.
    pub fn true_params(&self) -> FrontEndParams {
        FrontEndParams {
            vo_rotation_bias: self.vo_rotation_bias,
            vo_translation_scale_log: self.vo_translation_scale_log,
            vo_translation_bias: self.vo_translation_bias,
            imu_calib: ImuCalibration::with_biases(self.accel_bias, self.gyro_bias),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sigmas = [
            self.accel_noise_density,
            self.gyro_noise_density,
            self.vo_rotation_noise,
            self.vo_translation_noise,
            self.flow_noise,
            self.attitude_noise,
        ];
        if sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Config(format!("noise deviations must be nonnegative: {sigmas:?}")));
        }
        Ok(())
    }
}

/// Synthetic scene used to render depth, flow and texture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub min_depth: f64,
    pub max_depth: f64,
    /// Spacing in pixels of the random depth lattice.
    pub depth_cell: f64,
    /// Spacing in pixels of the random texture lattice.
    pub texture_cell: f64,
    pub selection: PixelSelection,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            min_depth: 2.0,
            max_depth: 50.0,
            depth_cell: 16.0,
            texture_cell: 3.0,
            selection: PixelSelection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinematicState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
    pub rotation: Rotation,
    /// World-frame angular velocity.
    pub angular_velocity: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Harmonic {
    amplitude: Vector3<f64>,
    frequency: f64,
    phase: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub spec: TrajectorySpec,
    harmonics: Vec<Harmonic>,
}

impl Trajectory {
    pub fn new(spec: TrajectorySpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let harmonics = if spec.shape == Shape::RandomSpline {
            let mut r = rng(seed, STREAM_TRAJECTORY);
            (0..3)
                .map(|_| {
                    let frequency = r.random_range(0.2..0.6) * spec.speed.max(0.5);
                    Harmonic {
                        // keeps the forward speed above 0.7 * speed
                        amplitude: Vector3::new(
                            0.1 * spec.speed / frequency,
                            r.random_range(0.5..2.0),
                            r.random_range(0.0..0.2),
                        ),
                        frequency,
                        phase: r.random_range(0.0..std::f64::consts::TAU),
                    }
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(Trajectory { spec, harmonics })
    }

    /// Position, velocity and acceleration at time `t`.
    fn kinematics(&self, t: f64) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        let (s, r) = (self.spec.speed, self.spec.radius);
        match self.spec.shape {
            Shape::Straight => (Vector3::new(s * t, 0.0, 0.0), Vector3::new(s, 0.0, 0.0), Vector3::zeros()),
            Shape::Circle => {
                let w = s / r;
                let (sn, cs) = (w * t).sin_cos();
                (
                    Vector3::new(r * sn, r * (1.0 - cs), 0.0),
                    Vector3::new(s * cs, s * sn, 0.0),
                    Vector3::new(-s * w * sn, s * w * cs, 0.0),
                )
            }
            Shape::FigureEight => {
                let w = s / r;
                let (s1, c1) = (w * t).sin_cos();
                let (s2, c2) = (2.0 * w * t).sin_cos();
                (
                    Vector3::new(r * s1, 0.5 * r * s2, 0.0),
                    Vector3::new(r * w * c1, r * w * c2, 0.0),
                    Vector3::new(-r * w * w * s1, -2.0 * r * w * w * s2, 0.0),
                )
            }
            Shape::RandomSpline => {
                let mut p = Vector3::new(s * t, 0.0, 0.0);
                let mut v = Vector3::new(s, 0.0, 0.0);
                let mut a = Vector3::zeros();
                for h in &self.harmonics {
                    let (sn, cs) = (h.frequency * t + h.phase).sin_cos();
                    p += h.amplitude * (sn - h.phase.sin());
                    v += h.amplitude * (h.frequency * cs);
                    a -= h.amplitude * (h.frequency * h.frequency * sn);
                }
                (p, v, a)
            }
        }
    }

    pub fn state(&self, t: f64) -> KinematicState {
        let (position, velocity, acceleration) = self.kinematics(t);
        let up = Vector3::z();
        let speed = velocity.norm();
        let forward = velocity / speed;
        let forward_dot = (acceleration - forward * forward.dot(&acceleration)) / speed;
        let cross = forward.cross(&up);
        let cross_norm = cross.norm();
        let right = cross / cross_norm;
        let cross_dot = forward_dot.cross(&up);
        let right_dot = (cross_dot - right * right.dot(&cross_dot)) / cross_norm;
        let down = forward.cross(&right);
        let down_dot = forward_dot.cross(&right) + forward.cross(&right_dot);
        let angular_velocity =
            (right.cross(&right_dot) + down.cross(&down_dot) + forward.cross(&forward_dot)) * 0.5;
        let m = nalgebra::Matrix3::from_columns(&[right, down, forward]);
        KinematicState {
            position,
            velocity,
            acceleration,
            rotation: Rotation::from_matrix(&m),
            angular_velocity,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub nodes: GraphNodes,
    pub trajectory: Trajectory,
}

pub fn generate_ground_truth(spec: &TrajectorySpec, seed: u64) -> Result<GroundTruth> {
    let trajectory = Trajectory::new(*spec, seed)?;
    let times: Vec<f64> = (0..spec.frame_count()).map(|k| k as f64 / spec.camera_rate).collect();
    let states: Vec<_> = times.iter().map(|&t| trajectory.state(t)).collect();
    let nodes = GraphNodes::new(
        states.iter().map(|s| Pose::new(s.rotation, s.position)).collect(),
        states.iter().map(|s| s.velocity).collect(),
        times,
    )?;
    Ok(GroundTruth { nodes, trajectory })
}

fn gaussian3(r: &mut ChaCha8Rng, sigma: f64) -> Vector3<f64> {
    if sigma == 0.0 {
        return Vector3::zeros();
    }
    let n = Normal::new(0.0, sigma).expect("valid deviation");
    Vector3::new(n.sample(r), n.sample(r), n.sample(r))
}

pub fn generate_imu(gt: &GroundTruth, noise: &NoiseSpec, gravity: &Vector3<f64>, seed: u64) -> Vec<ImuSample> {
    let spec = &gt.trajectory.spec;
    let count = (spec.duration * spec.imu_rate).round() as usize;
    let sqrt_rate = spec.imu_rate.sqrt();
    let mut r = rng(seed, STREAM_IMU);
    (0..=count)
        .map(|m| {
            let t = m as f64 / spec.imu_rate;
            let s = gt.trajectory.state(t);
            let rt = s.rotation.inverse();
            let accel = rt.rotate(&(s.acceleration - gravity))
                + noise.accel_bias
                + gaussian3(&mut r, noise.accel_noise_density * sqrt_rate);
            let gyro = rt.rotate(&s.angular_velocity)
                + noise.gyro_bias
                + gaussian3(&mut r, noise.gyro_noise_density * sqrt_rate);
            ImuSample::new(t, accel, gyro)
        })
        .collect()
}

/// The systematic and random errors applied to one frame pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairMotion {
    pub raw_rotation: Rotation,
    /// Biased metric translation; the raw VO reports only its direction.
    pub biased_translation: Vector3<f64>,
    /// Rotation consistent with the rendered flow.
    pub flow_rotation: Rotation,
}

pub fn pair_motion(gt: &GroundTruth, noise: &NoiseSpec, seed: u64, k: usize) -> Result<PairMotion> {
    let rel = gt.nodes.poses[k].between(&gt.nodes.poses[k + 1]);
    let mut r = rng(seed, STREAM_VO + k as u64);
    let rot_noise = gaussian3(&mut r, noise.vo_rotation_noise);
    let trans_noise = gaussian3(&mut r, noise.vo_translation_noise);
    let flow_rotation = rel.rotation.compose(&Rotation::exp(&rot_noise)?);
    let raw_rotation = flow_rotation.compose(&Rotation::exp(&-noise.vo_rotation_bias)?);
    let biased_translation =
        (rel.translation + trans_noise - noise.vo_translation_bias) / noise.vo_translation_scale_log.exp();
    if biased_translation.norm() < 1e-9 {
        return Err(Error::DegenerateGeometry(format!("frame pair {k} has no translation")));
    }
    Ok(PairMotion {
        raw_rotation,
        biased_translation,
        flow_rotation,
    })
}

/// Smooth random field on a lattice with bilinear interpolation.
fn lattice_field(r: &mut ChaCha8Rng, width: usize, height: usize, cell: f64, lo: f64, hi: f64) -> Image {
    let gw = (width as f64 / cell).ceil() as usize + 2;
    let gh = (height as f64 / cell).ceil() as usize + 2;
    let nodes: Vec<f64> = (0..gw * gh).map(|_| r.random_range(lo..hi)).collect();
    Image::from_fn(width, height, |u, v| {
        let (x, y) = (u as f64 / cell, v as f64 / cell);
        let (i, j) = (x.floor() as usize, y.floor() as usize);
        let (fx, fy) = (x - i as f64, y - j as f64);
        let at = |a: usize, b: usize| nodes[b * gw + a];
        (1.0 - fy) * ((1.0 - fx) * at(i, j) + fx * at(i + 1, j)) + fy * ((1.0 - fx) * at(i, j + 1) + fx * at(i + 1, j + 1))
    })
}

/// Depth, flow and texture rasters for frame pair `k -> k + 1`. Pixels whose
/// flow target leaves the image or falls behind the camera get zero depth.
pub fn render_pair(
    gt: &GroundTruth,
    noise: &NoiseSpec,
    scene: &SceneSpec,
    intrinsics: &CameraIntrinsics,
    seed: u64,
    k: usize,
) -> Result<ScaleRasters> {
    let motion = pair_motion(gt, noise, seed, k)?;
    // maps points of frame k into frame k + 1
    let rs = motion.flow_rotation.inverse();
    let ts = -rs.rotate(&motion.biased_translation);
    let (w, h) = (intrinsics.width, intrinsics.height);
    let mut r = rng(seed, STREAM_SCENE + k as u64);
    let mut depth = lattice_field(&mut r, w, h, scene.depth_cell, scene.min_depth, scene.max_depth);
    let intensity = lattice_field(&mut r, w, h, scene.texture_cell, 0.0, 1.0);
    let pixel_noise = (noise.flow_noise > 0.0).then(|| Normal::new(0.0, noise.flow_noise).expect("valid deviation"));
    let mut flow_x = Image::new(w, h);
    let mut flow_y = Image::new(w, h);
    for v in 0..h {
        for u in 0..w {
            let p = nalgebra::Vector2::new(u as f64, v as f64);
            let d = depth.get(u, v);
            let q = rs.rotate(&intrinsics.unproject(&p, d)) + ts;
            let target = if q.z > 0.1 { intrinsics.project(&q).ok() } else { None };
            let (mut fx, mut fy) = (0.0, 0.0);
            match target {
                Some(t) if intrinsics.contains(&t) => {
                    fx = t.x - p.x;
                    fy = t.y - p.y;
                }
                _ => depth.set(u, v, 0.0),
            }
            if let Some(n) = &pixel_noise {
                fx += n.sample(&mut r);
                fy += n.sample(&mut r);
            }
            flow_x.set(u, v, fx);
            flow_y.set(u, v, fy);
        }
    }
    Ok(ScaleRasters {
        depth,
        flow_x,
        flow_y,
        intensity,
    })
}

/// Ground-truth orientations perturbed by white noise, one per frame.
pub fn generate_attitudes(gt: &GroundTruth, noise: &NoiseSpec, seed: u64) -> Result<Vec<Rotation>> {
    let mut r = rng(seed, STREAM_ATTITUDE);
    gt.nodes
        .poses
        .iter()
        .map(|p| Ok(p.rotation.compose(&Rotation::exp(&gaussian3(&mut r, noise.attitude_noise))?)))
        .collect()
}

pub fn generate_loop_edges(gt: &GroundTruth, noise: &NoiseSpec, seed: u64) -> Result<Vec<LoopEdge>> {
    let n = gt.nodes.len();
    let mut r = rng(seed, STREAM_LOOPS);
    noise
        .loop_edges
        .iter()
        .map(|&[i, j]| {
            if j < i + 2 || j >= n {
                return Err(Error::Config(format!("loop edge ({i}, {j}) invalid for {n} frames")));
            }
            let t = gaussian3(&mut r, noise.vo_translation_noise);
            let phi = gaussian3(&mut r, noise.vo_rotation_noise);
            let xi = Vector6::new(t.x, t.y, t.z, phi.x, phi.y, phi.z);
            Ok(LoopEdge {
                i,
                j,
                measurement: gt.nodes.poses[i].between(&gt.nodes.poses[j]).compose(&Pose::exp(&xi)?),
            })
        })
        .collect()
}

pub fn generate_measurements(
    gt: &GroundTruth,
    noise: &NoiseSpec,
    scene: &SceneSpec,
    intrinsics: &CameraIntrinsics,
    seed: u64,
) -> Result<RawMeasurements> {
    generate_measurements_with(Execution::default(), gt, noise, scene, intrinsics, seed)
}

pub fn generate_measurements_with(
    mode: Execution,
    gt: &GroundTruth,
    noise: &NoiseSpec,
    scene: &SceneSpec,
    intrinsics: &CameraIntrinsics,
    seed: u64,
) -> Result<RawMeasurements> {
    noise.validate()?;
    intrinsics.validate()?;
    let gravity = Vector3::from(DEFAULT_GRAVITY);
    let n = gt.nodes.len();
    let vo_edges = par::try_map_range(mode, n - 1, |k| {
        let motion = pair_motion(gt, noise, seed, k)?;
        let rasters = render_pair(gt, noise, scene, intrinsics, seed, k)?;
        let observations = observations_from_rasters(&rasters, intrinsics, &scene.selection)
            .map_err(|e| e.context(format!("frame pair {k}")))?;
        Ok::<_, Error>(RawVoEdge {
            i: k,
            j: k + 1,
            rotation: motion.raw_rotation,
            unit_translation: motion.biased_translation.normalize(),
            observations,
        })
    })?;
    Ok(RawMeasurements {
        frame_times: gt.nodes.frame_times.clone(),
        intrinsics: *intrinsics,
        gravity,
        imu: generate_imu(gt, noise, &gravity, seed),
        vo_edges,
        loop_edges: generate_loop_edges(gt, noise, seed)?,
        attitudes: generate_attitudes(gt, noise, seed)?,
        initial_pose: gt.nodes.poses[0],
        initial_velocity: gt.nodes.velocities[0],
    })
}

/// A complete synthetic sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedSequence {
    pub seed: u64,
    pub noise: NoiseSpec,
    pub ground_truth: GroundTruth,
    pub raw: RawMeasurements,
}

pub fn simulate(
    trajectory: &TrajectorySpec,
    noise: &NoiseSpec,
    scene: &SceneSpec,
    intrinsics: &CameraIntrinsics,
    seed: u64,
) -> Result<SimulatedSequence> {
    let ground_truth = generate_ground_truth(trajectory, seed)?;
    let raw = generate_measurements(&ground_truth, noise, scene, intrinsics, seed)?;
    Ok(SimulatedSequence {
        seed,
        noise: noise.clone(),
        ground_truth,
        raw,
    })
}
