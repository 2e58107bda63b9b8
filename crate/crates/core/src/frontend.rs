//! Parametric front-end standing in for the learned odometry networks.
//!
//! Raw monocular VO (rotation plus unit translation) is corrected by a global
//! rotation bias, a log-scale factor and a translation bias, with the metric
//! scale supplied by the closed-form scale solver. IMU samples are corrected
//! by learnable accelerometer and gyroscope biases before preintegration.
//! Every output carries its Jacobian with respect to the 13 parameters.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EdgeSet, GraphNodes, ImuEdge, MeasurementGradients, VoEdge};
use crate::imu::{preintegrate_with_bias_jacobian, ImuCalibration, ImuSample};
use crate::manifold::{skew, so3_right_jacobian, Pose, Rotation};
use crate::par::{self, Execution};
use crate::scale::{solve_scale_with_gradient, CameraIntrinsics, ScaleObservation};

pub const PARAM_COUNT: usize = 13;
pub type ParamVector = SVector<f64, PARAM_COUNT>;

/// Index ranges inside [`ParamVector`].
pub mod layout {
    use std::ops::Range;
    pub const VO_ROTATION_BIAS: Range<usize> = 0..3;
    pub const VO_SCALE_LOG: usize = 3;
    pub const VO_TRANSLATION_BIAS: Range<usize> = 4..7;
    pub const ACCEL_BIAS: Range<usize> = 7..10;
    pub const GYRO_BIAS: Range<usize> = 10..13;
    pub const BLOCKS: [Range<usize>; 5] = [VO_ROTATION_BIAS, 3..4, VO_TRANSLATION_BIAS, ACCEL_BIAS, GYRO_BIAS];
    pub const NAMES: [&str; 13] = [
        "vo_rotation_bias.x",
        "vo_rotation_bias.y",
        "vo_rotation_bias.z",
        "vo_translation_scale_log",
        "vo_translation_bias.x",
        "vo_translation_bias.y",
        "vo_translation_bias.z",
        "accel_bias.x",
        "accel_bias.y",
        "accel_bias.z",
        "gyro_bias.x",
        "gyro_bias.y",
        "gyro_bias.z",
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct FrontEndParams {
    /// Right-multiplied onto every raw relative rotation.
    pub vo_rotation_bias: Vector3<f64>,
    pub vo_translation_scale_log: f64,
    pub vo_translation_bias: Vector3<f64>,
    pub imu_calib: ImuCalibration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Vo,
    Imu,
}

impl ParamGroup {
    pub fn mask(self) -> ParamVector {
        ParamVector::from_fn(|i, _| match (self, i < layout::ACCEL_BIAS.start) {
            (ParamGroup::Vo, true) | (ParamGroup::Imu, false) => 1.0,
            _ => 0.0,
        })
    }
}

impl FrontEndParams {
    pub fn to_vector(&self) -> ParamVector {
        let mut v = ParamVector::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.vo_rotation_bias);
        v[layout::VO_SCALE_LOG] = self.vo_translation_scale_log;
        v.fixed_rows_mut::<3>(4).copy_from(&self.vo_translation_bias);
        v.fixed_rows_mut::<3>(7).copy_from(&self.imu_calib.accel_bias);
        v.fixed_rows_mut::<3>(10).copy_from(&self.imu_calib.gyro_bias);
        v
    }

    /// Rebuilds parameters from a vector, keeping this instance's covariances.
    pub fn with_vector(&self, v: &ParamVector) -> FrontEndParams {
        FrontEndParams {
            vo_rotation_bias: v.fixed_rows::<3>(0).into_owned(),
            vo_translation_scale_log: v[layout::VO_SCALE_LOG],
            vo_translation_bias: v.fixed_rows::<3>(4).into_owned(),
            imu_calib: ImuCalibration {
                accel_bias: v.fixed_rows::<3>(7).into_owned(),
                gyro_bias: v.fixed_rows::<3>(10).into_owned(),
                ..self.imu_calib
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.to_vector().iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("front-end parameters must be finite".into()));
        }
        self.imu_calib.validate()
    }
}

/// Raw monocular relative pose between consecutive frames `i` and `i + 1`,
/// with the flow and depth observations used to recover its scale.
#[derive(Debug, Clone, PartialEq)]
pub struct RawVoEdge {
    pub i: usize,
    pub j: usize,
    pub rotation: Rotation,
    pub unit_translation: Vector3<f64>,
    pub observations: Vec<ScaleObservation>,
}

/// Metric loop-closure constraint, accepted as given.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopEdge {
    pub i: usize,
    pub j: usize,
    pub measurement: Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawMeasurements {
    pub frame_times: Vec<f64>,
    pub intrinsics: CameraIntrinsics,
    pub gravity: Vector3<f64>,
    pub imu: Vec<ImuSample>,
    pub vo_edges: Vec<RawVoEdge>,
    pub loop_edges: Vec<LoopEdge>,
    /// Orientation reference per frame, used only to remove gravity from the
    /// IMU interval that starts at that frame.
    pub attitudes: Vec<Rotation>,
    /// Known pose and velocity of the first frame; the pose is the gauge.
    pub initial_pose: Pose,
    pub initial_velocity: Vector3<f64>,
}

impl RawMeasurements {
    pub fn frame_count(&self) -> usize {
        self.frame_times.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.frame_count();
        if n < 2 {
            return Err(Error::InsufficientData(format!("need at least 2 frames, got {n}")));
        }
        if self.frame_times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("frame times must be strictly increasing".into()));
        }
        if self.attitudes.len() != n {
            return Err(Error::InvalidArgument(format!(
                "expected {n} attitude references, got {}",
                self.attitudes.len()
            )));
        }
        if self.vo_edges.len() != n - 1 {
            return Err(Error::InvalidArgument(format!(
                "expected {} VO edges, got {}",
                n - 1,
                self.vo_edges.len()
            )));
        }
        for (k, e) in self.vo_edges.iter().enumerate() {
            if e.i != k || e.j != k + 1 {
                return Err(Error::InvalidArgument(format!(
                    "VO edge {k} connects ({}, {}) instead of consecutive frames",
                    e.i, e.j
                )));
            }
            if (e.unit_translation.norm() - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!("VO edge {k} translation is not unit length")));
            }
        }
        for e in &self.loop_edges {
            if e.j < e.i + 2 || e.j >= n {
                return Err(Error::InvalidArgument(format!("invalid loop edge ({}, {})", e.i, e.j)));
            }
        }
        self.intrinsics.validate()
    }
}

/// Corrected odometry plus the derivatives of every corrected measurement
/// with respect to the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FrontEndOutput {
    /// Adjacent VO edges in frame order, followed by loop edges.
    pub edges: EdgeSet,
    /// `d[dt; dphi] / dθ` for each adjacent VO edge. Loop edges do not depend on θ.
    pub vo_jacobians: Vec<SMatrix<f64, 6, PARAM_COUNT>>,
    /// `d[dphi; dv; dp] / dθ` for each IMU edge.
    pub imu_jacobians: Vec<SMatrix<f64, 9, PARAM_COUNT>>,
    pub scales: Vec<f64>,
}

fn correct_vo(
    e: &RawVoEdge,
    params: &FrontEndParams,
    intrinsics: &CameraIntrinsics,
) -> Result<(Pose, SMatrix<f64, 6, PARAM_COUNT>, f64)> {
    let rotation = e.rotation.compose(&Rotation::exp(&params.vo_rotation_bias)?);
    // the scale solver maps points of frame i into frame j
    let rs = rotation.inverse();
    let tau_s = -rs.rotate(&e.unit_translation);
    let (solved, grad) = solve_scale_with_gradient(&e.observations, &rs, &tau_s, intrinsics)
        .map_err(|err| err.context(format!("scale of VO edge ({}, {})", e.i, e.j)))?;
    let s = solved.scale;
    let gain = params.vo_translation_scale_log.exp();
    let translation = e.unit_translation * (gain * s) + params.vo_translation_bias;

    let jr = so3_right_jacobian(&params.vo_rotation_bias);
    let ds_dphi = -(rotation.matrix().transpose() * grad.rotation) + skew(&tau_s).transpose() * grad.unit_translation;
    let ds_dbias = jr.transpose() * ds_dphi;

    let mut jac = SMatrix::<f64, 6, PARAM_COUNT>::zeros();
    jac.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(e.unit_translation * gain * ds_dbias.transpose()));
    jac.fixed_view_mut::<3, 1>(0, layout::VO_SCALE_LOG)
        .copy_from(&(e.unit_translation * (gain * s)));
    jac.fixed_view_mut::<3, 3>(0, 4).copy_from(&Matrix3::identity());
    jac.fixed_view_mut::<3, 3>(3, 0).copy_from(&jr);
    Ok((Pose::new(rotation, translation), jac, s))
}

/// Runs the front-end on one sequence.
pub fn frontend_forward(raw: &RawMeasurements, params: &FrontEndParams) -> Result<FrontEndOutput> {
    frontend_forward_with(Execution::default(), raw, params)
}

pub fn frontend_forward_with(
    mode: Execution,
    raw: &RawMeasurements,
    params: &FrontEndParams,
) -> Result<FrontEndOutput> {
    raw.validate()?;
    params.validate()?;
    let n = raw.frame_count();
    let vo = par::try_map(mode, &raw.vo_edges, |e| correct_vo(e, params, &raw.intrinsics))?;
    let pairs: Vec<usize> = (0..n - 1).collect();
    let imu = par::try_map(mode, &pairs, |&k| {
        preintegrate_with_bias_jacobian(
            &raw.imu,
            &raw.attitudes[k],
            &raw.gravity,
            raw.frame_times[k],
            raw.frame_times[k + 1],
            &params.imu_calib,
        )
        .map_err(|err| err.context(format!("IMU interval {k}")))
    })?;

    let mut edges = EdgeSet::default();
    let mut vo_jacobians = Vec::with_capacity(n - 1);
    let mut scales = Vec::with_capacity(n - 1);
    for (e, (pose, jac, s)) in raw.vo_edges.iter().zip(vo) {
        edges.vo_edges.push(VoEdge {
            i: e.i,
            j: e.j,
            measurement: pose,
        });
        vo_jacobians.push(jac);
        scales.push(s);
    }
    for l in &raw.loop_edges {
        edges.vo_edges.push(VoEdge {
            i: l.i,
            j: l.j,
            measurement: l.measurement,
        });
    }
    let mut imu_jacobians = Vec::with_capacity(n - 1);
    for (k, (pre, bias)) in imu.into_iter().enumerate() {
        let mut jac = SMatrix::<f64, 9, PARAM_COUNT>::zeros();
        let blocks = [
            (0, 7, bias.rotation_accel),
            (0, 10, bias.rotation_gyro),
            (3, 7, bias.velocity_accel),
            (3, 10, bias.velocity_gyro),
            (6, 7, bias.position_accel),
            (6, 10, bias.position_gyro),
        ];
        for (r, c, m) in blocks {
            jac.fixed_view_mut::<3, 3>(r, c).copy_from(&m);
        }
        edges.imu_edges.push(ImuEdge { k, preintegration: pre });
        imu_jacobians.push(jac);
    }
    Ok(FrontEndOutput {
        edges,
        vo_jacobians,
        imu_jacobians,
        scales,
    })
}

/// Chains upstream gradients on the corrected measurements back to θ.
pub fn frontend_gradient(output: &FrontEndOutput, upstream: &MeasurementGradients) -> Result<ParamVector> {
    if upstream.vo.len() < output.vo_jacobians.len() || upstream.imu.len() != output.imu_jacobians.len() {
        return Err(Error::InvalidArgument(format!(
            "upstream gradients ({} VO, {} IMU) do not match front-end outputs ({} VO, {} IMU)",
            upstream.vo.len(),
            upstream.imu.len(),
            output.vo_jacobians.len(),
            output.imu_jacobians.len()
        )));
    }
    let mut g = ParamVector::zeros();
    for (j, u) in output.vo_jacobians.iter().zip(&upstream.vo) {
        g += j.transpose() * u;
    }
    for (j, u) in output.imu_jacobians.iter().zip(&upstream.imu) {
        g += j.transpose() * u;
    }
    Ok(g)
}

/// Integrates the bias-corrected IMU stream from the known initial state.
/// Each interval removes gravity with the attitude reached so far.
pub fn imu_dead_reckoning(raw: &RawMeasurements, calib: &ImuCalibration) -> Result<GraphNodes> {
    let n = raw.frame_count();
    let mut poses = Vec::with_capacity(n);
    let mut velocities = Vec::with_capacity(n);
    let (mut pose, mut velocity) = (raw.initial_pose, raw.initial_velocity);
    poses.push(pose);
    velocities.push(velocity);
    for k in 0..n - 1 {
        let (p, _) = preintegrate_with_bias_jacobian(
            &raw.imu,
            &pose.rotation,
            &raw.gravity,
            raw.frame_times[k],
            raw.frame_times[k + 1],
            calib,
        )?;
        let translation = pose.translation + velocity * p.duration + pose.rotation.rotate(&p.delta_position);
        velocity += pose.rotation.rotate(&p.delta_velocity);
        pose = Pose::new(pose.rotation.compose(&p.delta_rotation), translation);
        poses.push(pose);
        velocities.push(velocity);
    }
    GraphNodes::new(poses, velocities, raw.frame_times.clone())
}

/// Composes adjacent VO edges from the initial pose.
pub fn vo_chain(edges: &EdgeSet, initial_pose: &Pose, frame_count: usize) -> Vec<Pose> {
    let mut poses = Vec::with_capacity(frame_count);
    poses.push(*initial_pose);
    for e in edges.vo_edges.iter().filter(|e| e.j == e.i + 1).take(frame_count - 1) {
        let next = poses[e.i].compose(&e.measurement);
        poses.push(next);
    }
    poses
}

/// Initial graph nodes: VO-chained poses and finite-difference velocities,
/// with the first velocity taken from the known initial state.
pub fn initial_nodes(output: &FrontEndOutput, raw: &RawMeasurements) -> Result<GraphNodes> {
    let n = raw.frame_count();
    let poses = vo_chain(&output.edges, &raw.initial_pose, n);
    let times = &raw.frame_times;
    let mut velocities = Vec::with_capacity(n);
    velocities.push(raw.initial_velocity);
    for k in 1..n {
        let (a, b) = if k + 1 < n { (k, k + 1) } else { (k - 1, k) };
        velocities.push((poses[b].translation - poses[a].translation) / (times[b] - times[a]));
    }
    GraphNodes::new(poses, velocities, times.clone())
}

/// θ checkpoint: named parameter arrays plus the iteration counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub iteration: usize,
    pub params: FrontEndParams,
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::graph::{measurement_gradients, objective, ConstraintWeights};
    use crate::manifold::so3_exp;
    use crate::sim::tests::small_sequence;

    fn perturbed(seed: u64) -> FrontEndParams {
        let v = ParamVector::from_fn(|i, _| ((i as f64 + 1.0) * 0.37 + seed as f64).sin() * 0.01);
        FrontEndParams::default().with_vector(&v)
    }

    #[test]
    fn vector_roundtrip_and_masks() {
        let p = perturbed(1);
        assert_eq!(p.with_vector(&p.to_vector()), p);
        let total = ParamGroup::Vo.mask() + ParamGroup::Imu.mask();
        assert_eq!(total, ParamVector::repeat(1.0));
        assert_eq!(ParamGroup::Vo.mask().sum(), 7.0);
    }

    #[test]
    fn zero_params_apply_only_the_scale() {
        let seq = small_sequence(3, 6, false);
        let out = frontend_forward(&seq.raw, &FrontEndParams::default()).unwrap();
        for (k, e) in seq.raw.vo_edges.iter().enumerate() {
            let m = out.edges.vo_edges[k].measurement;
            assert!(m.rotation.angle_to(&e.rotation) < 1e-15);
            assert!((m.translation - e.unit_translation * out.scales[k]).norm() < 1e-15);
        }
    }

    #[test]
    fn log_scale_doubles_translations() {
        let seq = small_sequence(4, 5, false);
        let base = frontend_forward(&seq.raw, &FrontEndParams::default()).unwrap();
        let doubled = FrontEndParams {
            vo_translation_scale_log: 2f64.ln(),
            ..FrontEndParams::default()
        };
        let out = frontend_forward(&seq.raw, &doubled).unwrap();
        for k in 0..4 {
            let a = base.edges.vo_edges[k].measurement.translation * 2.0;
            assert!((out.edges.vo_edges[k].measurement.translation - a).norm() < 1e-12);
        }
    }

    /// Packs the corrected measurements of every θ-dependent edge.
    fn measurement_vectors(out: &FrontEndOutput) -> (Vec<Pose>, Vec<crate::imu::ImuPreintegration>) {
        let n = out.vo_jacobians.len();
        (
            out.edges.vo_edges[..n].iter().map(|e| e.measurement).collect(),
            out.edges.imu_edges.iter().map(|e| e.preintegration).collect(),
        )
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let seq = small_sequence(5, 5, true);
        let params = perturbed(2);
        let out = frontend_forward(&seq.raw, &params).unwrap();
        let (vo0, imu0) = measurement_vectors(&out);
        let h = 1e-6;
        for c in 0..PARAM_COUNT {
            let eval = |s: f64| {
                let mut v = params.to_vector();
                v[c] += s;
                let o = frontend_forward(&seq.raw, &params.with_vector(&v)).unwrap();
                measurement_vectors(&o)
            };
            let ((vp, ip), (vm, im)) = (eval(h), eval(-h));
            for k in 0..vo0.len() {
                let dt = (vp[k].translation - vm[k].translation) / (2.0 * h);
                let dphi = (vo0[k].rotation.inverse().compose(&vp[k].rotation).log()
                    - vo0[k].rotation.inverse().compose(&vm[k].rotation).log())
                    / (2.0 * h);
                let a = out.vo_jacobians[k].column(c);
                let fd = nalgebra::Vector6::new(dt.x, dt.y, dt.z, dphi.x, dphi.y, dphi.z);
                assert!((a - fd).norm() <= 1e-5 * fd.norm().max(1e-3), "vo {k} param {c}: {a} vs {fd}");
            }
            for k in 0..imu0.len() {
                let base = &imu0[k];
                let dphi = (base.delta_rotation.inverse().compose(&ip[k].delta_rotation).log()
                    - base.delta_rotation.inverse().compose(&im[k].delta_rotation).log())
                    / (2.0 * h);
                let dv = (ip[k].delta_velocity - im[k].delta_velocity) / (2.0 * h);
                let dp = (ip[k].delta_position - im[k].delta_position) / (2.0 * h);
                let fd = SVector::<f64, 9>::from_iterator(dphi.iter().chain(dv.iter()).chain(dp.iter()).copied());
                let a = out.imu_jacobians[k].column(c);
                assert!((a - fd).norm() <= 1e-5 * fd.norm().max(1e-3), "imu {k} param {c}");
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let seq = small_sequence(6, 4, false);
        let out = frontend_forward(&seq.raw, &FrontEndParams::default()).unwrap();
        let up = MeasurementGradients {
            vo: vec![nalgebra::Vector6::zeros(); out.edges.vo_edges.len()],
            imu: vec![SVector::<f64, 9>::zeros(); out.edges.imu_edges.len()],
        };
        assert_eq!(frontend_gradient(&out, &up).unwrap(), ParamVector::zeros());
    }

    #[test]
    fn translation_upstream_reaches_translation_bias() {
        let seq = small_sequence(7, 2, false);
        let out = frontend_forward(&seq.raw, &FrontEndParams::default()).unwrap();
        let g = Vector3::new(0.3, -1.0, 2.0);
        let up = MeasurementGradients {
            vo: vec![nalgebra::Vector6::new(g.x, g.y, g.z, 0.0, 0.0, 0.0)],
            imu: vec![SVector::<f64, 9>::zeros()],
        };
        let grad = frontend_gradient(&out, &up).unwrap();
        assert_eq!(grad.fixed_rows::<3>(4).into_owned(), g);
    }

    #[test]
    fn gradient_matches_objective_finite_differences() {
        let seq = small_sequence(8, 5, true);
        let params = perturbed(3);
        let nodes = &seq.ground_truth.nodes;
        let w = ConstraintWeights::new(1.0, 0.5, 2.0, 1.5);
        let out = frontend_forward(&seq.raw, &params).unwrap();
        let up = measurement_gradients(nodes, &out.edges, &w);
        let g = frontend_gradient(&out, &up).unwrap();
        let h = 1e-6;
        let fd = ParamVector::from_fn(|c, _| {
            let f = |s: f64| {
                let mut v = params.to_vector();
                v[c] += s;
                let o = frontend_forward(&seq.raw, &params.with_vector(&v)).unwrap();
                objective(nodes, &o.edges, &w)
            };
            (f(h) - f(-h)) / (2.0 * h)
        });
        assert!((g - fd).norm() <= 1e-4 * fd.norm(), "{g} vs {fd}");
    }

    #[test]
    fn true_params_make_ground_truth_consistent() {
        let seq = small_sequence(9, 8, true);
        let noise = &seq.noise;
        let truth = noise.true_params();
        let out = frontend_forward(&seq.raw, &truth).unwrap();
        let w = ConstraintWeights::default();
        let obj = objective(&seq.ground_truth.nodes, &out.edges, &w);
        assert!(obj < 1e-12, "objective {obj}");
        let g = frontend_gradient(&out, &measurement_gradients(&seq.ground_truth.nodes, &out.edges, &w)).unwrap();
        assert!(g.norm() < 1e-6);
    }

    #[test]
    fn dead_reckoning_follows_ground_truth_without_noise() {
        let seq = small_sequence(10, 10, false);
        let dr = imu_dead_reckoning(&seq.raw, &ImuCalibration::default()).unwrap();
        for (a, b) in dr.poses.iter().zip(&seq.ground_truth.nodes.poses) {
            let e = a.between(b).log().norm();
            assert!(e < 1e-4, "{e}");
        }
    }

    #[test]
    fn rotation_bias_is_right_multiplied() {
        let seq = small_sequence(11, 3, false);
        let b = Vector3::new(0.01, -0.02, 0.005);
        let p = FrontEndParams {
            vo_rotation_bias: b,
            ..FrontEndParams::default()
        };
        let out = frontend_forward(&seq.raw, &p).unwrap();
        let expect = seq.raw.vo_edges[0].rotation.compose(&so3_exp(&b).unwrap());
        assert!(out.edges.vo_edges[0].measurement.rotation.angle_to(&expect) < 1e-14);
    }

    #[test]
    fn checkpoint_json_roundtrip() {
        let c = Checkpoint {
            iteration: 7,
            params: perturbed(4),
        };
        let json = serde_json::to_string_pretty(&c).unwrap();
        assert_eq!(serde_json::from_str::<Checkpoint>(&json).unwrap(), c);
    }
}
