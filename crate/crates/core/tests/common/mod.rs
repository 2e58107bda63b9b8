#![allow(dead_code)]

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use pvgo::graph::{ConstraintWeights, EdgeSet, GraphNodes, ImuEdge, PoseVelocityGraph, VoEdge};
use pvgo::imu::{ImuPreintegration, ImuSample};
use pvgo::manifold::{so3_exp, Pose, Rotation};
use pvgo::scale::{CameraIntrinsics, ScaleObservation};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform3(rng: &mut ChaCha8Rng, s: f64) -> Vector3<f64> {
    Vector3::from_fn(|_, _| rng.random_range(-s..s))
}

pub fn gaussian3(rng: &mut ChaCha8Rng, s: f64) -> Vector3<f64> {
    let n = Normal::new(0.0, 1.0).unwrap();
    Vector3::from_fn(|_, _| n.sample(rng) * s)
}

pub fn random_pose(rng: &mut ChaCha8Rng, rs: f64, ts: f64) -> Pose {
    Pose::new(so3_exp(&uniform3(rng, rs)).unwrap(), uniform3(rng, ts))
}

// ---------------------------------------------------------------- scale

pub fn camera() -> CameraIntrinsics {
    CameraIntrinsics {
        fx: 320.0,
        fy: 320.0,
        cx: 320.0,
        cy: 240.0,
        width: 640,
        height: 480,
    }
}

/// Random relative motion with a forward-leaning unit direction.
pub fn random_motion(rng: &mut ChaCha8Rng) -> (Rotation, Vector3<f64>) {
    let rot = so3_exp(&uniform3(rng, 0.05)).unwrap();
    let dir = (uniform3(rng, 1.0) + Vector3::new(0.0, 0.0, 0.5)).normalize();
    (rot, dir)
}

/// Pixels with depths projected through the true motion, so the flow is
/// exact. Points must stay at least `min_z` in front of the second camera.
pub fn forward_scene(
    rng: &mut ChaCha8Rng,
    k: &CameraIntrinsics,
    n: usize,
    rot: &Rotation,
    translation: &Vector3<f64>,
    min_z: f64,
) -> Vec<ScaleObservation> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let p = Vector2::new(
            rng.random_range(0.0..k.width as f64 - 1.0),
            rng.random_range(0.0..k.height as f64 - 1.0),
        );
        let d = rng.random_range(2.0..40.0);
        let y = Vector3::new((p.x - k.cx) / k.fx, (p.y - k.cy) / k.fy, 1.0) * d;
        let q = rot.rotate(&y) + translation;
        if q.z < min_z {
            continue;
        }
        let projected = Vector2::new(k.fx * q.x / q.z + k.cx, k.fy * q.y / q.z + k.cy);
        out.push(ScaleObservation {
            pixel: p,
            flow: projected - p,
            depth: d,
        });
    }
    out
}

/// Sum of squared depth-weighted reprojection errors at scale `s`,
/// evaluated by explicit reprojection.
pub fn weighted_reprojection_cost(
    obs: &[ScaleObservation],
    rot: &Rotation,
    dir: &Vector3<f64>,
    s: f64,
    k: &CameraIntrinsics,
) -> f64 {
    obs.iter()
        .map(|o| {
            let y = Vector3::new((o.pixel.x - k.cx) / k.fx, (o.pixel.y - k.cy) / k.fy, 1.0) * o.depth;
            let q = rot.rotate(&y) + dir * s;
            let target = o.pixel + o.flow;
            // z * (projection - target), written without the division
            let ex = k.fx * q.x + k.cx * q.z - target.x * q.z;
            let ey = k.fy * q.y + k.cy * q.z - target.y * q.z;
            ex * ex + ey * ey
        })
        .sum()
}

pub fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

// ---------------------------------------------------------------- imu

/// A smooth body-frame signal: a constant plus a few random sinusoids per
/// axis.
#[derive(Debug, Clone)]
pub struct SmoothSignal {
    accel_offset: Vector3<f64>,
    accel: Vec<(Vector3<f64>, f64, f64)>,
    gyro: Vec<(Vector3<f64>, f64, f64)>,
}

impl SmoothSignal {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let mut terms = |amp: f64| -> Vec<(Vector3<f64>, f64, f64)> {
            (0..3)
                .map(|_| (uniform3(rng, amp), rng.random_range(0.5..3.0), rng.random_range(0.0..std::f64::consts::TAU)))
                .collect()
        };
        let accel = terms(1.5);
        let gyro = terms(0.6);
        SmoothSignal {
            accel_offset: Vector3::new(0.0, 0.0, 9.81) + uniform3(rng, 0.5),
            accel,
            gyro,
        }
    }

    fn eval(terms: &[(Vector3<f64>, f64, f64)], t: f64) -> Vector3<f64> {
        terms.iter().map(|(a, w, p)| a * (w * t + p).sin()).sum()
    }

    pub fn accel(&self, t: f64) -> Vector3<f64> {
        self.accel_offset + Self::eval(&self.accel, t)
    }

    pub fn gyro(&self, t: f64) -> Vector3<f64> {
        Self::eval(&self.gyro, t)
    }

    pub fn sample(&self, rate: f64, duration: f64) -> Vec<ImuSample> {
        let n = (duration * rate).round() as usize;
        (0..=n)
            .map(|i| {
                let t = i as f64 / rate;
                ImuSample::new(t, self.accel(t), self.gyro(t))
            })
            .collect()
    }

    /// Fine-step integration of the continuous signal.
    pub fn fine_integration(
        &self,
        initial_rotation: &Rotation,
        gravity: &Vector3<f64>,
        t0: f64,
        t1: f64,
    ) -> (Rotation, Vector3<f64>, Vector3<f64>) {
        fine_integration(|t| self.accel(t), |t| self.gyro(t), initial_rotation, gravity, t0, t1)
    }
}

/// Integration on a 10 kHz grid, holding the inputs at each step's midpoint
/// value over the step.
pub fn fine_integration(
    accel: impl Fn(f64) -> Vector3<f64>,
    gyro: impl Fn(f64) -> Vector3<f64>,
    initial_rotation: &Rotation,
    gravity: &Vector3<f64>,
    t0: f64,
    t1: f64,
) -> (Rotation, Vector3<f64>, Vector3<f64>) {
    let steps = ((t1 - t0) * 10_000.0).round() as usize;
    let h = (t1 - t0) / steps as f64;
    let g = initial_rotation.inverse().rotate(gravity);
    let mut r = Rotation::identity();
    let mut v = Vector3::zeros();
    let mut p = Vector3::zeros();
    for i in 0..steps {
        let tm = t0 + (i as f64 + 0.5) * h;
        let w = gyro(tm);
        let half = r.compose(&so3_exp(&(w * (0.5 * h))).unwrap());
        let a = half.rotate(&accel(tm)) + g;
        p += v * h + a * (0.5 * h * h);
        v += a * h;
        r = r.compose(&so3_exp(&(w * h)).unwrap());
    }
    (r, v, p)
}

/// Fine-step oracle on a sampled stream: each sample interval is resampled
/// at 10 kHz holding the mean of its two end samples.
pub fn held_integration(
    samples: &[ImuSample],
    initial_rotation: &Rotation,
    gravity: &Vector3<f64>,
    t0: f64,
    t1: f64,
) -> (Rotation, Vector3<f64>, Vector3<f64>) {
    let interval = |t: f64| {
        let k = samples.partition_point(|s| s.t <= t).clamp(1, samples.len() - 1);
        (&samples[k - 1], &samples[k])
    };
    fine_integration(
        |t| {
            let (a, b) = interval(t);
            (a.accel + b.accel) * 0.5
        },
        |t| {
            let (a, b) = interval(t);
            (a.gyro + b.gyro) * 0.5
        },
        initial_rotation,
        gravity,
        t0,
        t1,
    )
}

pub fn preintegration_error(
    got: &ImuPreintegration,
    (r, v, p): &(Rotation, Vector3<f64>, Vector3<f64>),
) -> f64 {
    let er = got.delta_rotation.angle_to(r) / r.log().norm().max(1e-12);
    let ev = (got.delta_velocity - v).norm() / v.norm().max(1e-12);
    let ep = (got.delta_position - p).norm() / p.norm().max(1e-12);
    er.max(ev).max(ep)
}

// ---------------------------------------------------------------- graphs

pub fn random_weights(rng: &mut ChaCha8Rng) -> ConstraintWeights {
    ConstraintWeights::new(
        rng.random_range(0.5..2.0),
        rng.random_range(0.5..2.0),
        rng.random_range(0.5..2.0),
        rng.random_range(0.5..2.0),
    )
}

/// A graph whose measurements are computed from its own nodes, with one
/// loop edge, so every residual is zero.
pub fn consistent_graph(seed: u64, n: usize) -> PoseVelocityGraph {
    let mut rng = rng(seed);
    let dt = 0.1;
    let mut poses = vec![random_pose(&mut rng, 1.0, 2.0)];
    let mut velocities = vec![uniform3(&mut rng, 2.0)];
    for k in 1..n {
        let prev = poses[k - 1];
        poses.push(prev.compose(&random_pose(&mut rng, 0.3, 0.5)));
        velocities.push(velocities[k - 1] + uniform3(&mut rng, 0.5));
    }
    let times = (0..n).map(|k| k as f64 * dt).collect();
    let nodes = GraphNodes::new(poses, velocities, times).unwrap();
    let mut edges = EdgeSet::default();
    for k in 0..n - 1 {
        let (a, b) = (&nodes.poses[k], &nodes.poses[k + 1]);
        let rinv = a.rotation.inverse();
        edges.vo_edges.push(VoEdge {
            i: k,
            j: k + 1,
            measurement: a.between(b),
        });
        edges.imu_edges.push(ImuEdge {
            k,
            preintegration: ImuPreintegration {
                delta_rotation: rinv.compose(&b.rotation),
                delta_velocity: rinv.rotate(&(nodes.velocities[k + 1] - nodes.velocities[k])),
                delta_position: rinv.rotate(&(b.translation - a.translation - nodes.velocities[k] * dt)),
                duration: dt,
                ..ImuPreintegration::identity()
            },
        });
    }
    if n > 3 {
        edges.vo_edges.push(VoEdge {
            i: 0,
            j: n - 1,
            measurement: nodes.poses[0].between(&nodes.poses[n - 1]),
        });
    }
    let weights = random_weights(&mut rng);
    PoseVelocityGraph::new(nodes, edges, weights).unwrap()
}

/// Random nodes and measurements with no consistency between them.
pub fn random_graph(seed: u64, n: usize) -> PoseVelocityGraph {
    let mut g = consistent_graph(seed, n);
    let mut rng = rng(seed ^ 0x5eed);
    for e in &mut g.edges.vo_edges {
        e.measurement = e.measurement.compose(&random_pose(&mut rng, 0.3, 0.5));
    }
    for e in &mut g.edges.imu_edges {
        let p = &mut e.preintegration;
        p.delta_rotation = p.delta_rotation.compose(&so3_exp(&uniform3(&mut rng, 0.2)).unwrap());
        p.delta_velocity += uniform3(&mut rng, 0.5);
        p.delta_position += uniform3(&mut rng, 0.3);
    }
    g
}

/// Gaussian perturbation of every node except the first pose.
pub fn perturb(nodes: &GraphNodes, seed: u64, st: f64, sr: f64, sv: f64) -> GraphNodes {
    let mut rng = rng(seed);
    let mut out = nodes.clone();
    for k in 0..out.len() {
        let (dt, dr, dv) = (gaussian3(&mut rng, st), gaussian3(&mut rng, sr), gaussian3(&mut rng, sv));
        if k > 0 {
            out.poses[k] = Pose::new(
                out.poses[k].rotation.compose(&so3_exp(&dr).unwrap()),
                out.poses[k].translation + dt,
            );
        }
        out.velocities[k] += dv;
    }
    out
}

/// Largest pose and velocity discrepancy after moving `estimate` so its
/// first pose coincides with the reference.
pub fn gauge_aligned_error(estimate: &GraphNodes, reference: &GraphNodes) -> f64 {
    let align = reference.poses[0].compose(&estimate.poses[0].inverse());
    let mut worst = 0.0_f64;
    for k in 0..estimate.len() {
        let p = align.compose(&estimate.poses[k]);
        let v = align.rotation.rotate(&estimate.velocities[k]);
        worst = worst
            .max(p.between(&reference.poses[k]).log().norm())
            .max((v - reference.velocities[k]).norm());
    }
    worst
}

/// Rigidly moves every pose and velocity by `t`.
pub fn transform_nodes(nodes: &GraphNodes, t: &Pose) -> GraphNodes {
    let mut out = nodes.clone();
    for (p, v) in out.poses.iter_mut().zip(out.velocities.iter_mut()) {
        *p = t.compose(p);
        *v = t.rotation.rotate(v);
    }
    out
}
