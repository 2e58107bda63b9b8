//! IMU bias correction and preintegration between camera frames.
//!
//! Integration runs from a zero state at `t_start` using the midpoint rule on
//! SO(3): the gyro is averaged over each step, and accelerations rotated by
//! the attitude at both step ends are averaged. Deltas are expressed in the
//! body frame at `t_start`; gravity is removed using the world orientation
//! supplied for that instant.

use nalgebra::{Matrix3, SMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::{skew, so3_exp, so3_right_jacobian, Rotation};

pub const DEFAULT_GRAVITY: [f64; 3] = [0.0, 0.0, -9.81];

/// Two timestamps closer than this are treated as the same instant.
const TIME_EPS: f64 = 1e-9;

pub type Matrix9 = SMatrix<f64, 9, 9>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub t: f64,
    /// Specific force in the body frame (m/s^2), gravity reaction included.
    pub accel: Vector3<f64>,
    /// Angular rate in the body frame (rad/s).
    pub gyro: Vector3<f64>,
}

impl ImuSample {
    pub fn new(t: f64, accel: Vector3<f64>, gyro: Vector3<f64>) -> Self {
        ImuSample { t, accel, gyro }
    }

    fn lerp(&self, other: &ImuSample, t: f64) -> ImuSample {
        let s = (t - self.t) / (other.t - self.t);
        ImuSample {
            t,
            accel: self.accel + (other.accel - self.accel) * s,
            gyro: self.gyro + (other.gyro - self.gyro) * s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuCalibration {
    pub accel_bias: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
    /// Per-sample accelerometer noise covariance (m^2/s^4).
    pub accel_cov: Matrix3<f64>,
    /// Per-sample gyroscope noise covariance (rad^2/s^2).
    pub gyro_cov: Matrix3<f64>,
}

impl Default for ImuCalibration {
    fn default() -> Self {
        ImuCalibration {
            accel_bias: Vector3::zeros(),
            gyro_bias: Vector3::zeros(),
            accel_cov: Matrix3::identity() * 1e-4,
            gyro_cov: Matrix3::identity() * 1e-6,
        }
    }
}

impl ImuCalibration {
    pub fn with_biases(accel_bias: Vector3<f64>, gyro_bias: Vector3<f64>) -> Self {
        ImuCalibration {
            accel_bias,
            gyro_bias,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, m) in [("accel_cov", &self.accel_cov), ("gyro_cov", &self.gyro_cov)] {
            if (m - m.transpose()).abs().max() > 1e-12 * m.abs().max().max(1.0) {
                return Err(Error::InvalidArgument(format!("{name} is not symmetric")));
            }
            let min_eig = m.symmetric_eigenvalues().min();
            if min_eig < -1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "{name} is not positive semidefinite (eigenvalue {min_eig:e})"
                )));
            }
        }
        if !self
            .accel_bias
            .iter()
            .chain(self.gyro_bias.iter())
            .all(|c| c.is_finite())
        {
            return Err(Error::InvalidArgument("non-finite IMU bias".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuPreintegration {
    pub delta_rotation: Rotation,
    pub delta_velocity: Vector3<f64>,
    pub delta_position: Vector3<f64>,
    pub duration: f64,
    /// Covariance of `[dphi, dv, dp]` propagated from the calibration noise.
    pub covariance: Matrix9,
}

impl ImuPreintegration {
    pub fn identity() -> Self {
        ImuPreintegration {
            delta_rotation: Rotation::identity(),
            delta_velocity: Vector3::zeros(),
            delta_position: Vector3::zeros(),
            duration: 0.0,
            covariance: Matrix9::zeros(),
        }
    }

    /// On-manifold concatenation: `self` followed by `next`, where `next`
    /// starts in the frame in which `self` ends. Covariances are not combined.
    pub fn compose(&self, next: &ImuPreintegration) -> ImuPreintegration {
        ImuPreintegration {
            delta_rotation: self.delta_rotation.compose(&next.delta_rotation),
            delta_velocity: self.delta_velocity
                + self.delta_rotation.rotate(&next.delta_velocity),
            delta_position: self.delta_position
                + self.delta_velocity * next.duration
                + self.delta_rotation.rotate(&next.delta_position),
            duration: self.duration + next.duration,
            covariance: Matrix9::zeros(),
        }
    }
}

/// Derivatives of the preintegrated deltas with respect to the biases.
///
/// Rotation blocks are right-perturbation Jacobians:
/// `dR(b + d) ~= dR(b) * Exp(rotation_gyro * d)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasJacobians {
    pub rotation_accel: Matrix3<f64>,
    pub rotation_gyro: Matrix3<f64>,
    pub velocity_accel: Matrix3<f64>,
    pub velocity_gyro: Matrix3<f64>,
    pub position_accel: Matrix3<f64>,
    pub position_gyro: Matrix3<f64>,
}

pub fn correct_bias(samples: &[ImuSample], calib: &ImuCalibration) -> Vec<ImuSample> {
    samples
        .iter()
        .map(|s| ImuSample {
            t: s.t,
            accel: s.accel - calib.accel_bias,
            gyro: s.gyro - calib.gyro_bias,
        })
        .collect()
}

/// Samples covering `[t_start, t_end]`, with interpolated samples placed at
/// both boundaries when they fall between recorded timestamps.
fn window(samples: &[ImuSample], t_start: f64, t_end: f64) -> Result<Vec<ImuSample>> {
    if !(t_end > t_start) {
        return Err(Error::InvalidArgument(format!(
            "empty integration interval [{t_start}, {t_end}]"
        )));
    }
    if samples.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "preintegration needs at least 2 IMU samples, got {}",
            samples.len()
        )));
    }
    let first = samples[0].t;
    let last = samples[samples.len() - 1].t;
    if first > t_start + TIME_EPS || last < t_end - TIME_EPS {
        return Err(Error::InsufficientData(format!(
            "IMU samples span [{first}, {last}] but [{t_start}, {t_end}] was requested"
        )));
    }

    let sample_at = |t: f64| -> ImuSample {
        let idx = samples.partition_point(|s| s.t < t);
        if idx < samples.len() && (samples[idx].t - t).abs() <= TIME_EPS {
            return ImuSample { t, ..samples[idx] };
        }
        if idx > 0 && (samples[idx - 1].t - t).abs() <= TIME_EPS {
            return ImuSample {
                t,
                ..samples[idx - 1]
            };
        }
        let hi = idx.clamp(1, samples.len() - 1);
        samples[hi - 1].lerp(&samples[hi], t)
    };

    let mut out = Vec::with_capacity(16);
    out.push(sample_at(t_start));
    let lo = samples.partition_point(|s| s.t <= t_start + TIME_EPS);
    out.extend(
        samples[lo..]
            .iter()
            .take_while(|s| s.t < t_end - TIME_EPS)
            .copied(),
    );
    out.push(sample_at(t_end));
    Ok(out)
}

struct Integrator {
    rotation: Rotation,
    velocity: Vector3<f64>,
    position: Vector3<f64>,
    jac: BiasJacobians,
    covariance: Matrix9,
}

fn integrate(
    knots: &[ImuSample],
    initial_rotation: &Rotation,
    gravity: &Vector3<f64>,
    calib: &ImuCalibration,
) -> Result<(ImuPreintegration, BiasJacobians)> {
    let g_local = initial_rotation.inverse().rotate(gravity);
    let zero = Matrix3::zeros();
    let mut st = Integrator {
        rotation: Rotation::identity(),
        velocity: Vector3::zeros(),
        position: Vector3::zeros(),
        jac: BiasJacobians {
            rotation_accel: zero,
            rotation_gyro: zero,
            velocity_accel: zero,
            velocity_gyro: zero,
            position_accel: zero,
            position_gyro: zero,
        },
        covariance: Matrix9::zeros(),
    };

    for pair in knots.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let dt = b.t - a.t;
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "IMU timestamps not strictly increasing at t = {}",
                b.t
            )));
        }
        let f0 = a.accel - calib.accel_bias;
        let f1 = b.accel - calib.accel_bias;
        let w_mid = (a.gyro + b.gyro) * 0.5 - calib.gyro_bias;
        let theta = w_mid * dt;
        let step = so3_exp(&theta)?;
        let step_t = step.matrix().transpose();
        let jr_step = so3_right_jacobian(&theta);

        let r0 = st.rotation.matrix();
        let rotation1 = st.rotation.compose(&step);
        let r1 = rotation1.matrix();
        let jr0 = st.jac.rotation_gyro;
        let jr1 = step_t * jr0 - jr_step * dt;

        let acc = (r0 * f0 + r1 * f1) * 0.5 + g_local;
        let dacc_da = -(r0 + r1) * 0.5;
        let dacc_dw = -(r0 * skew(&f0) * jr0 + r1 * skew(&f1) * jr1) * 0.5;

        // covariance of [dphi, dv, dp] with noise entering at the step midpoint
        let mut a_mat = Matrix9::identity();
        let f_mid = (f0 + f1) * 0.5;
        let r_fx = r0 * skew(&f_mid);
        a_mat.fixed_view_mut::<3, 3>(0, 0).copy_from(&step_t);
        a_mat
            .fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(-r_fx * dt));
        a_mat
            .fixed_view_mut::<3, 3>(6, 0)
            .copy_from(&(-r_fx * (0.5 * dt * dt)));
        a_mat
            .fixed_view_mut::<3, 3>(6, 3)
            .copy_from(&(Matrix3::identity() * dt));
        let mut b_mat = SMatrix::<f64, 9, 6>::zeros();
        b_mat.fixed_view_mut::<3, 3>(0, 0).copy_from(&(jr_step * dt));
        b_mat.fixed_view_mut::<3, 3>(3, 3).copy_from(&(r0 * dt));
        b_mat
            .fixed_view_mut::<3, 3>(6, 3)
            .copy_from(&(r0 * (0.5 * dt * dt)));
        let mut q = SMatrix::<f64, 6, 6>::zeros();
        q.fixed_view_mut::<3, 3>(0, 0).copy_from(&calib.gyro_cov);
        q.fixed_view_mut::<3, 3>(3, 3).copy_from(&calib.accel_cov);
        st.covariance = a_mat * st.covariance * a_mat.transpose() + b_mat * q * b_mat.transpose();

        let half_dt2 = 0.5 * dt * dt;
        st.position += st.velocity * dt + acc * half_dt2;
        st.jac.position_accel += st.jac.velocity_accel * dt + dacc_da * half_dt2;
        st.jac.position_gyro += st.jac.velocity_gyro * dt + dacc_dw * half_dt2;
        st.velocity += acc * dt;
        st.jac.velocity_accel += dacc_da * dt;
        st.jac.velocity_gyro += dacc_dw * dt;
        st.rotation = rotation1;
        st.jac.rotation_gyro = jr1;
    }

    let duration = knots[knots.len() - 1].t - knots[0].t;
    Ok((
        ImuPreintegration {
            delta_rotation: st.rotation,
            delta_velocity: st.velocity,
            delta_position: st.position,
            duration,
            covariance: st.covariance,
        },
        st.jac,
    ))
}

/// Preintegrates raw samples over `[t_start, t_end]` with no bias removal.
pub fn preintegrate(
    samples: &[ImuSample],
    initial_rotation: &Rotation,
    gravity: &Vector3<f64>,
    t_start: f64,
    t_end: f64,
) -> Result<ImuPreintegration> {
    let knots = window(samples, t_start, t_end)?;
    let calib = ImuCalibration {
        accel_bias: Vector3::zeros(),
        gyro_bias: Vector3::zeros(),
        accel_cov: Matrix3::zeros(),
        gyro_cov: Matrix3::zeros(),
    };
    integrate(&knots, initial_rotation, gravity, &calib).map(|(p, _)| p)
}

/// Preintegrates bias-corrected samples and returns the exact derivatives of
/// the discrete integration scheme with respect to both biases.
pub fn preintegrate_with_bias_jacobian(
    samples: &[ImuSample],
    initial_rotation: &Rotation,
    gravity: &Vector3<f64>,
    t_start: f64,
    t_end: f64,
    calib: &ImuCalibration,
) -> Result<(ImuPreintegration, BiasJacobians)> {
    let knots = window(samples, t_start, t_end)?;
    integrate(&knots, initial_rotation, gravity, calib)
}
