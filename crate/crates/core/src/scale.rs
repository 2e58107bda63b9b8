//! Closed-form translation scale from optical flow and depth.
//!
//! A pixel `p` with depth `d` is lifted to `d K^-1 p`, moved by the relative
//! motion `(R, s * tau)` and projected again. Multiplying each reprojection
//! error by the projected depth turns it into two rows that are linear in
//! `s`, so the least-squares scale is `s* = (G^T G)^-1 G^T eta` with
//! `alpha = K tau` and `beta = d K R K^-1 p`:
//!
//! ```text
//! G   rows: alpha3 (u + Fx) - alpha1,      alpha3 (v + Fy) - alpha2
//! eta rows: beta1 - beta3 (u + Fx),        beta2 - beta3 (v + Fy)
//! ```
//!
//! `(R, tau)` map points of the first frame into the second one.

use nalgebra::{DVector, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::{skew, Rotation};
use crate::par::{self, Execution};

/// `G^T G` below `DEGENERACY_FACTOR * n` is treated as zero parallax.
pub const DEGENERACY_FACTOR: f64 = 1e-12;
/// Projected depths at or below this violate cheirality.
pub const MIN_DEPTH: f64 = 1e-9;
/// Cheirality violators are dropped only if this many observations remain.
pub const MIN_VALID_AFTER_DROP: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for CameraIntrinsics {
    /// 160x112 pixels with a 90 degree horizontal field of view.
    fn default() -> Self {
        CameraIntrinsics {
            fx: 80.0,
            fy: 80.0,
            cx: 80.0,
            cy: 56.0,
            width: 160,
            height: 112,
        }
    }
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid intrinsics {self:?}")))
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    pub fn unproject(&self, pixel: &Vector2<f64>, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (pixel.x - self.cx) / self.fx * depth,
            (pixel.y - self.cy) / self.fy * depth,
            depth,
        )
    }

    pub fn project(&self, point: &Vector3<f64>) -> Result<Vector2<f64>> {
        if point.z <= MIN_DEPTH {
            return Err(Error::Cheirality { depth: point.z });
        }
        Ok(Vector2::new(
            self.fx * point.x / point.z + self.cx,
            self.fy * point.y / point.z + self.cy,
        ))
    }

    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x <= (self.width - 1) as f64
            && pixel.y <= (self.height - 1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleObservation {
    /// `(u, v)` in pixels.
    pub pixel: Vector2<f64>,
    /// `(Fx, Fy)` in pixels.
    pub flow: Vector2<f64>,
    /// Metric depth along the optical axis.
    pub depth: f64,
}

impl ScaleObservation {
    pub fn new(u: f64, v: f64, flow_x: f64, flow_y: f64, depth: f64) -> Self {
        ScaleObservation {
            pixel: Vector2::new(u, v),
            flow: Vector2::new(flow_x, flow_y),
            depth,
        }
    }

    fn validate(&self, intrinsics: &CameraIntrinsics) -> Result<()> {
        if !(self.depth > 0.0 && self.depth.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "observation depth {} must be positive and finite",
                self.depth
            )));
        }
        if !intrinsics.contains(&self.pixel) || !self.flow.iter().all(|f| f.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "observation at {:?} lies outside the image or has non-finite flow",
                self.pixel
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleResult {
    pub scale: f64,
    pub observation_count: usize,
    pub residual_rms: f64,
}

/// Sensitivities of `s*` to every input of the closed form.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleGradient {
    /// `ds*/dphi` for a right perturbation `R Exp(phi)`.
    pub rotation: Vector3<f64>,
    pub unit_translation: Vector3<f64>,
    /// Indexed like the input observations; dropped observations get zeros.
    pub flows: Vec<Vector2<f64>>,
    pub depths: Vec<f64>,
}

fn check_unit(unit_translation: &Vector3<f64>) -> Result<()> {
    if (unit_translation.norm() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "translation direction {unit_translation:?} is not unit length"
        )));
    }
    Ok(())
}

pub fn reprojection_residual(
    obs: &ScaleObservation,
    rotation: &Rotation,
    unit_translation: &Vector3<f64>,
    scale: f64,
    intrinsics: &CameraIntrinsics,
) -> Result<Vector2<f64>> {
    check_unit(unit_translation)?;
    let moved = rotation.rotate(&intrinsics.unproject(&obs.pixel, obs.depth)) + unit_translation * scale;
    Ok(intrinsics.project(&moved)? - (obs.pixel + obs.flow))
}

/// Per-observation quantities shared by the system rows and their derivatives.
struct Row {
    alpha: Vector3<f64>,
    beta: Vector3<f64>,
    target: Vector2<f64>,
    g: Vector2<f64>,
    eta: Vector2<f64>,
}

fn row(obs: &ScaleObservation, k_r_kinv: &Matrix3<f64>, alpha: &Vector3<f64>) -> Row {
    let p = Vector3::new(obs.pixel.x, obs.pixel.y, 1.0);
    let beta = k_r_kinv * p * obs.depth;
    let target = obs.pixel + obs.flow;
    Row {
        alpha: *alpha,
        beta,
        target,
        g: Vector2::new(
            alpha.z * target.x - alpha.x,
            alpha.z * target.y - alpha.y,
        ),
        eta: Vector2::new(
            beta.x - beta.z * target.x,
            beta.y - beta.z * target.y,
        ),
    }
}

fn rows(
    mode: Execution,
    observations: &[ScaleObservation],
    rotation: &Rotation,
    unit_translation: &Vector3<f64>,
    intrinsics: &CameraIntrinsics,
) -> Vec<Row> {
    let k = intrinsics.matrix();
    let k_r_kinv = k * rotation.matrix() * intrinsics.inverse_matrix();
    let alpha = k * unit_translation;
    par::map(mode, observations, |o| row(o, &k_r_kinv, &alpha))
}

/// Stacks the `2n` rows of `G` and `eta`, two per observation in input order.
pub fn build_linear_system(
    observations: &[ScaleObservation],
    rotation: &Rotation,
    unit_translation: &Vector3<f64>,
    intrinsics: &CameraIntrinsics,
) -> (DVector<f64>, DVector<f64>) {
    build_linear_system_with(
        Execution::default(),
        observations,
        rotation,
        unit_translation,
        intrinsics,
    )
}

pub fn build_linear_system_with(
    mode: Execution,
    observations: &[ScaleObservation],
    rotation: &Rotation,
    unit_translation: &Vector3<f64>,
    intrinsics: &CameraIntrinsics,
) -> (DVector<f64>, DVector<f64>) {
    let rows = rows(mode, observations, rotation, unit_translation, intrinsics);
    let g = DVector::from_iterator(2 * rows.len(), rows.iter().flat_map(|r| [r.g.x, r.g.y]));
    let eta = DVector::from_iterator(
        2 * rows.len(),
        rows.iter().flat_map(|r| [r.eta.x, r.eta.y]),
    );
    (g, eta)
}

struct Solved {
    result: ScaleResult,
    kept: Vec<bool>,
    rows: Vec<Row>,
    gtg: f64,
}

fn solve_inner(
    mode: Execution,
    observations: &[ScaleObservation],
    rotation: &Rotation,
    unit_translation: &Vector3<f64>,
    intrinsics: &CameraIntrinsics,
) -> Result<Solved> {
    if observations.is_empty() {
        return Err(Error::InsufficientData("scale solve needs at least one observation".into()));
    }
    check_unit(unit_translation)?;
    for o in observations {
        o.validate(intrinsics)?;
    }
    let rows = rows(mode, observations, rotation, unit_translation, intrinsics);
    let mut kept = vec![true; rows.len()];

    loop {
        let (mut gtg, mut gte, mut n) = (0.0, 0.0, 0usize);
        for (r, _) in rows.iter().zip(&kept).filter(|(_, k)| **k) {
            gtg += r.g.norm_squared();
            gte += r.g.dot(&r.eta);
            n += 1;
        }
        if gtg < DEGENERACY_FACTOR * n as f64 {
            return Err(Error::DegenerateGeometry(format!(
                "G^T G = {gtg:e} over {n} observations; scale is unobservable"
            )));
        }
        let scale = gte / gtg;

        let mut violators = Vec::new();
        for (i, r) in rows.iter().enumerate().filter(|(i, _)| kept[*i]) {
            let z = r.beta.z + scale * r.alpha.z;
            if z <= MIN_DEPTH {
                violators.push((i, z));
            }
        }
        if let Some(&(_, worst)) = violators.first() {
            if n - violators.len() < MIN_VALID_AFTER_DROP {
                return Err(Error::Cheirality { depth: worst });
            }
            for (i, _) in violators {
                kept[i] = false;
            }
            continue;
        }

        let mut sq = 0.0;
        for (r, _) in rows.iter().zip(&kept).filter(|(_, k)| **k) {
            let x = r.beta + r.alpha * scale;
            let e = Vector2::new(x.x / x.z, x.y / x.z) - r.target;
            sq += e.norm_squared();
        }
        return Ok(Solved {
            result: ScaleResult {
                scale,
                observation_count: n,
                residual_rms: (sq / n as f64).sqrt(),
            },
            kept,
            rows,
            gtg,
        });
    }
}

pub fn solve_scale(
    observations: &[ScaleObservation],
    rotation: &Rotation,
    unit_translation: &Vector3<f64>,
    intrinsics: &CameraIntrinsics,
) -> Result<ScaleResult> {
    solve_inner(
        Execution::default(),
        observations,
        rotation,
        unit_translation,
        intrinsics,
    )
    .map(|s| s.result)
}

/// `solve_scale` plus the analytic derivatives of `s*`.
pub fn solve_scale_with_gradient(
    observations: &[ScaleObservation],
    rotation: &Rotation,
    unit_translation: &Vector3<f64>,
    intrinsics: &CameraIntrinsics,
) -> Result<(ScaleResult, ScaleGradient)> {
    let solved = solve_inner(
        Execution::default(),
        observations,
        rotation,
        unit_translation,
        intrinsics,
    )?;
    let s = solved.result.scale;
    let k = intrinsics.matrix();
    let k_r = k * rotation.matrix();
    let k_inv = intrinsics.inverse_matrix();
    let inv_gtg = 1.0 / solved.gtg;

    // ds = sum[(eta - 2 s g) dg + g deta] / G^T G
    let mut d_rot = Vector3::zeros();
    let mut d_tau = Vector3::zeros();
    let mut flows = vec![Vector2::zeros(); observations.len()];
    let mut depths = vec![0.0; observations.len()];
    for (i, (r, o)) in solved.rows.iter().zip(observations).enumerate() {
        if !solved.kept[i] {
            continue;
        }
        let cg = (r.eta - r.g * (2.0 * s)) * inv_gtg;
        let ce = r.g * inv_gtg;
        // g_x = alpha3 tx - alpha1 with alpha = K tau
        let dgx_dtau = k.row(2).transpose() * r.target.x - k.row(0).transpose();
        let dgy_dtau = k.row(2).transpose() * r.target.y - k.row(1).transpose();
        d_tau += dgx_dtau * cg.x + dgy_dtau * cg.y;

        // eta_x = beta1 - beta3 tx, beta = d K R y with y = K^-1 p
        let y = k_inv * Vector3::new(o.pixel.x, o.pixel.y, 1.0);
        let dbeta_dphi = -(k_r * skew(&y)) * o.depth;
        let dbeta_dd = k_r * y;
        let row_x = Vector3::new(1.0, 0.0, -r.target.x);
        let row_y = Vector3::new(0.0, 1.0, -r.target.y);
        d_rot += (dbeta_dphi.transpose() * row_x) * ce.x + (dbeta_dphi.transpose() * row_y) * ce.y;
        depths[i] = row_x.dot(&dbeta_dd) * ce.x + row_y.dot(&dbeta_dd) * ce.y;
        flows[i] = Vector2::new(
            r.alpha.z * cg.x - r.beta.z * ce.x,
            r.alpha.z * cg.y - r.beta.z * ce.y,
        );
    }
    Ok((
        solved.result,
        ScaleGradient {
            rotation: d_rot,
            unit_translation: d_tau,
            flows,
            depths,
        },
    ))
}

/// A dense single-channel raster, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                data.push(f(u, v));
            }
        }
        Image { width, height, data }
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }

    pub fn set(&mut self, u: usize, v: usize, value: f64) {
        self.data[v * self.width + u] = value;
    }
}

/// Sobel gradient magnitude with edge-replicated borders.
pub fn sobel_magnitude(image: &Image) -> Image {
    let (w, h) = (image.width as isize, image.height as isize);
    let at = |u: isize, v: isize| image.get(u.clamp(0, w - 1) as usize, v.clamp(0, h - 1) as usize);
    Image::from_fn(image.width, image.height, |u, v| {
        let (u, v) = (u as isize, v as isize);
        let gx = (at(u + 1, v - 1) + 2.0 * at(u + 1, v) + at(u + 1, v + 1))
            - (at(u - 1, v - 1) + 2.0 * at(u - 1, v) + at(u - 1, v + 1));
        let gy = (at(u - 1, v + 1) + 2.0 * at(u, v + 1) + at(u + 1, v + 1))
            - (at(u - 1, v - 1) + 2.0 * at(u, v - 1) + at(u + 1, v - 1));
        gx.hypot(gy)
    })
}

/// Pixels `(u, v)` passing both thresholds, strongest gradient first, ties in
/// row-major order, truncated to `max_count`.
pub fn select_pixels(
    gradient_magnitude: &Image,
    disparity: &Image,
    grad_threshold: f64,
    min_disparity: f64,
    max_count: usize,
) -> Result<Vec<(usize, usize)>> {
    if gradient_magnitude.width != disparity.width || gradient_magnitude.height != disparity.height {
        return Err(Error::InvalidArgument(format!(
            "gradient image is {}x{} but disparity image is {}x{}",
            gradient_magnitude.width, gradient_magnitude.height, disparity.width, disparity.height
        )));
    }
    let mut picked: Vec<(usize, f64)> = gradient_magnitude
        .data
        .iter()
        .zip(&disparity.data)
        .enumerate()
        .filter(|(_, (g, d))| **g >= grad_threshold && **d >= min_disparity)
        .map(|(i, (g, _))| (i, *g))
        .collect();
    // stable sort keeps row-major order among equal gradients
    picked.sort_by(|a, b| b.1.total_cmp(&a.1));
    picked.truncate(max_count);
    let w = gradient_magnitude.width;
    Ok(picked.into_iter().map(|(i, _)| (i % w, i / w)).collect())
}

/// Thresholds turning dense depth and flow rasters into scale observations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PixelSelection {
    /// Stereo baseline in meters, used to turn depth into disparity.
    pub baseline: f64,
    pub grad_threshold: f64,
    pub min_disparity: f64,
    pub max_count: usize,
}

impl Default for PixelSelection {
    fn default() -> Self {
        PixelSelection {
            baseline: 0.25,
            grad_threshold: 0.05,
            min_disparity: 0.3,
            max_count: 500,
        }
    }
}

/// Dense per-pixel inputs for one frame pair. Depth is zero where invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleRasters {
    pub depth: Image,
    pub flow_x: Image,
    pub flow_y: Image,
    pub intensity: Image,
}

impl ScaleRasters {
    pub fn disparity(&self, fx: f64, baseline: f64) -> Image {
        Image {
            width: self.depth.width,
            height: self.depth.height,
            data: self
                .depth
                .data
                .iter()
                .map(|&d| if d > 0.0 && d.is_finite() { fx * baseline / d } else { 0.0 })
                .collect(),
        }
    }
}

/// Edge and disparity masking followed by observation extraction.
pub fn observations_from_rasters(
    rasters: &ScaleRasters,
    intrinsics: &CameraIntrinsics,
    selection: &PixelSelection,
) -> Result<Vec<ScaleObservation>> {
    let (w, h) = (rasters.depth.width, rasters.depth.height);
    for img in [&rasters.flow_x, &rasters.flow_y, &rasters.intensity] {
        if img.width != w || img.height != h {
            return Err(Error::InvalidArgument("scale rasters differ in size".into()));
        }
    }
    if w != intrinsics.width || h != intrinsics.height {
        return Err(Error::InvalidArgument(format!(
            "rasters are {w}x{h} but the camera is {}x{}",
            intrinsics.width, intrinsics.height
        )));
    }
    let gradient = sobel_magnitude(&rasters.intensity);
    let disparity = rasters.disparity(intrinsics.fx, selection.baseline);
    let pixels = select_pixels(
        &gradient,
        &disparity,
        selection.grad_threshold,
        selection.min_disparity,
        selection.max_count,
    )?;
    if pixels.is_empty() {
        return Err(Error::InsufficientData("no pixel passed the edge and disparity masks".into()));
    }
    Ok(pixels
        .into_iter()
        .map(|(u, v)| {
            ScaleObservation::new(
                u as f64,
                v as f64,
                rasters.flow_x.get(u, v),
                rasters.flow_y.get(u, v),
                rasters.depth.get(u, v),
            )
        })
        .collect())
}
