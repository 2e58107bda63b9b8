//! Trajectory accuracy: ATE after rigid alignment, relative motion error and
//! per-segment drift.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::{Pose, Rotation};
use crate::par::{self, Execution};

pub const DEFAULT_SEGMENT_LENGTHS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];

/// Ratio of the second to the first singular value of the centered position
/// spread under which positions count as collinear.
const COLLINEAR_RATIO: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedComparison {
    /// Maps the estimate onto the reference.
    pub alignment: Pose,
    pub position_errors: Vec<f64>,
    pub rotation_errors: Vec<f64>,
}

fn check_lengths(estimate: &[Pose], reference: &[Pose], min: usize) -> Result<()> {
    if estimate.len() != reference.len() {
        return Err(Error::InvalidArgument(format!(
            "trajectory lengths differ: {} vs {}",
            estimate.len(),
            reference.len()
        )));
    }
    if estimate.len() < min {
        return Err(Error::InvalidArgument(format!(
            "need at least {min} poses, got {}",
            estimate.len()
        )));
    }
    Ok(())
}

fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().sum::<Vector3<f64>>() / points.len() as f64
}

/// Least-squares rigid transform `S` minimizing `Σ |S·p_est − p_ref|²`.
/// Collinear or coincident inputs fall back to a pure translation.
pub fn align_se3(estimate: &[Pose], reference: &[Pose]) -> Result<Pose> {
    check_lengths(estimate, reference, 3)?;
    let est: Vec<_> = estimate.iter().map(|p| p.translation).collect();
    let rf: Vec<_> = reference.iter().map(|p| p.translation).collect();
    let (ce, cr) = (centroid(&est), centroid(&rf));
    let mut cov = Matrix3::zeros();
    let mut spread_e = Matrix3::zeros();
    let mut spread_r = Matrix3::zeros();
    for (e, r) in est.iter().zip(&rf) {
        let (de, dr) = (e - ce, r - cr);
        cov += dr * de.transpose();
        spread_e += de * de.transpose();
        spread_r += dr * dr.transpose();
    }
    let degenerate = |m: &Matrix3<f64>| {
        let mut s: Vec<f64> = m.symmetric_eigenvalues().iter().map(|x| x.max(0.0).sqrt()).collect();
        s.sort_by(|a, b| b.total_cmp(a));
        s[0] <= f64::MIN_POSITIVE || s[1] <= COLLINEAR_RATIO * s[0]
    };
    if degenerate(&spread_e) || degenerate(&spread_r) {
        return Ok(Pose::from_translation(cr - ce));
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = Rotation::from_matrix(&(u * d * v_t));
    let translation = cr - rotation.rotate(&ce);
    Ok(Pose::new(rotation, translation))
}

/// Per-frame errors after applying `alignment` to the estimate.
pub fn compare(estimate: &[Pose], reference: &[Pose], alignment: Pose) -> Result<AlignedComparison> {
    check_lengths(estimate, reference, 1)?;
    let (position_errors, rotation_errors) = estimate
        .iter()
        .zip(reference)
        .map(|(e, r)| {
            let aligned = alignment.compose(e);
            (
                (aligned.translation - r.translation).norm(),
                aligned.rotation.angle_to(&r.rotation),
            )
        })
        .unzip();
    Ok(AlignedComparison {
        alignment,
        position_errors,
        rotation_errors,
    })
}

fn rms(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), x| (s + x * x, n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

pub fn ate_rmse(estimate: &[Pose], reference: &[Pose], align: bool) -> Result<f64> {
    let alignment = if align {
        align_se3(estimate, reference)?
    } else {
        check_lengths(estimate, reference, 1)?;
        Pose::identity()
    };
    Ok(rms(compare(estimate, reference, alignment)?.position_errors.into_iter()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativeMotionError {
    pub rotation_rad: f64,
    pub translation_m: f64,
    /// Rotation error in degrees per meter of reference motion.
    pub rotation_deg_per_m: f64,
    /// Translation error in percent of reference motion.
    pub translation_percent: f64,
    pub delta: usize,
}

fn discrepancy(estimate: &[Pose], reference: &[Pose], a: usize, b: usize) -> (Pose, f64) {
    let gt = reference[a].between(&reference[b]);
    let est = estimate[a].between(&estimate[b]);
    (gt.inverse().compose(&est), gt.translation.norm())
}

/// RMSE over frame pairs `(k, k + delta)` of the relative-pose discrepancy.
pub fn rme(estimate: &[Pose], reference: &[Pose], delta: usize) -> Result<RelativeMotionError> {
    check_lengths(estimate, reference, 1)?;
    if delta == 0 || delta >= estimate.len() {
        return Err(Error::InvalidArgument(format!(
            "delta {delta} out of range for {} frames",
            estimate.len()
        )));
    }
    let pairs: Vec<(Pose, f64)> = (0..estimate.len() - delta)
        .map(|k| discrepancy(estimate, reference, k, k + delta))
        .collect();
    let distance: f64 = pairs.iter().map(|(_, d)| d).sum::<f64>() / pairs.len() as f64;
    let rotation_rad = rms(pairs.iter().map(|(e, _)| e.rotation.log().norm()));
    let translation_m = rms(pairs.iter().map(|(e, _)| e.translation.norm()));
    let per = |x: f64| if distance > 0.0 { x / distance } else { 0.0 };
    Ok(RelativeMotionError {
        rotation_rad,
        translation_m,
        rotation_deg_per_m: per(rotation_rad.to_degrees()),
        translation_percent: 100.0 * per(translation_m),
        delta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentStat {
    pub length: f64,
    pub count: usize,
    pub rotation_deg_per_100m: f64,
    pub translation_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentDrift {
    pub rotation_deg_per_100m: f64,
    pub translation_percent: f64,
    pub per_length: Vec<SegmentStat>,
}

/// Cumulative path length of the reference positions.
pub fn path_distances(poses: &[Pose]) -> Vec<f64> {
    let mut out = Vec::with_capacity(poses.len());
    let mut acc = 0.0;
    out.push(0.0);
    for w in poses.windows(2) {
        acc += (w[1].translation - w[0].translation).norm();
        out.push(acc);
    }
    out
}

pub fn segment_drift(estimate: &[Pose], reference: &[Pose], lengths: &[f64]) -> Result<SegmentDrift> {
    segment_drift_with(Execution::default(), estimate, reference, lengths)
}

/// For every start frame and segment length, compares motion from the start
/// to the first frame at least that far along the reference path. Errors are
/// normalized by the reference distance actually covered.
pub fn segment_drift_with(
    mode: Execution,
    estimate: &[Pose],
    reference: &[Pose],
    lengths: &[f64],
) -> Result<SegmentDrift> {
    check_lengths(estimate, reference, 2)?;
    let dist = path_distances(reference);
    let total = *dist.last().expect("non-empty");
    let feasible: Vec<f64> = lengths.iter().copied().filter(|&l| l > 0.0 && l <= total).collect();
    if feasible.is_empty() {
        return Err(Error::InsufficientData(format!(
            "reference path of {total:.3} m is shorter than every segment length"
        )));
    }
    let per_length: Vec<(SegmentStat, Vec<(f64, f64)>)> = par::map(mode, &feasible, |&length| {
        let mut errors = Vec::new();
        let mut end = 0;
        for start in 0..reference.len() {
            end = end.max(start);
            while end < reference.len() && dist[end] - dist[start] < length {
                end += 1;
            }
            if end == reference.len() {
                break;
            }
            let (e, _) = discrepancy(estimate, reference, start, end);
            let covered = dist[end] - dist[start];
            errors.push((
                e.rotation.log().norm().to_degrees() / covered * 100.0,
                100.0 * e.translation.norm() / covered,
            ));
        }
        let stat = SegmentStat {
            length,
            count: errors.len(),
            rotation_deg_per_100m: rms(errors.iter().map(|x| x.0)),
            translation_percent: rms(errors.iter().map(|x| x.1)),
        };
        (stat, errors)
    });
    let all: Vec<(f64, f64)> = per_length.iter().flat_map(|(_, e)| e.iter().copied()).collect();
    Ok(SegmentDrift {
        rotation_deg_per_100m: rms(all.iter().map(|x| x.0)),
        translation_percent: rms(all.iter().map(|x| x.1)),
        per_length: per_length.into_iter().map(|(s, _)| s).collect(),
    })
}

/// Nearest-neighbor association of timestamps within `max_offset` seconds.
/// Returns `(estimate index, reference index)` pairs in estimate order.
pub fn associate(estimate_times: &[f64], reference_times: &[f64], max_offset: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    if reference_times.is_empty() {
        return out;
    }
    for (i, &t) in estimate_times.iter().enumerate() {
        let j = reference_times.partition_point(|&r| r < t);
        let best = [j.checked_sub(1), (j < reference_times.len()).then_some(j)]
            .into_iter()
            .flatten()
            .min_by(|&a, &b| (reference_times[a] - t).abs().total_cmp(&(reference_times[b] - t).abs()));
        if let Some(b) = best {
            if (reference_times[b] - t).abs() <= max_offset {
                out.push((i, b));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub frames: usize,
    pub ate_aligned_m: f64,
    pub ate_unaligned_m: f64,
    pub rme: RelativeMotionError,
    /// Absent when the path is shorter than every segment length.
    pub segment_drift: Option<SegmentDrift>,
    pub alignment: [f64; 7],
}

pub fn evaluate(estimate: &[Pose], reference: &[Pose], rme_delta: usize, segment_lengths: &[f64]) -> Result<EvaluationReport> {
    let alignment = align_se3(estimate, reference)?;
    let segment_drift = match segment_drift(estimate, reference, segment_lengths) {
        Ok(d) => Some(d),
        Err(Error::InsufficientData(_)) => None,
        Err(e) => return Err(e),
    };
    let [w, x, y, z] = alignment.rotation.wxyz();
    let t = alignment.translation;
    Ok(EvaluationReport {
        frames: estimate.len(),
        ate_aligned_m: ate_rmse(estimate, reference, true)?,
        ate_unaligned_m: ate_rmse(estimate, reference, false)?,
        rme: rme(estimate, reference, rme_delta)?,
        segment_drift,
        alignment: [t.x, t.y, t.z, x, y, z, w],
    })
}
