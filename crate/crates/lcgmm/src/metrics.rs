//! Registration error measures: point-wise transform discrepancy, rotation
//! Frobenius error, translation error and thresholded cloud-to-cloud RMSE.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::fmath;
use crate::geometry::{PointCloud, RigidTransform};
use crate::spatial::SpatialIndex;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("metric requires a non-empty cloud")]
    EmptyCloud,
    #[error("no correspondence within the {threshold} mm distance threshold")]
    NoCorrespondences { threshold: f64 },
}

/// How the point-wise transform discrepancy is aggregated.
///
/// `MeanThenSqrt` is the conventional root-mean-square,
/// `sqrt(sum / M)`. `SqrtThenDivide` computes `sqrt(sum) / M`, dividing the
/// root by the count instead; both are kept because published numbers use
/// either. The two agree at `M = 1` and rank methods identically at fixed
/// `M`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RmseConvention {
    #[default]
    MeanThenSqrt,
    SqrtThenDivide,
}

/// The three standard errors of one registration outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorTriple {
    /// Point-wise transform discrepancy over the model cloud (mm).
    pub rmse: f64,
    /// Frobenius norm of the rotation difference (dimensionless).
    pub rot_error: f64,
    /// Euclidean norm of the translation difference (mm).
    pub trans_error: f64,
}

/// Discrepancy between two transforms measured over the model cloud:
/// aggregated norm of `phi_gt(y) - phi_est(y)` per [`RmseConvention`].
pub fn transform_rmse(
    model: &PointCloud,
    t_gt: &RigidTransform,
    t_est: &RigidTransform,
    convention: RmseConvention,
) -> f64 {
    assert!(!model.is_empty(), "transform_rmse needs a non-empty cloud");
    let sum: f64 = model
        .points()
        .iter()
        .map(|p| (t_gt.apply(p) - t_est.apply(p)).norm_squared())
        .sum();
    let m = model.len() as f64;
    match convention {
        RmseConvention::MeanThenSqrt => fmath::sqrt(sum / m),
        RmseConvention::SqrtThenDivide => fmath::sqrt(sum) / m,
    }
}

/// Frobenius norm of the difference between two rotation matrices.
pub fn rotation_error(r_gt: &Matrix3<f64>, r_est: &Matrix3<f64>) -> f64 {
    (r_gt - r_est).norm()
}

/// Euclidean distance between two translation vectors.
pub fn translation_error(t_gt: &Vector3<f64>, t_est: &Vector3<f64>) -> f64 {
    (t_gt - t_est).norm()
}

/// All three errors for an estimated transform against the ground truth.
pub fn evaluate(
    model: &PointCloud,
    t_gt: &RigidTransform,
    t_est: &RigidTransform,
    convention: RmseConvention,
) -> ErrorTriple {
    ErrorTriple {
        rmse: transform_rmse(model, t_gt, t_est, convention),
        rot_error: rotation_error(t_gt.rotation(), t_est.rotation()),
        trans_error: translation_error(t_gt.translation(), t_est.translation()),
    }
}

/// Root-mean-square nearest-neighbor distance from each scanned point to the
/// model, keeping only correspondences within `threshold` millimeters.
/// Errors out when every correspondence is farther than the threshold.
pub fn cloud_rmse(
    scanned: &PointCloud,
    model: &PointCloud,
    threshold: f64,
) -> Result<f64, MetricsError> {
    if scanned.is_empty() || model.is_empty() {
        return Err(MetricsError::EmptyCloud);
    }
    let index = SpatialIndex::build(model);
    let mut kept = 0usize;
    let mut sum_sq = 0.0;
    for p in scanned.points() {
        let (_, d) = index.nearest(p);
        if d <= threshold {
            kept += 1;
            sum_sq += d * d;
        }
    }
    if kept == 0 {
        return Err(MetricsError::NoCorrespondences { threshold });
    }
    Ok(fmath::sqrt(sum_sq / kept as f64))
}
