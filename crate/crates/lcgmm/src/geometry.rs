//! Core 3D types and rigid-transform algebra: point clouds, rotations with
//! translations, weighted centroids, bounding volumes and the weighted SVD
//! alignment used by both registration methods.
//!
//! All coordinates are millimeters. Every type is an immutable value after
//! construction and every operation is a pure function.

use alloc::vec::Vec;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::fmath;

/// Construction tolerance for rotation matrices: orthonormality residual and
/// determinant deviation are both checked against this bound.
pub const ROTATION_TOL: f64 = 1e-9;

/// Floor applied to degenerate bounding-box extents so volumes stay positive.
pub const EXTENT_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point {index} has a non-finite coordinate")]
    NonFinitePoint { index: usize },
    #[error("rotation is not orthonormal: ||R^T R - I||_F = {deviation:.3e} exceeds {tol:.1e}")]
    NotOrthonormal { deviation: f64, tol: f64 },
    #[error("rotation determinant {det:.6} is not +1")]
    ImproperRotation { det: f64 },
    #[error("point sets differ in length: {source_len} vs {target_len}")]
    LengthMismatch { source_len: usize, target_len: usize },
    #[error("operation needs at least {required} points, got {actual}")]
    TooFewPoints { required: usize, actual: usize },
    #[error("weights must be nonnegative with a positive sum")]
    BadWeights,
    #[error("operation requires a non-empty cloud")]
    EmptyCloud,
    #[error("singular value decomposition did not converge")]
    SvdFailed,
}

/// An ordered set of 3D points in millimeters. Construction rejects
/// non-finite coordinates, so every cloud in circulation is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vector3<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self, GeometryError> {
        for (index, p) in points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(GeometryError::NonFinitePoint { index });
            }
        }
        Ok(Self { points })
    }

    pub fn from_rows(rows: &[[f64; 3]]) -> Result<Self, GeometryError> {
        Self::new(rows.iter().map(|r| Vector3::new(r[0], r[1], r[2])).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    /// Axis-aligned bounding box as `(min, max)`, or `None` for an empty cloud.
    pub fn bounding_box(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let first = *self.points.first()?;
        let mut lo = first;
        let mut hi = first;
        for p in &self.points[1..] {
            for axis in 0..3 {
                lo[axis] = lo[axis].min(p[axis]);
                hi[axis] = hi[axis].max(p[axis]);
            }
        }
        Some((lo, hi))
    }

    /// Diagonal of the axis-aligned bounding box; a cheap stand-in for the
    /// cloud diameter. Zero for an empty cloud.
    pub fn bbox_diagonal(&self) -> f64 {
        match self.bounding_box() {
            Some((lo, hi)) => (hi - lo).norm(),
            None => 0.0,
        }
    }
}

impl core::ops::Index<usize> for PointCloud {
    type Output = Vector3<f64>;
    fn index(&self, i: usize) -> &Vector3<f64> {
        &self.points[i]
    }
}

/// A proper rigid motion: rotation followed by translation, `p -> R p + t`.
///
/// The constructor enforces `R^T R = I` and `det R = +1` within
/// [`ROTATION_TOL`], so a value of this type is always a valid motion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        if rotation.iter().any(|v| !v.is_finite())
            || translation.iter().any(|v| !v.is_finite())
        {
            return Err(GeometryError::NonFinitePoint { index: 0 });
        }
        let deviation = (rotation.transpose() * rotation - Matrix3::identity()).norm();
        if deviation > ROTATION_TOL {
            return Err(GeometryError::NotOrthonormal {
                deviation,
                tol: ROTATION_TOL,
            });
        }
        let det = rotation.determinant();
        if fmath::abs(det - 1.0) > ROTATION_TOL {
            return Err(GeometryError::ImproperRotation { det });
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Skips the invariant checks; for results that are rotations by
    /// construction (SVD output, products of valid rotations).
    pub(crate) fn new_unchecked(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Inverse motion `(R^T, -R^T t)`; composing with `self` gives identity.
    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ inner`: applies `inner` first, then `self`.
    pub fn compose(&self, inner: &Self) -> Self {
        Self {
            rotation: self.rotation * inner.rotation,
            translation: self.rotation * inner.translation + self.translation,
        }
    }
}

/// Applies a rigid motion to every point, preserving order.
pub fn apply_transform(cloud: &PointCloud, transform: &RigidTransform) -> PointCloud {
    PointCloud {
        points: cloud.points().iter().map(|p| transform.apply(p)).collect(),
    }
}

/// Weighted mean of a cloud. `weights` must be nonnegative with a positive
/// sum; `None` means uniform.
pub fn centroid(cloud: &PointCloud, weights: Option<&[f64]>) -> Result<Vector3<f64>, GeometryError> {
    if cloud.is_empty() {
        return Err(GeometryError::EmptyCloud);
    }
    match weights {
        None => {
            let sum: Vector3<f64> = cloud.points().iter().sum();
            Ok(sum / cloud.len() as f64)
        }
        Some(w) => {
            if w.len() != cloud.len() {
                return Err(GeometryError::LengthMismatch {
                    source_len: cloud.len(),
                    target_len: w.len(),
                });
            }
            if w.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                return Err(GeometryError::BadWeights);
            }
            let total: f64 = w.iter().sum();
            if total <= 0.0 {
                return Err(GeometryError::BadWeights);
            }
            let mut acc = Vector3::zeros();
            for (p, &wi) in cloud.points().iter().zip(w) {
                acc += wi * p;
            }
            Ok(acc / total)
        }
    }
}

/// Volume of the axis-aligned bounding box after expanding every extent by
/// `padding_fraction` per side. Extents below [`EXTENT_FLOOR`] are floored
/// before multiplying so flat clouds still get a positive volume.
pub fn bounding_volume(cloud: &PointCloud, padding_fraction: f64) -> Result<f64, GeometryError> {
    let (lo, hi) = cloud.bounding_box().ok_or(GeometryError::EmptyCloud)?;
    let mut volume = 1.0;
    for axis in 0..3 {
        let extent = (hi[axis] - lo[axis]) * (1.0 + 2.0 * padding_fraction);
        volume *= extent.max(EXTENT_FLOOR);
    }
    Ok(volume)
}

/// Result of a weighted alignment. `degenerate` flags a rank-deficient
/// cross-covariance (collinear or coincident input), where the rotation is
/// not uniquely determined; the returned rotation is still proper.
#[derive(Debug, Clone, Copy)]
pub struct Alignment {
    pub transform: RigidTransform,
    pub degenerate: bool,
}

/// Weighted rigid alignment: finds the proper rotation and translation
/// minimizing `sum_i w_i ||R s_i + t - t_i||^2`.
///
/// The rotation comes from the SVD of the weighted cross-covariance with the
/// usual sign correction `diag(1, 1, det(V U^T))`, so `det R = +1` even when
/// the unconstrained optimum would be a reflection.
pub fn kabsch(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    weights: Option<&[f64]>,
) -> Result<Alignment, GeometryError> {
    if source.len() != target.len() {
        return Err(GeometryError::LengthMismatch {
            source_len: source.len(),
            target_len: target.len(),
        });
    }
    if source.len() < 3 {
        return Err(GeometryError::TooFewPoints {
            required: 3,
            actual: source.len(),
        });
    }
    if let Some(w) = weights {
        if w.len() != source.len() {
            return Err(GeometryError::LengthMismatch {
                source_len: source.len(),
                target_len: w.len(),
            });
        }
        if w.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(GeometryError::BadWeights);
        }
    }
    let total: f64 = match weights {
        Some(w) => w.iter().sum(),
        None => source.len() as f64,
    };
    if total <= 0.0 {
        return Err(GeometryError::BadWeights);
    }

    let weight = |i: usize| weights.map_or(1.0, |w| w[i]);
    let mut mu_s = Vector3::zeros();
    let mut mu_t = Vector3::zeros();
    for i in 0..source.len() {
        mu_s += weight(i) * source[i];
        mu_t += weight(i) * target[i];
    }
    mu_s /= total;
    mu_t /= total;

    let mut cross = Matrix3::zeros();
    for i in 0..source.len() {
        cross += weight(i) * (source[i] - mu_s) * (target[i] - mu_t).transpose();
    }

    let (rotation, degenerate) = rotation_from_cross_covariance(&cross)?;
    let translation = mu_t - rotation * mu_s;
    Ok(Alignment {
        transform: RigidTransform::new_unchecked(rotation, translation),
        degenerate,
    })
}

/// Shared SVD step: proper rotation maximizing `Tr(R H^T)` for a
/// cross-covariance `H = sum w s' t'^T`, plus a rank-deficiency flag.
pub(crate) fn rotation_from_cross_covariance(
    cross: &Matrix3<f64>,
) -> Result<(Matrix3<f64>, bool), GeometryError> {
    let svd = cross.svd(true, true);
    let u = svd.u.ok_or(GeometryError::SvdFailed)?;
    let v_t = svd.v_t.ok_or(GeometryError::SvdFailed)?;
    let v = v_t.transpose();
    let sign = (v * u.transpose()).determinant().signum();
    let rotation = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, sign)) * u.transpose();
    let s = svd.singular_values;
    let degenerate = s[0] <= 0.0 || s[1] <= 1e-12 * s[0];
    Ok((rotation, degenerate))
}
