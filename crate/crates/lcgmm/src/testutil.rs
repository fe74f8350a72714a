//! Shared helpers for unit tests.

use alloc::vec::Vec;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;

use crate::geometry::PointCloud;

pub(crate) fn rot_z(angle: f64) -> Matrix3<f64> {
    let (s, c) = (angle.sin(), angle.cos());
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Uniform random rotation from a normalized quaternion.
pub(crate) fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
    loop {
        let q: [f64; 4] = core::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-3 {
            continue;
        }
        let [w, x, y, z] = q.map(|v| v / norm);
        return Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        );
    }
}

pub(crate) fn random_cloud(n: usize, scale: f64, rng: &mut impl Rng) -> PointCloud {
    let points: Vec<Vector3<f64>> = (0..n)
        .map(|_| {
            Vector3::new(
                rng.random_range(-scale..scale),
                rng.random_range(-scale..scale),
                rng.random_range(-scale..scale),
            )
        })
        .collect();
    PointCloud::new(points).unwrap()
}
