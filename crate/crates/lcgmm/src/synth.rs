//! Deterministic synthetic-data generators: subsampling, random rigid
//! misalignments, Gaussian noise, uniform outliers and a parametric
//! blade-like test surface.
//!
//! Every generator is a pure function of its inputs and a seed. The RNG is
//! ChaCha8 (`rand_chacha`), a named stream cipher with a portable, documented
//! keystream, so trials replay bit-identically across platforms and thread
//! counts. Draw order is fixed and documented per generator.

use alloc::vec::Vec;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::fmath;
use crate::geometry::{apply_transform, PointCloud, RigidTransform};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("cannot sample {requested} points from a cloud of {available}")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("{name} = {value} is outside {range}")]
    OutOfRange {
        name: &'static str,
        value: f64,
        range: &'static str,
    },
}

/// Recipe for one corrupted scan: subsample size, noise level, outlier
/// ratio, per-axis misalignment ranges and the trial seed.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionSpec {
    pub n_points: usize,
    /// Standard deviation of the isotropic Gaussian noise (mm).
    pub noise_sigma: f64,
    /// Fraction of spurious points appended, relative to the clean count.
    pub outlier_ratio: f64,
    /// Per-axis rotation range, symmetric around zero (degrees).
    pub angle_range_deg: f64,
    /// Per-axis translation range, symmetric around zero (mm).
    pub trans_range: f64,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_points == 0 {
            return Err(SynthError::OutOfRange {
                name: "n_points",
                value: 0.0,
                range: "[1, inf)",
            });
        }
        if !(0.0..1.0).contains(&self.outlier_ratio) {
            return Err(SynthError::OutOfRange {
                name: "outlier_ratio",
                value: self.outlier_ratio,
                range: "[0, 1)",
            });
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(SynthError::OutOfRange {
                name: "noise_sigma",
                value: self.noise_sigma,
                range: "[0, inf)",
            });
        }
        Ok(())
    }
}

/// SplitMix64 step; the documented integer mix behind [`derive_seed`].
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `(base, stream, index)` with two SplitMix64
/// rounds. Children for different `(stream, index)` pairs are independent,
/// and extending a grid never perturbs earlier pairs.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    splitmix64(base ^ splitmix64(stream.wrapping_mul(0x100000001b3) ^ splitmix64(index)))
}

// Fixed per-purpose streams for the stages of one synthetic trial.
const STREAM_SUBSAMPLE: u64 = 1;
const STREAM_TRANSFORM: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_OUTLIERS: u64 = 4;

/// Uniform sample of `n` points without replacement, in original order.
/// A partial Fisher-Yates shuffle picks the index set; the selection is then
/// sorted so `n = len` returns the cloud unchanged.
pub fn subsample(cloud: &PointCloud, n: usize, seed: u64) -> Result<PointCloud, SynthError> {
    if n > cloud.len() {
        return Err(SynthError::SampleTooLarge {
            requested: n,
            available: cloud.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<u32> = (0..cloud.len() as u32).collect();
    for i in 0..n {
        let j = rng.random_range(i..indices.len());
        indices.swap(i, j);
    }
    let mut chosen = indices[..n].to_vec();
    chosen.sort_unstable();
    let points = chosen.iter().map(|&i| cloud[i as usize]).collect();
    Ok(PointCloud::new(points).expect("subsample of a finite cloud is finite"))
}

/// Random rigid motion: Euler angles drawn uniformly per axis in
/// `±angle_range_deg` (drawn in x, y, z order, composed as `Rz * Ry * Rx`),
/// then translation components uniform in `±trans_range`.
pub fn random_rigid(spec: &CorruptionSpec) -> RigidTransform {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, STREAM_TRANSFORM, 0));
    let half = fmath::abs(spec.angle_range_deg) * core::f64::consts::PI / 180.0;
    let angle = |rng: &mut ChaCha8Rng| {
        if half == 0.0 {
            0.0
        } else {
            rng.random_range(-half..=half)
        }
    };
    let ax = angle(&mut rng);
    let ay = angle(&mut rng);
    let az = angle(&mut rng);
    let shift = |rng: &mut ChaCha8Rng| {
        if spec.trans_range == 0.0 {
            0.0
        } else {
            let r = fmath::abs(spec.trans_range);
            rng.random_range(-r..=r)
        }
    };
    let translation = Vector3::new(shift(&mut rng), shift(&mut rng), shift(&mut rng));

    let (sx, cx) = (fmath::sin(ax), fmath::cos(ax));
    let (sy, cy) = (fmath::sin(ay), fmath::cos(ay));
    let (sz, cz) = (fmath::sin(az), fmath::cos(az));
    let rot_x = Matrix3::new(1.0, 0.0, 0.0, 0.0, cx, -sx, 0.0, sx, cx);
    let rot_y = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
    let rot_z = Matrix3::new(cz, -sz, 0.0, sz, cz, 0.0, 0.0, 0.0, 1.0);
    RigidTransform::new(rot_z * rot_y * rot_x, translation)
        .expect("product of axis rotations is a rotation")
}

/// Adds independent zero-mean isotropic Gaussian displacement to every
/// point, `sigma` millimeters per coordinate. Points are processed in order,
/// coordinates in x, y, z order. `sigma = 0` returns the cloud unchanged.
pub fn add_gaussian_noise(cloud: &PointCloud, sigma: f64, seed: u64) -> PointCloud {
    if sigma == 0.0 {
        return cloud.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma validated nonnegative");
    let points = cloud
        .points()
        .iter()
        .map(|p| {
            Vector3::new(
                p.x + normal.sample(&mut rng),
                p.y + normal.sample(&mut rng),
                p.z + normal.sample(&mut rng),
            )
        })
        .collect();
    PointCloud::new(points).expect("finite cloud plus finite noise is finite")
}

/// Appends `round(ratio * n)` outliers drawn uniformly inside the input's
/// axis-aligned bounding box padded by 5% per side, matching the uniform
/// outlier component of the mixture. Original points stay first, unchanged.
pub fn add_outliers(cloud: &PointCloud, ratio: f64, seed: u64) -> PointCloud {
    assert!(
        (0.0..1.0).contains(&ratio),
        "outlier ratio must lie in [0, 1)"
    );
    let count = fmath::round(ratio * cloud.len() as f64) as usize;
    if count == 0 {
        return cloud.clone();
    }
    let (lo, hi) = cloud
        .bounding_box()
        .expect("outliers need a non-empty cloud");
    let mut lo_pad = lo;
    let mut hi_pad = hi;
    for axis in 0..3 {
        let pad = 0.05 * (hi[axis] - lo[axis]);
        lo_pad[axis] -= pad;
        hi_pad[axis] += pad;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = cloud.points().to_vec();
    for _ in 0..count {
        points.push(Vector3::new(
            rng.random_range(lo_pad.x..=hi_pad.x),
            rng.random_range(lo_pad.y..=hi_pad.y),
            rng.random_range(lo_pad.z..=hi_pad.z),
        ));
    }
    PointCloud::new(points).expect("outliers drawn from a finite box are finite")
}

/// One full synthetic trial: subsample the model, move it by a random rigid
/// ground truth, add noise, then outliers. Returns the corrupted scan and
/// the ground-truth transform that maps the model into the scanned frame.
///
/// Stage seeds derive from `spec.seed` via [`derive_seed`] with fixed
/// per-stage streams, so the whole trial replays from one seed.
pub fn synthesize_scan(
    model: &PointCloud,
    spec: &CorruptionSpec,
) -> Result<(PointCloud, RigidTransform), SynthError> {
    spec.validate()?;
    let sampled = subsample(model, spec.n_points, derive_seed(spec.seed, STREAM_SUBSAMPLE, 0))?;
    let ground_truth = random_rigid(spec);
    let moved = apply_transform(&sampled, &ground_truth);
    let noisy = add_gaussian_noise(&moved, spec.noise_sigma, derive_seed(spec.seed, STREAM_NOISE, 0));
    let corrupted = add_outliers(
        &noisy,
        spec.outlier_ratio,
        derive_seed(spec.seed, STREAM_OUTLIERS, 0),
    );
    Ok((corrupted, ground_truth))
}

/// Samples a twisted, cambered blade-like sheet: roughly 120 mm of span,
/// 45 mm of chord, with spanwise twist and bow so the surface has full rank.
/// Deterministic per seed; useful as a desk-scale stand-in for an inspection
/// part.
pub fn sample_blade(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = 120.0;
    let chord = 45.0;
    let camber = 8.0;
    let twist_deg = 35.0;
    let bow = 10.0;
    let points = (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(0.0..=1.0);
            let v: f64 = rng.random_range(0.0..=1.0);
            let xi = chord * (u - 0.5);
            let zeta = camber * fmath::sin(core::f64::consts::PI * u);
            let theta = (v - 0.5) * twist_deg * core::f64::consts::PI / 180.0;
            let (s, c) = (fmath::sin(theta), fmath::cos(theta));
            Vector3::new(
                xi * c - zeta * s + bow * (v - 0.5) * (v - 0.5),
                xi * s + zeta * c,
                span * (v - 0.5),
            )
        })
        .collect();
    PointCloud::new(points).expect("blade surface is finite")
}
