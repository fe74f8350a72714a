//! Point-to-point ICP baseline for the comparative experiments.

use alloc::vec::Vec;

use crate::fmath;
use crate::geometry::{self, PointCloud, RigidTransform};
use crate::mixture::{ConvergenceReason, RegistrationError, RegistrationReport};
use crate::spatial::SpatialIndex;

/// ICP knobs. `trim_fraction` drops that share of the worst residuals each
/// iteration (0 = plain point-to-point ICP, the setting used in all
/// comparisons).
#[derive(Debug, Clone, PartialEq)]
pub struct IcpConfig {
    pub max_iterations: usize,
    /// Stop once the root-mean-square residual changes by less than this
    /// between iterations (mm).
    pub convergence_tol: f64,
    pub trim_fraction: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            convergence_tol: 1e-6,
            trim_fraction: 0.0,
        }
    }
}

impl IcpConfig {
    pub fn validate(&self) -> Result<(), RegistrationError> {
        if self.max_iterations == 0 {
            return Err(RegistrationError::InvalidConfig(
                "max_iterations must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.trim_fraction) {
            return Err(RegistrationError::InvalidConfig(
                "trim_fraction must lie in [0, 1)".into(),
            ));
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(RegistrationError::InvalidConfig(
                "convergence_tol must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Iterative closest point: each transformed model point is matched to its
/// nearest scanned point, the worst `trim_fraction` residuals are dropped,
/// and the alignment of the remaining pairs is re-solved in closed form.
///
/// Starts from the centroid-aligning translation, mirroring the mixture
/// solver so accuracy comparisons share the same initialization. The report's
/// `objective_trace` holds the mean squared residual per iteration; the
/// returned transform maps the model into the scanned frame.
pub fn icp(
    x: &PointCloud,
    y: &PointCloud,
    cfg: &IcpConfig,
) -> Result<RegistrationReport, RegistrationError> {
    cfg.validate()?;
    for (cloud, side) in [(x, "scanned"), (y, "model")] {
        if cloud.len() < 3 {
            return Err(RegistrationError::TooFewPoints {
                side,
                required: 3,
                actual: cloud.len(),
            });
        }
    }

    #[cfg(feature = "std")]
    let start = std::time::Instant::now();

    let index = SpatialIndex::build(x);
    let mut transform = RigidTransform::new_unchecked(
        nalgebra::Matrix3::identity(),
        geometry::centroid(x, None)? - geometry::centroid(y, None)?,
    );

    // (model index, scanned index, squared residual) at the current transform.
    let correspondences = |t: &RigidTransform| -> Vec<(usize, usize, f64)> {
        let pairs = crate::exec::chunked(y.len(), crate::exec::ROW_CHUNK, |range| {
            let mut local = Vec::with_capacity(range.len());
            for m in range {
                let moved = t.apply(&y[m]);
                let (n, d) = index.nearest(&moved);
                local.push((m, n, d * d));
            }
            local
        });
        pairs.into_iter().flatten().collect()
    };

    let mut prev_rms = {
        let pairs = correspondences(&transform);
        let mse = pairs.iter().map(|p| p.2).sum::<f64>() / pairs.len() as f64;
        fmath::sqrt(mse)
    };

    let mut trace = Vec::with_capacity(cfg.max_iterations);
    let mut converged_by = ConvergenceReason::MaxIterations;

    for iteration in 1..=cfg.max_iterations {
        let mut pairs = correspondences(&transform);
        if cfg.trim_fraction > 0.0 {
            let drop = (cfg.trim_fraction * pairs.len() as f64) as usize;
            // Deterministic order under residual ties.
            pairs.sort_by(|a, b| a.2.partial_cmp(&b.2).unwrap().then(a.0.cmp(&b.0)));
            pairs.truncate(pairs.len() - drop);
        }
        if pairs.len() < 3 {
            return Err(RegistrationError::DegenerateCorrespondences {
                kept: pairs.len(),
                iteration,
            });
        }

        let source: Vec<_> = pairs.iter().map(|&(m, _, _)| y[m]).collect();
        let target: Vec<_> = pairs.iter().map(|&(_, n, _)| x[n]).collect();
        let alignment = geometry::kabsch(&source, &target, None)?;
        transform = alignment.transform;

        let mse = pairs
            .iter()
            .map(|&(m, n, _)| (transform.apply(&y[m]) - x[n]).norm_squared())
            .sum::<f64>()
            / pairs.len() as f64;
        trace.push(mse);

        let rms = fmath::sqrt(mse);
        if iteration == cfg.max_iterations {
            converged_by = ConvergenceReason::MaxIterations;
        } else if fmath::abs(prev_rms - rms) < cfg.convergence_tol {
            converged_by = ConvergenceReason::TransformTolerance;
            break;
        }
        prev_rms = rms;
    }

    #[cfg(feature = "std")]
    let wall_time = start.elapsed().as_secs_f64();
    #[cfg(not(feature = "std"))]
    let wall_time = 0.0;

    Ok(RegistrationReport {
        transform,
        iterations_run: trace.len(),
        objective_trace: trace,
        final_variances: Vec::new(),
        converged_by,
        wall_time,
    })
}
