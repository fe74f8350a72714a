//! Locally consistent GMM registration: the E-step, the closed-form
//! neighbor-divergence penalty, the three M-step updates and the outer
//! registration loop.
//!
//! The transformed model points act as centroids of an isotropic Gaussian
//! mixture with per-component variances, augmented by a uniform outlier
//! component over the scanned cloud's bounding volume. Scanned points are
//! the samples. Each iteration computes posterior responsibilities in
//! log-space, then updates translation, rotation and variances in closed
//! form. A symmetrized KL divergence between the posterior rows of
//! neighboring scanned points, weighted by `lambda`, pulls neighbors toward
//! agreeing correspondences, which is what buys robustness to noise and
//! outliers.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::exec;
use crate::fmath;
use crate::geometry::{self, GeometryError, PointCloud, RigidTransform};
use crate::spatial::{build_knn_graph, NeighborGraph, SpatialError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistrationError {
    #[error("{side} cloud is empty")]
    EmptyCloud { side: &'static str },
    #[error("{side} cloud needs at least {required} points, got {actual}")]
    TooFewPoints {
        side: &'static str,
        required: usize,
        actual: usize,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(
        "posterior collapse: all responsibility fell on the outlier component \
         (omega = {omega}) at iteration {iteration}"
    )]
    PosteriorCollapse { omega: f64, iteration: usize },
    #[error("rotation update failed (degenerate cross-covariance) at iteration {iteration}")]
    DegenerateRotation { iteration: usize },
    #[error("only {kept} correspondences left after trimming at iteration {iteration}")]
    DegenerateCorrespondences { kept: usize, iteration: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Spatial(#[from] SpatialError),
}

/// Mixture parameters that are not the transform: per-component variances,
/// the uniform component prior, the outlier weight and the bounding volume
/// of the scanned cloud.
///
/// Invariants: every variance is positive, `m * prior + outlier_weight = 1`,
/// and the volume is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureState {
    variances: Vec<f64>,
    component_prior: f64,
    outlier_weight: f64,
    volume: f64,
}

impl MixtureState {
    pub fn new(
        variances: Vec<f64>,
        outlier_weight: f64,
        volume: f64,
    ) -> Result<Self, RegistrationError> {
        if variances.is_empty() {
            return Err(RegistrationError::InvalidConfig(
                "mixture needs at least one component".into(),
            ));
        }
        if variances.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(RegistrationError::InvalidConfig(
                "variances must be positive and finite".into(),
            ));
        }
        if !(0.0..=1.0).contains(&outlier_weight) {
            return Err(RegistrationError::InvalidConfig(
                "outlier weight must lie in [0, 1]".into(),
            ));
        }
        if !(volume > 0.0) || !volume.is_finite() {
            return Err(RegistrationError::InvalidConfig(
                "bounding volume must be positive".into(),
            ));
        }
        let component_prior = (1.0 - outlier_weight) / variances.len() as f64;
        Ok(Self {
            variances,
            component_prior,
            outlier_weight,
            volume,
        })
    }

    pub fn component_count(&self) -> usize {
        self.variances.len()
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn component_prior(&self) -> f64 {
        self.component_prior
    }

    pub fn outlier_weight(&self) -> f64 {
        self.outlier_weight
    }

    pub fn volume(&self) -> f64 {
        self.volume
    }

    /// Replaces the variances, e.g. with the output of [`update_variances`].
    /// The new slice must have the same length and stay positive.
    pub fn set_variances(&mut self, variances: Vec<f64>) {
        debug_assert_eq!(variances.len(), self.variances.len());
        debug_assert!(variances.iter().all(|&v| v > 0.0));
        self.variances = variances;
    }
}

/// Row-major `n x (m + 1)` responsibility matrix; the last column is the
/// uniform outlier component. Every row is a probability distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix {
    n: usize,
    m: usize,
    data: Vec<f64>,
}

impl PosteriorMatrix {
    fn zeros(n: usize, m: usize) -> Self {
        Self {
            n,
            m,
            data: vec![0.0; n * (m + 1)],
        }
    }

    pub fn n_points(&self) -> usize {
        self.n
    }

    pub fn n_components(&self) -> usize {
        self.m
    }

    /// Full row for scanned point `n`, outlier entry last (`m + 1` values).
    pub fn row(&self, n: usize) -> &[f64] {
        &self.data[n * (self.m + 1)..(n + 1) * (self.m + 1)]
    }

    /// Component columns of row `n`, without the outlier entry.
    pub fn components(&self, n: usize) -> &[f64] {
        &self.data[n * (self.m + 1)..n * (self.m + 1) + self.m]
    }

    pub fn outlier(&self, n: usize) -> f64 {
        self.data[n * (self.m + 1) + self.m]
    }

    /// Zeroes responsibilities below `threshold` and renormalizes each row.
    /// The row maximum is always kept, so rows stay valid distributions.
    pub fn truncate(&mut self, threshold: f64) {
        if threshold <= 0.0 {
            return;
        }
        let cols = self.m + 1;
        exec::fill_rows(&mut self.data, cols, |_, row| {
            let mut max_idx = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[max_idx] {
                    max_idx = j;
                }
            }
            let mut sum = 0.0;
            for (j, v) in row.iter_mut().enumerate() {
                if j != max_idx && *v < threshold {
                    *v = 0.0;
                }
                sum += *v;
            }
            let inv = 1.0 / sum;
            for v in row.iter_mut() {
                *v *= inv;
            }
        });
    }
}

/// Knobs for [`register`]. `Default` gives the values used throughout the
/// benchmark harness.
#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationConfig {
    /// Weight of the local-consistency penalty; zero disables it.
    pub lambda: f64,
    /// Prior mass of the uniform outlier component.
    pub outlier_weight: f64,
    /// Neighbors per point for the consistency graph.
    pub knn_k: usize,
    pub max_iterations: usize,
    /// Stop once the rotation Frobenius delta plus translation delta drops
    /// below this (millimeters).
    pub convergence_tol: f64,
    /// Lower bound for variances (mm^2). `None` derives
    /// `1e-9 * (bounding-box diagonal)^2` from the scanned cloud.
    pub variance_floor: Option<f64>,
    /// Responsibilities below this are zeroed after each E-step (0 keeps the
    /// exact dense posterior).
    pub posterior_truncation: f64,
    /// Reserved for stochastic variants; the solver itself is deterministic.
    pub seed: u64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            outlier_weight: 0.1,
            knn_k: 8,
            max_iterations: 100,
            convergence_tol: 1e-7,
            variance_floor: None,
            posterior_truncation: 0.0,
            seed: 0,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<(), RegistrationError> {
        let fail = |msg: &str| Err(RegistrationError::InvalidConfig(msg.into()));
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return fail("lambda must be a nonnegative finite number");
        }
        if !(0.0..=1.0).contains(&self.outlier_weight) {
            return fail("outlier weight must lie in [0, 1]");
        }
        if self.knn_k == 0 {
            return fail("knn_k must be at least 1");
        }
        if self.max_iterations == 0 {
            return fail("max_iterations must be at least 1");
        }
        if !(self.convergence_tol >= 0.0) {
            return fail("convergence_tol must be nonnegative");
        }
        if let Some(floor) = self.variance_floor {
            if !(floor > 0.0) || !floor.is_finite() {
                return fail("variance_floor must be positive");
            }
        }
        if !(0.0..1.0).contains(&self.posterior_truncation) {
            return fail("posterior_truncation must lie in [0, 1)");
        }
        Ok(())
    }

    fn resolve_floor(&self, scanned: &PointCloud) -> f64 {
        match self.variance_floor {
            Some(f) => f,
            None => {
                let diag = scanned.bbox_diagonal().max(geometry::EXTENT_FLOOR);
                1e-9 * diag * diag
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvergenceReason {
    MaxIterations,
    TransformTolerance,
}

/// Outcome of a registration run. The transform maps the model cloud into
/// the scanned cloud's frame.
#[derive(Debug, Clone)]
pub struct RegistrationReport {
    pub transform: RigidTransform,
    pub iterations_run: usize,
    /// Objective value after each iteration's updates.
    pub objective_trace: Vec<f64>,
    pub final_variances: Vec<f64>,
    pub converged_by: ConvergenceReason,
    /// Seconds; zero when built without `std`.
    pub wall_time: f64,
}

/// Rotation update result. `degenerate` marks a rank-deficient
/// cross-covariance (single component, collinear support), where the
/// rotation is not uniquely determined but the returned one is still proper.
#[derive(Debug, Clone, Copy)]
pub struct RotationUpdate {
    pub transform: RigidTransform,
    pub degenerate: bool,
}

/// Objective split: `total = gmm + lambda * local_consistency`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    pub total: f64,
    pub gmm: f64,
    pub local_consistency: f64,
}

// ---------------------------------------------------------------------------
// Shared scratch: transformed model points and the squared-distance matrix,
// cached per transform so consecutive steps of one iteration reuse them.
// ---------------------------------------------------------------------------

#[derive(Default)]
struct Scratch {
    phi_y: Vec<Vector3<f64>>,
    dist_sq: Vec<f64>,
    cached_for: Option<RigidTransform>,
}

impl Scratch {
    fn ensure(&mut self, x: &[Vector3<f64>], y: &[Vector3<f64>], t: &RigidTransform) {
        if self.cached_for.as_ref() == Some(t) {
            return;
        }
        self.phi_y.clear();
        self.phi_y.extend(y.iter().map(|p| t.apply(p)));
        self.dist_sq.resize(x.len() * y.len(), 0.0);
        let phi = &self.phi_y;
        exec::fill_rows(&mut self.dist_sq, y.len(), |n, row| {
            let xn = x[n];
            for (out, q) in row.iter_mut().zip(phi) {
                *out = (xn - q).norm_squared();
            }
        });
        self.cached_for = Some(*t);
    }

    fn row(&self, n: usize, m: usize) -> &[f64] {
        &self.dist_sq[n * m..(n + 1) * m]
    }
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// Initial parameters: identity rotation with centroid-aligning translation,
/// one shared variance set to the mean squared cross-distance over `3 N M`
/// after that alignment, and the padded bounding volume of the scanned cloud.
pub fn init_state(
    x: &PointCloud,
    y: &PointCloud,
    cfg: &RegistrationConfig,
) -> Result<(MixtureState, RigidTransform), RegistrationError> {
    cfg.validate()?;
    if x.is_empty() {
        return Err(RegistrationError::EmptyCloud { side: "scanned" });
    }
    if y.is_empty() {
        return Err(RegistrationError::EmptyCloud { side: "model" });
    }
    let t0 = geometry::centroid(x, None)? - geometry::centroid(y, None)?;
    let transform = RigidTransform::new_unchecked(Matrix3::identity(), t0);

    let (n, m) = (x.len(), y.len());
    let xs = x.points();
    let ys = y.points();
    let partials = exec::chunked(n, exec::ROW_CHUNK, |range| {
        let mut acc = 0.0;
        for i in range {
            for yj in ys {
                acc += (xs[i] - (yj + t0)).norm_squared();
            }
        }
        acc
    });
    let total: f64 = partials.into_iter().sum();
    let sigma2 = (total / (3.0 * n as f64 * m as f64)).max(cfg.resolve_floor(x));

    let volume = geometry::bounding_volume(x, 0.05)?;
    let state = MixtureState::new(vec![sigma2; m], cfg.outlier_weight, volume)?;
    Ok((state, transform))
}

// ---------------------------------------------------------------------------
// E-step
// ---------------------------------------------------------------------------

/// Posterior responsibilities of every scanned point under the current
/// transform and mixture parameters.
///
/// Rows are computed in log space with a per-row maximum shift; the uniform
/// outlier component enters as `log(outlier_weight / volume)`. Every row
/// sums to one.
pub fn e_step(
    x: &PointCloud,
    y: &PointCloud,
    t: &RigidTransform,
    state: &MixtureState,
) -> PosteriorMatrix {
    let mut scratch = Scratch::default();
    scratch.ensure(x.points(), y.points(), t);
    e_step_cached(x.len(), &scratch, state)
}

fn e_step_cached(n: usize, scratch: &Scratch, state: &MixtureState) -> PosteriorMatrix {
    let m = state.component_count();
    let log_pi = if state.component_prior > 0.0 {
        fmath::ln(state.component_prior)
    } else {
        f64::NEG_INFINITY
    };
    let log_norm: Vec<f64> = state
        .variances
        .iter()
        .map(|&s2| log_pi - 1.5 * fmath::ln(2.0 * core::f64::consts::PI * s2))
        .collect();
    let inv_two_s2: Vec<f64> = state.variances.iter().map(|&s2| 0.5 / s2).collect();
    let log_outlier = if state.outlier_weight > 0.0 {
        fmath::ln(state.outlier_weight) - fmath::ln(state.volume)
    } else {
        f64::NEG_INFINITY
    };

    let mut posterior = PosteriorMatrix::zeros(n, m);
    exec::fill_rows(&mut posterior.data, m + 1, |row_idx, row| {
        let d2 = scratch.row(row_idx, m);
        let mut max = log_outlier;
        for j in 0..m {
            let l = log_norm[j] - d2[j] * inv_two_s2[j];
            row[j] = l;
            if l > max {
                max = l;
            }
        }
        row[m] = log_outlier;
        // max is finite: either some component prior is positive or the
        // outlier weight is 1.
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = fmath::exp(*v - max);
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    });
    posterior
}

// ---------------------------------------------------------------------------
// Local consistency
// ---------------------------------------------------------------------------

/// Symmetrized KL divergence between the posterior rows of scanned points
/// `i` and `j`, in the closed form left after the shared normalizer and
/// outlier terms cancel:
/// `sum_m (p_mi - p_mj) (||x_j - phi(y_m)||^2 - ||x_i - phi(y_m)||^2) / (4 sigma_m^2)`.
pub fn pairwise_divergence(
    i: usize,
    j: usize,
    posterior: &PosteriorMatrix,
    x: &PointCloud,
    y: &PointCloud,
    t: &RigidTransform,
    state: &MixtureState,
) -> f64 {
    let pi = posterior.components(i);
    let pj = posterior.components(j);
    let (xi, xj) = (x[i], x[j]);
    let mut acc = 0.0;
    for (m, (&a, &b)) in pi.iter().zip(pj).enumerate() {
        let phi = t.apply(&y[m]);
        let di = (xi - phi).norm_squared();
        let dj = (xj - phi).norm_squared();
        acc += (a - b) * (dj - di) * 0.25 / state.variances[m];
    }
    acc
}

fn divergence_cached(
    i: usize,
    j: usize,
    posterior: &PosteriorMatrix,
    scratch: &Scratch,
    inv_four_s2: &[f64],
) -> f64 {
    let m = posterior.m;
    let pi = posterior.components(i);
    let pj = posterior.components(j);
    let di = scratch.row(i, m);
    let dj = scratch.row(j, m);
    let mut acc = 0.0;
    for k in 0..m {
        acc += (pi[k] - pj[k]) * (dj[k] - di[k]) * inv_four_s2[k];
    }
    acc
}

/// Total local-consistency penalty: the divergence summed over all ordered
/// neighbor pairs, i.e. twice the sum over unordered graph edges.
pub fn local_consistency(
    posterior: &PosteriorMatrix,
    graph: &NeighborGraph,
    x: &PointCloud,
    y: &PointCloud,
    t: &RigidTransform,
    state: &MixtureState,
) -> f64 {
    let mut scratch = Scratch::default();
    scratch.ensure(x.points(), y.points(), t);
    let inv_four_s2: Vec<f64> = state.variances.iter().map(|&s2| 0.25 / s2).collect();
    local_consistency_cached(posterior, graph, &scratch, &inv_four_s2)
}

fn local_consistency_cached(
    posterior: &PosteriorMatrix,
    graph: &NeighborGraph,
    scratch: &Scratch,
    inv_four_s2: &[f64],
) -> f64 {
    let edges = graph.edges();
    let partials = exec::chunked(edges.len(), exec::EDGE_CHUNK, |range| {
        let mut acc = 0.0;
        for &(i, j) in &edges[range] {
            acc += divergence_cached(i as usize, j as usize, posterior, scratch, inv_four_s2);
        }
        acc
    });
    2.0 * partials.into_iter().sum::<f64>()
}

// ---------------------------------------------------------------------------
// Objective
// ---------------------------------------------------------------------------

/// Evaluates the regularized objective at the given parameters with the
/// posterior held fixed. The mixture part sums
/// `p_nm ||x_n - phi(y_m)||^2 / (2 sigma_m^2) + 1.5 p_nm log sigma_m^2`
/// over component columns only; the outlier column contributes a constant
/// and is dropped.
pub fn objective(
    posterior: &PosteriorMatrix,
    graph: &NeighborGraph,
    x: &PointCloud,
    y: &PointCloud,
    t: &RigidTransform,
    state: &MixtureState,
    lambda: f64,
) -> ObjectiveValue {
    let mut scratch = Scratch::default();
    scratch.ensure(x.points(), y.points(), t);
    let gmm = gmm_objective_cached(posterior, &scratch, state);
    let inv_four_s2: Vec<f64> = state.variances.iter().map(|&s2| 0.25 / s2).collect();
    let lc = local_consistency_cached(posterior, graph, &scratch, &inv_four_s2);
    ObjectiveValue {
        total: gmm + lambda * lc,
        gmm,
        local_consistency: lc,
    }
}

fn gmm_objective_cached(posterior: &PosteriorMatrix, scratch: &Scratch, state: &MixtureState) -> f64 {
    let m = state.component_count();
    let inv_two_s2: Vec<f64> = state.variances.iter().map(|&s2| 0.5 / s2).collect();
    let log_s2: Vec<f64> = state.variances.iter().map(|&s2| 1.5 * fmath::ln(s2)).collect();
    let partials = exec::chunked(posterior.n, exec::ROW_CHUNK, |range| {
        let mut acc = 0.0;
        for n in range {
            let p = posterior.components(n);
            let d2 = scratch.row(n, m);
            for k in 0..m {
                acc += p[k] * (d2[k] * inv_two_s2[k] + log_s2[k]);
            }
        }
        acc
    });
    partials.into_iter().sum()
}

// ---------------------------------------------------------------------------
// M-step: translation
// ---------------------------------------------------------------------------

/// Responsibility-weighted centroids solving the translation stationarity
/// condition: `t* = mu_x - R mu_y`. The scanned-side centroid carries the
/// neighbor-difference correction scaled by `lambda / 2`, accumulated over
/// both orientations of every edge.
///
/// Fails with [`RegistrationError::PosteriorCollapse`] when the component
/// responsibilities sum to zero.
pub fn weighted_centroids(
    posterior: &PosteriorMatrix,
    graph: &NeighborGraph,
    x: &PointCloud,
    y: &PointCloud,
    state: &MixtureState,
    lambda: f64,
) -> Result<(Vector3<f64>, Vector3<f64>), RegistrationError> {
    weighted_centroids_impl(posterior, graph, x.points(), y.points(), state, lambda, 0)
}

fn weighted_centroids_impl(
    posterior: &PosteriorMatrix,
    graph: &NeighborGraph,
    x: &[Vector3<f64>],
    y: &[Vector3<f64>],
    state: &MixtureState,
    lambda: f64,
    iteration: usize,
) -> Result<(Vector3<f64>, Vector3<f64>), RegistrationError> {
    let m = state.component_count();
    let inv_s2: Vec<f64> = state.variances.iter().map(|&s2| 1.0 / s2).collect();

    struct Partial {
        weight: f64,
        x_num: Vector3<f64>,
        col_sums: Vec<f64>,
    }
    let partials = exec::chunked(posterior.n, exec::ROW_CHUNK, |range| {
        let mut p = Partial {
            weight: 0.0,
            x_num: Vector3::zeros(),
            col_sums: vec![0.0; m],
        };
        for n in range {
            let row = posterior.components(n);
            let mut g = 0.0;
            for k in 0..m {
                g += row[k] * inv_s2[k];
                p.col_sums[k] += row[k];
            }
            p.weight += g;
            p.x_num += g * x[n];
        }
        p
    });
    let mut weight = 0.0;
    let mut x_num = Vector3::zeros();
    let mut col_sums = vec![0.0; m];
    for p in partials {
        weight += p.weight;
        x_num += p.x_num;
        for k in 0..m {
            col_sums[k] += p.col_sums[k];
        }
    }
    if !(weight > 0.0) {
        return Err(RegistrationError::PosteriorCollapse {
            omega: state.outlier_weight,
            iteration,
        });
    }

    let mut y_num = Vector3::zeros();
    for k in 0..m {
        y_num += col_sums[k] * inv_s2[k] * y[k];
    }

    if lambda != 0.0 && graph.edge_count() > 0 {
        let edges = graph.edges();
        let edge_partials = exec::chunked(edges.len(), exec::EDGE_CHUNK, |range| {
            let mut acc = Vector3::zeros();
            for &(i, j) in &edges[range] {
                let (i, j) = (i as usize, j as usize);
                let pi = posterior.components(i);
                let pj = posterior.components(j);
                let mut c = 0.0;
                for k in 0..m {
                    c += (pi[k] - pj[k]) * inv_s2[k];
                }
                // Both orientations of the unordered edge contribute the
                // same vector, hence the factor two.
                acc += 2.0 * c * (x[j] - x[i]);
            }
            acc
        });
        let correction: Vector3<f64> = edge_partials.into_iter().sum();
        x_num += 0.5 * lambda * correction;
    }

    Ok((x_num / weight, y_num / weight))
}

// ---------------------------------------------------------------------------
// M-step: rotation
// ---------------------------------------------------------------------------

/// Closed-form rotation update. Builds the weighted cross-covariance of the
/// centered clouds (responsibilities over variance), adds the
/// neighbor-difference term scaled by `lambda / 2`, and takes the proper
/// rotation from its SVD. The translation is re-derived from the new
/// rotation: `t* = mu_x - R* mu_y`.
pub fn update_rotation(
    posterior: &PosteriorMatrix,
    graph: &NeighborGraph,
    x: &PointCloud,
    y: &PointCloud,
    state: &MixtureState,
    lambda: f64,
    mu_x: Vector3<f64>,
    mu_y: Vector3<f64>,
) -> Result<RotationUpdate, RegistrationError> {
    update_rotation_impl(
        posterior,
        graph,
        x.points(),
        y.points(),
        state,
        lambda,
        mu_x,
        mu_y,
        0,
    )
}

#[allow(clippy::too_many_arguments)]
fn update_rotation_impl(
    posterior: &PosteriorMatrix,
    graph: &NeighborGraph,
    x: &[Vector3<f64>],
    y: &[Vector3<f64>],
    state: &MixtureState,
    lambda: f64,
    mu_x: Vector3<f64>,
    mu_y: Vector3<f64>,
    iteration: usize,
) -> Result<RotationUpdate, RegistrationError> {
    let m = state.component_count();
    let inv_s2: Vec<f64> = state.variances.iter().map(|&s2| 1.0 / s2).collect();

    // Dense part: sum_m (y_m - mu_y) a_m^T / sigma_m^2 with
    // a_m = sum_n p_nm (x_n - mu_x), accumulated per fixed row chunk.
    let partials = exec::chunked(posterior.n, exec::ROW_CHUNK, |range| {
        let mut a = vec![Vector3::zeros(); m];
        for n in range {
            let row = posterior.components(n);
            let xc = x[n] - mu_x;
            for k in 0..m {
                a[k] += row[k] * xc;
            }
        }
        a
    });
    let mut a = vec![Vector3::<f64>::zeros(); m];
    for p in partials {
        for k in 0..m {
            a[k] += p[k];
        }
    }
    let mut cross = Matrix3::zeros();
    for k in 0..m {
        cross += inv_s2[k] * (y[k] - mu_y) * a[k].transpose();
    }

    if lambda != 0.0 && graph.edge_count() > 0 {
        let edges = graph.edges();
        let edge_partials = exec::chunked(edges.len(), exec::EDGE_CHUNK, |range| {
            let mut h = Matrix3::zeros();
            for &(i, j) in &edges[range] {
                let (i, j) = (i as usize, j as usize);
                let pi = posterior.components(i);
                let pj = posterior.components(j);
                let mut b = Vector3::zeros();
                for k in 0..m {
                    b += (pi[k] - pj[k]) * inv_s2[k] * (y[k] - mu_y);
                }
                // Two orientations per unordered edge cancel the 1/2.
                h += 2.0 * b * (x[j] - x[i]).transpose();
            }
            h
        });
        let edge_cross: Matrix3<f64> = edge_partials.into_iter().sum();
        cross += 0.5 * lambda * edge_cross;
    }

    if cross.iter().any(|v| !v.is_finite()) {
        return Err(RegistrationError::DegenerateRotation { iteration });
    }
    let (rotation, degenerate) = geometry::rotation_from_cross_covariance(&cross)
        .map_err(|_| RegistrationError::DegenerateRotation { iteration })?;
    let translation = mu_x - rotation * mu_y;
    Ok(RotationUpdate {
        transform: RigidTransform::new_unchecked(rotation, translation),
        degenerate,
    })
}

// ---------------------------------------------------------------------------
// M-step: variances
// ---------------------------------------------------------------------------

/// Closed-form variance update at the freshly updated transform, clamped to
/// `floor` from below. Components that received no responsibility keep their
/// previous variance.
pub fn update_variances(
    posterior: &PosteriorMatrix,
    graph: &NeighborGraph,
    x: &PointCloud,
    y: &PointCloud,
    t_new: &RigidTransform,
    state: &MixtureState,
    lambda: f64,
    floor: f64,
) -> Vec<f64> {
    let mut scratch = Scratch::default();
    scratch.ensure(x.points(), y.points(), t_new);
    update_variances_cached(posterior, graph, &scratch, state, lambda, floor)
}

fn update_variances_cached(
    posterior: &PosteriorMatrix,
    graph: &NeighborGraph,
    scratch: &Scratch,
    state: &MixtureState,
    lambda: f64,
    floor: f64,
) -> Vec<f64> {
    let m = state.component_count();

    struct Partial {
        weighted_d2: Vec<f64>,
        mass: Vec<f64>,
    }
    let partials = exec::chunked(posterior.n, exec::ROW_CHUNK, |range| {
        let mut p = Partial {
            weighted_d2: vec![0.0; m],
            mass: vec![0.0; m],
        };
        for n in range {
            let row = posterior.components(n);
            let d2 = scratch.row(n, m);
            for k in 0..m {
                p.weighted_d2[k] += row[k] * d2[k];
                p.mass[k] += row[k];
            }
        }
        p
    });
    let mut weighted_d2 = vec![0.0; m];
    let mut mass = vec![0.0; m];
    for p in partials {
        for k in 0..m {
            weighted_d2[k] += p.weighted_d2[k];
            mass[k] += p.mass[k];
        }
    }

    let mut edge_term = vec![0.0; m];
    if lambda != 0.0 && graph.edge_count() > 0 {
        let edges = graph.edges();
        let edge_partials = exec::chunked(edges.len(), exec::EDGE_CHUNK, |range| {
            let mut acc = vec![0.0; m];
            for &(i, j) in &edges[range] {
                let (i, j) = (i as usize, j as usize);
                let pi = posterior.components(i);
                let pj = posterior.components(j);
                let di = scratch.row(i, m);
                let dj = scratch.row(j, m);
                for k in 0..m {
                    // Ordered double sum counts each unordered edge twice.
                    acc[k] += 2.0 * (pi[k] - pj[k]) * (dj[k] - di[k]);
                }
            }
            acc
        });
        for p in edge_partials {
            for k in 0..m {
                edge_term[k] += p[k];
            }
        }
    }

    (0..m)
        .map(|k| {
            if mass[k] == 0.0 {
                state.variances[k]
            } else {
                let raw = (weighted_d2[k] + 0.5 * lambda * edge_term[k]) / (3.0 * mass[k]);
                raw.max(floor)
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Registration loop
// ---------------------------------------------------------------------------

/// Registers the model cloud `y` onto the scanned cloud `x` by
/// expectation-maximization with the local-consistency penalty.
///
/// The neighbor graph is built once on the scanned cloud, which never moves.
/// Each iteration runs the E-step, the translation and rotation updates and
/// the variance update, then records the objective. The loop stops at
/// `max_iterations` or once the transform change (rotation Frobenius delta
/// plus translation norm delta) drops below `convergence_tol`.
pub fn register(
    x: &PointCloud,
    y: &PointCloud,
    cfg: &RegistrationConfig,
) -> Result<RegistrationReport, RegistrationError> {
    cfg.validate()?;
    if x.len() < 2 {
        return Err(RegistrationError::TooFewPoints {
            side: "scanned",
            required: 2,
            actual: x.len(),
        });
    }
    if y.is_empty() {
        return Err(RegistrationError::EmptyCloud { side: "model" });
    }

    #[cfg(feature = "std")]
    let start = std::time::Instant::now();

    let graph = build_knn_graph(x, cfg.knn_k)?;
    let (mut state, mut transform) = init_state(x, y, cfg)?;
    let floor = cfg.resolve_floor(x);
    let lambda = cfg.lambda;
    let xs = x.points();
    let ys = y.points();

    let mut scratch = Scratch::default();
    let inv_four_s2 = |state: &MixtureState| -> Vec<f64> {
        state.variances.iter().map(|&s2| 0.25 / s2).collect()
    };

    let mut trace = Vec::with_capacity(cfg.max_iterations);
    let mut converged_by = ConvergenceReason::MaxIterations;

    for iteration in 1..=cfg.max_iterations {
        scratch.ensure(xs, ys, &transform);
        let mut posterior = e_step_cached(x.len(), &scratch, &state);
        if cfg.posterior_truncation > 0.0 {
            posterior.truncate(cfg.posterior_truncation);
        }

        let (mu_x, mu_y) =
            weighted_centroids_impl(&posterior, &graph, xs, ys, &state, lambda, iteration)?;
        let update = update_rotation_impl(
            &posterior, &graph, xs, ys, &state, lambda, mu_x, mu_y, iteration,
        )?;
        let new_transform = update.transform;

        scratch.ensure(xs, ys, &new_transform);
        let variances =
            update_variances_cached(&posterior, &graph, &scratch, &state, lambda, floor);
        state.set_variances(variances);

        let gmm = gmm_objective_cached(&posterior, &scratch, &state);
        let lc = if lambda != 0.0 && graph.edge_count() > 0 {
            local_consistency_cached(&posterior, &graph, &scratch, &inv_four_s2(&state))
        } else {
            0.0
        };
        trace.push(gmm + lambda * lc);

        let delta = (new_transform.rotation() - transform.rotation()).norm()
            + (new_transform.translation() - transform.translation()).norm();
        transform = new_transform;

        if iteration == cfg.max_iterations {
            converged_by = ConvergenceReason::MaxIterations;
        } else if delta < cfg.convergence_tol {
            converged_by = ConvergenceReason::TransformTolerance;
            break;
        }
    }

    #[cfg(feature = "std")]
    let wall_time = start.elapsed().as_secs_f64();
    #[cfg(not(feature = "std"))]
    let wall_time = 0.0;

    Ok(RegistrationReport {
        transform,
        iterations_run: trace.len(),
        objective_trace: trace,
        final_variances: state.variances.clone(),
        converged_by,
        wall_time,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial;
    use crate::testutil::{random_cloud, random_rotation, rot_z};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud(rows: &[[f64; 3]]) -> PointCloud {
        PointCloud::from_rows(rows).unwrap()
    }

    /// Random instance with valid state, posterior from the E-step and a kNN
    /// graph; the workhorse for oracle comparisons.
    fn random_instance(
        n: usize,
        m: usize,
        omega: f64,
        rng: &mut impl Rng,
    ) -> (
        PointCloud,
        PointCloud,
        RigidTransform,
        MixtureState,
        PosteriorMatrix,
        NeighborGraph,
    ) {
        let x = random_cloud(n, 2.0, rng);
        let y = random_cloud(m, 2.0, rng);
        let t = RigidTransform::new(
            rot_z(rng.random_range(-0.8..0.8)),
            Vector3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            ),
        )
        .unwrap();
        let variances: Vec<f64> = (0..m).map(|_| rng.random_range(0.3..2.0)).collect();
        let state = MixtureState::new(variances, omega, 50.0).unwrap();
        let posterior = e_step(&x, &y, &t, &state);
        let graph = spatial::build_knn_graph(&x, 3).unwrap();
        (x, y, t, state, posterior, graph)
    }

    #[test]
    fn state_prior_identity() {
        let state = MixtureState::new(vec![1.0; 7], 0.3, 10.0).unwrap();
        let total = 7.0 * state.component_prior() + state.outlier_weight();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn init_centers_clouds() {
        let x = cloud(&[[0.0, 0.0, 0.0], [2.0, 1.0, 0.0]]);
        let (state, t) = init_state(&x, &x, &RegistrationConfig::default()).unwrap();
        assert_relative_eq!(*t.translation(), Vector3::zeros(), epsilon = 1e-15);
        assert_relative_eq!(*t.rotation(), Matrix3::identity(), epsilon = 1e-15);
        assert!(state.variances().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn init_single_pair_hits_variance_floor() {
        let x = cloud(&[[0.0, 0.0, 0.0]]);
        let y = cloud(&[[1.0, 0.0, 0.0]]);
        let cfg = RegistrationConfig {
            variance_floor: Some(1e-4),
            ..Default::default()
        };
        let (state, t) = init_state(&x, &y, &cfg).unwrap();
        assert_relative_eq!(*t.translation(), Vector3::new(-1.0, 0.0, 0.0), epsilon = 1e-15);
        // After centroid alignment the only pair coincides, so the mean
        // squared distance is zero and the floor takes over.
        assert_eq!(state.variances(), &[1e-4]);
    }

    #[test]
    fn init_variance_matches_double_sum() {
        let x = cloud(&[[0.0, 0.0, 0.0], [2.0, 1.0, 0.0]]);
        let y = cloud(&[[1.0, 1.0, 1.0], [3.0, 0.0, -1.0]]);
        let (state, _) = init_state(&x, &y, &RegistrationConfig::default()).unwrap();
        // Hand evaluation: t0 = (-1, 0, 0), pair distances 2, 5, 5, 2,
        // so sigma^2 = 14 / 12.
        assert_relative_eq!(state.variances()[0], 14.0 / 12.0, epsilon = 1e-12);
        assert_relative_eq!(state.variances()[1], 14.0 / 12.0, epsilon = 1e-12);
    }

    #[test]
    fn e_step_single_component_no_outlier() {
        let x = cloud(&[[0.3, 0.0, 0.0]]);
        let y = cloud(&[[0.0, 0.0, 0.0]]);
        let state = MixtureState::new(vec![1.0], 0.0, 10.0).unwrap();
        let p = e_step(&x, &y, &RigidTransform::identity(), &state);
        assert_eq!(p.row(0), &[1.0, 0.0]);
    }

    #[test]
    fn e_step_omega_one_forces_outlier_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_cloud(6, 1.0, &mut rng);
        let y = random_cloud(4, 1.0, &mut rng);
        let state = MixtureState::new(vec![1.0; 4], 1.0, 10.0).unwrap();
        let p = e_step(&x, &y, &RigidTransform::identity(), &state);
        for n in 0..6 {
            assert_eq!(p.components(n), &[0.0; 4]);
            assert_eq!(p.outlier(n), 1.0);
        }
    }

    #[test]
    fn e_step_matches_high_precision_oracle() {
        // Frozen from an independent 60-digit evaluation of the Bayes rule
        // on this exact instance.
        let x = cloud(&[[0.0, 0.0, 0.0], [1.5, -0.5, 0.25]]);
        let y = cloud(&[[1.0, 0.0, 0.0], [0.0, 1.0, -0.5]]);
        let t = RigidTransform::new(
            rot_z(core::f64::consts::FRAC_PI_6),
            Vector3::new(0.1, -0.2, 0.3),
        )
        .unwrap();
        let state = MixtureState::new(vec![1.0, 1.0], 0.1, 8.0).unwrap();
        let p = e_step(&x, &y, &t, &state);
        let expected = [
            [
                0.3302544807662711,
                0.4176614316733008,
                0.2520840875604281,
            ],
            [
                0.5508347816632694,
                0.06596944801345812,
                0.3831957703232724,
            ],
        ];
        for n in 0..2 {
            for k in 0..3 {
                assert!(
                    (p.row(n)[k] - expected[n][k]).abs() < 1e-12,
                    "row {n} col {k}: {} vs {}",
                    p.row(n)[k],
                    expected[n][k]
                );
            }
        }
    }

    #[test]
    fn e_step_rows_sum_to_one_across_omegas() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for &omega in &[0.0, 0.1, 0.5, 1.0] {
            let (_, _, _, _, posterior, _) = {
                let n = rng.random_range(2..30);
                let m = rng.random_range(1..20);
                random_instance(n, m, omega, &mut rng)
            };
            for n in 0..posterior.n_points() {
                let sum: f64 = posterior.row(n).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "omega {omega}: row sum {sum}");
                assert!(posterior.row(n).iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn truncation_keeps_rows_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (_, _, _, _, mut posterior, _) = random_instance(12, 6, 0.1, &mut rng);
        posterior.truncate(0.05);
        for n in 0..posterior.n_points() {
            let sum: f64 = posterior.row(n).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for &v in posterior.row(n) {
                assert!(v == 0.0 || v >= 0.0);
            }
        }
    }

    /// Direct evaluation of the symmetrized KL divergence over all
    /// components including the outlier column; the independent route the
    /// closed form must reproduce.
    fn symmetric_kl(pi: &[f64], pj: &[f64]) -> f64 {
        let kl = |a: &[f64], b: &[f64]| -> f64 {
            a.iter()
                .zip(b)
                .map(|(&p, &q)| {
                    if p == 0.0 {
                        0.0
                    } else {
                        p * fmath::ln(p / q)
                    }
                })
                .sum()
        };
        0.5 * (kl(pi, pj) + kl(pj, pi))
    }

    #[test]
    fn divergence_matches_direct_symmetric_kl() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for trial in 0..50 {
            let n = rng.random_range(3..20);
            let m = rng.random_range(1..10);
            let omega = [0.0, 0.1, 0.4][trial % 3];
            let (x, y, t, state, posterior, _) = random_instance(n, m, omega, &mut rng);
            for _ in 0..5 {
                let i = rng.random_range(0..n);
                let j = rng.random_range(0..n);
                let closed = pairwise_divergence(i, j, &posterior, &x, &y, &t, &state);
                let direct = symmetric_kl(posterior.row(i), posterior.row(j));
                assert!(
                    (closed - direct).abs() < 1e-10,
                    "trial {trial}: closed {closed} direct {direct}"
                );
                assert!(closed >= -1e-10);
            }
        }
    }

    #[test]
    fn divergence_diagonal_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let (x, y, t, state, posterior, _) = random_instance(8, 5, 0.1, &mut rng);
        for i in 0..8 {
            assert_eq!(
                pairwise_divergence(i, i, &posterior, &x, &y, &t, &state),
                0.0
            );
        }
        for _ in 0..10 {
            let i = rng.random_range(0..8);
            let j = rng.random_range(0..8);
            let dij = pairwise_divergence(i, j, &posterior, &x, &y, &t, &state);
            let dji = pairwise_divergence(j, i, &posterior, &x, &y, &t, &state);
            assert!((dij - dji).abs() < 1e-12);
        }
    }

    #[test]
    fn local_consistency_empty_graph_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (x, y, t, state, posterior, _) = random_instance(6, 4, 0.1, &mut rng);
        let empty = NeighborGraph::empty(6);
        assert_eq!(
            local_consistency(&posterior, &empty, &x, &y, &t, &state),
            0.0
        );
    }

    #[test]
    fn local_consistency_matches_ordered_double_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let (x, y, t, state, posterior, graph) = random_instance(4, 3, 0.1, &mut rng);
        // Brute force over all ordered pairs with the adjacency indicator.
        let mut brute = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                let (a, b) = (i.min(j) as u32, i.max(j) as u32);
                if i != j && graph.edges().contains(&(a, b)) {
                    brute += pairwise_divergence(i, j, &posterior, &x, &y, &t, &state);
                }
            }
        }
        let fast = local_consistency(&posterior, &graph, &x, &y, &t, &state);
        assert_relative_eq!(fast, brute, max_relative = 1e-12, epsilon = 1e-14);
    }

    #[test]
    fn objective_lambda_zero_is_gmm_part() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (x, y, t, state, posterior, graph) = random_instance(7, 4, 0.1, &mut rng);
        let v = objective(&posterior, &graph, &x, &y, &t, &state, 0.0);
        assert_eq!(v.total, v.gmm);
    }

    #[test]
    fn objective_single_pair_halved_distance() {
        let x = cloud(&[[2.0, 0.0, 0.0]]);
        let y = cloud(&[[0.0, 0.0, 0.0]]);
        let state = MixtureState::new(vec![1.0], 0.0, 10.0).unwrap();
        let posterior = e_step(&x, &y, &RigidTransform::identity(), &state);
        let graph = NeighborGraph::empty(1);
        let v = objective(
            &posterior,
            &graph,
            &x,
            &y,
            &RigidTransform::identity(),
            &state,
            0.3,
        );
        // p = 1, sigma^2 = 1, distance 2: objective is d^2 / 2.
        assert_relative_eq!(v.gmm, 2.0, epsilon = 1e-12);
        assert_relative_eq!(v.total, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn objective_matches_frozen_oracle() {
        // Frozen from an independent 60-digit evaluation on this instance.
        let x = cloud(&[
            [-0.503, -0.415, -1.927],
            [1.831, 1.84, 0.159],
            [-0.786, 0.533, 1.463],
            [-0.502, -1.456, -1.166],
            [0.955, 1.293, 0.618],
        ]);
        let y = cloud(&[
            [0.063, 0.099, 0.941],
            [-0.097, 0.942, 1.455],
            [-0.249, 0.146, 0.207],
            [0.767, 1.692, -1.583],
        ]);
        let t = RigidTransform::new(
            Matrix3::identity(),
            Vector3::new(0.2, -0.1, 0.05),
        )
        .unwrap();
        let state =
            MixtureState::new(vec![0.8, 1.3, 0.5, 2.1], 0.15, 64.0).unwrap();
        let posterior = e_step(&x, &y, &t, &state);
        let graph =
            NeighborGraph::from_edges(5, &[(0, 1), (0, 4), (1, 2), (2, 3), (3, 4)]).unwrap();
        let v = objective(&posterior, &graph, &x, &y, &t, &state, 0.7);
        assert!((v.gmm - 5.494496157011594).abs() < 1e-10, "gmm {}", v.gmm);
        assert!(
            (v.local_consistency - 10.836374398586287).abs() < 1e-10,
            "lc {}",
            v.local_consistency
        );
        assert!((v.total - 13.079958236021995).abs() < 1e-10);
    }

    /// Brute-force evaluation of the weighted-centroid formulas via plain
    /// ordered double sums.
    fn brute_centroids(
        posterior: &PosteriorMatrix,
        graph: &NeighborGraph,
        x: &PointCloud,
        y: &PointCloud,
        state: &MixtureState,
        lambda: f64,
    ) -> (Vector3<f64>, Vector3<f64>) {
        let m = state.component_count();
        let mut weight = 0.0;
        let mut x_num = Vector3::zeros();
        let mut y_num = Vector3::zeros();
        for n in 0..posterior.n_points() {
            for k in 0..m {
                let w = posterior.components(n)[k] / state.variances()[k];
                weight += w;
                x_num += w * x[n];
                y_num += w * y[k];
            }
        }
        for i in 0..posterior.n_points() {
            for j in 0..posterior.n_points() {
                let (a, b) = (i.min(j) as u32, i.max(j) as u32);
                if i == j || !graph.edges().contains(&(a, b)) {
                    continue;
                }
                let mut c = 0.0;
                for k in 0..m {
                    c += (posterior.components(i)[k] - posterior.components(j)[k])
                        / state.variances()[k];
                }
                x_num += 0.5 * lambda * c * (x[j] - x[i]);
            }
        }
        (x_num / weight, y_num / weight)
    }

    #[test]
    fn centroids_reduce_to_means_for_uniform_posteriors() {
        let x = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 3.0, 0.0], [2.0, 2.0, 2.0]]);
        let y = cloud(&[[5.0, 1.0, 0.0], [7.0, 3.0, 2.0]]);
        let state = MixtureState::new(vec![0.7, 0.7], 0.0, 10.0).unwrap();
        // Uniform posterior rows over the two components.
        let mut posterior = PosteriorMatrix::zeros(4, 2);
        for n in 0..4 {
            posterior.data[n * 3] = 0.5;
            posterior.data[n * 3 + 1] = 0.5;
        }
        let graph = NeighborGraph::empty(4);
        let (mu_x, mu_y) =
            weighted_centroids(&posterior, &graph, &x, &y, &state, 0.0).unwrap();
        assert_relative_eq!(mu_x, geometry::centroid(&x, None).unwrap(), epsilon = 1e-12);
        assert_relative_eq!(mu_y, geometry::centroid(&y, None).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn centroids_ignore_lambda_without_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let (x, y, _, state, posterior, _) = random_instance(9, 4, 0.1, &mut rng);
        let empty = NeighborGraph::empty(9);
        let a = weighted_centroids(&posterior, &empty, &x, &y, &state, 0.0).unwrap();
        let b = weighted_centroids(&posterior, &empty, &x, &y, &state, 2.5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn centroids_match_brute_force_with_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        for _ in 0..10 {
            let (x, y, _, state, posterior, graph) = random_instance(4, 3, 0.1, &mut rng);
            let (mu_x, mu_y) =
                weighted_centroids(&posterior, &graph, &x, &y, &state, 0.5).unwrap();
            let (bx, by) = brute_centroids(&posterior, &graph, &x, &y, &state, 0.5);
            assert_relative_eq!(mu_x, bx, epsilon = 1e-12);
            assert_relative_eq!(mu_y, by, epsilon = 1e-12);
        }
    }

    #[test]
    fn centroids_detect_posterior_collapse() {
        let x = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let y = cloud(&[[0.5, 0.5, 0.0]]);
        let state = MixtureState::new(vec![1.0], 1.0, 10.0).unwrap();
        let posterior = e_step(&x, &y, &RigidTransform::identity(), &state);
        let graph = NeighborGraph::empty(3);
        let err = weighted_centroids(&posterior, &graph, &x, &y, &state, 0.0).unwrap_err();
        assert!(matches!(
            err,
            RegistrationError::PosteriorCollapse { omega, .. } if omega == 1.0
        ));
    }

    #[test]
    fn rotation_lambda_zero_equals_kabsch_on_expanded_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        for _ in 0..5 {
            let (x, y, _, state, posterior, graph) = random_instance(6, 4, 0.1, &mut rng);
            let (mu_x, mu_y) =
                weighted_centroids(&posterior, &graph, &x, &y, &state, 0.0).unwrap();
            let update =
                update_rotation(&posterior, &graph, &x, &y, &state, 0.0, mu_x, mu_y).unwrap();

            // Expand every (n, m) pair with weight p_nm / sigma_m^2 and let
            // the generic weighted alignment solve the same problem.
            let mut source = Vec::new();
            let mut target = Vec::new();
            let mut weights = Vec::new();
            for n in 0..x.len() {
                for k in 0..y.len() {
                    source.push(y[k]);
                    target.push(x[n]);
                    weights.push(posterior.components(n)[k] / state.variances()[k]);
                }
            }
            let alignment = geometry::kabsch(&source, &target, Some(&weights)).unwrap();
            assert_relative_eq!(
                *update.transform.rotation(),
                *alignment.transform.rotation(),
                epsilon = 1e-12
            );
            assert_relative_eq!(
                *update.transform.translation(),
                *alignment.transform.translation(),
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn rotation_identity_for_aligned_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let x = random_cloud(10, 3.0, &mut rng);
        let state = MixtureState::new(vec![1e-4; 10], 0.0, 10.0).unwrap();
        let posterior = e_step(&x, &x, &RigidTransform::identity(), &state);
        let graph = NeighborGraph::empty(10);
        let (mu_x, mu_y) =
            weighted_centroids(&posterior, &graph, &x, &x, &state, 0.0).unwrap();
        let update =
            update_rotation(&posterior, &graph, &x, &x, &state, 0.0, mu_x, mu_y).unwrap();
        assert!(!update.degenerate);
        assert_relative_eq!(
            *update.transform.rotation(),
            Matrix3::identity(),
            epsilon = 1e-9
        );
        assert_relative_eq!(
            *update.transform.translation(),
            Vector3::zeros(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn rotation_maximizes_trace_against_random_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..5 {
            let (x, y, _, state, posterior, graph) = random_instance(8, 5, 0.1, &mut rng);
            let lambda = 0.4;
            let (mu_x, mu_y) =
                weighted_centroids(&posterior, &graph, &x, &y, &state, lambda).unwrap();
            let update =
                update_rotation(&posterior, &graph, &x, &y, &state, lambda, mu_x, mu_y).unwrap();

            // Rebuild the cross-covariance the slow way to score candidates.
            let m = state.component_count();
            let mut cross = Matrix3::zeros();
            for n in 0..x.len() {
                for k in 0..m {
                    cross += posterior.components(n)[k] / state.variances()[k]
                        * (y[k] - mu_y)
                        * (x[n] - mu_x).transpose();
                }
            }
            for i in 0..x.len() {
                for j in 0..x.len() {
                    let (a, b) = (i.min(j) as u32, i.max(j) as u32);
                    if i == j || !graph.edges().contains(&(a, b)) {
                        continue;
                    }
                    let mut bsum = Vector3::zeros();
                    for k in 0..m {
                        bsum += (posterior.components(i)[k] - posterior.components(j)[k])
                            / state.variances()[k]
                            * (y[k] - mu_y);
                    }
                    cross += 0.5 * lambda * bsum * (x[j] - x[i]).transpose();
                }
            }
            let score = |r: &Matrix3<f64>| (r * cross).trace();
            let best = score(update.transform.rotation());
            for _ in 0..1000 {
                let r = random_rotation(&mut rng);
                assert!(best >= score(&r) - 1e-9);
            }
        }
    }

    #[test]
    fn rotation_single_component_flags_degeneracy() {
        let x = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let y = cloud(&[[0.3, 0.3, 0.0]]);
        let state = MixtureState::new(vec![1.0], 0.0, 10.0).unwrap();
        let posterior = e_step(&x, &y, &RigidTransform::identity(), &state);
        let graph = NeighborGraph::empty(3);
        let (mu_x, mu_y) =
            weighted_centroids(&posterior, &graph, &x, &y, &state, 0.0).unwrap();
        let update =
            update_rotation(&posterior, &graph, &x, &y, &state, 0.0, mu_x, mu_y).unwrap();
        assert!(update.degenerate);
        assert_relative_eq!(
            update.transform.rotation().determinant(),
            1.0,
            epsilon = 1e-9
        );
    }

    #[test]
    fn variance_update_single_component_analytic() {
        let x = cloud(&[[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let y = cloud(&[[0.0, 0.0, 0.0]]);
        let state = MixtureState::new(vec![1.0], 0.0, 10.0).unwrap();
        let mut posterior = PosteriorMatrix::zeros(2, 1);
        posterior.data = vec![1.0, 0.0, 1.0, 0.0];
        let graph = NeighborGraph::empty(2);
        let out = update_variances(
            &posterior,
            &graph,
            &x,
            &y,
            &RigidTransform::identity(),
            &state,
            0.0,
            1e-12,
        );
        // Distances 1 and 2 with unit responsibilities: (1 + 4) / (3 * 2).
        assert_relative_eq!(out[0], 5.0 / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn variance_update_ignores_lambda_without_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let (x, y, t, state, posterior, _) = random_instance(7, 3, 0.1, &mut rng);
        let empty = NeighborGraph::empty(7);
        let a = update_variances(&posterior, &empty, &x, &y, &t, &state, 0.0, 1e-12);
        let b = update_variances(&posterior, &empty, &x, &y, &t, &state, 3.0, 1e-12);
        assert_eq!(a, b);
    }

    #[test]
    fn variance_update_clamps_negative_solution_to_floor() {
        // Edge correction engineered negative enough to push the raw
        // solution below zero: responsibilities 1 vs 0 on a single
        // component, the far point carries the mass.
        let x = cloud(&[[2.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        let y = cloud(&[[0.0, 0.0, 0.0]]);
        let state = MixtureState::new(vec![1.0], 0.5, 10.0).unwrap();
        let mut posterior = PosteriorMatrix::zeros(2, 1);
        posterior.data = vec![1.0, 0.0, 0.0, 1.0];
        let graph = NeighborGraph::from_edges(2, &[(0, 1)]).unwrap();
        let floor = 1e-9;
        // raw = [4 + (lambda/2) * 2 * (1 - 0) * (0 - 4)] / 3 = (4 - 4 lambda) / 3
        let out = update_variances(
            &posterior,
            &graph,
            &x,
            &y,
            &RigidTransform::identity(),
            &state,
            2.0,
            floor,
        );
        assert_eq!(out[0], floor);
    }

    #[test]
    fn variance_update_keeps_previous_on_zero_mass() {
        let x = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let y = cloud(&[[0.0, 0.0, 0.0], [50.0, 0.0, 0.0]]);
        let state = MixtureState::new(vec![0.25, 0.33], 0.0, 10.0).unwrap();
        let mut posterior = PosteriorMatrix::zeros(2, 2);
        // All mass on the first component; second gets exactly zero.
        posterior.data = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let graph = NeighborGraph::empty(2);
        let out = update_variances(
            &posterior,
            &graph,
            &x,
            &y,
            &RigidTransform::identity(),
            &state,
            0.0,
            1e-12,
        );
        assert_eq!(out[1], 0.33);
    }

    #[test]
    fn register_single_iteration_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let x = random_cloud(20, 5.0, &mut rng);
        let cfg = RegistrationConfig {
            max_iterations: 1,
            lambda: 0.0,
            outlier_weight: 0.0,
            ..Default::default()
        };
        let report = register(&x, &x, &cfg).unwrap();
        assert_eq!(report.iterations_run, 1);
        assert_eq!(report.objective_trace.len(), 1);
        assert_eq!(report.converged_by, ConvergenceReason::MaxIterations);
    }

    #[test]
    fn register_rejects_collapse_with_omega_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let x = random_cloud(10, 5.0, &mut rng);
        let cfg = RegistrationConfig {
            outlier_weight: 1.0,
            ..Default::default()
        };
        let err = register(&x, &x, &cfg).unwrap_err();
        assert!(matches!(
            err,
            RegistrationError::PosteriorCollapse { iteration: 1, .. }
        ));
    }

    #[test]
    fn register_recovers_small_misalignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(79);
        let y = random_cloud(300, 20.0, &mut rng);
        let t_gt = RigidTransform::new(rot_z(0.15), Vector3::new(1.0, -2.0, 0.5)).unwrap();
        let x = geometry::apply_transform(&y, &t_gt);
        let cfg = RegistrationConfig {
            lambda: 0.0,
            outlier_weight: 0.0,
            ..Default::default()
        };
        let report = register(&x, &y, &cfg).unwrap();
        let rot_err = (report.transform.rotation() - t_gt.rotation()).norm();
        let trans_err = (report.transform.translation() - t_gt.translation()).norm();
        assert!(rot_err < 1e-6, "rotation error {rot_err}");
        assert!(trans_err < 1e-5, "translation error {trans_err}");
    }

    #[test]
    fn register_lambda_zero_objective_trace_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        for _ in 0..3 {
            let y = random_cloud(60, 10.0, &mut rng);
            let t_gt = RigidTransform::new(
                rot_z(rng.random_range(-0.4..0.4)),
                Vector3::new(1.0, 0.0, -1.0),
            )
            .unwrap();
            let mut x = geometry::apply_transform(&y, &t_gt);
            // Mild observation noise keeps the instance generic.
            x = PointCloud::new(
                x.points()
                    .iter()
                    .map(|p| {
                        p + Vector3::new(
                            rng.random_range(-0.05..0.05),
                            rng.random_range(-0.05..0.05),
                            rng.random_range(-0.05..0.05),
                        )
                    })
                    .collect(),
            )
            .unwrap();
            let cfg = RegistrationConfig {
                lambda: 0.0,
                outlier_weight: 0.0,
                max_iterations: 40,
                ..Default::default()
            };
            let report = register(&x, &y, &cfg).unwrap();
            for w in report.objective_trace.windows(2) {
                assert!(
                    w[1] <= w[0] + 1e-9,
                    "objective increased: {} -> {}",
                    w[0],
                    w[1]
                );
            }
        }
    }
}
