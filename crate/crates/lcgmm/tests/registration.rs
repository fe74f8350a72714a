//! Cross-module checks of the registration core: stationarity of the
//! closed-form updates against the objective, rigid equivariance and
//! end-to-end recovery on synthetic scans.

use lcgmm::geometry::{apply_transform, PointCloud, RigidTransform};
use lcgmm::metrics::{transform_rmse, RmseConvention};
use lcgmm::mixture::{
    e_step, objective, update_rotation, update_variances, weighted_centroids, MixtureState,
};
use lcgmm::spatial::build_knn_graph;
use lcgmm::synth::{sample_blade, synthesize_scan, CorruptionSpec};
use lcgmm::{register, RegistrationConfig};
use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_cloud(n: usize, scale: f64, rng: &mut impl Rng) -> PointCloud {
    PointCloud::new(
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-scale..scale),
                    rng.random_range(-scale..scale),
                    rng.random_range(-scale..scale),
                )
            })
            .collect(),
    )
    .unwrap()
}

fn rot_z(angle: f64) -> Matrix3<f64> {
    let (s, c) = (angle.sin(), angle.cos());
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// One M-step on a random instance, then central finite differences of the
/// objective around the returned translation and variances. The closed forms
/// must sit at stationary points of the objective they claim to minimize.
#[test]
fn m_step_solutions_are_stationary_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..50 {
        let n = rng.random_range(6..16);
        let m = rng.random_range(3..9);
        let omega = [0.0, 0.1, 0.3][trial % 3];
        let lambda = [0.0, 0.4, 1.1][trial % 3];

        let x = random_cloud(n, 2.0, &mut rng);
        let y = random_cloud(m, 2.0, &mut rng);
        let t0 = RigidTransform::new(
            rot_z(rng.random_range(-0.5..0.5)),
            Vector3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            ),
        )
        .unwrap();
        let variances: Vec<f64> = (0..m).map(|_| rng.random_range(0.4..1.5)).collect();
        let state = MixtureState::new(variances, omega, 60.0).unwrap();
        let graph = build_knn_graph(&x, 3).unwrap();
        let posterior = e_step(&x, &y, &t0, &state);

        let (mu_x, mu_y) =
            weighted_centroids(&posterior, &graph, &x, &y, &state, lambda).unwrap();
        let update =
            update_rotation(&posterior, &graph, &x, &y, &state, lambda, mu_x, mu_y).unwrap();
        let r_star = *update.transform.rotation();
        let t_star = *update.transform.translation();

        // Objective as a function of the translation, everything else fixed.
        let q_of_t = |t: Vector3<f64>| -> f64 {
            let transform = RigidTransform::new(r_star, t).unwrap();
            objective(&posterior, &graph, &x, &y, &transform, &state, lambda).total
        };
        let q_at_star = q_of_t(t_star);
        let h = 1e-5 * (1.0 + t_star.norm());
        let mut grad = Vector3::zeros();
        for axis in 0..3 {
            let mut plus = t_star;
            let mut minus = t_star;
            plus[axis] += h;
            minus[axis] -= h;
            grad[axis] = (q_of_t(plus) - q_of_t(minus)) / (2.0 * h);
        }
        assert!(
            grad.norm() < 1e-6 * (1.0 + q_at_star.abs()),
            "trial {trial}: translation gradient {:.3e} at Q = {q_at_star}",
            grad.norm()
        );

        // Rotation: with the translation re-derived per candidate rotation,
        // the returned rotation must minimize the objective against random
        // proper rotations.
        let q_of_r = |r: Matrix3<f64>| -> f64 {
            let t = RigidTransform::new(r, mu_x - r * mu_y).unwrap();
            objective(&posterior, &graph, &x, &y, &t, &state, lambda).total
        };
        let best = q_of_r(r_star);
        for _ in 0..200 {
            let q = loop {
                let v: [f64; 4] = core::array::from_fn(|_| rng.random_range(-1.0..1.0));
                let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                if norm > 1e-3 {
                    break v.map(|a| a / norm);
                }
            };
            let [w, xq, yq, zq] = q;
            let r = Matrix3::new(
                1.0 - 2.0 * (yq * yq + zq * zq),
                2.0 * (xq * yq - w * zq),
                2.0 * (xq * zq + w * yq),
                2.0 * (xq * yq + w * zq),
                1.0 - 2.0 * (xq * xq + zq * zq),
                2.0 * (yq * zq - w * xq),
                2.0 * (xq * zq - w * yq),
                2.0 * (yq * zq + w * xq),
                1.0 - 2.0 * (xq * xq + yq * yq),
            );
            assert!(
                best <= q_of_r(r) + 1e-9 * (1.0 + best.abs()),
                "trial {trial}: a random rotation beats the update"
            );
        }

        // Variances: differentiate the objective at the new transform around
        // each unclamped solution. A negative-infinity floor disables the
        // clamp so the raw stationary points come through; non-positive raw
        // solutions lie outside the objective's domain (that is what the
        // clamp is for) and are skipped here.
        let raw_variances = update_variances(
            &posterior,
            &graph,
            &x,
            &y,
            &update.transform,
            &state,
            lambda,
            f64::NEG_INFINITY,
        );
        let q_of_sigma = |k: usize, value: f64| -> f64 {
            let mut vars = state.variances().to_vec();
            vars[k] = value;
            let perturbed =
                MixtureState::new(vars, state.outlier_weight(), state.volume()).unwrap();
            objective(
                &posterior,
                &graph,
                &x,
                &y,
                &update.transform,
                &perturbed,
                lambda,
            )
            .total
        };
        for k in 0..m {
            let s = raw_variances[k];
            if s <= 1e-9 {
                continue;
            }
            let h = 1e-6 * s;
            let d = (q_of_sigma(k, s + h) - q_of_sigma(k, s - h)) / (2.0 * h);
            let q_here = q_of_sigma(k, s);
            assert!(
                d.abs() < 1e-6 * (1.0 + q_here.abs()),
                "trial {trial}: variance {k} derivative {d:.3e}"
            );
        }
    }
}

/// Registering a rigidly moved scanned cloud must move the answer by the
/// same motion: register(g(X), Y) == g . register(X, Y). Holds at a
/// converged fixed point; a clean instance makes the tolerance fire.
#[test]
fn registration_is_rigid_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let model = sample_blade(400, 3);
    let spec = CorruptionSpec {
        n_points: 350,
        noise_sigma: 0.0,
        outlier_ratio: 0.0,
        angle_range_deg: 15.0,
        trans_range: 5.0,
        seed: 21,
    };
    let (x, _) = synthesize_scan(&model, &spec).unwrap();
    // The uniform outlier density depends on the axis-aligned bounding box,
    // which is not rotation invariant, so equivariance holds at omega = 0.
    let cfg = RegistrationConfig {
        lambda: 0.5,
        outlier_weight: 0.0,
        ..Default::default()
    };
    let base = register(&x, &model, &cfg).unwrap();
    assert_eq!(
        base.converged_by,
        lcgmm::ConvergenceReason::TransformTolerance
    );

    let g = RigidTransform::new(
        rot_z(rng.random_range(-1.0..1.0)),
        Vector3::new(4.0, -7.0, 2.0),
    )
    .unwrap();
    let moved = apply_transform(&x, &g);
    let shifted = register(&moved, &model, &cfg).unwrap();

    let expected = g.compose(&base.transform);
    assert!(
        (shifted.transform.rotation() - expected.rotation()).norm() < 1e-6,
        "rotation drifted: {:.3e}",
        (shifted.transform.rotation() - expected.rotation()).norm()
    );
    assert!(
        (shifted.transform.translation() - expected.translation()).norm() < 1e-6,
        "translation drifted: {:.3e}",
        (shifted.transform.translation() - expected.translation()).norm()
    );
}

/// Noise-free, outlier-free scan with a moderate misalignment: the solver
/// must recover the ground truth to fractions of a micron at desk scale.
#[test]
fn exact_recovery_on_clean_synthetic_scan() {
    let model = sample_blade(800, 1);
    let spec = CorruptionSpec {
        n_points: 800,
        noise_sigma: 0.0,
        outlier_ratio: 0.0,
        angle_range_deg: 10.0,
        trans_range: 5.0,
        seed: 5,
    };
    let t_gt = lcgmm::synth::random_rigid(&spec);
    let x = apply_transform(&model, &t_gt);
    let cfg = RegistrationConfig {
        lambda: 0.0,
        outlier_weight: 0.0,
        ..Default::default()
    };
    let report = register(&x, &model, &cfg).unwrap();
    let rmse = transform_rmse(&model, &t_gt, &report.transform, RmseConvention::MeanThenSqrt);
    let bound = 1e-6 * x.bbox_diagonal();
    assert!(
        rmse < bound,
        "rmse {rmse:.3e} above {bound:.3e} after {} iterations",
        report.iterations_run
    );
}

/// The report contract: the trace has one entry per iteration and the stated
/// convergence reason matches the iteration count.
#[test]
fn report_contract_round_trip() {
    let model = sample_blade(150, 11);
    let spec = CorruptionSpec {
        n_points: 120,
        noise_sigma: 0.5,
        outlier_ratio: 0.05,
        angle_range_deg: 10.0,
        trans_range: 3.0,
        seed: 3,
    };
    let (x, _) = synthesize_scan(&model, &spec).unwrap();
    let cfg = RegistrationConfig {
        max_iterations: 12,
        convergence_tol: 0.0,
        ..Default::default()
    };
    let report = register(&x, &model, &cfg).unwrap();
    assert_eq!(report.iterations_run, 12);
    assert_eq!(report.objective_trace.len(), 12);
    assert_eq!(report.final_variances.len(), model.len());
    assert!(report.wall_time > 0.0);
}
