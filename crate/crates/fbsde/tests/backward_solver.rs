//! Backward-solver checks against closed forms and frozen discrete oracles.

use std::sync::Arc;

use fbsde::problem::{LipschitzBudget, ProblemSpec};
use fbsde::rng::SeqRng;
use fbsde::{
    catalog, convergence_study, evaluate_u, fit_conditional, generator_f, picard_solve,
    simulate_forward, BasisSpec, SolverConfig,
};

fn constant_problem(value: f64) -> Arc<ProblemSpec> {
    Arc::new(
        ProblemSpec::builder(1, 1, 1.0)
            .diffusion(Arc::new(|_t, _x, out: &mut [f64]| out[0] = 0.0))
            .terminal(Arc::new(move |_x, out: &mut [f64]| out[0] = value))
            .build()
            .unwrap(),
    )
}

#[test]
fn generator_vanishes_with_zero_reaction() {
    let spec = catalog("rotation-coupling").unwrap();
    let f = generator_f(
        0.2,
        &[0.3],
        &[1.1, 0.2, -0.4, 0.9],
        &[0.8, -0.18, 0.36, 1.05],
        &[2.0, -3.0],
        &[0.5, 0.25],
        &spec,
    )
    .unwrap();
    assert_eq!(f, vec![0.0, 0.0]);
}

#[test]
fn generator_reduces_to_reaction_when_functional_is_trivial() {
    // Gamma = I, C = 0, A = I: f = g(t, xi, y, z) verbatim.
    let spec = ProblemSpec::builder(2, 2, 1.0)
        .reaction(Arc::new(|t, x: &[f64], u: &[f64], k: &[f64], out: &mut [f64]| {
            out[0] = t + x[0] + u[0] + k[1];
            out[1] = u[1] * k[2];
        }))
        .terminal(Arc::new(|_x, out: &mut [f64]| out.fill(0.0)))
        .build()
        .unwrap();
    let identity = [1.0, 0.0, 0.0, 1.0];
    let y = [0.5, 2.0];
    let z = [10.0, 20.0, 30.0, 40.0];
    let f = generator_f(0.25, &[1.0, -1.0], &identity, &identity, &y, &z, &spec).unwrap();
    assert_eq!(f, vec![0.25 + 1.0 + 0.5 + 20.0, 2.0 * 30.0]);
}

#[test]
fn generator_scalar_example() {
    // d = d1 = 1, Gamma = 2, C = 0, A = 1, g(u, k) = u + k, y = 4, z = 6:
    // f = 2 (4/2 + 6/2) = 10.
    let spec = ProblemSpec::builder(1, 1, 1.0)
        .zero_order(Arc::new(|_t, _x, out: &mut [f64]| out[0] = 0.0))
        .reaction(Arc::new(|_t, _x, u: &[f64], k: &[f64], out: &mut [f64]| {
            out[0] = u[0] + k[0];
        }))
        .terminal(Arc::new(|_x, out: &mut [f64]| out[0] = 0.0))
        .build()
        .unwrap();
    let f = generator_f(0.0, &[0.0], &[2.0], &[0.5], &[4.0], &[6.0], &spec).unwrap();
    assert!((f[0] - 10.0).abs() < 1e-14);

    // Independent scalar evaluation of the same transform on random data.
    let mut rng = SeqRng::new(4);
    for _ in 0..25 {
        let gm = rng.uniform(0.5, 2.0);
        let y = rng.uniform(-3.0, 3.0);
        let z = rng.uniform(-3.0, 3.0);
        let f = generator_f(0.0, &[0.0], &[gm], &[1.0 / gm], &[y], &[z], &spec).unwrap();
        let expected = gm * (y / gm + z / gm);
        assert!((f[0] - expected).abs() < 1e-12);
    }
}

#[test]
fn constant_terminal_is_a_one_iteration_fixed_point() {
    let spec = constant_problem(7.25);
    let config = SolverConfig::new(12, 64, 5);
    let paths = simulate_forward(spec.clone(), 0.0, &[1.0], &config).unwrap();
    let solution = picard_solve(&paths, &spec, &config).unwrap();
    assert!(solution.converged);
    assert_eq!(solution.iterations, 1);
    for m in 0..64 {
        for k in 0..=12 {
            assert_eq!(solution.y_at(m, k), &[7.25]);
        }
        for k in 0..12 {
            assert!(solution.z_at(m, k)[0].abs() < 1e-12);
        }
    }
}

#[test]
fn state_only_reaction_freezes_after_one_sweep() {
    // f independent of (y, z): the second sweep re-derives identical
    // targets, so its increment is exactly zero.
    let spec = Arc::new(
        ProblemSpec::builder(1, 1, 1.0)
            .reaction(Arc::new(|t, x: &[f64], _u: &[f64], _k: &[f64], out: &mut [f64]| {
                out[0] = (x[0] + t).sin();
            }))
            .terminal(Arc::new(|x: &[f64], out: &mut [f64]| out[0] = x[0]))
            .build()
            .unwrap(),
    );
    let config = SolverConfig::new(20, 512, 8);
    let paths = simulate_forward(spec.clone(), 0.0, &[0.2], &config).unwrap();
    let solution = picard_solve(&paths, &spec, &config).unwrap();
    assert!(solution.converged);
    assert_eq!(solution.iterations, 2);
    assert_eq!(solution.picard_residuals[1], 0.0);
}

#[test]
fn linear_scalar_ode_matches_backward_euler_product() {
    // a = A = 0, c = C = 0, g(u) = u, u0 = 1: the deterministic discrete
    // fixed point is y_0 = (1 - dt)^{-N}, within O(dt) of e^{T}.
    let spec = Arc::new(
        ProblemSpec::builder(1, 1, 1.0)
            .diffusion(Arc::new(|_t, _x, out: &mut [f64]| out[0] = 0.0))
            .reaction(Arc::new(|_t, _x, u: &[f64], _k: &[f64], out: &mut [f64]| {
                out[0] = u[0];
            }))
            .terminal(Arc::new(|_x, out: &mut [f64]| out[0] = 1.0))
            .budget(LipschitzBudget {
                l: Some(1.0),
                ..Default::default()
            })
            .build()
            .unwrap(),
    );
    let n = 100;
    let mut config = SolverConfig::new(n, 256, 10);
    config.picard_tol = 1e-12;
    config.picard_max = 120;
    let estimate = evaluate_u(spec, 0.0, &[0.0], &config).unwrap();
    assert!(estimate.converged);

    // Scalar backward-recursion oracle computed independently.
    let dt = 1.0 / n as f64;
    let mut oracle = 1.0;
    for _ in 0..n {
        oracle /= 1.0 - dt;
    }
    assert!(
        (estimate.value[0] - oracle).abs() < 1e-9,
        "value {} vs discrete oracle {oracle}",
        estimate.value[0]
    );
    assert!(
        (estimate.value[0] - std::f64::consts::E).abs() <= 0.06,
        "value {} vs e",
        estimate.value[0]
    );
}

#[test]
fn terminal_layer_is_exact() {
    let spec = Arc::new(catalog("rotation-coupling").unwrap());
    let config = SolverConfig::new(25, 128, 3);
    let paths = simulate_forward(spec.clone(), 0.0, &[0.1], &config).unwrap();
    let solution = picard_solve(&paths, &spec, &config).unwrap();
    let n = config.n_steps;
    for m in [0usize, 17, 127] {
        let mut u0 = vec![0.0; 2];
        spec.eval_terminal(paths.xi(m, n), &mut u0).unwrap();
        let g = paths.gamma(m, n);
        // zeta = Gamma(T, s)^T u0.
        let expected = [
            g[0] * u0[0] + g[2] * u0[1],
            g[1] * u0[0] + g[3] * u0[1],
        ];
        assert_eq!(solution.y_at(m, n), &expected);
    }
}

#[test]
fn zero_generator_reduction_to_plain_monte_carlo() {
    let spec = Arc::new(catalog("heat-1d").unwrap());
    let config = SolverConfig::new(25, 20_000, 555);
    let estimate = evaluate_u(spec.clone(), 0.0, &[0.0], &config).unwrap();

    let paths = simulate_forward(spec, 0.0, &[0.0], &config).unwrap();
    let mut plain = 0.0;
    for m in 0..config.n_paths {
        plain += paths.xi(m, config.n_steps)[0].powi(2);
    }
    plain /= config.n_paths as f64;
    assert!(
        (estimate.value[0] - plain).abs() <= 1e-10,
        "pipeline {} vs plain mean {plain}",
        estimate.value[0]
    );
    assert!(estimate.stderr[0] > 0.0);
}

#[test]
fn estimate_is_linear_in_terminal_data() {
    let base = Arc::new(catalog("heat-1d").unwrap());
    let scaled_pow2 = Arc::new(
        ProblemSpec::builder(1, 1, 1.0)
            .terminal(Arc::new(|x: &[f64], out: &mut [f64]| out[0] = 4.0 * (x[0] * x[0])))
            .build()
            .unwrap(),
    );
    let scaled = Arc::new(
        ProblemSpec::builder(1, 1, 1.0)
            .terminal(Arc::new(|x: &[f64], out: &mut [f64]| out[0] = 3.5 * (x[0] * x[0])))
            .build()
            .unwrap(),
    );
    let config = SolverConfig::new(20, 8_000, 909);
    let e1 = evaluate_u(base, 0.0, &[0.3], &config).unwrap();
    // Power-of-two scaling commutes exactly with rounding.
    let e4 = evaluate_u(scaled_pow2, 0.0, &[0.3], &config).unwrap();
    assert_eq!(e4.value[0], 4.0 * e1.value[0]);
    let e35 = evaluate_u(scaled, 0.0, &[0.3], &config).unwrap();
    let rel = (e35.value[0] - 3.5 * e1.value[0]).abs() / (3.5 * e1.value[0]).abs();
    assert!(rel <= 1e-12, "relative defect {rel}");
}

#[test]
fn heat_point_value_matches_oracle() {
    let spec = Arc::new(catalog("heat-1d").unwrap());
    let config = SolverConfig::new(50, 20_000, 2024);
    let estimate = evaluate_u(spec, 0.0, &[0.0], &config).unwrap();
    assert!(
        (estimate.value[0] - 1.0).abs() <= 3.0 * estimate.stderr[0] + 0.02,
        "value {} stderr {}",
        estimate.value[0],
        estimate.stderr[0]
    );
}

#[test]
fn frozen_rotation_semigroup_acts_on_terminal_data() {
    // a = A = 0, c the rotation generator, g = 0, u0 = (1, 0): the value is
    // the deterministic transport exp(c (T-s)) u0 = (0, -1) at T - s = pi/2.
    let theta = std::f64::consts::FRAC_PI_2;
    let spec = Arc::new(
        ProblemSpec::builder(1, 2, theta)
            .diffusion(Arc::new(|_t, _x, out: &mut [f64]| out[0] = 0.0))
            .zero_order(Arc::new(|_t, _x, out: &mut [f64]| {
                out.copy_from_slice(&[0.0, 1.0, -1.0, 0.0]);
            }))
            .terminal(Arc::new(|_x, out: &mut [f64]| {
                out[0] = 1.0;
                out[1] = 0.0;
            }))
            .build()
            .unwrap(),
    );
    let config = SolverConfig::new(200, 100, 1);
    let estimate = evaluate_u(spec, 0.0, &[0.0], &config).unwrap();
    let err = (estimate.value[0] - 0.0)
        .abs()
        .max((estimate.value[1] - (-1.0)).abs());
    assert!(err <= 0.05, "max-norm error {err}, value {:?}", estimate.value);
}

#[test]
fn convergence_study_rows_are_deterministic() {
    let spec = Arc::new(catalog("heat-1d").unwrap());
    let config = SolverConfig::new(20, 4_000, 31);
    let rows = convergence_study(spec, 0.0, &[0.0], &[config.clone(), config]).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].value, rows[1].value);
    assert_eq!(rows[0].stderr, rows[1].stderr);
    assert_eq!(rows[0].abs_error, rows[1].abs_error);
    assert!(rows[0].stderr[0] >= 0.0);
}

#[test]
fn evaluate_is_deterministic_across_thread_counts() {
    let spec = Arc::new(catalog("rotation-coupling").unwrap());
    let config = SolverConfig::new(40, 3_000, 77);
    let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let pool2 = rayon::ThreadPoolBuilder::new().num_threads(2).build().unwrap();
    let e1 = pool1.install(|| evaluate_u(spec.clone(), 0.0, &[0.5], &config).unwrap());
    let e2 = pool2.install(|| evaluate_u(spec, 0.0, &[0.5], &config).unwrap());
    assert_eq!(e1.value, e2.value);
    assert_eq!(e1.stderr, e2.stderr);
}

#[test]
fn quadratic_fit_recovers_square_coefficient() {
    // targets = x^2 + unit noise, quadratic basis, M = 10^4: the square
    // coefficient lands within 0.05 of 1; the whole solve cross-checked
    // against an independent dense LU on hand-assembled normal equations.
    let m = 10_000usize;
    let basis = BasisSpec::new(1, 2);
    let f = basis.n_features();
    let mut rng = SeqRng::new(2718);
    let mut features = vec![0.0; m * f];
    let mut targets = vec![0.0; m];
    for i in 0..m {
        let x = rng.uniform(-2.0, 2.0);
        basis.eval(&[x], &mut features[i * f..(i + 1) * f]);
        targets[i] = x * x + rng.standard_normal();
    }
    let (model, _) = fit_conditional(&features, m, f, &targets, 1, 0.0).unwrap();
    let c2 = model.coefficient(2, 0);
    assert!((c2 - 1.0).abs() < 0.05, "square coefficient {c2}");

    let mut gram = nalgebra::DMatrix::<f64>::zeros(f, f);
    let mut rhs = nalgebra::DVector::<f64>::zeros(f);
    for i in 0..m {
        for a in 0..f {
            rhs[a] += features[i * f + a] * targets[i];
            for b in 0..f {
                gram[(a, b)] += features[i * f + a] * features[i * f + b];
            }
        }
    }
    let reference = gram.full_piv_lu().solve(&rhs).unwrap();
    for a in 0..f {
        let diff = (model.coefficient(a, 0) - reference[a]).abs();
        assert!(diff < 1e-8, "coefficient {a} differs by {diff}");
    }
}

#[test]
fn non_convergence_is_flagged_with_history() {
    // One sweep cannot reach a tight tolerance on a genuinely nonlinear
    // problem; the result is flagged, not an error.
    let problem = fbsde::problem::manufactured_quasilinear().unwrap();
    let spec = Arc::new(problem.base);
    let mut config = SolverConfig::new(20, 1_000, 2);
    config.picard_max = 1;
    config.picard_tol = 1e-12;
    let paths = simulate_forward(spec.clone(), 0.0, &[0.5], &config).unwrap();
    let solution = picard_solve(&paths, &spec, &config).unwrap();
    assert!(!solution.converged);
    assert_eq!(solution.iterations, 1);
    assert_eq!(solution.picard_residuals.len(), 1);
    assert!(solution.picard_residuals[0].is_finite());

    let estimate = evaluate_u(spec, 0.0, &[0.5], &config).unwrap();
    assert!(!estimate.converged);
}

#[test]
fn start_time_outside_horizon_is_rejected() {
    let spec = Arc::new(catalog("heat-1d").unwrap());
    let config = SolverConfig::new(10, 50, 1);
    assert!(evaluate_u(spec.clone(), 1.0, &[0.0], &config).is_err());
    assert!(evaluate_u(spec.clone(), -0.1, &[0.0], &config).is_err());
    assert!(evaluate_u(spec, f64::NAN, &[0.0], &config).is_err());
}
