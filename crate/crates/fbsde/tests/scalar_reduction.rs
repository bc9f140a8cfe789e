//! Enlarged-phase-space reduction: block identities, cross-solver
//! consistency, linearity in the direction, and the comparison harnesses.

use std::sync::Arc;

use fbsde::problem::ProblemSpec;
use fbsde::rng::SeqRng;
use fbsde::{
    build_enlarged, catalog, check_c31, comparison_harness, evaluate_u, simulate_forward,
    solve_scalar, SolverConfig,
};

fn trig_pair_plain() -> Arc<ProblemSpec> {
    Arc::new(
        ProblemSpec::builder(1, 2, 1.0)
            .terminal(Arc::new(|x: &[f64], out: &mut [f64]| {
                out[0] = x[0].sin();
                out[1] = x[0].cos();
            }))
            .build()
            .unwrap(),
    )
}

#[test]
fn enlarged_blocks_match_manual_assembly() {
    // Constant non-symmetric c and constant C: the drift's direction block
    // is the adjoint action c^T h (the same transport as the simulated
    // functional), the diffusion block column is C_1 h.
    let c = [0.0, 1.0, -1.0, 0.0];
    let cpl = [0.1, 0.7, 0.2, -0.3];
    let spec = Arc::new(
        ProblemSpec::builder(1, 2, 1.0)
            .drift(Arc::new(|_t, x: &[f64], out: &mut [f64]| out[0] = 2.0 * x[0]))
            .diffusion(Arc::new(|_t, _x, out: &mut [f64]| out[0] = 1.5))
            .zero_order(Arc::new(move |_t, _x, out: &mut [f64]| out.copy_from_slice(&c)))
            .coupling(Arc::new(move |_t, _x, out: &mut [f64]| out.copy_from_slice(&cpl)))
            .terminal(Arc::new(|_x, out: &mut [f64]| out.fill(0.0)))
            .build()
            .unwrap(),
    );
    let h = [0.4, -1.1];
    let enlarged = build_enlarged(spec, &h).unwrap();
    let kappa = [0.25, h[0], h[1]];

    let mut q = vec![0.0; 3];
    enlarged.eval_q(0.0, &kappa, &mut q).unwrap();
    assert_eq!(q[0], 0.5);
    // c^T h entrywise.
    let expected = [
        c[0] * h[0] + c[2] * h[1],
        c[1] * h[0] + c[3] * h[1],
    ];
    assert_eq!(&q[1..], &expected);

    let mut qm = vec![0.0; 3 * 2];
    enlarged.eval_q_matrix(0.0, &kappa, &mut qm).unwrap();
    // [[A, 0], [0, C_1 h]] with d = 1.
    assert_eq!(qm[0], 1.5);
    assert_eq!(qm[1], 0.0);
    assert_eq!(qm[2], 0.0);
    assert_eq!(qm[3], cpl[0] * h[0] + cpl[1] * h[1]);
    assert_eq!(qm[4], 0.0);
    assert_eq!(qm[5], cpl[2] * h[0] + cpl[3] * h[1]);
}

#[test]
fn enlarged_rejects_wrong_direction_length() {
    let spec = Arc::new(catalog("rotation-coupling").unwrap());
    assert!(build_enlarged(spec, &[1.0]).is_err());
}

#[test]
fn zero_direction_gives_null_process() {
    let spec = Arc::new(catalog("rotation-coupling").unwrap());
    let enlarged = build_enlarged(spec, &[0.0, 0.0]).unwrap();
    let estimate = solve_scalar(&enlarged, 0.0, &[0.2], &SolverConfig::new(20, 500, 4)).unwrap();
    assert_eq!(estimate.value[0], 0.0);
    assert_eq!(estimate.stderr[0], 0.0);
}

#[test]
fn frozen_direction_reduces_to_component_mean() {
    // c = C = 0, g = 0, h = e_1: Y(s) is the plain Feynman-Kac mean of the
    // first terminal component.
    let spec = trig_pair_plain();
    let config = SolverConfig::new(25, 4_000, 66);
    let enlarged = build_enlarged(spec.clone(), &[1.0, 0.0]).unwrap();
    let estimate = solve_scalar(&enlarged, 0.0, &[0.3], &config).unwrap();

    let paths = simulate_forward(spec, 0.0, &[0.3], &config).unwrap();
    let mut plain = 0.0;
    for m in 0..config.n_paths {
        plain += paths.xi(m, config.n_steps)[0].sin();
    }
    plain /= config.n_paths as f64;
    assert!(
        (estimate.value[0] - plain).abs() <= 1e-12,
        "scalar {} vs plain {plain}",
        estimate.value[0]
    );
}

#[test]
fn scalar_route_is_consistent_with_vector_solver() {
    let spec = Arc::new(catalog("rotation-coupling").unwrap());
    let config = SolverConfig::new(50, 8_000, 3141);
    let vector = evaluate_u(spec.clone(), 0.0, &[0.4], &config).unwrap();
    let mut rng = SeqRng::new(5);
    for _ in 0..5 {
        let h = [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)];
        let enlarged = build_enlarged(spec.clone(), &h).unwrap();
        let scalar = solve_scalar(&enlarged, 0.0, &[0.4], &config).unwrap();
        let paired = h[0] * vector.value[0] + h[1] * vector.value[1];
        let band = 3.0
            * (scalar.stderr[0]
                + h[0].abs() * vector.stderr[0]
                + h[1].abs() * vector.stderr[1]);
        assert!(
            (scalar.value[0] - paired).abs() <= band,
            "h {h:?}: scalar {} vs paired {paired}, band {band}",
            scalar.value[0]
        );
    }
}

#[test]
fn scalar_route_is_additive_in_direction() {
    let spec = Arc::new(catalog("first-order-coupling").unwrap());
    let config = SolverConfig::new(40, 6_000, 2222);
    let h1 = [0.8, -0.3];
    let h2 = [-0.2, 1.1];
    let sum = [h1[0] + h2[0], h1[1] + h2[1]];
    let y1 = solve_scalar(&build_enlarged(spec.clone(), &h1).unwrap(), 0.0, &[0.1], &config).unwrap();
    let y2 = solve_scalar(&build_enlarged(spec.clone(), &h2).unwrap(), 0.0, &[0.1], &config).unwrap();
    let ys = solve_scalar(&build_enlarged(spec, &sum).unwrap(), 0.0, &[0.1], &config).unwrap();
    let band = 3.0 * (y1.stderr[0] + y2.stderr[0] + ys.stderr[0]);
    assert!(
        (ys.value[0] - y1.value[0] - y2.value[0]).abs() <= band,
        "additivity defect {} band {band}",
        (ys.value[0] - y1.value[0] - y2.value[0]).abs()
    );
}

#[test]
fn unsupported_scalar_reduction_is_reported() {
    // d1 = 2 with a nonzero reaction has no self-contained scalar driver.
    let spec = Arc::new(
        ProblemSpec::builder(1, 2, 1.0)
            .reaction(Arc::new(|_t, _x, u: &[f64], _k: &[f64], out: &mut [f64]| {
                out[0] = u[1];
                out[1] = u[0];
            }))
            .terminal(Arc::new(|_x, out: &mut [f64]| out.fill(0.0)))
            .build()
            .unwrap(),
    );
    let enlarged = build_enlarged(spec, &[1.0, 0.0]).unwrap();
    let err = match solve_scalar(&enlarged, 0.0, &[0.0], &SolverConfig::new(5, 10, 1)) {
        Err(e) => e.to_string(),
        Ok(_) => panic!("must refuse d1 > 1 with nonzero reaction"),
    };
    assert!(err.contains("scalar reduction"), "message: {err}");
}

#[test]
fn scalar_comparison_orders_solutions() {
    // d1 = 1 pair with ordered terminal data and ordered drivers: the
    // scalar solutions order accordingly across seeds.
    let lower = Arc::new(
        ProblemSpec::builder(1, 1, 1.0)
            .terminal(Arc::new(|x: &[f64], out: &mut [f64]| out[0] = x[0].sin()))
            .build()
            .unwrap(),
    );
    let upper = Arc::new(
        ProblemSpec::builder(1, 1, 1.0)
            .reaction(Arc::new(|_t, _x, _u: &[f64], _k: &[f64], out: &mut [f64]| {
                out[0] = 0.5;
            }))
            .terminal(Arc::new(|x: &[f64], out: &mut [f64]| out[0] = x[0].sin() + 1.0))
            .build()
            .unwrap(),
    );
    for seed in 0..10u64 {
        let config = SolverConfig::new(20, 2_000, 100 + seed);
        let y1 = solve_scalar(&build_enlarged(lower.clone(), &[1.0]).unwrap(), 0.0, &[0.0], &config)
            .unwrap();
        let y2 = solve_scalar(&build_enlarged(upper.clone(), &[1.0]).unwrap(), 0.0, &[0.0], &config)
            .unwrap();
        assert!(
            y1.value[0] < y2.value[0],
            "seed {seed}: {} vs {}",
            y1.value[0],
            y2.value[0]
        );
    }
}

#[test]
fn c31_equality_case_passes() {
    let spec1 = catalog("rotation-coupling").unwrap();
    let spec2 = catalog("rotation-coupling").unwrap();
    let report = check_c31(&spec1, &spec2, 500, 77).unwrap();
    assert!(report.satisfied, "{:?}", report.first_failure);
    assert_eq!(report.terminal_pass_rate(), 1.0);
    assert_eq!(report.generator_pass_rate(), 1.0);
}

#[test]
fn c31_uniform_shift_passes() {
    let base = trig_pair_plain();
    let shifted = Arc::new(
        ProblemSpec::builder(1, 2, 1.0)
            .reaction(Arc::new(|_t, _x, _u: &[f64], _k: &[f64], out: &mut [f64]| {
                out.fill(0.25);
            }))
            .terminal(Arc::new(|x: &[f64], out: &mut [f64]| {
                out[0] = x[0].sin() + 1.0;
                out[1] = x[0].cos() + 1.0;
            }))
            .build()
            .unwrap(),
    );
    let report = check_c31(&base, &shifted, 500, 78).unwrap();
    assert!(report.satisfied, "{:?}", report.first_failure);
}

#[test]
fn c31_detects_negative_off_diagonal_dependence() {
    // g_0 = -u_1 decreases in an off-diagonal component: the hypothesis
    // pattern must produce counterexamples.
    let spec = Arc::new(
        ProblemSpec::builder(1, 2, 1.0)
            .reaction(Arc::new(|_t, _x, u: &[f64], _k: &[f64], out: &mut [f64]| {
                out[0] = -u[1];
                out[1] = 0.0;
            }))
            .terminal(Arc::new(|_x, out: &mut [f64]| out.fill(0.0)))
            .build()
            .unwrap(),
    );
    let report = check_c31(&spec, &spec, 500, 79).unwrap();
    assert!(!report.satisfied);
    assert!(report.generator_failures > 0);
    assert_eq!(report.terminal_failures, 0);
}

#[test]
fn identical_problems_compare_exactly() {
    let spec1 = Arc::new(catalog("heat-1d").unwrap());
    let spec2 = Arc::new(catalog("heat-1d").unwrap());
    let config = SolverConfig::new(15, 1_000, 5);
    let report = comparison_harness(spec1, spec2, 0.0, &[0.0], &config, 4).unwrap();
    assert!(!report.exploratory);
    assert_eq!(report.violations, 0);
    for record in &report.records {
        assert_eq!(record.y1, record.y2);
    }
}

#[test]
fn shifted_pair_orders_with_significant_gap() {
    let base = trig_pair_plain();
    let shifted = Arc::new(
        ProblemSpec::builder(1, 2, 1.0)
            .terminal(Arc::new(|x: &[f64], out: &mut [f64]| {
                out[0] = x[0].sin() + 1.0;
                out[1] = x[0].cos() + 1.0;
            }))
            .build()
            .unwrap(),
    );
    let config = SolverConfig::new(20, 2_000, 9_000);
    let report = comparison_harness(base, shifted, 0.0, &[0.2], &config, 8).unwrap();
    assert!(!report.exploratory, "{:?}", report.c31.first_failure);
    assert_eq!(report.violations, 0);
    assert!(report.all_gaps_significant);
}

#[test]
fn scalar_route_consistent_on_scalar_problem() {
    // d1 = 1: pairing with h is plain scaling, Y(s; h) = h u(s, x).
    let spec = Arc::new(catalog("heat-1d").unwrap());
    let config = SolverConfig::new(30, 5_000, 12);
    let vector = evaluate_u(spec.clone(), 0.0, &[0.5], &config).unwrap();
    let mut rng = SeqRng::new(9);
    for _ in 0..5 {
        let h = [rng.uniform(-2.0, 2.0)];
        let scalar =
            solve_scalar(&build_enlarged(spec.clone(), &h).unwrap(), 0.0, &[0.5], &config).unwrap();
        let band = 3.0 * (scalar.stderr[0] + h[0].abs() * vector.stderr[0]);
        let defect = (scalar.value[0] - h[0] * vector.value[0]).abs();
        assert!(defect <= band, "h {h:?}: defect {defect} > {band}");
    }
}
