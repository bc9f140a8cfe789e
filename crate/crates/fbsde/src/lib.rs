//! Monte Carlo solver for weakly coupled systems of quasilinear parabolic
//! PDEs.
//!
//! The Cauchy problem
//!
//! ```text
//! d_s u_l + 1/2 Tr(A* D2(u_l) A) + <a, grad u_l>
//!         + B_lm^i d_i(u_m) + c_lm u_m + g_l(s, x, u, K(u, grad u)) = 0,
//! u(T, x) = u0(x)
//! ```
//!
//! is represented probabilistically through a forward diffusion `xi`, a
//! multiplicative operator functional `Gamma` carrying the zero- and
//! first-order coupling, and a backward equation for
//! `y(t) = Gamma*(s, t) u(t, xi(t))` whose time-`s` value is `u(s, x)`.
//! The backward equation is solved by Picard iteration with per-step
//! least-squares regression for the conditional expectations.
//!
//! Module map:
//! - [`problem`]: coefficient bundles, the built-in catalog, manufactured
//!   problems, empirical Lipschitz validation.
//! - [`forward`]: Euler-Maruyama paths, the functional `Gamma` and its exact
//!   per-step inverse, algebraic defect checks, the binary path dump.
//! - [`bsde`]: the transformed generator, the Picard-regression solver,
//!   point evaluation and convergence studies.
//! - [`scalarize`]: the enlarged-phase-space scalar reduction and the
//!   comparison-theorem harnesses.
//! - `reference`: independent oracles (matrix exponential, analytic PDE
//!   residuals, a periodic finite-difference solver).

pub mod bsde;
pub mod error;
pub mod forward;
pub mod linalg;
pub mod problem;
pub mod reference;
pub mod regression;
pub mod rng;
pub mod scalarize;

pub use bsde::{
    convergence_study, evaluate_u, generator_f, picard_solve, BackwardSolution, ConvergenceRow,
    Estimate, SolverConfig,
};
pub use error::{Error, Result};
pub use forward::{
    gamma_compose_check, gamma_inverse_check, simulate_forward, ForwardPaths, TimeGrid,
};
pub use problem::{
    catalog, derive_b, gradient_load, manufacture, validate, LipschitzBudget, ManufactureInputs,
    ManufacturedProblem, ManufacturedSolution, ProblemSpec, ValidationReport, CATALOG_NAMES,
};
pub use regression::{fit_conditional, BasisSpec, BasisState, RegressionModel};
pub use scalarize::{
    build_enlarged, check_c31, comparison_harness, solve_scalar, C31Report, ComparisonReport,
    EnlargedSpec,
};
