//! Backward solver: Picard iteration with regression-estimated conditional
//! expectations for the transformed BSDE
//!
//! ```text
//! y(t) = zeta + int_t^T f(r, xi(r), y(r), z(r)) dr - int_t^T z(r) dw(r),
//! zeta = Gamma*(s, T) u0(xi(T)),
//! f(t, y, z) = Gamma* g(t, xi, [Gamma*]^{-1} y, [Gamma*]^{-1} z),
//! ```
//!
//! and evaluation of the PDE solution `u(s, x) = y(s)`.
//!
//! Conditional expectations are realized per time step by least-squares
//! regression on polynomial features of the Markov state; the control `z` is
//! realized by the increment-projection estimator
//! `z_k ~ E[(zeta + S_{k+1}) dw_k^T | state_k] / dt`. Common random numbers
//! are reused across iterations, so the iteration map is a deterministic
//! contraction on the sampled system.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward::{simulate_forward, ForwardPaths};
use crate::linalg;
use crate::problem::ProblemSpec;
use crate::regression::{
    column_means, column_variances, BasisSpec, BasisState, StepRegression, REDUCE_BLOCK,
};

/// Discretization, sampling, regression and iteration controls.
#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub n_steps: usize,
    pub n_paths: usize,
    pub seed: u64,
    /// Maximum Picard sweeps.
    pub picard_max: usize,
    /// Tolerance on the beta-weighted increment norm.
    pub picard_tol: f64,
    /// Weight in the iteration norm; `None` resolves to `1 + 4 L^2` with the
    /// problem's declared Lipschitz constant `L`.
    pub beta: Option<f64>,
    /// Total polynomial degree of the regression features.
    pub basis_degree: usize,
    /// Regression state; `None` resolves to `XiAndGamma` whenever the
    /// operator functional is active, `XiOnly` otherwise.
    pub basis_state: Option<BasisState>,
    /// Relative ridge regularization of the normal equations.
    pub ridge: f64,
}

impl SolverConfig {
    pub fn new(n_steps: usize, n_paths: usize, seed: u64) -> Self {
        Self {
            n_steps,
            n_paths,
            seed,
            picard_max: 30,
            picard_tol: 1e-4,
            beta: None,
            basis_degree: 2,
            basis_state: None,
            ridge: 1e-10,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 || self.n_paths == 0 {
            return Err(Error::Invalid("n_steps and n_paths must be >= 1".into()));
        }
        if self.picard_max == 0 {
            return Err(Error::Invalid("picard_max must be >= 1".into()));
        }
        if self.picard_tol.is_nan() || self.picard_tol <= 0.0 {
            return Err(Error::Invalid("picard_tol must be positive".into()));
        }
        if self.ridge < 0.0 {
            return Err(Error::Invalid("ridge must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn resolved_beta(&self, spec: &ProblemSpec) -> f64 {
        self.beta.unwrap_or_else(|| {
            let l = spec.budget().l.unwrap_or(0.0);
            1.0 + 4.0 * l * l
        })
    }

    pub fn resolved_basis_state(&self, spec: &ProblemSpec) -> BasisState {
        self.basis_state.unwrap_or(if spec.gamma_trivial() {
            BasisState::XiOnly
        } else {
            BasisState::XiAndGamma
        })
    }
}

/// Discrete `(y, z)` processes on the grid plus iteration diagnostics.
pub struct BackwardSolution {
    dim_y: usize,
    dim_z: usize,
    n_paths: usize,
    n_steps: usize,
    /// Step-major `(N+1) x M x dim_y`.
    y: Vec<f64>,
    /// Step-major `N x M x dim_z`.
    z: Vec<f64>,
    /// Beta-norm of successive increments, one entry per sweep.
    pub picard_residuals: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// `zeta + S_0` per path from the final sweep; its spread is the Monte
    /// Carlo error of the time-`s` value.
    start_targets: Vec<f64>,
}

impl BackwardSolution {
    #[inline]
    pub fn y_at(&self, path: usize, step: usize) -> &[f64] {
        let base = (step * self.n_paths + path) * self.dim_y;
        &self.y[base..base + self.dim_y]
    }

    #[inline]
    pub fn z_at(&self, path: usize, step: usize) -> &[f64] {
        let base = (step * self.n_paths + path) * self.dim_z;
        &self.z[base..base + self.dim_z]
    }

    pub fn dim_y(&self) -> usize {
        self.dim_y
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Per-path `zeta + S_0` targets of the final sweep, `M x dim_y`.
    pub fn start_targets(&self) -> &[f64] {
        &self.start_targets
    }

    /// Cross-path mean of `y(s)` and its standard error.
    pub fn start_estimate(&self) -> (Vec<f64>, Vec<f64>) {
        let m = self.n_paths;
        let value = column_means(&self.y[..m * self.dim_y], m, self.dim_y);
        let t_means = column_means(&self.start_targets, m, self.dim_y);
        let t_vars = column_variances(&self.start_targets, m, self.dim_y, &t_means);
        let stderr = t_vars.iter().map(|v| (v / m as f64).sqrt()).collect();
        (value, stderr)
    }
}

/// A Monte Carlo value with standard errors and run metadata.
#[derive(Clone, Debug)]
pub struct Estimate {
    pub value: Vec<f64>,
    pub stderr: Vec<f64>,
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub wall_time: Duration,
    pub converged: bool,
    pub picard_iterations: usize,
}

/// The transformed generator
/// `f(t, y, z) = Gamma* g(t, xi, [Gamma*]^{-1} y, [Gamma*]^{-1} z)` with
/// `Gamma* = Gamma(t, s)^T`. With `Gamma = I` this is `g(t, xi, y, z)`
/// verbatim, the `z` argument being the gradient load `A* grad u + C* u`.
pub fn generator_f(
    t: f64,
    xi: &[f64],
    gamma: &[f64],
    gamma_inv: &[f64],
    y: &[f64],
    z: &[f64],
    spec: &ProblemSpec,
) -> Result<Vec<f64>> {
    let d1 = spec.d1();
    let d = spec.d();
    if y.len() != d1 || z.len() != d1 * d || gamma.len() != d1 * d1 || gamma_inv.len() != d1 * d1 {
        return Err(Error::Dimension {
            operand: "generator arguments",
            expected: format!("y: {d1}, z: {}x{}, gamma: {d1}x{d1}", d1, d),
            got: format!(
                "y: {}, z: {}, gamma: {}, gamma_inv: {}",
                y.len(),
                z.len(),
                gamma.len(),
                gamma_inv.len()
            ),
        });
    }
    let mut scratch = GeneratorScratch::new(d, d1);
    let mut out = vec![0.0; d1];
    generator_f_into(t, xi, gamma, gamma_inv, y, z, spec, &mut scratch, &mut out)?;
    Ok(out)
}

pub(crate) struct GeneratorScratch {
    u_loc: Vec<f64>,
    k_loc: Vec<f64>,
    g: Vec<f64>,
}

impl GeneratorScratch {
    pub(crate) fn new(d: usize, d1: usize) -> Self {
        Self {
            u_loc: vec![0.0; d1],
            k_loc: vec![0.0; d1 * d],
            g: vec![0.0; d1],
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn generator_f_into(
    t: f64,
    xi: &[f64],
    gamma: &[f64],
    gamma_inv: &[f64],
    y: &[f64],
    z: &[f64],
    spec: &ProblemSpec,
    scratch: &mut GeneratorScratch,
    out: &mut [f64],
) -> Result<()> {
    let d1 = spec.d1();
    let d = spec.d();
    if spec.reaction_zero() {
        out.fill(0.0);
        return Ok(());
    }
    if spec.gamma_trivial() {
        spec.eval_reaction(t, xi, y, z, out)?;
        return Ok(());
    }
    // [Gamma*]^{-1} = (Gamma^{-1})^T acts on y and on each Brownian column
    // of z.
    linalg::mat_tvec(gamma_inv, y, &mut scratch.u_loc, d1);
    linalg::mat_tmul_rect(gamma_inv, z, &mut scratch.k_loc, d1, d);
    spec.eval_reaction(t, xi, &scratch.u_loc, &scratch.k_loc, &mut scratch.g)?;
    linalg::mat_tvec(gamma, &scratch.g, out, d1);
    Ok(())
}

/// Terminal data `zeta_m = Gamma(T, s)^T u0(xi_T)` per path, `M x d1`.
pub(crate) fn terminal_values(paths: &ForwardPaths, spec: &ProblemSpec) -> Result<Vec<f64>> {
    let d1 = spec.d1();
    let m_paths = paths.n_paths();
    let n = paths.grid().n_steps();
    let mut zeta = vec![0.0; m_paths * d1];
    zeta.par_chunks_mut(REDUCE_BLOCK * d1)
        .enumerate()
        .try_for_each(|(block, chunk)| -> Result<()> {
            let mut u0 = vec![0.0; d1];
            let base = block * REDUCE_BLOCK;
            for (r, row) in chunk.chunks_exact_mut(d1).enumerate() {
                let m = base + r;
                spec.eval_terminal(paths.xi(m, n), &mut u0)?;
                if spec.gamma_trivial() {
                    row.copy_from_slice(&u0);
                } else {
                    linalg::mat_tvec(paths.gamma(m, n), &u0, row, d1);
                }
            }
            Ok(())
        })?;
    Ok(zeta)
}

/// Generator callback for one `(t, path, step, y, z)` cell.
pub(crate) type EngineGenerator<'a> =
    &'a (dyn Fn(f64, usize, usize, &[f64], &[f64], &mut [f64]) -> Result<()> + Sync);

/// Everything the shared Picard engine needs besides the paths: the terminal
/// targets, how to read the regression state, and how to evaluate the
/// generator for one path/step.
pub(crate) struct EngineProblem<'a> {
    pub dim_y: usize,
    pub n_state_vars: usize,
    /// Fills the regression state for `(path, step)`.
    pub state_fill: &'a (dyn Fn(usize, usize, &mut [f64]) + Sync),
    /// Evaluates the generator `f(t_k, ., y, z)` for `(path, step)`.
    pub generator: EngineGenerator<'a>,
    /// Skip generator calls entirely (identically zero driver).
    pub zero_generator: bool,
}

pub(crate) fn picard_engine(
    paths: &ForwardPaths,
    config: &SolverConfig,
    beta: f64,
    basis: &BasisSpec,
    zeta: &[f64],
    problem: &EngineProblem<'_>,
) -> Result<BackwardSolution> {
    config.validate()?;
    let m_paths = paths.n_paths();
    let n = paths.grid().n_steps();
    let d = paths.spec().d();
    let dt = paths.grid().dt();
    let points = paths.grid().points();
    let dim_y = problem.dim_y;
    let dim_z = dim_y * d;
    let f_count = basis.n_features();
    debug_assert_eq!(zeta.len(), m_paths * dim_y);

    let mut y = vec![0.0; (n + 1) * m_paths * dim_y];
    let mut z = vec![0.0; n * m_paths * dim_z];
    // Terminal layer is the exact zeta, bitwise.
    y[n * m_paths * dim_y..].copy_from_slice(zeta);

    let q_main = 2 * dim_y;
    let mut features = vec![0.0; m_paths * f_count];
    let mut targets = vec![0.0; m_paths * q_main];
    let mut predictions = vec![0.0; m_paths * q_main];
    let mut z_targets = vec![0.0; m_paths * dim_z];
    let mut z_predictions = vec![0.0; m_paths * dim_z];
    let mut suffix = vec![0.0; m_paths * dim_y];
    let mut start_targets = vec![0.0; m_paths * dim_y];
    let mut step_models: Vec<Option<StepRegression>> = (0..n).map(|_| None).collect();

    let build_features = |k: usize, features: &mut [f64]| {
        features
            .par_chunks_mut(REDUCE_BLOCK * f_count)
            .enumerate()
            .for_each(|(block, chunk)| {
                let mut state = vec![0.0; problem.n_state_vars];
                let base = block * REDUCE_BLOCK;
                for (r, row) in chunk.chunks_exact_mut(f_count).enumerate() {
                    (problem.state_fill)(base + r, k, &mut state);
                    basis.eval(&state, row);
                }
            });
    };

    // Initialization: y^0 is the regression estimate of the terminal payoff
    // at every step (z^0 = 0); exact fixed point when the generator vanishes.
    for k in 0..n {
        build_features(k, &mut features);
        let model = StepRegression::build(&features, m_paths, f_count, config.ridge)?;
        model.solve(
            &features,
            zeta,
            m_paths,
            f_count,
            dim_y,
            &mut predictions[..m_paths * dim_y],
        );
        y[k * m_paths * dim_y..(k + 1) * m_paths * dim_y]
            .copy_from_slice(&predictions[..m_paths * dim_y]);
        step_models[k] = Some(model);
    }

    let mut residuals: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for _iter in 0..config.picard_max {
        iterations += 1;
        suffix.fill(0.0);
        let mut residual_sq = 0.0;
        for k in (0..n).rev() {
            let t_k = points[k];
            build_features(k, &mut features);

            // Main targets: the Brownian-projection payoff `zeta + S_{k+1}`
            // (before the step-k generator contribution) and the y-target
            // `zeta + S_k` after it.
            {
                let y_old = &y[k * m_paths * dim_y..(k + 1) * m_paths * dim_y];
                let z_old = &z[k * m_paths * dim_z..(k + 1) * m_paths * dim_z];
                targets[..m_paths * q_main]
                    .par_chunks_mut(REDUCE_BLOCK * q_main)
                    .zip(suffix.par_chunks_mut(REDUCE_BLOCK * dim_y))
                    .enumerate()
                    .try_for_each(|(block, (t_chunk, s_chunk))| -> Result<()> {
                        let base = block * REDUCE_BLOCK;
                        let mut f_val = vec![0.0; dim_y];
                        for (r, trow) in t_chunk.chunks_exact_mut(q_main).enumerate() {
                            let m = base + r;
                            let s_row = &mut s_chunk[r * dim_y..(r + 1) * dim_y];
                            let zeta_row = &zeta[m * dim_y..(m + 1) * dim_y];
                            for l in 0..dim_y {
                                trow[l] = zeta_row[l] + s_row[l];
                            }
                            if !problem.zero_generator {
                                (problem.generator)(
                                    t_k,
                                    m,
                                    k,
                                    &y_old[m * dim_y..(m + 1) * dim_y],
                                    &z_old[m * dim_z..(m + 1) * dim_z],
                                    &mut f_val,
                                )?;
                                for l in 0..dim_y {
                                    s_row[l] += f_val[l] * dt;
                                }
                            }
                            for l in 0..dim_y {
                                trow[dim_y + l] = zeta_row[l] + s_row[l];
                            }
                        }
                        Ok(())
                    })?;
            }

            let model = step_models[k].as_ref().expect("built during init");
            model.solve(
                &features,
                &targets[..m_paths * q_main],
                m_paths,
                f_count,
                q_main,
                &mut predictions[..m_paths * q_main],
            );

            // Control z-targets: `(payoff - E_hat[payoff | state_k]) dw_k^T / dt`.
            // Centering by any state-measurable quantity leaves the estimated
            // conditional expectation unchanged and removes the payoff's
            // predictable part from the projection variance.
            z_targets
                .par_chunks_mut(REDUCE_BLOCK * dim_z)
                .zip(targets[..m_paths * q_main].par_chunks(REDUCE_BLOCK * q_main))
                .zip(predictions[..m_paths * q_main].par_chunks(REDUCE_BLOCK * q_main))
                .enumerate()
                .for_each(|(block, ((zt_chunk, t_chunk), p_chunk))| {
                    let base = block * REDUCE_BLOCK;
                    for (r, zt_row) in zt_chunk.chunks_exact_mut(dim_z).enumerate() {
                        let m = base + r;
                        let dw = paths.increment(m, k);
                        let trow = &t_chunk[r * q_main..r * q_main + dim_y];
                        let prow = &p_chunk[r * q_main..r * q_main + dim_y];
                        for l in 0..dim_y {
                            let centered = trow[l] - prow[l];
                            for i in 0..d {
                                zt_row[l * d + i] = centered * dw[i] / dt;
                            }
                        }
                    }
                });
            model.solve(
                &features,
                &z_targets,
                m_paths,
                f_count,
                dim_z,
                &mut z_predictions,
            );

            // Residual against the previous iterate, then overwrite in place.
            let y_block = &mut y[k * m_paths * dim_y..(k + 1) * m_paths * dim_y];
            let z_block = &mut z[k * m_paths * dim_z..(k + 1) * m_paths * dim_z];
            let partials: Vec<f64> = y_block
                .par_chunks_mut(REDUCE_BLOCK * dim_y)
                .zip(z_block.par_chunks_mut(REDUCE_BLOCK * dim_z))
                .zip(predictions[..m_paths * q_main].par_chunks(REDUCE_BLOCK * q_main))
                .zip(z_predictions.par_chunks(REDUCE_BLOCK * dim_z))
                .map(|(((y_chunk, z_chunk), p_chunk), zp_chunk)| {
                    let rows = p_chunk.len() / q_main;
                    let mut acc = 0.0;
                    for r in 0..rows {
                        let prow = &p_chunk[r * q_main..(r + 1) * q_main];
                        let yrow = &mut y_chunk[r * dim_y..(r + 1) * dim_y];
                        for l in 0..dim_y {
                            let delta = prow[dim_y + l] - yrow[l];
                            acc += delta * delta;
                            yrow[l] = prow[dim_y + l];
                        }
                        z_chunk[r * dim_z..(r + 1) * dim_z]
                            .copy_from_slice(&zp_chunk[r * dim_z..(r + 1) * dim_z]);
                    }
                    acc
                })
                .collect();
            let step_sq: f64 = partials.iter().sum();
            residual_sq += (beta * t_k).exp() * step_sq / m_paths as f64 * dt;

            if k == 0 {
                start_targets
                    .par_chunks_mut(dim_y)
                    .zip(targets[..m_paths * q_main].par_chunks(q_main))
                    .for_each(|(dst, src)| dst.copy_from_slice(&src[dim_y..q_main]));
            }
        }
        let residual = residual_sq.sqrt();
        residuals.push(residual);
        if residual <= config.picard_tol {
            converged = true;
            break;
        }
    }

    Ok(BackwardSolution {
        dim_y,
        dim_z,
        n_paths: m_paths,
        n_steps: n,
        y,
        z,
        picard_residuals: residuals,
        converged,
        iterations,
        start_targets,
    })
}

/// State reader for the vector solver: `xi_k` alone or `(xi_k, vec Gamma_k)`.
pub(crate) fn vector_state_fill<'a>(
    paths: &'a ForwardPaths,
    state: BasisState,
) -> impl Fn(usize, usize, &mut [f64]) + Sync + 'a {
    let d = paths.spec().d();
    let gb = paths.spec().d1() * paths.spec().d1();
    move |m, k, out: &mut [f64]| {
        out[..d].copy_from_slice(paths.xi(m, k));
        if state == BasisState::XiAndGamma {
            out[d..d + gb].copy_from_slice(paths.gamma(m, k));
        }
    }
}

/// Solves the backward system on a simulated forward ensemble by successive
/// approximation. Non-convergence at `picard_max` is a flagged result with
/// the residual history, not an error.
pub fn picard_solve(
    paths: &ForwardPaths,
    spec: &ProblemSpec,
    config: &SolverConfig,
) -> Result<BackwardSolution> {
    if spec.d() != paths.spec().d() || spec.d1() != paths.spec().d1() {
        return Err(Error::Invalid(
            "paths were generated for a problem with different dimensions".into(),
        ));
    }
    let d = spec.d();
    let d1 = spec.d1();
    let basis_state = config.resolved_basis_state(spec);
    let n_state_vars = match basis_state {
        BasisState::XiOnly => d,
        BasisState::XiAndGamma => d + d1 * d1,
    };
    let basis = BasisSpec::new(n_state_vars, config.basis_degree);
    let beta = config.resolved_beta(spec);
    let zeta = terminal_values(paths, spec)?;
    let state_fill = vector_state_fill(paths, basis_state);
    let generator = |t: f64, m: usize, k: usize, y: &[f64], z: &[f64], out: &mut [f64]| {
        let mut scratch = GeneratorScratch::new(d, d1);
        generator_f_into(
            t,
            paths.xi(m, k),
            paths.gamma(m, k),
            paths.gamma_inv(m, k),
            y,
            z,
            spec,
            &mut scratch,
            out,
        )
    };
    let problem = EngineProblem {
        dim_y: d1,
        n_state_vars,
        state_fill: &state_fill,
        generator: &generator,
        zero_generator: spec.reaction_zero(),
    };
    picard_engine(paths, config, beta, &basis, &zeta, &problem)
}

/// Simulates, solves backward, and returns the Monte Carlo estimate of
/// `u(s, x) = y(s)` with componentwise standard errors.
pub fn evaluate_u(
    spec: Arc<ProblemSpec>,
    s: f64,
    x: &[f64],
    config: &SolverConfig,
) -> Result<Estimate> {
    let started = Instant::now();
    config.validate()?;
    let paths = simulate_forward(spec.clone(), s, x, config)?;
    let solution = picard_solve(&paths, &spec, config)?;
    let (value, stderr) = solution.start_estimate();
    Ok(Estimate {
        value,
        stderr,
        n_paths: config.n_paths,
        n_steps: config.n_steps,
        seed: config.seed,
        wall_time: started.elapsed(),
        converged: solution.converged,
        picard_iterations: solution.iterations,
    })
}

/// One refinement row of a convergence study.
#[derive(Clone, Debug)]
pub struct ConvergenceRow {
    pub n_steps: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub value: Vec<f64>,
    pub stderr: Vec<f64>,
    pub oracle: Vec<f64>,
    /// Max-norm error against the oracle.
    pub abs_error: f64,
}

/// Runs `evaluate_u` per refinement against the problem's reference solution.
pub fn convergence_study(
    spec: Arc<ProblemSpec>,
    s: f64,
    x: &[f64],
    configs: &[SolverConfig],
) -> Result<Vec<ConvergenceRow>> {
    let oracle = spec.reference_at(s, x).ok_or_else(|| {
        Error::Invalid("convergence study requires a problem with a reference solution".into())
    })?;
    let mut rows = Vec::with_capacity(configs.len());
    for config in configs {
        let estimate = evaluate_u(spec.clone(), s, x, config)?;
        let abs_error = estimate
            .value
            .iter()
            .zip(&oracle)
            .map(|(v, o)| (v - o).abs())
            .fold(0.0, f64::max);
        rows.push(ConvergenceRow {
            n_steps: config.n_steps,
            n_paths: config.n_paths,
            seed: config.seed,
            value: estimate.value,
            stderr: estimate.stderr,
            oracle: oracle.clone(),
            abs_error,
        });
    }
    Ok(rows)
}
