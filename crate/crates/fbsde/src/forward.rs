//! Forward simulation: Euler-Maruyama paths of the diffusion `xi`, the
//! multiplicative operator functional `Gamma(t, s)` and its inverse on a
//! shared uniform grid.
//!
//! Per step the functional is updated multiplicatively,
//! `Gamma_{k+1} = F_k Gamma_k`, and the inverse accumulates the exact factor
//! inverses in reverse order, `Gamma_inv_{k+1} = Gamma_inv_k F_k^{-1}`, so
//! `Gamma Gamma_inv = I` is a discrete identity rather than a discretization
//! statement.

use std::io::{Read, Write};
use std::sync::Arc;

use rayon::prelude::*;

use crate::bsde::SolverConfig;
use crate::error::{Error, Result};
use crate::linalg;
use crate::problem::ProblemSpec;
use crate::rng;

/// Uniform time grid `t_0 = s < ... < t_N = T`.
#[derive(Clone, Debug)]
pub struct TimeGrid {
    points: Vec<f64>,
    dt: f64,
}

impl TimeGrid {
    pub fn new(start: f64, end: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::Invalid("need at least one time step".into()));
        }
        if !start.is_finite() || !end.is_finite() || start >= end {
            return Err(Error::Invalid(format!(
                "grid needs finite start < end, got [{start}, {end}]"
            )));
        }
        let dt = (end - start) / n_steps as f64;
        let mut points: Vec<f64> = (0..=n_steps).map(|k| start + k as f64 * dt).collect();
        points[n_steps] = end;
        Ok(Self { points, dt })
    }

    pub fn start(&self) -> f64 {
        self.points[0]
    }

    pub fn end(&self) -> f64 {
        *self.points.last().unwrap()
    }

    pub fn n_steps(&self) -> usize {
        self.points.len() - 1
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }
}

/// Simulated forward ensemble: Brownian increments, `xi` paths, and the
/// operator functional with its inverse at every grid node.
pub struct ForwardPaths {
    spec: Arc<ProblemSpec>,
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
    start_point: Vec<f64>,
    /// `[m][k][i]`, `M x N x d`; each entry is Normal(0, dt).
    increments: Vec<f64>,
    /// `[m][k][i]`, `M x (N+1) x d`.
    xi: Vec<f64>,
    /// `[m][k][l][m']`, `M x (N+1) x d1 x d1`; `gamma(m, k) = Gamma(t_k, s)`.
    gamma: Vec<f64>,
    /// Same layout; `gamma_inv(m, k) = Gamma^{-1}(s, t_k)`.
    gamma_inv: Vec<f64>,
}

impl ForwardPaths {
    pub fn spec(&self) -> &Arc<ProblemSpec> {
        &self.spec
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn start_point(&self) -> &[f64] {
        &self.start_point
    }

    #[inline]
    pub fn xi(&self, path: usize, step: usize) -> &[f64] {
        let d = self.spec.d();
        let base = (path * (self.grid.n_steps() + 1) + step) * d;
        &self.xi[base..base + d]
    }

    #[inline]
    pub fn increment(&self, path: usize, step: usize) -> &[f64] {
        let d = self.spec.d();
        let base = (path * self.grid.n_steps() + step) * d;
        &self.increments[base..base + d]
    }

    #[inline]
    pub fn gamma(&self, path: usize, step: usize) -> &[f64] {
        let b = self.spec.d1() * self.spec.d1();
        let base = (path * (self.grid.n_steps() + 1) + step) * b;
        &self.gamma[base..base + b]
    }

    #[inline]
    pub fn gamma_inv(&self, path: usize, step: usize) -> &[f64] {
        let b = self.spec.d1() * self.spec.d1();
        let base = (path * (self.grid.n_steps() + 1) + step) * b;
        &self.gamma_inv[base..base + b]
    }

    /// Raw buffers, used by the bitwise determinism tests.
    pub fn raw(&self) -> (&[f64], &[f64], &[f64], &[f64]) {
        (&self.increments, &self.xi, &self.gamma, &self.gamma_inv)
    }

    /// Little-endian debug dump. Header: d, d1, M, N (u64 each), s, T (f64),
    /// seed (u64); then per path, in path-major order: xi `(N+1) d`,
    /// increments `N d`, gamma `(N+1) d1^2`, gamma_inv `(N+1) d1^2`.
    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let d = self.spec.d();
        let d1 = self.spec.d1();
        let n = self.grid.n_steps();
        for v in [
            d as u64,
            d1 as u64,
            self.n_paths as u64,
            n as u64,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.grid.start().to_le_bytes())?;
        w.write_all(&self.grid.end().to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        let write_f64s = |w: &mut W, data: &[f64]| -> std::io::Result<()> {
            for v in data {
                w.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        };
        for m in 0..self.n_paths {
            let xi = &self.xi[m * (n + 1) * d..(m + 1) * (n + 1) * d];
            let inc = &self.increments[m * n * d..(m + 1) * n * d];
            let gb = (n + 1) * d1 * d1;
            let gam = &self.gamma[m * gb..(m + 1) * gb];
            let gin = &self.gamma_inv[m * gb..(m + 1) * gb];
            write_f64s(&mut w, xi)?;
            write_f64s(&mut w, inc)?;
            write_f64s(&mut w, gam)?;
            write_f64s(&mut w, gin)?;
        }
        Ok(())
    }

    /// Reads a dump produced by [`Self::write_binary`]; the problem is
    /// re-attached from the caller since coefficients are not serialized.
    pub fn read_binary<R: Read>(mut r: R, spec: Arc<ProblemSpec>) -> std::io::Result<Self> {
        let mut u64_buf = [0u8; 8];
        let mut read_u64 = |r: &mut R| -> std::io::Result<u64> {
            r.read_exact(&mut u64_buf)?;
            Ok(u64::from_le_bytes(u64_buf))
        };
        let d = read_u64(&mut r)? as usize;
        let d1 = read_u64(&mut r)? as usize;
        let n_paths = read_u64(&mut r)? as usize;
        let n = read_u64(&mut r)? as usize;
        let mut f64_buf = [0u8; 8];
        let mut read_f64 = |r: &mut R| -> std::io::Result<f64> {
            r.read_exact(&mut f64_buf)?;
            Ok(f64::from_le_bytes(f64_buf))
        };
        let s = read_f64(&mut r)?;
        let t = read_f64(&mut r)?;
        let mut seed_buf = [0u8; 8];
        r.read_exact(&mut seed_buf)?;
        let seed = u64::from_le_bytes(seed_buf);
        if d != spec.d() || d1 != spec.d1() {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!(
                    "dump dimensions ({d}, {d1}) do not match problem ({}, {})",
                    spec.d(),
                    spec.d1()
                ),
            ));
        }
        let grid = TimeGrid::new(s, t, n)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
        let read_block = |r: &mut R, len: usize| -> std::io::Result<Vec<f64>> {
            let mut out = vec![0.0; len];
            let mut buf = [0u8; 8];
            for v in out.iter_mut() {
                r.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
            Ok(out)
        };
        let mut xi = Vec::with_capacity(n_paths * (n + 1) * d);
        let mut increments = Vec::with_capacity(n_paths * n * d);
        let mut gamma = Vec::with_capacity(n_paths * (n + 1) * d1 * d1);
        let mut gamma_inv = Vec::with_capacity(n_paths * (n + 1) * d1 * d1);
        for _ in 0..n_paths {
            xi.extend(read_block(&mut r, (n + 1) * d)?);
            increments.extend(read_block(&mut r, n * d)?);
            gamma.extend(read_block(&mut r, (n + 1) * d1 * d1)?);
            gamma_inv.extend(read_block(&mut r, (n + 1) * d1 * d1)?);
        }
        let start_point = xi[..d].to_vec();
        Ok(Self {
            spec,
            grid,
            n_paths,
            seed,
            start_point,
            increments,
            xi,
            gamma,
            gamma_inv,
        })
    }
}

/// One multiplicative step factor
/// `F_k = I + c^T(t_k, xi_k) dt + sum_i C_i(t_k, xi_k) dw_k^i`.
///
/// The zero-order part enters transposed: the backward process is
/// `y(t) = Gamma(t, s)^T u(t, xi(t))`, and the Ito drift of that product only
/// reproduces the system's `c u` term when the functional transports with the
/// adjoint generator. The noise part acts directly, which is what makes the
/// martingale loading of `y` recover the gradient load `K = C* u + A* grad u`.
pub(crate) fn step_factor(
    c_eval: &[f64],
    coupling_eval: &[f64],
    dw: &[f64],
    dt: f64,
    d1: usize,
    out: &mut [f64],
) {
    linalg::set_identity(out, d1);
    for l in 0..d1 {
        for m in 0..d1 {
            // transpose: row l gains c_{ml}
            out[l * d1 + m] += c_eval[m * d1 + l] * dt;
        }
    }
    for (k, dw_k) in dw.iter().enumerate() {
        let block = &coupling_eval[k * d1 * d1..(k + 1) * d1 * d1];
        for (o, c) in out.iter_mut().zip(block) {
            *o += c * dw_k;
        }
    }
}

/// Simulates the forward ensemble from `(s, x)`.
///
/// Euler-Maruyama for `xi`; multiplicative factor updates for `Gamma` with
/// exact per-step inverses for `Gamma^{-1}`. Reproducible bit-for-bit from
/// `(seed, M, N)` regardless of thread count, because every increment is a
/// pure function of `(seed, path, step, component)` and paths write to
/// disjoint slices.
pub fn simulate_forward(
    spec: Arc<ProblemSpec>,
    s: f64,
    x: &[f64],
    config: &SolverConfig,
) -> Result<ForwardPaths> {
    let d = spec.d();
    let d1 = spec.d1();
    if x.len() != d {
        return Err(Error::Dimension {
            operand: "start point x",
            expected: format!("{d} components"),
            got: format!("{}", x.len()),
        });
    }
    if !s.is_finite() || s < 0.0 || s >= spec.horizon() {
        return Err(Error::Invalid(format!(
            "start time must satisfy 0 <= s < T = {}, got {s}",
            spec.horizon()
        )));
    }
    if config.n_paths == 0 {
        return Err(Error::Invalid("need at least one path".into()));
    }
    let grid = TimeGrid::new(s, spec.horizon(), config.n_steps)?;
    let n = grid.n_steps();
    let m_paths = config.n_paths;
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let seed = config.seed;
    let gamma_trivial = spec.gamma_trivial();

    let mut increments = vec![0.0; m_paths * n * d];
    let mut xi = vec![0.0; m_paths * (n + 1) * d];
    let gb = d1 * d1;
    let mut gamma = vec![0.0; m_paths * (n + 1) * gb];
    let mut gamma_inv = vec![0.0; m_paths * (n + 1) * gb];

    let points = grid.points().to_vec();
    let spec_ref = &spec;
    xi.par_chunks_mut((n + 1) * d)
        .zip(increments.par_chunks_mut(n * d))
        .zip(gamma.par_chunks_mut((n + 1) * gb))
        .zip(gamma_inv.par_chunks_mut((n + 1) * gb))
        .enumerate()
        .try_for_each(|(m, (((xi_m, inc_m), gam_m), gin_m))| -> Result<()> {
            xi_m[..d].copy_from_slice(x);
            linalg::set_identity(&mut gam_m[..gb], d1);
            linalg::set_identity(&mut gin_m[..gb], d1);

            let mut a_buf = vec![0.0; d];
            let mut diff_buf = vec![0.0; d * d];
            let mut c_buf = vec![0.0; gb];
            let mut cpl_buf = vec![0.0; d * gb];
            let mut factor = vec![0.0; gb];
            let mut factor_inv = vec![0.0; gb];
            let mut scratch = vec![0.0; gb];

            for k in 0..n {
                let t = points[k];
                for i in 0..d {
                    inc_m[k * d + i] =
                        sqrt_dt * rng::standard_normal(seed, m as u64, k as u64, i as u64);
                }
                let (xi_prev, xi_rest) = xi_m.split_at_mut((k + 1) * d);
                let xi_k = &xi_prev[k * d..];
                let xi_next = &mut xi_rest[..d];
                spec_ref.eval_drift(t, xi_k, &mut a_buf)?;
                spec_ref.eval_diffusion(t, xi_k, &mut diff_buf)?;
                let dw = &inc_m[k * d..(k + 1) * d];
                for i in 0..d {
                    let mut v = xi_k[i] + a_buf[i] * dt;
                    for (j, dw_j) in dw.iter().enumerate() {
                        v += diff_buf[i * d + j] * dw_j;
                    }
                    xi_next[i] = v;
                }

                let (g_prev, g_rest) = gam_m.split_at_mut((k + 1) * gb);
                let g_k = &g_prev[k * gb..];
                let g_next = &mut g_rest[..gb];
                let (gi_prev, gi_rest) = gin_m.split_at_mut((k + 1) * gb);
                let gi_k = &gi_prev[k * gb..];
                let gi_next = &mut gi_rest[..gb];
                if gamma_trivial {
                    g_next.copy_from_slice(g_k);
                    gi_next.copy_from_slice(gi_k);
                } else {
                    spec_ref.eval_zero_order(t, xi_k, &mut c_buf)?;
                    spec_ref.eval_coupling(t, xi_k, &mut cpl_buf)?;
                    step_factor(&c_buf, &cpl_buf, dw, dt, d1, &mut factor);
                    let det = linalg::invert(&factor, &mut factor_inv, d1, &mut scratch);
                    if det.abs() < 1e-14 {
                        let cond = if det == 0.0 {
                            f64::INFINITY
                        } else {
                            linalg::fro_norm(&factor) * linalg::fro_norm(&factor_inv)
                        };
                        return Err(Error::SingularFactor {
                            path: m,
                            step: k,
                            det,
                            cond,
                        });
                    }
                    linalg::mat_mul(&factor, g_k, g_next, d1);
                    linalg::mat_mul(gi_k, &factor_inv, gi_next, d1);
                }
            }
            Ok(())
        })?;

    Ok(ForwardPaths {
        spec,
        grid,
        n_paths: m_paths,
        seed,
        start_point: x.to_vec(),
        increments,
        xi,
        gamma,
        gamma_inv,
    })
}

fn product_over(paths: &ForwardPaths, path: usize, from: usize, to: usize, out: &mut [f64]) -> Result<()> {
    let spec = paths.spec();
    let d1 = spec.d1();
    let gb = d1 * d1;
    let dt = paths.grid().dt();
    let mut c_buf = vec![0.0; gb];
    let mut cpl_buf = vec![0.0; spec.d() * gb];
    let mut factor = vec![0.0; gb];
    let mut tmp = vec![0.0; gb];
    linalg::set_identity(out, d1);
    for k in from..to {
        let t = paths.grid().points()[k];
        let xi_k = paths.xi(path, k);
        spec.eval_zero_order(t, xi_k, &mut c_buf)?;
        spec.eval_coupling(t, xi_k, &mut cpl_buf)?;
        step_factor(&c_buf, &cpl_buf, paths.increment(path, k), dt, d1, &mut factor);
        linalg::mat_mul(&factor, out, &mut tmp, d1);
        out.copy_from_slice(&tmp);
    }
    Ok(())
}

/// Max-norm defect of the evolution property over `[k1, k2, k3]`:
/// the step product over `[k2, k3)` times the product over `[k1, k2)` against
/// the product over `[k1, k3)`, recomputed from the stored increments by an
/// independent factor loop. Discrete associativity keeps this at roundoff.
pub fn gamma_compose_check(paths: &ForwardPaths, k1: usize, k2: usize, k3: usize) -> Result<f64> {
    let n = paths.grid().n_steps();
    if !(k1 <= k2 && k2 <= k3 && k3 <= n) {
        return Err(Error::Invalid(format!(
            "indices must satisfy k1 <= k2 <= k3 <= N, got ({k1}, {k2}, {k3}), N = {n}"
        )));
    }
    let d1 = paths.spec().d1();
    let gb = d1 * d1;
    (0..paths.n_paths())
        .into_par_iter()
        .map(|m| -> Result<f64> {
            let mut p12 = vec![0.0; gb];
            let mut p23 = vec![0.0; gb];
            let mut p13 = vec![0.0; gb];
            let mut combined = vec![0.0; gb];
            product_over(paths, m, k1, k2, &mut p12)?;
            product_over(paths, m, k2, k3, &mut p23)?;
            product_over(paths, m, k1, k3, &mut p13)?;
            linalg::mat_mul(&p23, &p12, &mut combined, d1);
            Ok(linalg::max_abs_diff(&combined, &p13))
        })
        .try_reduce(|| 0.0, |a, b| Ok(a.max(b)))
}

/// Max-norm defect of `Gamma(t_k, s) Gamma^{-1}(s, t_k) - I` over all paths
/// and grid nodes.
pub fn gamma_inverse_check(paths: &ForwardPaths) -> f64 {
    let d1 = paths.spec().d1();
    let n = paths.grid().n_steps();
    (0..paths.n_paths())
        .into_par_iter()
        .map(|m| {
            let mut prod = vec![0.0; d1 * d1];
            let mut worst = 0.0f64;
            for k in 0..=n {
                linalg::mat_mul(paths.gamma(m, k), paths.gamma_inv(m, k), &mut prod, d1);
                worst = worst.max(linalg::max_diff_from_identity(&prod, d1));
            }
            worst
        })
        .reduce(|| 0.0, f64::max)
}
