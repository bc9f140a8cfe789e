//! Least-squares estimation of conditional expectations.
//!
//! Per time step the backward solver regresses future payoffs on polynomial
//! features of the Markov state. Cross-path reductions are accumulated in
//! fixed-size blocks that are summed in block order, so results are
//! bit-identical no matter how many worker threads run.

use nalgebra::{Cholesky, DMatrix, Dyn};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Fixed reduction block; results must not depend on the thread count.
pub(crate) const REDUCE_BLOCK: usize = 4096;

/// Which state variables feed the per-step regression.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BasisState {
    /// Features of `xi_k` only; sufficient when `Gamma` is the identity.
    XiOnly,
    /// Features of `(xi_k, vec(Gamma_k))`; the pair is jointly Markov when
    /// the functional is active.
    XiAndGamma,
}

/// Monomial basis of total degree `<= degree` in `n_vars` variables, graded
/// lexicographic order; index 0 is the constant term.
#[derive(Clone, Debug)]
pub struct BasisSpec {
    n_vars: usize,
    degree: usize,
    multi_indices: Vec<Vec<u8>>,
}

impl BasisSpec {
    pub fn new(n_vars: usize, degree: usize) -> Self {
        let mut multi_indices = Vec::new();
        for total in 0..=degree {
            let mut current = vec![0u8; n_vars];
            enumerate_compositions(total as u8, 0, &mut current, &mut multi_indices);
        }
        Self {
            n_vars,
            degree,
            multi_indices,
        }
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn n_features(&self) -> usize {
        self.multi_indices.len()
    }

    pub fn multi_indices(&self) -> &[Vec<u8>] {
        &self.multi_indices
    }

    /// Evaluates all monomials at one state vector.
    pub fn eval(&self, state: &[f64], out: &mut [f64]) {
        debug_assert_eq!(state.len(), self.n_vars);
        debug_assert_eq!(out.len(), self.multi_indices.len());
        for (o, alpha) in out.iter_mut().zip(&self.multi_indices) {
            let mut v = 1.0;
            for (x, &p) in state.iter().zip(alpha) {
                for _ in 0..p {
                    v *= x;
                }
            }
            *o = v;
        }
    }
}

fn enumerate_compositions(remaining: u8, var: usize, current: &mut [u8], out: &mut Vec<Vec<u8>>) {
    if var == current.len() - 1 {
        current[var] = remaining;
        out.push(current.to_vec());
        return;
    }
    for take in (0..=remaining).rev() {
        current[var] = take;
        enumerate_compositions(remaining - take, var + 1, current, out);
    }
    current[var] = 0;
}

/// One fitted per-step model: the retained feature columns and the
/// coefficient matrix mapping features to targets.
#[derive(Clone, Debug)]
pub struct RegressionModel {
    /// Indices of retained feature columns (column 0, the intercept, always).
    pub kept: Vec<usize>,
    /// `kept.len() x n_targets`, row-major.
    pub coefficients: Vec<f64>,
    pub n_features: usize,
    pub n_targets: usize,
}

impl RegressionModel {
    /// Predicts targets for one feature row.
    pub fn predict(&self, features: &[f64], out: &mut [f64]) {
        debug_assert_eq!(features.len(), self.n_features);
        debug_assert_eq!(out.len(), self.n_targets);
        out.fill(0.0);
        for (j, &col) in self.kept.iter().enumerate() {
            let f = features[col];
            for (t, o) in out.iter_mut().enumerate() {
                *o += self.coefficients[j * self.n_targets + t] * f;
            }
        }
    }

    /// Coefficient of a given original feature column for target `t`; zero if
    /// the column was dropped as degenerate.
    pub fn coefficient(&self, feature: usize, target: usize) -> f64 {
        match self.kept.iter().position(|&c| c == feature) {
            Some(j) => self.coefficients[j * self.n_targets + target],
            None => 0.0,
        }
    }
}

/// Factorized normal equations for one time step; reusable across Picard
/// iterations because the features do not change.
pub(crate) struct StepRegression {
    kept: Vec<usize>,
    chol: Cholesky<f64, Dyn>,
}

/// Columns that are exactly constant across samples carry no conditioning
/// information and are dropped (except column 0, the intercept). This keeps
/// the Gram matrix well posed at the deterministic start node and wherever
/// the functional is path-independent.
fn degenerate_columns(features: &[f64], m: usize, f: usize) -> Vec<usize> {
    let mut kept = Vec::with_capacity(f);
    for j in 0..f {
        if j == 0 {
            kept.push(0);
            continue;
        }
        let first = features[j];
        let constant = (1..m).all(|i| features[i * f + j] == first);
        if !constant {
            kept.push(j);
        }
    }
    kept
}

fn accumulate_gram(features: &[f64], m: usize, f: usize, kept: &[usize]) -> Vec<f64> {
    let k = kept.len();
    let partials: Vec<Vec<f64>> = features
        .par_chunks(REDUCE_BLOCK * f)
        .map(|chunk| {
            let rows = chunk.len() / f;
            let mut gram = vec![0.0; k * k];
            for r in 0..rows {
                let row = &chunk[r * f..(r + 1) * f];
                for a in 0..k {
                    let fa = row[kept[a]];
                    for b in a..k {
                        gram[a * k + b] += fa * row[kept[b]];
                    }
                }
            }
            gram
        })
        .collect();
    debug_assert_eq!(partials.len(), m.div_ceil(REDUCE_BLOCK));
    let mut gram = vec![0.0; k * k];
    for p in partials {
        for (g, v) in gram.iter_mut().zip(p) {
            *g += v;
        }
    }
    for a in 0..k {
        for b in 0..a {
            gram[a * k + b] = gram[b * k + a];
        }
    }
    gram
}

fn accumulate_rhs(
    features: &[f64],
    targets: &[f64],
    m: usize,
    f: usize,
    q: usize,
    kept: &[usize],
) -> Vec<f64> {
    let k = kept.len();
    let partials: Vec<Vec<f64>> = features
        .par_chunks(REDUCE_BLOCK * f)
        .zip(targets.par_chunks(REDUCE_BLOCK * q))
        .map(|(fchunk, tchunk)| {
            let rows = fchunk.len() / f;
            let mut rhs = vec![0.0; k * q];
            for r in 0..rows {
                let frow = &fchunk[r * f..(r + 1) * f];
                let trow = &tchunk[r * q..(r + 1) * q];
                for a in 0..k {
                    let fa = frow[kept[a]];
                    for (t, tv) in trow.iter().enumerate() {
                        rhs[a * q + t] += fa * tv;
                    }
                }
            }
            rhs
        })
        .collect();
    debug_assert_eq!(partials.len(), m.div_ceil(REDUCE_BLOCK));
    let mut rhs = vec![0.0; k * q];
    for p in partials {
        for (r, v) in rhs.iter_mut().zip(p) {
            *r += v;
        }
    }
    rhs
}

impl StepRegression {
    /// Builds and factorizes the (ridge-regularized) normal equations. The
    /// penalty is relative to each feature's energy and skips the intercept,
    /// so a plain mean is reproduced exactly at degenerate nodes.
    pub(crate) fn build(features: &[f64], m: usize, f: usize, ridge: f64) -> Result<Self> {
        if m == 0 || f == 0 {
            return Err(Error::Regression {
                reason: "empty feature matrix".into(),
            });
        }
        if ridge < 0.0 {
            return Err(Error::Regression {
                reason: format!("ridge must be nonnegative, got {ridge}"),
            });
        }
        let kept = degenerate_columns(features, m, f);
        let k = kept.len();
        if ridge == 0.0 && m <= k {
            return Err(Error::Regression {
                reason: format!("underdetermined fit: {m} samples for {k} features"),
            });
        }
        let mut gram = accumulate_gram(features, m, f, kept.as_slice());
        for a in 1..k {
            gram[a * k + a] += ridge * gram[a * k + a];
        }
        let gram_mat = DMatrix::from_row_slice(k, k, &gram);
        let chol = gram_mat.cholesky().ok_or_else(|| Error::Regression {
            reason: "normal equations are rank deficient".into(),
        })?;
        Ok(Self { kept, chol })
    }

    /// Solves for `q` target columns and writes per-sample predictions.
    pub(crate) fn solve(
        &self,
        features: &[f64],
        targets: &[f64],
        m: usize,
        f: usize,
        q: usize,
        predictions: &mut [f64],
    ) -> Vec<f64> {
        let k = self.kept.len();
        let rhs = accumulate_rhs(features, targets, m, f, q, &self.kept);
        let mut rhs_mat = DMatrix::from_fn(k, q, |a, t| rhs[a * q + t]);
        self.chol.solve_mut(&mut rhs_mat);
        let mut coeffs = vec![0.0; k * q];
        for a in 0..k {
            for t in 0..q {
                coeffs[a * q + t] = rhs_mat[(a, t)];
            }
        }
        predictions[..m * q]
            .par_chunks_mut(REDUCE_BLOCK * q)
            .zip(features.par_chunks(REDUCE_BLOCK * f))
            .for_each(|(pchunk, fchunk)| {
                let rows = fchunk.len() / f;
                for r in 0..rows {
                    let frow = &fchunk[r * f..(r + 1) * f];
                    let prow = &mut pchunk[r * q..(r + 1) * q];
                    prow.fill(0.0);
                    for (a, &col) in self.kept.iter().enumerate() {
                        let fa = frow[col];
                        for t in 0..q {
                            prow[t] += coeffs[a * q + t] * fa;
                        }
                    }
                }
            });
        coeffs
    }

    pub(crate) fn kept(&self) -> &[usize] {
        &self.kept
    }
}

/// Least-squares fit of `targets` (M x q) on `features` (M x F, row-major,
/// column 0 treated as the intercept). Returns the fitted model and the
/// per-sample predictions. Deterministic in its inputs and the thread count.
pub fn fit_conditional(
    features: &[f64],
    n_samples: usize,
    n_features: usize,
    targets: &[f64],
    n_targets: usize,
    ridge: f64,
) -> Result<(RegressionModel, Vec<f64>)> {
    if features.len() != n_samples * n_features {
        return Err(Error::Dimension {
            operand: "feature matrix",
            expected: format!("{} entries", n_samples * n_features),
            got: format!("{}", features.len()),
        });
    }
    if targets.len() != n_samples * n_targets {
        return Err(Error::Dimension {
            operand: "target matrix",
            expected: format!("{} entries", n_samples * n_targets),
            got: format!("{}", targets.len()),
        });
    }
    let step = StepRegression::build(features, n_samples, n_features, ridge)?;
    let mut predictions = vec![0.0; n_samples * n_targets];
    let coefficients = step.solve(
        features,
        targets,
        n_samples,
        n_features,
        n_targets,
        &mut predictions,
    );
    let model = RegressionModel {
        kept: step.kept().to_vec(),
        coefficients,
        n_features,
        n_targets,
    };
    Ok((model, predictions))
}

/// Per-column means, accumulated in deterministic block order.
pub(crate) fn column_means(values: &[f64], m: usize, q: usize) -> Vec<f64> {
    let partials: Vec<Vec<f64>> = values
        .par_chunks(REDUCE_BLOCK * q)
        .map(|chunk| {
            let mut sums = vec![0.0; q];
            for row in chunk.chunks_exact(q) {
                for (s, v) in sums.iter_mut().zip(row) {
                    *s += v;
                }
            }
            sums
        })
        .collect();
    let mut sums = vec![0.0; q];
    for p in partials {
        for (s, v) in sums.iter_mut().zip(p) {
            *s += v;
        }
    }
    sums.iter_mut().for_each(|s| *s /= m as f64);
    sums
}

/// Per-column unbiased variances around supplied means, deterministic.
pub(crate) fn column_variances(values: &[f64], m: usize, q: usize, means: &[f64]) -> Vec<f64> {
    if m < 2 {
        return vec![0.0; q];
    }
    let partials: Vec<Vec<f64>> = values
        .par_chunks(REDUCE_BLOCK * q)
        .map(|chunk| {
            let mut sums = vec![0.0; q];
            for row in chunk.chunks_exact(q) {
                for ((s, v), mean) in sums.iter_mut().zip(row).zip(means) {
                    let dv = v - mean;
                    *s += dv * dv;
                }
            }
            sums
        })
        .collect();
    let mut sums = vec![0.0; q];
    for p in partials {
        for (s, v) in sums.iter_mut().zip(p) {
            *s += v;
        }
    }
    sums.iter_mut().for_each(|s| *s /= (m - 1) as f64);
    sums
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_counts_and_order() {
        let b = BasisSpec::new(2, 2);
        // 1, x, y, x^2, xy, y^2
        assert_eq!(b.n_features(), 6);
        assert_eq!(b.multi_indices()[0], vec![0, 0]);
        let mut out = vec![0.0; 6];
        b.eval(&[2.0, 3.0], &mut out);
        assert_eq!(out, vec![1.0, 2.0, 3.0, 4.0, 6.0, 9.0]);
    }

    #[test]
    fn constant_targets_are_captured_by_intercept() {
        let m = 64;
        let mut features = vec![0.0; m * 2];
        for i in 0..m {
            features[i * 2] = 1.0;
            features[i * 2 + 1] = i as f64;
        }
        let targets = vec![5.25; m];
        let (_, preds) = fit_conditional(&features, m, 2, &targets, 1, 0.0).unwrap();
        for p in preds {
            assert!((p - 5.25).abs() < 1e-12);
        }
    }

    #[test]
    fn in_span_targets_reproduced_exactly() {
        let m = 128;
        let basis = BasisSpec::new(1, 1);
        let mut features = vec![0.0; m * basis.n_features()];
        let mut targets = vec![0.0; m];
        for i in 0..m {
            let x = -1.0 + 2.0 * i as f64 / m as f64;
            basis.eval(&[x], &mut features[i * 2..(i + 1) * 2]);
            targets[i] = 3.0 * x;
        }
        let (model, preds) = fit_conditional(&features, m, 2, &targets, 1, 0.0).unwrap();
        for (i, p) in preds.iter().enumerate() {
            assert!((p - targets[i]).abs() < 1e-10);
        }
        assert!((model.coefficient(1, 0) - 3.0).abs() < 1e-10);
        assert!(model.coefficient(0, 0).abs() < 1e-10);
    }

    #[test]
    fn underdetermined_without_ridge_is_an_error() {
        // Two distinct samples, three features: rank-deficient normal
        // equations at ridge = 0 must advise using ridge.
        let features = vec![1.0, 2.0, 4.0, 1.0, 3.0, 9.0];
        let targets = vec![1.0, 2.0];
        let err = fit_conditional(&features, 2, 3, &targets, 1, 0.0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("ridge"), "unexpected message: {msg}");
        assert!(fit_conditional(&features, 2, 3, &targets, 1, 1e-10).is_ok());
    }

    #[test]
    fn degenerate_start_node_reduces_to_plain_mean() {
        // All rows identical: the prediction must be the exact sample mean,
        // not a ridge-shrunk version of it.
        let m = 1000;
        let mut features = vec![0.0; m * 3];
        let mut targets = vec![0.0; m];
        for i in 0..m {
            features[i * 3] = 1.0;
            features[i * 3 + 1] = 0.75;
            features[i * 3 + 2] = 0.5625;
            targets[i] = (i as f64).sin();
        }
        let mean: f64 = targets.iter().sum::<f64>() / m as f64;
        let (_, preds) = fit_conditional(&features, m, 3, &targets, 1, 1e-10).unwrap();
        assert!((preds[0] - mean).abs() < 1e-13 * mean.abs().max(1.0));
    }
}
