//! Declarative run configuration.
//!
//! The config file is TOML. Problems are either catalog references or inline
//! coefficient descriptions drawn from a deliberately small grammar:
//! constant/affine `a`, `A`, `c`, `C`, a whitelisted reaction form, and
//! polynomial/trigonometric terminal data. Anything richer is library-API
//! territory.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use fbsde::problem::{LipschitzBudget, ProblemSpec};
use fbsde::regression::BasisState;
use fbsde::SolverConfig;

use crate::CliError;

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum JobKind {
    Evaluate,
    Grid,
    Convergence,
    Compare,
    ScalarCrosscheck,
    Validate,
}

impl JobKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            JobKind::Evaluate => "evaluate",
            JobKind::Grid => "grid",
            JobKind::Convergence => "convergence",
            JobKind::Compare => "compare",
            JobKind::ScalarCrosscheck => "scalar-crosscheck",
            JobKind::Validate => "validate",
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum VectorCoef {
    /// Fixed vector.
    Constant(Vec<f64>),
    /// `base + matrix x`.
    Affine { base: Vec<f64>, matrix: Vec<Vec<f64>> },
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum MatrixCoef {
    /// Fixed matrix (row-major nested arrays).
    Constant(Vec<Vec<f64>>),
    /// `base + sum_k slopes[k] x_k`, entrywise.
    Affine {
        base: Vec<Vec<f64>>,
        slopes: Vec<Vec<Vec<f64>>>,
    },
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum ReactionCoef {
    /// `g = 0`.
    Zero,
    /// `g(u) = matrix u + offset`, independent of the gradient load.
    AffineU { matrix: Vec<Vec<f64>>, offset: Vec<f64> },
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum TerminalCoef {
    /// `u0_l(x) = quad_l |x|^2 + <linear_l, x> + offset_l`.
    Quadratic {
        quad: Vec<f64>,
        linear: Vec<Vec<f64>>,
        offset: Vec<f64>,
    },
    /// `u0_l(x) = amplitude_l sin(<wave_l, x> + phase_l) + offset_l`.
    Trig {
        amplitude: Vec<f64>,
        wave: Vec<Vec<f64>>,
        phase: Vec<f64>,
        offset: Vec<f64>,
    },
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct BudgetBlock {
    pub k1: Option<f64>,
    pub k2: Option<f64>,
    pub l1: Option<f64>,
    pub l2: Option<f64>,
    pub l3: Option<f64>,
    pub l: Option<f64>,
    pub mu: Option<f64>,
    pub c0: Option<f64>,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct InlineProblem {
    pub d: usize,
    pub d1: usize,
    pub horizon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<VectorCoef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diffusion: Option<MatrixCoef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<MatrixCoef>,
    /// One matrix coefficient per Brownian component.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coupling: Option<Vec<MatrixCoef>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<ReactionCoef>,
    pub u0: TerminalCoef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<BudgetBlock>,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ProblemRef {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub catalog: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inline: Option<InlineProblem>,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GridAxis {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    pub axes: Vec<GridAxis>,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct StartSpec {
    pub s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridBlock>,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SolverBlock {
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub picard_max: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub picard_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis_degree: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis_state: Option<BasisStateName>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ridge: Option<f64>,
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum BasisStateName {
    XiOnly,
    XiAndGamma,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CompareBlock {
    pub seeds: usize,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CrosscheckBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub directions: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<Vec<Vec<f64>>>,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ValidateBlock {
    pub samples: usize,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub job: JobKind,
    pub problem: ProblemRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem2: Option<ProblemRef>,
    pub start: StartSpec,
    pub solver: SolverBlock,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub refinements: Vec<SolverBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare: Option<CompareBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crosscheck: Option<CrosscheckBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validate: Option<ValidateBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Parses and validates a config file, reporting the path to the first
/// offending key on failure.
pub fn parse_config(text: &str) -> Result<RunConfig, CliError> {
    let de = toml::de::Deserializer::parse(text)
        .map_err(|e| CliError::Config(format!("toml syntax: {e}")))?;
    let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        CliError::Config(format!("at `{}`: {}", e.path(), e.inner()))
    })?;
    validate_config(&config)?;
    Ok(config)
}

fn validate_config(config: &RunConfig) -> Result<(), CliError> {
    problem_ref_shape(&config.problem, "problem")?;
    if let Some(p2) = &config.problem2 {
        problem_ref_shape(p2, "problem2")?;
    }
    match config.job {
        JobKind::Grid => {
            if config.start.grid.is_none() {
                return Err(CliError::Config(
                    "at `start.grid`: grid jobs require a grid block".into(),
                ));
            }
            let grid = config.start.grid.as_ref().unwrap();
            if grid.axes.is_empty() || grid.axes.iter().any(|a| a.count == 0) {
                return Err(CliError::Config(
                    "at `start.grid.axes`: every axis needs count >= 1".into(),
                ));
            }
        }
        JobKind::Convergence => {
            if config.refinements.len() < 2 {
                return Err(CliError::Config(
                    "at `refinements`: convergence jobs require at least 2 solver refinements"
                        .into(),
                ));
            }
        }
        JobKind::Compare if config.problem2.is_none() => {
            return Err(CliError::Config(
                "at `problem2`: compare jobs require a second problem".into(),
            ));
        }
        _ => {}
    }
    if config.job != JobKind::Grid && config.start.x.is_none() {
        return Err(CliError::Config(
            "at `start.x`: a start point is required for non-grid jobs".into(),
        ));
    }
    Ok(())
}

fn problem_ref_shape(problem: &ProblemRef, key: &str) -> Result<(), CliError> {
    match (&problem.catalog, &problem.inline) {
        (Some(_), None) | (None, Some(_)) => Ok(()),
        _ => Err(CliError::Config(format!(
            "at `{key}`: exactly one of `catalog` or `inline` must be set"
        ))),
    }
}

impl SolverBlock {
    pub fn to_solver_config(&self, seed_override: Option<u64>) -> SolverConfig {
        let mut config = SolverConfig::new(self.steps, self.paths, seed_override.unwrap_or(self.seed));
        if let Some(v) = self.picard_max {
            config.picard_max = v;
        }
        if let Some(v) = self.picard_tol {
            config.picard_tol = v;
        }
        config.beta = self.beta;
        if let Some(v) = self.basis_degree {
            config.basis_degree = v;
        }
        config.basis_state = self.basis_state.map(|b| match b {
            BasisStateName::XiOnly => BasisState::XiOnly,
            BasisStateName::XiAndGamma => BasisState::XiAndGamma,
        });
        if let Some(v) = self.ridge {
            config.ridge = v;
        }
        config
    }
}

fn check_matrix(
    rows: usize,
    cols: usize,
    data: &[Vec<f64>],
    key: &str,
) -> Result<Vec<f64>, CliError> {
    if data.len() != rows || data.iter().any(|r| r.len() != cols) {
        return Err(CliError::Config(format!(
            "at `{key}`: expected a {rows}x{cols} matrix"
        )));
    }
    Ok(data.iter().flatten().copied().collect())
}

fn check_vector(len: usize, data: &[f64], key: &str) -> Result<Vec<f64>, CliError> {
    if data.len() != len {
        return Err(CliError::Config(format!(
            "at `{key}`: expected {len} entries, got {}",
            data.len()
        )));
    }
    Ok(data.to_vec())
}

impl ProblemRef {
    pub fn build(&self) -> Result<Arc<ProblemSpec>, CliError> {
        if let Some(name) = &self.catalog {
            return Ok(Arc::new(fbsde::catalog(name).map_err(CliError::Solver)?));
        }
        let inline = self.inline.as_ref().expect("validated");
        build_inline(inline)
    }
}

fn build_inline(p: &InlineProblem) -> Result<Arc<ProblemSpec>, CliError> {
    let d = p.d;
    let d1 = p.d1;
    let mut builder = ProblemSpec::builder(d, d1, p.horizon);

    if let Some(a) = &p.a {
        let field: fbsde::problem::VectorField = match a {
            VectorCoef::Constant(v) => {
                let v = check_vector(d, v, "problem.inline.a.constant")?;
                Arc::new(move |_t, _x, out: &mut [f64]| out.copy_from_slice(&v))
            }
            VectorCoef::Affine { base, matrix } => {
                let base = check_vector(d, base, "problem.inline.a.affine.base")?;
                let matrix = check_matrix(d, d, matrix, "problem.inline.a.affine.matrix")?;
                Arc::new(move |_t, x: &[f64], out: &mut [f64]| {
                    for i in 0..x.len() {
                        let mut v = base[i];
                        for (j, xj) in x.iter().enumerate() {
                            v += matrix[i * x.len() + j] * xj;
                        }
                        out[i] = v;
                    }
                })
            }
        };
        builder = builder.drift(field);
    }

    if let Some(diff) = &p.diffusion {
        builder = builder.diffusion(matrix_field(diff, d, d, d, "problem.inline.diffusion")?);
    }
    if let Some(c) = &p.c {
        builder = builder.zero_order(matrix_field(c, d1, d1, d, "problem.inline.c")?);
    }
    if let Some(coupling) = &p.coupling {
        if coupling.len() != d {
            return Err(CliError::Config(format!(
                "at `problem.inline.coupling`: expected {d} matrices (one per noise component)"
            )));
        }
        let mut fields = Vec::with_capacity(d);
        for (k, entry) in coupling.iter().enumerate() {
            fields.push(matrix_field(
                entry,
                d1,
                d1,
                d,
                &format!("problem.inline.coupling[{k}]"),
            )?);
        }
        let block = d1 * d1;
        builder = builder.coupling(Arc::new(move |t, x: &[f64], out: &mut [f64]| {
            for (k, f) in fields.iter().enumerate() {
                f(t, x, &mut out[k * block..(k + 1) * block]);
            }
        }));
    }

    match &p.g {
        None | Some(ReactionCoef::Zero) => {}
        Some(ReactionCoef::AffineU { matrix, offset }) => {
            let matrix = check_matrix(d1, d1, matrix, "problem.inline.g.affine-u.matrix")?;
            let offset = check_vector(d1, offset, "problem.inline.g.affine-u.offset")?;
            builder = builder.reaction(Arc::new(
                move |_t, _x, u: &[f64], _k: &[f64], out: &mut [f64]| {
                    for l in 0..u.len() {
                        let mut v = offset[l];
                        for (m, um) in u.iter().enumerate() {
                            v += matrix[l * u.len() + m] * um;
                        }
                        out[l] = v;
                    }
                },
            ));
        }
    }

    let terminal: fbsde::problem::TerminalField = match &p.u0 {
        TerminalCoef::Quadratic { quad, linear, offset } => {
            let quad = check_vector(d1, quad, "problem.inline.u0.quadratic.quad")?;
            let linear = check_matrix(d1, d, linear, "problem.inline.u0.quadratic.linear")?;
            let offset = check_vector(d1, offset, "problem.inline.u0.quadratic.offset")?;
            Arc::new(move |x: &[f64], out: &mut [f64]| {
                let norm_sq: f64 = x.iter().map(|v| v * v).sum();
                for l in 0..out.len() {
                    let mut v = quad[l] * norm_sq + offset[l];
                    for (i, xi) in x.iter().enumerate() {
                        v += linear[l * x.len() + i] * xi;
                    }
                    out[l] = v;
                }
            })
        }
        TerminalCoef::Trig {
            amplitude,
            wave,
            phase,
            offset,
        } => {
            let amplitude = check_vector(d1, amplitude, "problem.inline.u0.trig.amplitude")?;
            let wave = check_matrix(d1, d, wave, "problem.inline.u0.trig.wave")?;
            let phase = check_vector(d1, phase, "problem.inline.u0.trig.phase")?;
            let offset = check_vector(d1, offset, "problem.inline.u0.trig.offset")?;
            Arc::new(move |x: &[f64], out: &mut [f64]| {
                for l in 0..out.len() {
                    let mut arg = phase[l];
                    for (i, xi) in x.iter().enumerate() {
                        arg += wave[l * x.len() + i] * xi;
                    }
                    out[l] = amplitude[l] * arg.sin() + offset[l];
                }
            })
        }
    };
    builder = builder.terminal(terminal);

    if let Some(b) = &p.budget {
        builder = builder.budget(LipschitzBudget {
            k1: b.k1,
            k2: b.k2,
            l1: b.l1,
            l2: b.l2,
            l3: b.l3,
            l: b.l,
            mu: b.mu,
            c0: b.c0,
        });
    }

    builder.build().map(Arc::new).map_err(CliError::Solver)
}

#[allow(clippy::type_complexity)]
fn matrix_field(
    coef: &MatrixCoef,
    rows: usize,
    cols: usize,
    d: usize,
    key: &str,
) -> Result<Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>, CliError> {
    match coef {
        MatrixCoef::Constant(data) => {
            let flat = check_matrix(rows, cols, data, &format!("{key}.constant"))?;
            Ok(Arc::new(move |_t, _x, out: &mut [f64]| {
                out.copy_from_slice(&flat)
            }))
        }
        MatrixCoef::Affine { base, slopes } => {
            let base = check_matrix(rows, cols, base, &format!("{key}.affine.base"))?;
            if slopes.len() != d {
                return Err(CliError::Config(format!(
                    "at `{key}.affine.slopes`: expected {d} slope matrices"
                )));
            }
            let mut flat_slopes = Vec::with_capacity(d);
            for (k, s) in slopes.iter().enumerate() {
                flat_slopes.push(check_matrix(
                    rows,
                    cols,
                    s,
                    &format!("{key}.affine.slopes[{k}]"),
                )?);
            }
            Ok(Arc::new(move |_t, x: &[f64], out: &mut [f64]| {
                out.copy_from_slice(&base);
                for (k, xk) in x.iter().enumerate() {
                    for (o, s) in out.iter_mut().zip(&flat_slopes[k]) {
                        *o += s * xk;
                    }
                }
            }))
        }
    }
}
