//! Problem definitions for weakly coupled quasilinear parabolic systems.
//!
//! A problem bundles the coefficients of the backward Cauchy problem
//!
//! ```text
//! d_s u_l + 1/2 Tr(A* D2(u_l) A) + <a, grad u_l>
//!         + B_lm^i d_i(u_m) + c_lm u_m + g_l(s, x, u, K(u, grad u)) = 0,
//! u(T, x) = u0(x),
//! ```
//!
//! where `B_lm^i = sum_q C_lm^q A_qi` is derived from the gradient coupling
//! `C` and the diffusion `A`, and `K(u, grad u) = C* u + A* grad u` is the
//! gradient load passed to the reaction term.
//!
//! Coefficient callbacks write into caller buffers; the simulation layers
//! evaluate them millions of times and must not allocate per call. All
//! callbacks must be pure: a `ProblemSpec` is immutable and shared across
//! worker threads.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::SeqRng;

/// Vector-valued coefficient `(t, x) -> R^n`, written into the output slice.
pub type VectorField = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
/// Matrix-valued coefficient `(t, x) -> R^{n x n}`, row-major.
pub type MatrixField = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
/// Gradient coupling `(t, x) -> d` matrices of size `d1 x d1`; layout
/// `out[k * d1 * d1 + l * d1 + m] = (C_k)_{lm}` with `k` the noise index.
pub type CouplingField = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
/// Reaction `g(t, x, u, K) -> R^{d1}` with `K` a `d1 x d` row-major
/// gradient-load matrix.
pub type ReactionField = Arc<dyn Fn(f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// Terminal data `u0(x) -> R^{d1}`.
pub type TerminalField = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// Reference solution `(s, x) -> R^{d1}` when a closed form is known.
pub type SolutionField = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
/// Injected nonlinearity `psi(u, K) -> R^{d1}` for manufactured problems.
pub type PsiField = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
/// Spatial Hessian of one solution component, `(s, x, l) -> d x d` row-major.
pub type HessianField = Arc<dyn Fn(f64, &[f64], usize, &mut [f64]) + Send + Sync>;

/// Declared growth/Lipschitz constants. Diagnostic metadata only: the solver
/// runs on any coefficients and [`validate`] reports observed ratios against
/// these, it never rejects.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LipschitzBudget {
    /// Growth bound: `|a|^2 + |A|^2 <= K1 (1 + |x|^2)`.
    pub k1: Option<f64>,
    /// Operator bound: `|c h|^2 + |C h|^2 <= K2 |h|^2`.
    pub k2: Option<f64>,
    /// Squared Lipschitz constant of `(a, A)` in `x`.
    pub l1: Option<f64>,
    /// Squared Lipschitz constant of `(c, C)` in `x` (per unit `|h|^2`).
    pub l2: Option<f64>,
    /// Lipschitz constant of `g` in `x`.
    pub l3: Option<f64>,
    /// Lipschitz constant of `g` in `(u, K)`.
    pub l: Option<f64>,
    /// One-sided monotonicity constant of `g` in `u`. Stored but not
    /// exploited downstream.
    pub mu: Option<f64>,
    /// Lipschitz constant of the terminal data `u0`.
    pub c0: Option<f64>,
}

/// One PDE system / FBSDE instance: dimensions, horizon, coefficients,
/// declared constants, and optional closed-form reference.
#[derive(Clone)]
pub struct ProblemSpec {
    d: usize,
    d1: usize,
    horizon: f64,
    drift: VectorField,
    diffusion: MatrixField,
    zero_order: MatrixField,
    coupling: CouplingField,
    reaction: ReactionField,
    terminal: TerminalField,
    budget: LipschitzBudget,
    gamma_trivial: bool,
    reaction_zero: bool,
    reference: Option<SolutionField>,
    name: Option<String>,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("d", &self.d)
            .field("d1", &self.d1)
            .field("horizon", &self.horizon)
            .field("gamma_trivial", &self.gamma_trivial)
            .field("reaction_zero", &self.reaction_zero)
            .finish()
    }
}

fn zero_field() -> VectorField {
    Arc::new(|_t, _x, out: &mut [f64]| out.fill(0.0))
}

fn identity_field() -> MatrixField {
    Arc::new(|_t, _x, out: &mut [f64]| {
        let n = (out.len() as f64).sqrt() as usize;
        linalg::set_identity(out, n);
    })
}

/// Builder for [`ProblemSpec`]. Drift defaults to zero, diffusion to the
/// identity, coupling and zero-order terms to zero, the reaction to zero;
/// terminal data is required.
pub struct ProblemSpecBuilder {
    d: usize,
    d1: usize,
    horizon: f64,
    drift: VectorField,
    diffusion: MatrixField,
    zero_order: Option<MatrixField>,
    coupling: Option<CouplingField>,
    reaction: Option<ReactionField>,
    terminal: Option<TerminalField>,
    budget: LipschitzBudget,
    reference: Option<SolutionField>,
    name: Option<String>,
    gamma_trivial_override: Option<bool>,
    reaction_zero_override: Option<bool>,
}

impl ProblemSpec {
    pub fn builder(d: usize, d1: usize, horizon: f64) -> ProblemSpecBuilder {
        ProblemSpecBuilder {
            d,
            d1,
            horizon,
            drift: zero_field(),
            diffusion: identity_field(),
            zero_order: None,
            coupling: None,
            reaction: None,
            terminal: None,
            budget: LipschitzBudget::default(),
            reference: None,
            name: None,
            gamma_trivial_override: None,
            reaction_zero_override: None,
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn d1(&self) -> usize {
        self.d1
    }

    /// Terminal time T.
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// True when both `c` and `C` vanish identically, so the operator
    /// functional stays at the identity.
    pub fn gamma_trivial(&self) -> bool {
        self.gamma_trivial
    }

    /// True when the reaction `g` vanishes identically.
    pub fn reaction_zero(&self) -> bool {
        self.reaction_zero
    }

    pub fn budget(&self) -> &LipschitzBudget {
        &self.budget
    }

    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }

    pub fn reference(&self) -> Option<&SolutionField> {
        self.reference.as_ref()
    }

    /// Evaluates the closed-form reference solution, if one is attached.
    pub fn reference_at(&self, s: f64, x: &[f64]) -> Option<Vec<f64>> {
        self.reference.as_ref().map(|r| {
            let mut out = vec![0.0; self.d1];
            r(s, x, &mut out);
            out
        })
    }

    fn check_finite(&self, coefficient: &'static str, t: f64, x: &[f64], out: &[f64]) -> Result<()> {
        if out.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Evaluation {
                coefficient,
                t,
                x: x.to_vec(),
            })
        }
    }

    pub fn eval_drift(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        (self.drift)(t, x, out);
        self.check_finite("drift a", t, x, out)
    }

    pub fn eval_diffusion(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        (self.diffusion)(t, x, out);
        self.check_finite("diffusion A", t, x, out)
    }

    pub fn eval_zero_order(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        (self.zero_order)(t, x, out);
        self.check_finite("zero-order c", t, x, out)
    }

    pub fn eval_coupling(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        (self.coupling)(t, x, out);
        self.check_finite("gradient coupling C", t, x, out)
    }

    pub fn eval_reaction(
        &self,
        t: f64,
        x: &[f64],
        u: &[f64],
        k_load: &[f64],
        out: &mut [f64],
    ) -> Result<()> {
        (self.reaction)(t, x, u, k_load, out);
        self.check_finite("reaction g", t, x, out)
    }

    pub fn eval_terminal(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        (self.terminal)(x, out);
        self.check_finite("terminal u0", self.horizon, x, out)
    }
}

impl ProblemSpecBuilder {
    pub fn drift(mut self, f: VectorField) -> Self {
        self.drift = f;
        self
    }

    pub fn diffusion(mut self, f: MatrixField) -> Self {
        self.diffusion = f;
        self
    }

    pub fn zero_order(mut self, f: MatrixField) -> Self {
        self.zero_order = Some(f);
        self
    }

    pub fn coupling(mut self, f: CouplingField) -> Self {
        self.coupling = Some(f);
        self
    }

    pub fn reaction(mut self, f: ReactionField) -> Self {
        self.reaction = Some(f);
        self
    }

    pub fn terminal(mut self, f: TerminalField) -> Self {
        self.terminal = Some(f);
        self
    }

    pub fn budget(mut self, b: LipschitzBudget) -> Self {
        self.budget = b;
        self
    }

    pub fn reference(mut self, f: SolutionField) -> Self {
        self.reference = Some(f);
        self
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    /// Declares that `c` and `C` vanish even though callbacks were supplied.
    pub fn declare_gamma_trivial(mut self, trivial: bool) -> Self {
        self.gamma_trivial_override = Some(trivial);
        self
    }

    /// Declares that `g` vanishes even though a callback was supplied.
    pub fn declare_zero_reaction(mut self, zero: bool) -> Self {
        self.reaction_zero_override = Some(zero);
        self
    }

    pub fn build(self) -> Result<ProblemSpec> {
        if self.d == 0 || self.d1 == 0 {
            return Err(Error::Invalid(format!(
                "dimensions must be positive, got d={}, d1={}",
                self.d, self.d1
            )));
        }
        if !self.horizon.is_finite() || self.horizon <= 0.0 {
            return Err(Error::Invalid(format!(
                "horizon must be a positive real, got {}",
                self.horizon
            )));
        }
        let terminal = self
            .terminal
            .ok_or_else(|| Error::Invalid("terminal data u0 is required".into()))?;
        let gamma_trivial = self
            .gamma_trivial_override
            .unwrap_or(self.zero_order.is_none() && self.coupling.is_none());
        let reaction_zero = self.reaction_zero_override.unwrap_or(self.reaction.is_none());
        let d1 = self.d1;
        let spec = ProblemSpec {
            d: self.d,
            d1: self.d1,
            horizon: self.horizon,
            drift: self.drift,
            diffusion: self.diffusion,
            zero_order: self
                .zero_order
                .unwrap_or_else(|| Arc::new(move |_t, _x, out: &mut [f64]| out.fill(0.0))),
            coupling: self
                .coupling
                .unwrap_or_else(|| Arc::new(move |_t, _x, out: &mut [f64]| out.fill(0.0))),
            reaction: self.reaction.unwrap_or_else(|| {
                Arc::new(move |_t, _x, _u: &[f64], _k: &[f64], out: &mut [f64]| out.fill(0.0))
            }),
            terminal,
            budget: self.budget,
            gamma_trivial,
            reaction_zero,
            reference: self.reference,
            name: self.name,
        };
        // Probe every coefficient once at (0, 0) so broken callbacks fail
        // at construction rather than mid-simulation.
        let x0 = vec![0.0; spec.d];
        let mut vd = vec![0.0; spec.d];
        let mut md = vec![0.0; spec.d * spec.d];
        let mut m1 = vec![0.0; d1 * d1];
        let mut cc = vec![0.0; spec.d * d1 * d1];
        let mut v1 = vec![0.0; d1];
        let k0 = vec![0.0; d1 * spec.d];
        spec.eval_drift(0.0, &x0, &mut vd)?;
        spec.eval_diffusion(0.0, &x0, &mut md)?;
        spec.eval_zero_order(0.0, &x0, &mut m1)?;
        spec.eval_coupling(0.0, &x0, &mut cc)?;
        let u0probe = vec![0.0; d1];
        spec.eval_reaction(0.0, &x0, &u0probe, &k0, &mut v1)?;
        spec.eval_terminal(&x0, &mut v1)?;
        Ok(spec)
    }
}

/// Contracts the gradient coupling against the diffusion:
/// `B_lm^i = sum_q C_lm^q A_qi`.
///
/// `coupling` holds `d` row-major `d1 x d1` matrices (noise index first),
/// `diffusion` is `d x d` row-major. The result uses layout
/// `out[i * d1 * d1 + l * d1 + m]` with `i` the derivative index.
pub fn derive_b(coupling: &[f64], diffusion: &[f64], d: usize, d1: usize) -> Result<Vec<f64>> {
    if coupling.len() != d * d1 * d1 {
        return Err(Error::Dimension {
            operand: "gradient coupling C",
            expected: format!("{} entries ({} matrices of {}x{})", d * d1 * d1, d, d1, d1),
            got: format!("{} entries", coupling.len()),
        });
    }
    if diffusion.len() != d * d {
        return Err(Error::Dimension {
            operand: "diffusion A",
            expected: format!("{}x{} matrix", d, d),
            got: format!("{} entries", diffusion.len()),
        });
    }
    let block = d1 * d1;
    let mut out = vec![0.0; d * block];
    for i in 0..d {
        for q in 0..d {
            let a_qi = diffusion[q * d + i];
            if a_qi == 0.0 {
                continue;
            }
            let src = &coupling[q * block..(q + 1) * block];
            let dst = &mut out[i * block..(i + 1) * block];
            for (o, s) in dst.iter_mut().zip(src) {
                *o += s * a_qi;
            }
        }
    }
    Ok(out)
}

/// Gradient load `K(u, grad u) = C* u + A* grad u` as a `d1 x d` row-major
/// matrix: `K_lk = sum_i A_ik d_i(u_l) + sum_m (C_k)_ml u_m`.
///
/// `jacobian` is `d1 x d` row-major with `jacobian[l * d + i] = d_i(u_l)`.
/// With `C = 0` and `A = I`, row `l` is exactly `grad u_l`.
pub fn gradient_load(
    u: &[f64],
    jacobian: &[f64],
    coupling: &[f64],
    diffusion: &[f64],
    d: usize,
    d1: usize,
) -> Vec<f64> {
    debug_assert_eq!(u.len(), d1);
    debug_assert_eq!(jacobian.len(), d1 * d);
    debug_assert_eq!(coupling.len(), d * d1 * d1);
    debug_assert_eq!(diffusion.len(), d * d);
    let mut out = vec![0.0; d1 * d];
    for l in 0..d1 {
        for k in 0..d {
            let mut acc = 0.0;
            for i in 0..d {
                acc += diffusion[i * d + k] * jacobian[l * d + i];
            }
            for m in 0..d1 {
                acc += coupling[k * d1 * d1 + m * d1 + l] * u[m];
            }
            out[l * d + k] = acc;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Catalog
// ---------------------------------------------------------------------------

pub const CATALOG_NAMES: [&str; 4] = [
    "heat-1d",
    "rotation-coupling",
    "first-order-coupling",
    "manufactured-quasilinear",
];

/// Returns a fully populated catalog problem with its closed-form reference.
///
/// Documented entries:
/// - `heat-1d`: d = d1 = 1, a = 0, A = 1, c = C = 0, g = 0, u0 = x^2, T = 1;
///   reference u(s, x) = x^2 + (T - s).
/// - `rotation-coupling`: d = 1, d1 = 2, A = 1, `c = [[0,1],[-1,0]]`, C = 0,
///   g = 0, u0 = (sin x, cos x), T = pi/2; reference
///   u(s, x) = exp(-h/2) exp(c h) u0(x) with h = T - s.
/// - `first-order-coupling`: d = 1, d1 = 2, A = 1, c = 0,
///   C = [[0, 0.5], [0.5, 0]], g = 0, u0 = (sin x, cos x), T = 1; the
///   components decouple along u1 +- u2 into advected heat equations with a
///   closed form.
/// - `manufactured-quasilinear`: d = 1, d1 = 2, T = 0.5, nonzero a, c, C and
///   a genuinely (u, K)-dependent reaction built by [`manufacture`] around
///   u*(s, x) = exp(-(T - s)/2) (sin x, cos x).
pub fn catalog(name: &str) -> Result<ProblemSpec> {
    match name {
        "heat-1d" => heat_1d(),
        "rotation-coupling" => rotation_coupling(),
        "first-order-coupling" => first_order_coupling(),
        "manufactured-quasilinear" => Ok(manufactured_quasilinear()?.base),
        _ => Err(Error::UnknownCatalog {
            name: name.to_string(),
            available: CATALOG_NAMES.to_vec(),
        }),
    }
}

fn heat_1d() -> Result<ProblemSpec> {
    let horizon = 1.0;
    ProblemSpec::builder(1, 1, horizon)
        .terminal(Arc::new(|x: &[f64], out: &mut [f64]| out[0] = x[0] * x[0]))
        .reference(Arc::new(move |s, x: &[f64], out: &mut [f64]| {
            out[0] = x[0] * x[0] + (horizon - s);
        }))
        .budget(LipschitzBudget {
            k1: Some(1.0),
            k2: Some(0.0),
            l1: Some(0.0),
            l2: Some(0.0),
            l3: Some(0.0),
            l: Some(0.0),
            mu: Some(0.0),
            // u0 = x^2 is only locally Lipschitz; 20 covers the [-10, 10]
            // sampling box used by `validate`.
            c0: Some(20.0),
        })
        .named("heat-1d")
        .build()
}

/// Rotation generator [[0, 1], [-1, 0]].
fn rotation_generator(out: &mut [f64]) {
    out.copy_from_slice(&[0.0, 1.0, -1.0, 0.0]);
}

fn rotation_coupling() -> Result<ProblemSpec> {
    // A quarter turn: the full horizon rotates (u1, u2) into (u2, -u1).
    let horizon = std::f64::consts::FRAC_PI_2;
    ProblemSpec::builder(1, 2, horizon)
        .zero_order(Arc::new(|_t, _x, out: &mut [f64]| rotation_generator(out)))
        .terminal(Arc::new(|x: &[f64], out: &mut [f64]| {
            out[0] = x[0].sin();
            out[1] = x[0].cos();
        }))
        .reference(Arc::new(move |s, x: &[f64], out: &mut [f64]| {
            // u(s, x) = exp(c(T-s)) E[u0(x + W_{T-s})]; the Gaussian
            // convolution of sin/cos contracts by exp(-(T-s)/2).
            let h = horizon - s;
            let damp = (-0.5 * h).exp();
            let (sin_t, cos_t) = h.sin_cos();
            let u1 = damp * x[0].sin();
            let u2 = damp * x[0].cos();
            out[0] = cos_t * u1 + sin_t * u2;
            out[1] = -sin_t * u1 + cos_t * u2;
        }))
        .budget(LipschitzBudget {
            k1: Some(1.0),
            k2: Some(1.0),
            l1: Some(0.0),
            l2: Some(0.0),
            l3: Some(0.0),
            l: Some(0.0),
            mu: Some(0.0),
            c0: Some(1.5),
        })
        .named("rotation-coupling")
        .build()
}

const FIRST_ORDER_KAPPA: f64 = 0.5;

fn first_order_coupling() -> Result<ProblemSpec> {
    let horizon = 1.0;
    let kappa = FIRST_ORDER_KAPPA;
    ProblemSpec::builder(1, 2, horizon)
        .coupling(Arc::new(move |_t, _x, out: &mut [f64]| {
            out.copy_from_slice(&[0.0, kappa, kappa, 0.0]);
        }))
        .terminal(Arc::new(|x: &[f64], out: &mut [f64]| {
            out[0] = x[0].sin();
            out[1] = x[0].cos();
        }))
        .reference(Arc::new(move |s, x: &[f64], out: &mut [f64]| {
            // In v_pm = u1 +- u2 coordinates the system decouples into
            // advection-diffusion equations with drifts +-kappa.
            let h = horizon - s;
            let damp = (-0.5 * h).exp();
            let xp = x[0] + kappa * h;
            let xm = x[0] - kappa * h;
            let vp = damp * (xp.sin() + xp.cos());
            let vm = damp * (xm.sin() - xm.cos());
            out[0] = 0.5 * (vp + vm);
            out[1] = 0.5 * (vp - vm);
        }))
        .budget(LipschitzBudget {
            k1: Some(1.0),
            k2: Some(0.25),
            l1: Some(0.0),
            l2: Some(0.0),
            l3: Some(0.0),
            l: Some(0.0),
            mu: Some(0.0),
            c0: Some(1.5),
        })
        .named("first-order-coupling")
        .build()
}

/// The catalog's manufactured instance, with the exact solution attached.
pub fn manufactured_quasilinear() -> Result<ManufacturedProblem> {
    let horizon = 0.5;
    let u_star = trig_pair_solution(horizon, 0.5);
    let lambda = 0.25;
    // psi_l(u, K) = sin(u_l) + 0.5 sin(K_l1): bounded, Lipschitz <= 1.5 in
    // (u, K) jointly, and genuinely dependent on the gradient load.
    let psi: PsiField = Arc::new(|u: &[f64], k_load: &[f64], out: &mut [f64]| {
        let d = k_load.len() / u.len();
        for (l, o) in out.iter_mut().enumerate() {
            *o = u[l].sin() + 0.5 * k_load[l * d].sin();
        }
    });
    let mut problem = manufacture(ManufactureInputs {
        d: 1,
        d1: 2,
        horizon,
        drift: Some(Arc::new(|_t, _x, out: &mut [f64]| out[0] = 0.1)),
        diffusion: None,
        zero_order: Some(Arc::new(|_t, _x, out: &mut [f64]| {
            out.copy_from_slice(&[0.0, 0.4, -0.4, 0.0]);
        })),
        coupling: Some(Arc::new(|_t, _x, out: &mut [f64]| {
            out.copy_from_slice(&[0.0, 0.3, 0.3, 0.0]);
        })),
        lambda,
        psi: Some(psi),
        budget: LipschitzBudget {
            k1: Some(1.1),
            k2: Some(0.25),
            l1: Some(0.0),
            l2: Some(0.0),
            l3: Some(8.0),
            l: Some(0.4),
            mu: Some(0.4),
            c0: Some(1.5),
        },
        u_star,
    })?;
    problem.base.name = Some("manufactured-quasilinear".into());
    Ok(problem)
}

/// u*(s, x) = exp(-rate (T - s)) (sin x, cos x) with its analytic
/// derivatives; the standard smooth bounded test field on d = 1, d1 = 2.
pub fn trig_pair_solution(horizon: f64, rate: f64) -> ManufacturedSolution {
    ManufacturedSolution::builder()
        .value(Arc::new(move |s, x: &[f64], out: &mut [f64]| {
            let damp = (-rate * (horizon - s)).exp();
            out[0] = damp * x[0].sin();
            out[1] = damp * x[0].cos();
        }))
        .time_derivative(Arc::new(move |s, x: &[f64], out: &mut [f64]| {
            let damp = rate * (-rate * (horizon - s)).exp();
            out[0] = damp * x[0].sin();
            out[1] = damp * x[0].cos();
        }))
        .jacobian(Arc::new(move |s, x: &[f64], out: &mut [f64]| {
            let damp = (-rate * (horizon - s)).exp();
            out[0] = damp * x[0].cos();
            out[1] = -damp * x[0].sin();
        }))
        .hessian(Arc::new(move |s, x: &[f64], l, out: &mut [f64]| {
            let damp = (-rate * (horizon - s)).exp();
            out[0] = if l == 0 {
                -damp * x[0].sin()
            } else {
                -damp * x[0].cos()
            };
        }))
        .build()
        .expect("complete analytic bundle")
}

// ---------------------------------------------------------------------------
// Manufactured solutions
// ---------------------------------------------------------------------------

/// An exact solution candidate with its analytic derivatives. No numeric
/// differentiation happens anywhere: all four callbacks must be supplied.
#[derive(Clone)]
pub struct ManufacturedSolution {
    value: SolutionField,
    time_derivative: SolutionField,
    /// Jacobian `d1 x d` row-major: `out[l * d + i] = d_i(u*_l)`.
    jacobian: SolutionField,
    /// Spatial Hessian of component `l`, `d x d` row-major.
    hessian: HessianField,
}

impl ManufacturedSolution {
    pub fn builder() -> ManufacturedSolutionBuilder {
        ManufacturedSolutionBuilder::default()
    }

    pub fn value(&self, s: f64, x: &[f64], out: &mut [f64]) {
        (self.value)(s, x, out)
    }

    pub fn time_derivative(&self, s: f64, x: &[f64], out: &mut [f64]) {
        (self.time_derivative)(s, x, out)
    }

    pub fn jacobian(&self, s: f64, x: &[f64], out: &mut [f64]) {
        (self.jacobian)(s, x, out)
    }

    pub fn hessian(&self, s: f64, x: &[f64], component: usize, out: &mut [f64]) {
        (self.hessian)(s, x, component, out)
    }

    pub fn value_field(&self) -> SolutionField {
        self.value.clone()
    }
}

#[derive(Default)]
pub struct ManufacturedSolutionBuilder {
    value: Option<SolutionField>,
    time_derivative: Option<SolutionField>,
    jacobian: Option<SolutionField>,
    hessian: Option<HessianField>,
}

impl ManufacturedSolutionBuilder {
    pub fn value(mut self, f: SolutionField) -> Self {
        self.value = Some(f);
        self
    }

    pub fn time_derivative(mut self, f: SolutionField) -> Self {
        self.time_derivative = Some(f);
        self
    }

    pub fn jacobian(mut self, f: SolutionField) -> Self {
        self.jacobian = Some(f);
        self
    }

    pub fn hessian(mut self, f: HessianField) -> Self {
        self.hessian = Some(f);
        self
    }

    pub fn build(self) -> Result<ManufacturedSolution> {
        let missing = |what: &str| Error::Invalid(format!("manufactured solution missing {what} callback"));
        Ok(ManufacturedSolution {
            value: self.value.ok_or_else(|| missing("value"))?,
            time_derivative: self.time_derivative.ok_or_else(|| missing("time derivative"))?,
            jacobian: self.jacobian.ok_or_else(|| missing("jacobian"))?,
            hessian: self.hessian.ok_or_else(|| missing("hessian"))?,
        })
    }
}

/// Inputs to [`manufacture`]. `None` coefficients mean zero drift/coupling
/// and identity diffusion.
pub struct ManufactureInputs {
    pub d: usize,
    pub d1: usize,
    pub horizon: f64,
    pub drift: Option<VectorField>,
    pub diffusion: Option<MatrixField>,
    pub zero_order: Option<MatrixField>,
    pub coupling: Option<CouplingField>,
    /// Strength of the injected (u, K) dependence.
    pub lambda: f64,
    /// Required when `lambda > 0`.
    pub psi: Option<PsiField>,
    pub budget: LipschitzBudget,
    pub u_star: ManufacturedSolution,
}

/// A problem constructed around a known exact solution.
pub struct ManufacturedProblem {
    pub base: ProblemSpec,
    pub u_star: ManufacturedSolution,
    pub lambda: f64,
}

/// Applies the second-order operator of the system to an analytic field:
/// `(L u)_l = d_s u_l + 1/2 Tr(A* H_l A) + <a, grad u_l> + (B grad u)_l
/// + (c u)_l`, evaluated at `(s, x)` from the supplied coefficients.
#[allow(clippy::too_many_arguments)]
fn apply_linear_operator(
    field: &ManufacturedSolution,
    s: f64,
    x: &[f64],
    a_eval: &[f64],
    diff_eval: &[f64],
    c_eval: &[f64],
    coupling_eval: &[f64],
    d: usize,
    d1: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; d1];
    let mut u = vec![0.0; d1];
    let mut du = vec![0.0; d1];
    let mut jac = vec![0.0; d1 * d];
    let mut hess = vec![0.0; d * d];
    field.value(s, x, &mut u);
    field.time_derivative(s, x, &mut du);
    field.jacobian(s, x, &mut jac);

    // A A* once; Tr(A* H A) = sum_ij H_ij (A A*)_ij.
    let mut aat = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += diff_eval[i * d + k] * diff_eval[j * d + k];
            }
            aat[i * d + j] = acc;
        }
    }
    let b = derive_b(coupling_eval, diff_eval, d, d1).expect("shapes fixed by caller");

    for l in 0..d1 {
        field.hessian(s, x, l, &mut hess);
        let mut trace = 0.0;
        for i in 0..d {
            for j in 0..d {
                trace += hess[i * d + j] * aat[i * d + j];
            }
        }
        let mut acc = du[l] + 0.5 * trace;
        for i in 0..d {
            acc += a_eval[i] * jac[l * d + i];
        }
        for i in 0..d {
            for m in 0..d1 {
                acc += b[i * d1 * d1 + l * d1 + m] * jac[m * d + i];
            }
        }
        for m in 0..d1 {
            acc += c_eval[l * d1 + m] * u[m];
        }
        out[l] = acc;
    }
    out
}

/// Builds a problem whose exact solution is `u_star`: the reaction becomes
/// `g(s, x, u, K) = g~(s, x) + lambda (psi(u, K) - psi(u*, K*))` with `g~`
/// chosen so the PDE residual of `u_star` vanishes identically, and
/// `u0(x) = u_star(T, x)`.
pub fn manufacture(inputs: ManufactureInputs) -> Result<ManufacturedProblem> {
    if inputs.lambda < 0.0 {
        return Err(Error::Invalid("lambda must be nonnegative".into()));
    }
    if inputs.lambda > 0.0 && inputs.psi.is_none() {
        return Err(Error::Invalid(
            "lambda > 0 requires a psi(u, K) callback".into(),
        ));
    }
    let d = inputs.d;
    let d1 = inputs.d1;
    let drift = inputs.drift.clone().unwrap_or_else(zero_field);
    let diffusion = inputs.diffusion.clone().unwrap_or_else(identity_field);
    let zero_order: MatrixField = inputs
        .zero_order
        .clone()
        .unwrap_or_else(|| Arc::new(|_t, _x, out: &mut [f64]| out.fill(0.0)));
    let coupling: CouplingField = inputs
        .coupling
        .clone()
        .unwrap_or_else(|| Arc::new(|_t, _x, out: &mut [f64]| out.fill(0.0)));
    let gamma_trivial = inputs.zero_order.is_none() && inputs.coupling.is_none();

    let star = inputs.u_star.clone();
    let lambda = inputs.lambda;
    let psi = inputs.psi.clone();
    let (g_drift, g_diff, g_c, g_cpl) = (
        drift.clone(),
        diffusion.clone(),
        zero_order.clone(),
        coupling.clone(),
    );
    let reaction: ReactionField = Arc::new(move |t, x, u, k_load, out| {
        let mut a_eval = vec![0.0; d];
        let mut diff_eval = vec![0.0; d * d];
        let mut c_eval = vec![0.0; d1 * d1];
        let mut cpl_eval = vec![0.0; d * d1 * d1];
        g_drift(t, x, &mut a_eval);
        g_diff(t, x, &mut diff_eval);
        g_c(t, x, &mut c_eval);
        g_cpl(t, x, &mut cpl_eval);
        let lu = apply_linear_operator(&star, t, x, &a_eval, &diff_eval, &c_eval, &cpl_eval, d, d1);
        for (o, v) in out.iter_mut().zip(&lu) {
            *o = -v;
        }
        if lambda > 0.0 {
            let psi = psi.as_ref().expect("checked at construction");
            let mut u_star = vec![0.0; d1];
            let mut jac = vec![0.0; d1 * d];
            star.value(t, x, &mut u_star);
            star.jacobian(t, x, &mut jac);
            let k_star = gradient_load(&u_star, &jac, &cpl_eval, &diff_eval, d, d1);
            let mut psi_u = vec![0.0; d1];
            let mut psi_star = vec![0.0; d1];
            psi(u, k_load, &mut psi_u);
            psi(&u_star, &k_star, &mut psi_star);
            for l in 0..d1 {
                out[l] += lambda * (psi_u[l] - psi_star[l]);
            }
        }
    });

    let term_star = inputs.u_star.clone();
    let horizon = inputs.horizon;
    let terminal: TerminalField = Arc::new(move |x, out| term_star.value(horizon, x, out));
    let reference = inputs.u_star.value_field();

    let base = ProblemSpec::builder(d, d1, horizon)
        .drift(drift)
        .diffusion(diffusion)
        .zero_order(zero_order)
        .coupling(coupling)
        .reaction(reaction)
        .terminal(terminal)
        .reference(reference)
        .budget(inputs.budget)
        .declare_gamma_trivial(gamma_trivial)
        .build()?;
    Ok(ManufacturedProblem {
        base,
        u_star: inputs.u_star,
        lambda: inputs.lambda,
    })
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// Observed ratio for one quantity against its declared budget entry.
#[derive(Clone, Debug)]
pub struct RatioEstimate {
    pub quantity: &'static str,
    pub observed: f64,
    pub declared: Option<f64>,
    pub flagged: bool,
}

/// Report-only empirical check of the growth/Lipschitz conditions.
#[derive(Clone, Debug)]
pub struct ValidationReport {
    pub entries: Vec<RatioEstimate>,
    pub samples: usize,
}

impl ValidationReport {
    pub fn flag_count(&self) -> usize {
        self.entries.iter().filter(|e| e.flagged).count()
    }

    pub fn entry(&self, quantity: &str) -> Option<&RatioEstimate> {
        self.entries.iter().find(|e| e.quantity == quantity)
    }
}

const SAMPLE_BOX: f64 = 10.0;

/// Estimates growth and Lipschitz ratios of all coefficients over random
/// point pairs in the box `[-10, 10]` and reports them next to the declared
/// budget. Exceedances are flagged, never rejected.
pub fn validate(spec: &ProblemSpec, sample_count: usize, rng_seed: u64) -> Result<ValidationReport> {
    if sample_count < 2 {
        return Err(Error::Invalid(format!(
            "sample_count must be at least 2, got {sample_count}"
        )));
    }
    let d = spec.d();
    let d1 = spec.d1();
    let mut rng = SeqRng::new(rng_seed);
    let draw_vec = |rng: &mut SeqRng, n: usize| -> Vec<f64> {
        (0..n).map(|_| rng.uniform(-SAMPLE_BOX, SAMPLE_BOX)).collect()
    };

    let mut growth_k1 = 0.0f64;
    let mut lip_l1 = 0.0f64;
    let mut bound_k2 = 0.0f64;
    let mut lip_l2 = 0.0f64;
    let mut lip_l3 = 0.0f64;
    let mut lip_l = 0.0f64;
    let mut mono_mu = f64::NEG_INFINITY;
    let mut lip_c0 = 0.0f64;

    let mut a1 = vec![0.0; d];
    let mut a2 = vec![0.0; d];
    let mut m1 = vec![0.0; d * d];
    let mut m2 = vec![0.0; d * d];
    let mut c1 = vec![0.0; d1 * d1];
    let mut c2 = vec![0.0; d1 * d1];
    let mut cc1 = vec![0.0; d * d1 * d1];
    let mut cc2 = vec![0.0; d * d1 * d1];
    let mut g1 = vec![0.0; d1];
    let mut g2 = vec![0.0; d1];
    let mut t1 = vec![0.0; d1];
    let mut t2 = vec![0.0; d1];
    let mut buf = vec![0.0; d1];

    for _ in 0..sample_count {
        let t = rng.uniform(0.0, spec.horizon());
        let x1 = draw_vec(&mut rng, d);
        let x2 = draw_vec(&mut rng, d);
        let h = draw_vec(&mut rng, d1);
        let u1 = draw_vec(&mut rng, d1);
        let u2 = draw_vec(&mut rng, d1);
        let k1 = draw_vec(&mut rng, d1 * d);
        let k2 = draw_vec(&mut rng, d1 * d);

        spec.eval_drift(t, &x1, &mut a1)?;
        spec.eval_drift(t, &x2, &mut a2)?;
        spec.eval_diffusion(t, &x1, &mut m1)?;
        spec.eval_diffusion(t, &x2, &mut m2)?;
        spec.eval_zero_order(t, &x1, &mut c1)?;
        spec.eval_zero_order(t, &x2, &mut c2)?;
        spec.eval_coupling(t, &x1, &mut cc1)?;
        spec.eval_coupling(t, &x2, &mut cc2)?;

        let x1_sq = linalg::dot(&x1, &x1);
        let a_sq = linalg::dot(&a1, &a1);
        let m_sq = linalg::dot(&m1, &m1);
        growth_k1 = growth_k1.max((a_sq + m_sq) / (1.0 + x1_sq));

        let dx: Vec<f64> = x1.iter().zip(&x2).map(|(p, q)| p - q).collect();
        let dx_sq = linalg::dot(&dx, &dx);
        if dx_sq > 1e-24 {
            let da_sq: f64 = a1.iter().zip(&a2).map(|(p, q)| (p - q) * (p - q)).sum();
            let dm_sq: f64 = m1.iter().zip(&m2).map(|(p, q)| (p - q) * (p - q)).sum();
            lip_l1 = lip_l1.max((da_sq + dm_sq) / dx_sq);
        }

        let h_sq = linalg::dot(&h, &h);
        if h_sq > 1e-24 {
            linalg::mat_vec(&c1, &h, &mut buf, d1);
            let mut op_sq = linalg::dot(&buf, &buf);
            for k in 0..d {
                linalg::mat_vec(&cc1[k * d1 * d1..(k + 1) * d1 * d1], &h, &mut buf, d1);
                op_sq += linalg::dot(&buf, &buf);
            }
            bound_k2 = bound_k2.max(op_sq / h_sq);

            if dx_sq > 1e-24 {
                let dc: Vec<f64> = c1.iter().zip(&c2).map(|(p, q)| p - q).collect();
                linalg::mat_vec(&dc, &h, &mut buf, d1);
                let mut dop_sq = linalg::dot(&buf, &buf);
                for k in 0..d {
                    let dcc: Vec<f64> = cc1[k * d1 * d1..(k + 1) * d1 * d1]
                        .iter()
                        .zip(&cc2[k * d1 * d1..(k + 1) * d1 * d1])
                        .map(|(p, q)| p - q)
                        .collect();
                    linalg::mat_vec(&dcc, &h, &mut buf, d1);
                    dop_sq += linalg::dot(&buf, &buf);
                }
                lip_l2 = lip_l2.max(dop_sq / (dx_sq * h_sq));
            }
        }

        // g in x at fixed (u, K).
        spec.eval_reaction(t, &x1, &u1, &k1, &mut g1)?;
        spec.eval_reaction(t, &x2, &u1, &k1, &mut g2)?;
        if dx_sq > 1e-24 {
            let dg: f64 = g1
                .iter()
                .zip(&g2)
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt();
            lip_l3 = lip_l3.max(dg / dx_sq.sqrt());
        }

        // g in (u, K) at fixed x.
        spec.eval_reaction(t, &x1, &u1, &k1, &mut g1)?;
        spec.eval_reaction(t, &x1, &u2, &k2, &mut g2)?;
        let du: Vec<f64> = u1.iter().zip(&u2).map(|(p, q)| p - q).collect();
        let du_norm = linalg::dot(&du, &du).sqrt();
        let dk_norm = k1
            .iter()
            .zip(&k2)
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt();
        if du_norm + dk_norm > 1e-12 {
            let dg: f64 = g1
                .iter()
                .zip(&g2)
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt();
            lip_l = lip_l.max(dg / (du_norm + dk_norm));
        }

        // monotonicity in u at fixed (x, K).
        spec.eval_reaction(t, &x1, &u1, &k1, &mut g1)?;
        spec.eval_reaction(t, &x1, &u2, &k1, &mut g2)?;
        let du_sq = linalg::dot(&du, &du);
        if du_sq > 1e-24 {
            let pair: f64 = du
                .iter()
                .zip(g1.iter().zip(&g2))
                .map(|(dui, (p, q))| dui * (p - q))
                .sum();
            mono_mu = mono_mu.max(pair / du_sq);
        }

        spec.eval_terminal(&x1, &mut t1)?;
        spec.eval_terminal(&x2, &mut t2)?;
        if dx_sq > 1e-24 {
            let dt: f64 = t1
                .iter()
                .zip(&t2)
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt();
            lip_c0 = lip_c0.max(dt / dx_sq.sqrt());
        }
    }

    if !mono_mu.is_finite() {
        mono_mu = 0.0;
    }

    let b = spec.budget();
    let entry = |quantity: &'static str, observed: f64, declared: Option<f64>| RatioEstimate {
        quantity,
        observed,
        declared,
        flagged: declared.is_some_and(|lim| observed > lim * (1.0 + 1e-9) + 1e-12),
    };
    let entries = vec![
        entry("growth K1", growth_k1, b.k1),
        entry("operator bound K2", bound_k2, b.k2),
        entry("lipschitz L1", lip_l1, b.l1),
        entry("lipschitz L2", lip_l2, b.l2),
        entry("lipschitz L3", lip_l3, b.l3),
        entry("lipschitz L", lip_l, b.l),
        entry("monotonicity mu", mono_mu, b.mu),
        entry("terminal C0", lip_c0, b.c0),
    ];
    Ok(ValidationReport {
        entries,
        samples: sample_count,
    })
}
