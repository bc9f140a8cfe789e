//! Job execution and CSV emission.
//!
//! Result files use the fixed header
//! `s,x1,...,xd,component,value,stderr,steps,paths,seed[,oracle,abs_error]`
//! with one row per (grid point x component); the oracle columns appear
//! exactly when the problem carries a reference solution. Floats are written
//! in shortest round-trip decimal form, so identical runs produce
//! byte-identical files. Validate jobs use the alternate header
//! `quantity,observed,declared,flagged`.

use std::fmt::Write as _;
use std::sync::Arc;

use fbsde::problem::ProblemSpec;
use fbsde::rng::SeqRng;
use fbsde::{
    build_enlarged, comparison_harness, convergence_study, evaluate_u, solve_scalar, Estimate,
    SolverConfig,
};

use crate::config::{JobKind, RunConfig};
use crate::CliError;

pub struct JobOutput {
    pub csv: String,
    pub summary: String,
    /// Nonzero when a compare or crosscheck band is violated.
    pub violation: bool,
    pub warnings: Vec<String>,
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

struct ResultTable {
    d: usize,
    with_oracle: bool,
    rows: String,
}

impl ResultTable {
    fn new(d: usize, with_oracle: bool) -> Self {
        Self {
            d,
            with_oracle,
            rows: String::new(),
        }
    }

    fn header(&self) -> String {
        let mut h = String::from("s");
        for i in 1..=self.d {
            let _ = write!(h, ",x{i}");
        }
        h.push_str(",component,value,stderr,steps,paths,seed");
        if self.with_oracle {
            h.push_str(",oracle,abs_error");
        }
        h
    }

    #[allow(clippy::too_many_arguments)]
    fn push_row(
        &mut self,
        s: f64,
        x: &[f64],
        component: usize,
        value: f64,
        stderr: f64,
        steps: usize,
        paths: usize,
        seed: u64,
        oracle: Option<f64>,
    ) {
        let mut row = fmt_f64(s);
        for xi in x {
            let _ = write!(row, ",{}", fmt_f64(*xi));
        }
        let _ = write!(
            row,
            ",{component},{},{},{steps},{paths},{seed}",
            fmt_f64(value),
            fmt_f64(stderr)
        );
        if self.with_oracle {
            let oracle = oracle.expect("oracle column requires a reference value");
            let _ = write!(row, ",{},{}", fmt_f64(oracle), fmt_f64((value - oracle).abs()));
        }
        self.rows.push_str(&row);
        self.rows.push('\n');
    }

    fn finish(self) -> String {
        format!("{}\n{}", self.header(), self.rows)
    }
}

fn push_estimate_rows(
    table: &mut ResultTable,
    spec: &ProblemSpec,
    s: f64,
    x: &[f64],
    estimate: &Estimate,
) {
    let oracle = spec.reference_at(s, x);
    for (l, (v, se)) in estimate.value.iter().zip(&estimate.stderr).enumerate() {
        table.push_row(
            s,
            x,
            l,
            *v,
            *se,
            estimate.n_steps,
            estimate.n_paths,
            estimate.seed,
            oracle.as_ref().map(|o| o[l]),
        );
    }
}

fn grid_points(config: &RunConfig) -> Vec<Vec<f64>> {
    let grid = config.start.grid.as_ref().expect("validated");
    let axes: Vec<Vec<f64>> = grid
        .axes
        .iter()
        .map(|a| {
            (0..a.count)
                .map(|i| {
                    if a.count == 1 {
                        a.min
                    } else {
                        a.min + (a.max - a.min) * i as f64 / (a.count - 1) as f64
                    }
                })
                .collect()
        })
        .collect();
    let mut points = vec![Vec::new()];
    for axis in axes {
        let mut next = Vec::with_capacity(points.len() * axis.len());
        for p in &points {
            for v in &axis {
                let mut q = p.clone();
                q.push(*v);
                next.push(q);
            }
        }
        points = next;
    }
    points
}

pub fn run(config: &RunConfig, seed_override: Option<u64>) -> Result<JobOutput, CliError> {
    let seed_override = seed_override.or(config.seed);
    let spec = config.problem.build()?;
    let solver = config.solver.to_solver_config(seed_override);
    match config.job {
        JobKind::Evaluate => run_evaluate(&spec, config, &solver),
        JobKind::Grid => run_grid(&spec, config, &solver),
        JobKind::Convergence => run_convergence(&spec, config, seed_override),
        JobKind::Compare => run_compare(&spec, config, &solver),
        JobKind::ScalarCrosscheck => run_crosscheck(&spec, config, &solver),
        JobKind::Validate => run_validate(&spec, config, &solver),
    }
}

fn start_x(config: &RunConfig) -> &[f64] {
    config.start.x.as_deref().expect("validated")
}

fn run_evaluate(
    spec: &Arc<ProblemSpec>,
    config: &RunConfig,
    solver: &SolverConfig,
) -> Result<JobOutput, CliError> {
    let s = config.start.s;
    let x = start_x(config);
    let estimate = evaluate_u(spec.clone(), s, x, solver).map_err(CliError::Solver)?;
    let mut table = ResultTable::new(spec.d(), spec.reference().is_some());
    push_estimate_rows(&mut table, spec, s, x, &estimate);
    let mut warnings = Vec::new();
    if !estimate.converged {
        warnings.push(format!(
            "warning: Picard iteration flagged non-converged after {} sweeps",
            estimate.picard_iterations
        ));
    }
    let summary = format!(
        "u({}, {:?}) = {:?} +- {:?} (steps={}, paths={}, seed={})",
        s, x, estimate.value, estimate.stderr, solver.n_steps, solver.n_paths, solver.seed
    );
    Ok(JobOutput {
        csv: table.finish(),
        summary,
        violation: false,
        warnings,
    })
}

fn run_grid(
    spec: &Arc<ProblemSpec>,
    config: &RunConfig,
    solver: &SolverConfig,
) -> Result<JobOutput, CliError> {
    let s = config.start.s;
    let points = grid_points(config);
    let mut table = ResultTable::new(spec.d(), spec.reference().is_some());
    let mut warnings = Vec::new();
    for x in &points {
        if x.len() != spec.d() {
            return Err(CliError::Config(format!(
                "at `start.grid.axes`: {} axes for a problem with d = {}",
                x.len(),
                spec.d()
            )));
        }
        let estimate = evaluate_u(spec.clone(), s, x, solver).map_err(CliError::Solver)?;
        if !estimate.converged {
            warnings.push(format!("warning: non-converged Picard at x = {x:?}"));
        }
        push_estimate_rows(&mut table, spec, s, x, &estimate);
    }
    let summary = format!(
        "grid: {} points x {} components evaluated (steps={}, paths={}, seed={})",
        points.len(),
        spec.d1(),
        solver.n_steps,
        solver.n_paths,
        solver.seed
    );
    Ok(JobOutput {
        csv: table.finish(),
        summary,
        violation: false,
        warnings,
    })
}

fn run_convergence(
    spec: &Arc<ProblemSpec>,
    config: &RunConfig,
    seed_override: Option<u64>,
) -> Result<JobOutput, CliError> {
    let s = config.start.s;
    let x = start_x(config);
    if spec.reference().is_none() {
        return Err(CliError::Config(
            "at `problem`: convergence jobs need a problem with a reference solution".into(),
        ));
    }
    let configs: Vec<SolverConfig> = config
        .refinements
        .iter()
        .map(|r| r.to_solver_config(seed_override))
        .collect();
    let rows = convergence_study(spec.clone(), s, x, &configs).map_err(CliError::Solver)?;
    let mut table = ResultTable::new(spec.d(), true);
    for row in &rows {
        for (l, (v, se)) in row.value.iter().zip(&row.stderr).enumerate() {
            table.push_row(
                s,
                x,
                l,
                *v,
                *se,
                row.n_steps,
                row.n_paths,
                row.seed,
                Some(row.oracle[l]),
            );
        }
    }
    let errors: Vec<String> = rows.iter().map(|r| fmt_f64(r.abs_error)).collect();
    let summary = format!("convergence: max-norm errors per refinement = [{}]", errors.join(", "));
    Ok(JobOutput {
        csv: table.finish(),
        summary,
        violation: false,
        warnings: Vec::new(),
    })
}

fn run_compare(
    spec: &Arc<ProblemSpec>,
    config: &RunConfig,
    solver: &SolverConfig,
) -> Result<JobOutput, CliError> {
    let s = config.start.s;
    let x = start_x(config);
    let spec2 = config
        .problem2
        .as_ref()
        .expect("validated")
        .build()?;
    let n_seeds = config.compare.as_ref().map_or(20, |c| c.seeds);
    let report = comparison_harness(spec.clone(), spec2.clone(), s, x, solver, n_seeds)
        .map_err(CliError::Solver)?;

    // Two row groups per seed, problem 1 first, then problem 2; both carry
    // the seed of that run.
    let mut table = ResultTable::new(spec.d(), false);
    for record in &report.records {
        for (l, (v, se)) in record.y1.iter().zip(&record.stderr1).enumerate() {
            table.push_row(s, x, l, *v, *se, solver.n_steps, solver.n_paths, record.seed, None);
        }
        for (l, (v, se)) in record.y2.iter().zip(&record.stderr2).enumerate() {
            table.push_row(s, x, l, *v, *se, solver.n_steps, solver.n_paths, record.seed, None);
        }
    }
    let mut warnings = Vec::new();
    if report.exploratory {
        warnings.push(format!(
            "warning: comparison hypotheses not satisfied ({}); report is exploratory",
            report
                .c31
                .first_failure
                .as_deref()
                .unwrap_or("sampled hypothesis check failed")
        ));
    }
    let violation = !report.exploratory && report.violations > 0;
    let summary = format!(
        "{} violations / {} seeds{}{}",
        report.violations,
        n_seeds,
        if report.exploratory { " (exploratory)" } else { "" },
        if violation {
            format!(", max excess {}", fmt_f64(report.max_violation))
        } else {
            String::new()
        }
    );
    Ok(JobOutput {
        csv: table.finish(),
        summary,
        violation,
        warnings,
    })
}

fn run_crosscheck(
    spec: &Arc<ProblemSpec>,
    config: &RunConfig,
    solver: &SolverConfig,
) -> Result<JobOutput, CliError> {
    let s = config.start.s;
    let x = start_x(config);
    let d1 = spec.d1();
    let directions: Vec<Vec<f64>> = match config.crosscheck.as_ref() {
        Some(block) if block.h.is_some() => {
            let hs = block.h.clone().unwrap();
            for (i, h) in hs.iter().enumerate() {
                if h.len() != d1 {
                    return Err(CliError::Config(format!(
                        "at `crosscheck.h[{i}]`: expected {d1} components"
                    )));
                }
            }
            hs
        }
        block => {
            let count = block.and_then(|b| b.directions).unwrap_or(5);
            let mut rng = SeqRng::new(solver.seed ^ 0x5ca1a);
            (0..count)
                .map(|_| (0..d1).map(|_| rng.uniform(-1.0, 1.0)).collect())
                .collect()
        }
    };

    let vector = evaluate_u(spec.clone(), s, x, solver).map_err(CliError::Solver)?;
    let mut table = ResultTable::new(spec.d(), true);
    let mut worst_excess = f64::NEG_INFINITY;
    let mut violation = false;
    for (idx, h) in directions.iter().enumerate() {
        let enlarged = build_enlarged(spec.clone(), h).map_err(CliError::Solver)?;
        let scalar = solve_scalar(&enlarged, s, x, solver).map_err(CliError::Solver)?;
        let paired: f64 = h.iter().zip(&vector.value).map(|(hv, uv)| hv * uv).sum();
        let band: f64 = 3.0
            * (scalar.stderr[0]
                + h.iter()
                    .zip(&vector.stderr)
                    .map(|(hv, se)| hv.abs() * se)
                    .sum::<f64>());
        let defect = (scalar.value[0] - paired).abs();
        if defect > band {
            violation = true;
        }
        worst_excess = worst_excess.max(defect - band);
        // component column holds the direction index; the oracle column is
        // the h-pairing of the vector solution.
        table.push_row(
            s,
            x,
            idx,
            scalar.value[0],
            scalar.stderr[0],
            solver.n_steps,
            solver.n_paths,
            solver.seed,
            Some(paired),
        );
    }
    let summary = format!(
        "scalar crosscheck: {} directions, worst defect-minus-band = {} ({})",
        directions.len(),
        fmt_f64(worst_excess),
        if violation { "FAIL" } else { "PASS" }
    );
    Ok(JobOutput {
        csv: table.finish(),
        summary,
        violation,
        warnings: Vec::new(),
    })
}

fn run_validate(
    spec: &Arc<ProblemSpec>,
    config: &RunConfig,
    solver: &SolverConfig,
) -> Result<JobOutput, CliError> {
    let samples = config.validate.as_ref().map_or(1000, |v| v.samples);
    let report = fbsde::validate(spec, samples, solver.seed).map_err(CliError::Solver)?;
    let mut csv = String::from("quantity,observed,declared,flagged\n");
    for entry in &report.entries {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            entry.quantity,
            fmt_f64(entry.observed),
            entry.declared.map_or(String::new(), fmt_f64),
            entry.flagged
        );
    }
    let summary = format!(
        "validation: {} samples, {} flagged exceedances",
        report.samples,
        report.flag_count()
    );
    Ok(JobOutput {
        csv,
        summary,
        violation: false,
        warnings: Vec::new(),
    })
}
