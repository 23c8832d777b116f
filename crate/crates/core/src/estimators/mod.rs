//! Penalized (A), gradient-bounded (B) and error-bounded minimum-penalty (C)
//! convex regression.
//!
//! Problems A and B are solved as finite-dimensional QPs in the variables
//! `z = (f_1..f_n, beta_1..beta_n[, M])`, subject to the convexity rows
//! `f_i >= f_j + beta_j^T (X_i - X_j)` for all `i != j` and the sup-norm box
//! `|beta_i|_inf <= M` (A) or `<= u` (B). Problem C is solved by bisection on
//! the Problem-B bound `u`: the optimal SSE of B is nonincreasing in `u`, so
//! the smallest `u` whose B-fit meets the SSE cap is the minimal gradient
//! bound.

mod dataset;
mod prune;

use serde::{Deserialize, Serialize};

pub use dataset::Dataset;
pub use prune::prune_redundant;

use crate::error::{Error, Result};
use crate::max_affine::{sup_norm, MaxAffineModel, Piece};
use crate::qp::{solve_qp, LinearConstraint, QpProblem, QpSolution, QpStatus, SolverTolerances};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Estimator {
    /// Least squares plus `lambda * J_inf(f)`.
    A,
    /// Least squares subject to `J_inf(f) <= u`.
    B,
    /// Minimal `J_inf(f)` subject to mean squared error `<= s`.
    C,
}

impl Estimator {
    pub fn as_str(&self) -> &'static str {
        match self {
            Estimator::A => "A",
            Estimator::B => "B",
            Estimator::C => "C",
        }
    }
}

impl std::str::FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "A" => Ok(Estimator::A),
            "B" => Ok(Estimator::B),
            "C" => Ok(Estimator::C),
            _ => Err(Error::invalid(format!("unknown estimator {s:?}; expected a, b or c"))),
        }
    }
}

/// Controls the bisection on `u` used by Problem C.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BisectionOptions {
    /// Bracket width tolerance relative to `max(1, u)`.
    pub rel_tol: f64,
    /// A B-fit with `sse <= s + sse_slack` counts as meeting the cap.
    pub sse_slack: f64,
    /// Doubling of the upper bracket end stops beyond this value.
    pub max_upper: f64,
}

impl Default for BisectionOptions {
    fn default() -> Self {
        BisectionOptions { rel_tol: 1e-4, sse_slack: 1e-9, max_upper: 1e8 }
    }
}

impl BisectionOptions {
    /// Absolute bracket width accepted at bound `u`.
    pub fn abs_tol_at(&self, u: f64) -> f64 {
        self.rel_tol * u.max(1.0)
    }
}

/// Which estimator to run and its hyperparameter (`lambda`, `u` or `s`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitSpec {
    pub estimator: Estimator,
    pub hyperparameter: f64,
    pub tolerances: SolverTolerances,
    pub bisection: BisectionOptions,
}

impl FitSpec {
    pub fn new(estimator: Estimator, hyperparameter: f64) -> Result<Self> {
        check_hyperparameter(hyperparameter, estimator)?;
        Ok(FitSpec {
            estimator,
            hyperparameter,
            tolerances: SolverTolerances::default(),
            bisection: BisectionOptions::default(),
        })
    }

    pub fn fit(&self, data: &Dataset) -> Result<FitResult> {
        match self.estimator {
            Estimator::A => fit_a(data, self.hyperparameter, &self.tolerances),
            Estimator::B => fit_b(data, self.hyperparameter, &self.tolerances),
            Estimator::C => fit_c_with(data, self.hyperparameter, &self.tolerances, &self.bisection),
        }
    }
}

fn check_hyperparameter(value: f64, estimator: Estimator) -> Result<()> {
    if !(value.is_finite() && value >= 0.0) {
        let name = match estimator {
            Estimator::A => "lambda",
            Estimator::B => "u",
            Estimator::C => "s",
        };
        return Err(Error::invalid(format!("{name} must be finite and nonnegative, got {value}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitDiagnostics {
    pub qp_solves: usize,
    pub iterations: usize,
    pub max_primal_residual: f64,
    pub max_kkt_residual: f64,
    /// Problem A only: the `M` returned by the solver before tightening.
    pub solver_bound: Option<f64>,
    /// Largest slope sup-norm among the solver's `beta_i` (before pruning).
    pub max_slope: f64,
    pub pieces_pruned: usize,
    /// Problem C only: final `(lower, upper)` bisection bracket on `u`.
    pub bracket: Option<(f64, f64)>,
}

impl FitDiagnostics {
    fn absorb(&mut self, other: &FitDiagnostics) {
        self.qp_solves += other.qp_solves;
        self.iterations += other.iterations;
        self.max_primal_residual = self.max_primal_residual.max(other.max_primal_residual);
        self.max_kkt_residual = self.max_kkt_residual.max(other.max_kkt_residual);
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: MaxAffineModel,
    pub estimator: Estimator,
    pub hyperparameter: f64,
    /// `(1/n) sum (y_i - f_i)^2` from the solver's fitted values.
    pub sse: f64,
    /// `M` for A and C, `u` for B.
    pub grad_bound: f64,
    /// The solver's `f_1..f_n`.
    pub fitted_values: Vec<f64>,
    pub diagnostics: FitDiagnostics,
}

#[derive(Serialize, Deserialize)]
struct FitResultJson {
    model: MaxAffineModel,
    sse: f64,
    grad_bound: f64,
    estimator: Estimator,
    hyperparameter: f64,
}

impl FitResult {
    /// `{"model", "sse", "grad_bound", "estimator", "hyperparameter"}`.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&FitResultJson {
            model: self.model.clone(),
            sse: self.sse,
            grad_bound: self.grad_bound,
            estimator: self.estimator,
            hyperparameter: self.hyperparameter,
        })?)
    }

    /// Reads the fields written by [`FitResult::to_json`]; diagnostics and
    /// fitted values are not part of the file format and come back empty.
    pub fn from_json(s: &str) -> Result<Self> {
        let raw: FitResultJson = serde_json::from_str(s)?;
        Ok(FitResult {
            model: raw.model,
            estimator: raw.estimator,
            hyperparameter: raw.hyperparameter,
            sse: raw.sse,
            grad_bound: raw.grad_bound,
            fitted_values: Vec::new(),
            diagnostics: FitDiagnostics::default(),
        })
    }
}

/// Variable layout `(f_1..f_n, beta_1..beta_n, [M])`.
#[derive(Debug, Clone, Copy)]
struct Layout {
    n: usize,
    d: usize,
    with_bound: bool,
}

impl Layout {
    fn f(&self, i: usize) -> usize {
        i
    }
    fn beta(&self, i: usize, k: usize) -> usize {
        self.n + i * self.d + k
    }
    fn bound(&self) -> usize {
        self.n * (1 + self.d)
    }
    fn num_vars(&self) -> usize {
        self.n * (1 + self.d) + usize::from(self.with_bound)
    }
    /// Index of the convexity row for the ordered pair `(i, j)`, `i != j`.
    fn convexity_row(&self, i: usize, j: usize) -> usize {
        i * (self.n - 1) + if j < i { j } else { j - 1 }
    }
    fn num_convexity_rows(&self) -> usize {
        self.n * (self.n - 1)
    }
}

/// Convexity rows then box rows; the hint holds the box rows plus the pairs
/// of coordinate-wise neighbours, which already imply all convexity rows in
/// one dimension.
fn shape_constraints(data: &Dataset, layout: Layout, box_rhs: f64) -> (Vec<LinearConstraint>, Vec<usize>) {
    let (n, d) = (layout.n, layout.d);
    let x = data.points();
    let mut rows = Vec::with_capacity(layout.num_convexity_rows() + 2 * n * d + 1);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            // -f_i + f_j + beta_j^T (X_i - X_j) <= 0
            let mut coeffs = Vec::with_capacity(2 + d);
            coeffs.push((layout.f(i), -1.0));
            coeffs.push((layout.f(j), 1.0));
            for k in 0..d {
                let delta = x[i][k] - x[j][k];
                if delta != 0.0 {
                    coeffs.push((layout.beta(j, k), delta));
                }
            }
            rows.push(LinearConstraint::new(coeffs, 0.0));
        }
    }
    for i in 0..n {
        for k in 0..d {
            for sign in [1.0, -1.0] {
                let mut coeffs = vec![(layout.beta(i, k), sign)];
                if layout.with_bound {
                    coeffs.push((layout.bound(), -1.0));
                }
                rows.push(LinearConstraint::new(coeffs, box_rhs));
            }
        }
    }
    if layout.with_bound {
        rows.push(LinearConstraint::new(vec![(layout.bound(), -1.0)], 0.0));
    }

    let mut hint: Vec<usize> = (layout.num_convexity_rows()..rows.len()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    for k in 0..d {
        order.sort_by(|&p, &q| x[p][k].total_cmp(&x[q][k]).then(p.cmp(&q)));
        for w in order.windows(2) {
            hint.push(layout.convexity_row(w[0], w[1]));
            hint.push(layout.convexity_row(w[1], w[0]));
        }
    }
    (rows, hint)
}

fn least_squares_objective(data: &Dataset, layout: Layout) -> (Vec<f64>, Vec<f64>) {
    // (1/n) sum (y_i - f_i)^2 = 1/2 f^T (2/n I) f - (2/n) y^T f + const
    let n = layout.n as f64;
    let mut diag = vec![0.0; layout.num_vars()];
    let mut linear = vec![0.0; layout.num_vars()];
    for (i, y) in data.responses().iter().enumerate() {
        diag[layout.f(i)] = 2.0 / n;
        linear[layout.f(i)] = -2.0 * y / n;
    }
    (diag, linear)
}

/// QP of the penalized estimator: `min (1/n) sum (y_i - f_i)^2 + lambda M`.
pub fn build_problem_a(data: &Dataset, lambda: f64) -> Result<QpProblem> {
    check_hyperparameter(lambda, Estimator::A)?;
    let layout = Layout { n: data.len(), d: data.dim(), with_bound: true };
    let (diag, mut linear) = least_squares_objective(data, layout);
    linear[layout.bound()] = lambda;
    let (rows, hint) = shape_constraints(data, layout, 0.0);
    Ok(QpProblem::with_diagonal(&diag, linear, rows)?.with_working_set_hint(hint))
}

/// QP of the gradient-bounded estimator: `min (1/n) sum (y_i - f_i)^2`, `|beta_i|_inf <= u`.
pub fn build_problem_b(data: &Dataset, u: f64) -> Result<QpProblem> {
    check_hyperparameter(u, Estimator::B)?;
    let layout = Layout { n: data.len(), d: data.dim(), with_bound: false };
    let (diag, linear) = least_squares_objective(data, layout);
    let (rows, hint) = shape_constraints(data, layout, u);
    Ok(QpProblem::with_diagonal(&diag, linear, rows)?.with_working_set_hint(hint))
}

fn solve_checked(problem: &QpProblem, tol: &SolverTolerances, what: &str) -> Result<QpSolution> {
    let sol = solve_qp(problem, tol)?;
    match sol.status {
        QpStatus::Optimal => Ok(sol),
        status => Err(Error::Solver(format!(
            "{what}: status {status:?} after {} iterations (primal residual {:.3e}, KKT residual {:.3e})",
            sol.iterations, sol.primal_residual, sol.stationarity_residual
        ))),
    }
}

fn assemble(
    data: &Dataset,
    layout: Layout,
    sol: &QpSolution,
    estimator: Estimator,
    hyperparameter: f64,
    grad_bound: f64,
    solver_bound: Option<f64>,
) -> Result<FitResult> {
    let pieces: Vec<Piece> = (0..layout.n)
        .map(|i| Piece {
            anchor: data.points()[i].clone(),
            value: sol.z[layout.f(i)],
            slope: (0..layout.d).map(|k| sol.z[layout.beta(i, k)]).collect(),
        })
        .collect();
    let max_slope = pieces.iter().map(|p| sup_norm(&p.slope)).fold(0.0, f64::max);
    let raw = MaxAffineModel::new(*data.domain(), grad_bound, pieces)?;
    let model = prune_redundant(&raw)?;
    // The solver's f_i can sit below the max of the other pieces by the
    // feasibility tolerance; report the values the model actually takes.
    let fitted_values = data.points().iter().map(|x| model.evaluate(x)).collect::<Result<Vec<f64>>>()?;
    let sse = data
        .responses()
        .iter()
        .zip(&fitted_values)
        .map(|(y, f)| (y - f).powi(2))
        .sum::<f64>()
        / layout.n as f64;
    Ok(FitResult {
        diagnostics: FitDiagnostics {
            qp_solves: 1,
            iterations: sol.iterations,
            max_primal_residual: sol.primal_residual,
            max_kkt_residual: sol.stationarity_residual,
            solver_bound,
            max_slope,
            pieces_pruned: raw.pieces().len() - model.pieces().len(),
            bracket: None,
        },
        model,
        estimator,
        hyperparameter,
        sse,
        grad_bound,
        fitted_values,
    })
}

/// Penalized fit. The reported bound is `max_i |beta_i|_inf`: the solver's
/// `M` can only exceed it by the solver tolerance when `lambda > 0`, and for
/// `lambda = 0` this picks the least `M` on the optimal face.
pub fn fit_a(data: &Dataset, lambda: f64, tol: &SolverTolerances) -> Result<FitResult> {
    let problem = build_problem_a(data, lambda)?;
    let layout = Layout { n: data.len(), d: data.dim(), with_bound: true };
    let sol = solve_checked(&problem, tol, "problem A")?;
    let solver_bound = sol.z[layout.bound()];
    let tight = (0..layout.n)
        .flat_map(|i| (0..layout.d).map(move |k| (i, k)))
        .map(|(i, k)| sol.z[layout.beta(i, k)].abs())
        .fold(0.0, f64::max);
    assemble(data, layout, &sol, Estimator::A, lambda, tight, Some(solver_bound))
}

/// Gradient-bounded fit; `grad_bound` is `u` and the achieved max slope is
/// reported in the diagnostics.
pub fn fit_b(data: &Dataset, u: f64, tol: &SolverTolerances) -> Result<FitResult> {
    let problem = build_problem_b(data, u)?;
    solve_b(data, &problem, u, tol)
}

fn solve_b(data: &Dataset, problem: &QpProblem, u: f64, tol: &SolverTolerances) -> Result<FitResult> {
    let layout = Layout { n: data.len(), d: data.dim(), with_bound: false };
    let sol = solve_checked(problem, tol, "problem B")?;
    // Slopes may overshoot u by the solver's feasibility tolerance.
    let bound = u.max(
        (0..layout.n * layout.d).map(|v| sol.z[layout.n + v].abs()).fold(0.0, f64::max).min(u + tol.feas_tol),
    );
    let mut fit = assemble(data, layout, &sol, Estimator::B, u, u, None)?;
    if bound > u {
        fit.model = MaxAffineModel::new(*fit.model.domain(), bound, fit.model.pieces().to_vec())?;
    }
    Ok(fit)
}

/// Error-bounded minimum-penalty fit with default bisection options.
pub fn fit_c(data: &Dataset, s: f64, tol: &SolverTolerances) -> Result<FitResult> {
    fit_c_with(data, s, tol, &BisectionOptions::default())
}

/// Bisection on `u` over Problem B. The returned model is the B-fit at the
/// upper bracket end; `grad_bound` is that end.
pub fn fit_c_with(
    data: &Dataset,
    s: f64,
    tol: &SolverTolerances,
    opts: &BisectionOptions,
) -> Result<FitResult> {
    check_hyperparameter(s, Estimator::C)?;
    let cap = s + opts.sse_slack;
    let mut diag = FitDiagnostics::default();

    let lse = fit_a(data, 0.0, tol)?;
    diag.absorb(&lse.diagnostics);
    if lse.sse > cap {
        return Err(Error::Infeasible { cap: s, min_sse: lse.sse });
    }

    let mut template = build_problem_b(data, 0.0)?;
    let box_rows = Layout { n: data.len(), d: data.dim(), with_bound: false }.num_convexity_rows()
        ..template.num_constraints();
    let mut solve_at = |u: f64, diag: &mut FitDiagnostics| -> Result<FitResult> {
        template.set_rhs(box_rows.clone(), u);
        let fit = solve_b(data, &template, u, tol)?;
        diag.absorb(&fit.diagnostics);
        Ok(fit)
    };

    let flat = solve_at(0.0, &mut diag)?;
    let (mut lo, mut hi, mut best) = if flat.sse <= cap {
        (0.0, 0.0, flat)
    } else {
        let mut lo = 0.0;
        let mut hi = 1.0;
        loop {
            let fit = solve_at(hi, &mut diag)?;
            if fit.sse <= cap {
                break (lo, hi, fit);
            }
            lo = hi;
            hi *= 2.0;
            if hi > opts.max_upper {
                return Err(Error::Solver(format!(
                    "no gradient bound up to {} meets SSE cap {s} (least-squares SSE {})",
                    opts.max_upper, lse.sse
                )));
            }
        }
    };
    while hi - lo > opts.abs_tol_at(hi) {
        let mid = 0.5 * (lo + hi);
        let fit = solve_at(mid, &mut diag)?;
        if fit.sse <= cap {
            hi = mid;
            best = fit;
        } else {
            lo = mid;
        }
    }
    log::debug!("fit_c: s = {s}, bracket [{lo}, {hi}], {} QP solves", diag.qp_solves);

    diag.solver_bound = None;
    diag.max_slope = best.diagnostics.max_slope;
    diag.pieces_pruned = best.diagnostics.pieces_pruned;
    diag.bracket = Some((lo, hi));
    Ok(FitResult {
        model: MaxAffineModel::new(*best.model.domain(), hi.max(best.model.grad_bound()), best.model.pieces().to_vec())?,
        estimator: Estimator::C,
        hyperparameter: s,
        sse: best.sse,
        grad_bound: hi,
        fitted_values: best.fitted_values,
        diagnostics: diag,
    })
}

/// Mean squared residual of the model at the data points.
pub fn sse(data: &Dataset, model: &MaxAffineModel) -> Result<f64> {
    let mut total = 0.0;
    for (x, y) in data.points().iter().zip(data.responses()) {
        total += (y - model.evaluate(x)?).powi(2);
    }
    Ok(total / data.len() as f64)
}
