//! Dense convex quadratic programming over linear inequality constraints.
//!
//! Solves `min 1/2 z^T Q z + c^T z  s.t.  row_k^T z <= rhs_k` with `Q`
//! symmetric positive semidefinite (possibly singular).
//!
//! The convexity constraints of the regression programs number `n(n-1)`,
//! almost all of them inactive at the optimum, so [`solve_qp`] works on a
//! growing working set: it solves the program restricted to the working rows
//! with the Clarabel interior-point method, scans every remaining row for
//! violations, adds the most violated ones, and repeats until the full
//! constraint set is satisfied. Optimality is then certified on the *full*
//! problem by the primal and KKT residuals stored in [`QpSolution`].

use std::fmt::Write as _;
use std::io::Write;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};

use crate::error::{Error, Result};

/// Sparse linear inequality `sum_k coeff_k * z[index_k] <= rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearConstraint {
    coeffs: Vec<(usize, f64)>,
    pub rhs: f64,
}

impl LinearConstraint {
    /// Duplicate indices are summed and exact zeros dropped.
    pub fn new(mut coeffs: Vec<(usize, f64)>, rhs: f64) -> Self {
        coeffs.sort_by_key(|&(i, _)| i);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(coeffs.len());
        for (i, v) in coeffs {
            match merged.last_mut() {
                Some(last) if last.0 == i => last.1 += v,
                _ => merged.push((i, v)),
            }
        }
        merged.retain(|&(_, v)| v != 0.0);
        LinearConstraint { coeffs: merged, rhs }
    }

    pub fn from_dense(row: &[f64], rhs: f64) -> Self {
        let coeffs = row
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, &v)| (i, v))
            .collect();
        LinearConstraint { coeffs, rhs }
    }

    pub fn coeffs(&self) -> &[(usize, f64)] {
        &self.coeffs
    }

    #[inline]
    pub fn lhs(&self, z: &[f64]) -> f64 {
        self.coeffs.iter().map(|&(i, v)| v * z[i]).sum()
    }

    /// `row^T z - rhs`; positive means violated.
    #[inline]
    pub fn excess(&self, z: &[f64]) -> f64 {
        self.lhs(z) - self.rhs
    }
}

/// Canonical convex QP.
#[derive(Debug, Clone)]
pub struct QpProblem {
    num_vars: usize,
    /// Row-major `num_vars x num_vars`.
    quadratic: Vec<f64>,
    linear: Vec<f64>,
    constraints: Vec<LinearConstraint>,
    initial_working_set: Option<Vec<usize>>,
}

/// Smallest admissible eigenvalue of the quadratic term.
const PSD_TOL: f64 = 1e-8;
const SYMMETRY_TOL: f64 = 1e-12;

impl QpProblem {
    /// General constructor; verifies symmetry and `lambda_min(Q) >= -1e-8`.
    pub fn new(
        num_vars: usize,
        quadratic: Vec<f64>,
        linear: Vec<f64>,
        constraints: Vec<LinearConstraint>,
    ) -> Result<Self> {
        let problem = Self::unchecked(num_vars, quadratic, linear, constraints)?;
        let q = &problem.quadratic;
        for i in 0..num_vars {
            for j in 0..i {
                let (a, b) = (q[i * num_vars + j], q[j * num_vars + i]);
                if (a - b).abs() > SYMMETRY_TOL * (1.0 + a.abs().max(b.abs())) {
                    return Err(Error::invalid(format!("quadratic term not symmetric at ({i}, {j})")));
                }
            }
        }
        if !is_psd(q, num_vars) {
            return Err(Error::invalid("quadratic term is not positive semidefinite"));
        }
        Ok(problem)
    }

    /// Diagonal quadratic term; nonnegative diagonal is its own PSD certificate.
    pub fn with_diagonal(
        diagonal: &[f64],
        linear: Vec<f64>,
        constraints: Vec<LinearConstraint>,
    ) -> Result<Self> {
        let n = diagonal.len();
        if let Some(v) = diagonal.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::invalid(format!("diagonal quadratic entry {v} is not >= 0")));
        }
        let mut quadratic = vec![0.0; n * n];
        for (i, &v) in diagonal.iter().enumerate() {
            quadratic[i * n + i] = v;
        }
        Self::unchecked(n, quadratic, linear, constraints)
    }

    fn unchecked(
        num_vars: usize,
        quadratic: Vec<f64>,
        linear: Vec<f64>,
        constraints: Vec<LinearConstraint>,
    ) -> Result<Self> {
        if quadratic.len() != num_vars * num_vars {
            return Err(Error::Dimension { expected: num_vars * num_vars, got: quadratic.len() });
        }
        if linear.len() != num_vars {
            return Err(Error::Dimension { expected: num_vars, got: linear.len() });
        }
        if quadratic.iter().chain(&linear).any(|v| !v.is_finite()) {
            return Err(Error::invalid("objective has non-finite entries"));
        }
        for (k, c) in constraints.iter().enumerate() {
            if !c.rhs.is_finite() || c.coeffs.iter().any(|&(i, v)| i >= num_vars || !v.is_finite()) {
                return Err(Error::invalid(format!("constraint {k} is malformed")));
            }
        }
        Ok(QpProblem { num_vars, quadratic, linear, constraints, initial_working_set: None })
    }

    /// Rows the working-set loop starts from. Rows outside the hint are still
    /// enforced; they enter the working set once violated.
    pub fn with_working_set_hint(mut self, rows: Vec<usize>) -> Self {
        self.initial_working_set = Some(rows);
        self
    }

    /// Overwrites the right-hand side of a contiguous block of rows.
    pub(crate) fn set_rhs(&mut self, rows: std::ops::Range<usize>, rhs: f64) {
        for c in &mut self.constraints[rows] {
            c.rhs = rhs;
        }
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn num_constraints(&self) -> usize {
        self.constraints.len()
    }

    pub fn quadratic(&self) -> &[f64] {
        &self.quadratic
    }

    pub fn linear(&self) -> &[f64] {
        &self.linear
    }

    pub fn constraints(&self) -> &[LinearConstraint] {
        &self.constraints
    }

    pub fn objective(&self, z: &[f64]) -> f64 {
        let qz = self.quadratic_times(z);
        0.5 * dot(z, &qz) + dot(&self.linear, z)
    }

    fn quadratic_times(&self, z: &[f64]) -> Vec<f64> {
        let n = self.num_vars;
        (0..n)
            .map(|i| {
                let row = &self.quadratic[i * n..(i + 1) * n];
                row.iter().zip(z).filter(|(q, _)| **q != 0.0).map(|(q, x)| q * x).sum()
            })
            .collect()
    }

    /// Writes the plain-text debug format:
    ///
    /// ```text
    /// QP <num_vars> <num_constraints>
    /// <Q row 1>            (num_vars numbers)
    /// ...
    /// <c>                  (num_vars numbers)
    /// <row 1> <rhs 1>      (num_vars + 1 numbers)
    /// ...
    /// ```
    pub fn write_debug_text<W: Write>(&self, mut out: W) -> Result<()> {
        let n = self.num_vars;
        writeln!(out, "QP {} {}", n, self.constraints.len())?;
        let mut line = String::new();
        let mut emit = |out: &mut W, values: &mut dyn Iterator<Item = f64>| -> Result<()> {
            line.clear();
            for (k, v) in values.enumerate() {
                if k > 0 {
                    line.push(' ');
                }
                write!(line, "{v:e}").expect("write to String");
            }
            writeln!(out, "{line}")?;
            Ok(())
        };
        for i in 0..n {
            emit(&mut out, &mut self.quadratic[i * n..(i + 1) * n].iter().copied())?;
        }
        emit(&mut out, &mut self.linear.iter().copied())?;
        let mut dense = vec![0.0; n];
        for c in &self.constraints {
            dense.iter_mut().for_each(|v| *v = 0.0);
            for &(i, v) in &c.coeffs {
                dense[i] = v;
            }
            emit(&mut out, &mut dense.iter().copied().chain(std::iter::once(c.rhs)))?;
        }
        Ok(())
    }

    pub fn parse_debug_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::invalid("empty QP dump"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 3 || fields[0] != "QP" {
            return Err(Error::invalid(format!("bad QP dump header {header:?}")));
        }
        let parse_usize = |s: &str| s.parse::<usize>().map_err(|e| Error::invalid(e.to_string()));
        let n = parse_usize(fields[1])?;
        let m = parse_usize(fields[2])?;
        let mut numbers = |expected: usize| -> Result<Vec<f64>> {
            let line = lines.next().ok_or_else(|| Error::invalid("truncated QP dump"))?;
            let row = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| Error::invalid(e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            if row.len() != expected {
                return Err(Error::Dimension { expected, got: row.len() });
            }
            Ok(row)
        };
        let mut quadratic = Vec::with_capacity(n * n);
        for _ in 0..n {
            quadratic.extend(numbers(n)?);
        }
        let linear = numbers(n)?;
        let mut constraints = Vec::with_capacity(m);
        for _ in 0..m {
            let row = numbers(n + 1)?;
            constraints.push(LinearConstraint::from_dense(&row[..n], row[n]));
        }
        QpProblem::new(n, quadratic, linear, constraints)
    }
}

/// Cholesky of `Q + PSD_TOL * I`; succeeds exactly when `lambda_min(Q) > -PSD_TOL`.
fn is_psd(q: &[f64], n: usize) -> bool {
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut diag = q[j * n + j] + PSD_TOL;
        for k in 0..j {
            diag -= l[j * n + k] * l[j * n + k];
        }
        if diag <= 0.0 {
            return false;
        }
        let ljj = diag.sqrt();
        l[j * n + j] = ljj;
        for i in j + 1..n {
            let mut s = q[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / ljj;
        }
    }
    true
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverTolerances {
    pub feas_tol: f64,
    pub kkt_tol: f64,
    /// Budget on interior-point iterations summed over working-set rounds.
    pub max_iterations: usize,
}

impl Default for SolverTolerances {
    fn default() -> Self {
        SolverTolerances { feas_tol: 1e-6, kkt_tol: 1e-6, max_iterations: 200_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub z: Vec<f64>,
    pub objective: f64,
    pub status: QpStatus,
    /// `max_k max(row_k^T z - rhs_k, 0)` over all constraints.
    pub primal_residual: f64,
    /// Max of `|Q z + c + A^T mu|_inf` and `max_k mu_k |slack_k|`.
    pub stationarity_residual: f64,
    /// One multiplier per constraint (zero outside the final working set).
    pub multipliers: Vec<f64>,
    pub iterations: usize,
    /// Objective of each working-set relaxation. Every round adds rows, so
    /// the sequence is a nondecreasing lower bound on the optimum.
    pub relaxation_objectives: Vec<f64>,
}

/// Rows kept in the first working set when the problem gives no hint.
const FULL_WORKING_SET_LIMIT: usize = 4096;

struct InnerSettings {
    gap: f64,
    feas: f64,
}

const ESCALATION: [InnerSettings; 2] = [
    InnerSettings { gap: 1e-10, feas: 1e-11 },
    InnerSettings { gap: 1e-12, feas: 1e-12 },
];

/// Solves a convex QP. Deterministic for identical inputs.
pub fn solve_qp(problem: &QpProblem, tol: &SolverTolerances) -> Result<QpSolution> {
    let mut last = None;
    for settings in &ESCALATION {
        let sol = solve_with(problem, tol, settings)?;
        if sol.status != QpStatus::Optimal
            || (sol.primal_residual <= tol.feas_tol && sol.stationarity_residual <= tol.kkt_tol)
        {
            return Ok(sol);
        }
        log::debug!(
            "QP residuals {:.2e}/{:.2e} above tolerance, re-solving tighter",
            sol.primal_residual,
            sol.stationarity_residual
        );
        last = Some(sol);
    }
    // Could not certify within tolerance: report as budget exhausted.
    let mut sol = last.expect("at least one escalation step");
    sol.status = QpStatus::MaxIterations;
    Ok(sol)
}

fn solve_with(problem: &QpProblem, tol: &SolverTolerances, inner: &InnerSettings) -> Result<QpSolution> {
    let n = problem.num_vars;
    let m = problem.constraints.len();
    let mut in_working = vec![false; m];
    let mut working: Vec<usize> = match &problem.initial_working_set {
        Some(hint) => hint.clone(),
        None if m <= FULL_WORKING_SET_LIMIT => (0..m).collect(),
        None => Vec::new(),
    };
    working.retain(|&k| {
        let fresh = k < m && !in_working[k];
        if fresh {
            in_working[k] = true;
        }
        fresh
    });

    let p_upper = upper_triangle_csc(&problem.quadratic, n);
    // Rows violated by less than this are within the certified tolerance;
    // adding them would chase interior-point round-off.
    let add_tol = 1e-2 * tol.feas_tol;
    let add_cap = n.max(100);
    let mut iterations = 0usize;
    let mut relaxation_objectives = Vec::new();

    loop {
        let remaining = tol.max_iterations.saturating_sub(iterations).max(1);
        let round = solve_working_set(problem, &p_upper, &working, inner, remaining)?;
        iterations += round.iterations;
        let mut z = round.x;
        let mut mu_working = round.z;

        match round.status {
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                return Ok(finish(problem, z, &working, &mu_working, QpStatus::Infeasible, iterations, relaxation_objectives));
            }
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
                return Err(Error::Solver("objective is unbounded below".into()));
            }
            SolverStatus::MaxIterations | SolverStatus::MaxTime => {
                return Ok(finish(problem, z, &working, &mu_working, QpStatus::MaxIterations, iterations, relaxation_objectives));
            }
            _ => {}
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Solver(format!("interior-point method stopped with {:?}", round.status)));
        }
        if !matches!(round.status, SolverStatus::Solved | SolverStatus::AlmostSolved) {
            log::debug!("inner solve ended with {:?}; relying on residual certificate", round.status);
        }
        relaxation_objectives.push(problem.objective(&z));

        let mut violated: Vec<(f64, usize)> = problem
            .constraints
            .iter()
            .enumerate()
            .filter(|(k, _)| !in_working[*k])
            .filter_map(|(k, c)| {
                let e = c.excess(&z);
                (e > add_tol).then_some((e, k))
            })
            .collect();
        if violated.is_empty() {
            // Clamp multipliers into the dual cone.
            mu_working.iter_mut().for_each(|v| *v = v.max(0.0));
            let status = if iterations >= tol.max_iterations { QpStatus::MaxIterations } else { QpStatus::Optimal };
            z.iter_mut().for_each(|v| {
                if *v == -0.0 {
                    *v = 0.0
                }
            });
            return Ok(finish(problem, z, &working, &mu_working, status, iterations, relaxation_objectives));
        }
        if iterations >= tol.max_iterations {
            return Ok(finish(problem, z, &working, &mu_working, QpStatus::MaxIterations, iterations, relaxation_objectives));
        }
        violated.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, k) in violated.iter().take(add_cap) {
            in_working[k] = true;
            working.push(k);
        }
    }
}

fn finish(
    problem: &QpProblem,
    z: Vec<f64>,
    working: &[usize],
    mu_working: &[f64],
    status: QpStatus,
    iterations: usize,
    relaxation_objectives: Vec<f64>,
) -> QpSolution {
    let mut multipliers = vec![0.0; problem.constraints.len()];
    for (&k, &mu) in working.iter().zip(mu_working) {
        multipliers[k] = mu.max(0.0);
    }
    let primal_residual = check_feasible_unchecked(problem, &z);
    let stationarity_residual = kkt_residual(problem, &z, &multipliers);
    QpSolution {
        objective: problem.objective(&z),
        z,
        status,
        primal_residual,
        stationarity_residual,
        multipliers,
        iterations,
        relaxation_objectives,
    }
}

fn kkt_residual(problem: &QpProblem, z: &[f64], multipliers: &[f64]) -> f64 {
    let mut grad = problem.quadratic_times(z);
    for (g, c) in grad.iter_mut().zip(&problem.linear) {
        *g += c;
    }
    let mut complementarity: f64 = 0.0;
    for (c, &mu) in problem.constraints.iter().zip(multipliers) {
        if mu == 0.0 {
            continue;
        }
        for &(i, v) in &c.coeffs {
            grad[i] += mu * v;
        }
        complementarity = complementarity.max(mu * c.excess(z).abs());
    }
    grad.iter().fold(complementarity, |m, g| m.max(g.abs()))
}

/// Largest constraint violation `max_k max(row_k^T z - rhs_k, 0)`.
pub fn check_feasible(problem: &QpProblem, z: &[f64]) -> Result<f64> {
    if z.len() != problem.num_vars {
        return Err(Error::Dimension { expected: problem.num_vars, got: z.len() });
    }
    Ok(check_feasible_unchecked(problem, z))
}

fn check_feasible_unchecked(problem: &QpProblem, z: &[f64]) -> f64 {
    problem.constraints.iter().fold(0.0, |m, c| m.max(c.excess(z)))
}

struct RoundResult {
    x: Vec<f64>,
    z: Vec<f64>,
    status: SolverStatus,
    iterations: usize,
}

fn solve_working_set(
    problem: &QpProblem,
    p_upper: &CscMatrix<f64>,
    working: &[usize],
    inner: &InnerSettings,
    max_iter: usize,
) -> Result<RoundResult> {
    let n = problem.num_vars;
    // An empty working set still needs one (trivial) row.
    let placeholder = [LinearConstraint { coeffs: Vec::new(), rhs: 1.0 }];
    let rows: Vec<&LinearConstraint> = if working.is_empty() {
        placeholder.iter().collect()
    } else {
        working.iter().map(|&k| &problem.constraints[k]).collect()
    };
    let a = rows_to_csc(&rows, n);
    let b: Vec<f64> = rows.iter().map(|c| c.rhs).collect();
    let cones = [SupportedConeT::NonnegativeConeT(rows.len())];
    let settings = DefaultSettings {
        verbose: false,
        max_iter: max_iter.min(u32::MAX as usize) as u32,
        tol_gap_abs: inner.gap,
        tol_gap_rel: inner.gap,
        tol_feas: inner.feas,
        tol_ktratio: 1e-8,
        ..DefaultSettings::default()
    };
    let mut solver = DefaultSolver::new(p_upper, &problem.linear, &a, &b, &cones, settings)
        .map_err(|e| Error::Solver(format!("{e:?}")))?;
    solver.solve();
    let sol = &solver.solution;
    let mut z = sol.z.clone();
    if working.is_empty() {
        z.clear();
    }
    Ok(RoundResult {
        x: sol.x.clone(),
        z,
        status: sol.status,
        iterations: sol.iterations as usize,
    })
}

fn upper_triangle_csc(q: &[f64], n: usize) -> CscMatrix<f64> {
    let mut colptr = Vec::with_capacity(n + 1);
    let mut rowval = Vec::new();
    let mut nzval = Vec::new();
    colptr.push(0);
    for j in 0..n {
        for i in 0..=j {
            let v = q[i * n + j];
            if v != 0.0 {
                rowval.push(i);
                nzval.push(v);
            }
        }
        colptr.push(rowval.len());
    }
    CscMatrix::new(n, n, colptr, rowval, nzval)
}

fn rows_to_csc(rows: &[&LinearConstraint], n: usize) -> CscMatrix<f64> {
    let mut counts = vec![0usize; n + 1];
    for c in rows {
        for &(j, _) in &c.coeffs {
            counts[j + 1] += 1;
        }
    }
    for j in 0..n {
        counts[j + 1] += counts[j];
    }
    let colptr = counts.clone();
    let nnz = colptr[n];
    let mut rowval = vec![0usize; nnz];
    let mut nzval = vec![0.0; nnz];
    let mut next = counts;
    for (r, c) in rows.iter().enumerate() {
        for &(j, v) in &c.coeffs {
            let slot = next[j];
            rowval[slot] = r;
            nzval[slot] = v;
            next[j] += 1;
        }
    }
    CscMatrix::new(rows.len(), n, colptr, rowval, nzval)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
