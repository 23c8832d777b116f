//! Independent oracles and property checks shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use convreg::estimators::{Dataset, FitResult};
use convreg::qp::{LinearConstraint, QpProblem};
use convreg::MaxAffineModel;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random strictly convex QP `min 1/2 z'Qz + c'z, Az <= b` with a known
/// feasible point, as (problem, dense Q, c, dense A, b).
pub struct RandomQp {
    pub problem: QpProblem,
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

pub fn random_qp(seed: u64) -> RandomQp {
    let mut rng = rng(seed);
    let n = rng.random_range(1..=12);
    let m = rng.random_range(0..=30);
    let l = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let q = &l * l.transpose() + DMatrix::identity(n, n) * 0.1;
    let c = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
    let a = DMatrix::from_fn(m, n, |_, _| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(-2.0..2.0) });
    let z0 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let slack = DVector::from_fn(m, |_, _| if rng.random_bool(0.4) { 0.0 } else { rng.random_range(0.0..1.0) });
    let b = &a * &z0 + slack;
    let rows = (0..m)
        .map(|k| LinearConstraint::from_dense(&a.row(k).iter().copied().collect::<Vec<_>>(), b[k]))
        .collect();
    let q_flat: Vec<f64> = (0..n * n).map(|idx| q[(idx / n, idx % n)]).collect();
    let problem = QpProblem::new(n, q_flat, c.iter().copied().collect(), rows).unwrap();
    RandomQp { problem, q, c, a, b }
}

/// Accelerated projected gradient on the dual
/// `max_{mu >= 0} -1/2 (c + A'mu)' Q^{-1} (c + A'mu) - b'mu`; returns the
/// primal minimizer `z = -Q^{-1}(c + A'mu)` and its objective.
pub fn dual_gradient_oracle(qp: &RandomQp) -> (DVector<f64>, f64) {
    let chol = qp.q.clone().cholesky().expect("Q is positive definite");
    let primal = |mu: &DVector<f64>| -> DVector<f64> { -chol.solve(&(&qp.c + qp.a.transpose() * mu)) };
    let m = qp.a.nrows();
    let z = if m == 0 {
        primal(&DVector::zeros(0))
    } else {
        // Lipschitz constant of the dual gradient: ||A Q^{-1} A'||_2
        let h = &qp.a * chol.solve(&qp.a.transpose());
        let lip = h.symmetric_eigenvalues().max().max(1e-12);
        let step = 1.0 / lip;
        let mut mu = DVector::<f64>::zeros(m);
        let mut y = mu.clone();
        let mut t = 1.0f64;
        for _ in 0..200_000 {
            // dual gradient at y is A z(y) - b
            let grad = &qp.a * primal(&y) - &qp.b;
            let next = (&y + grad * step).map(|v| v.max(0.0));
            let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
            y = &next + (&next - &mu) * ((t - 1.0) / t_next);
            let moved = (&next - &mu).amax();
            mu = next;
            t = t_next;
            if moved < 1e-14 {
                break;
            }
        }
        primal(&mu)
    };
    let objective = 0.5 * z.dot(&(&qp.q * &z)) + qp.c.dot(&z);
    (z, objective)
}

/// Exact 1-D convex least squares for distinct, sorted `x` by enumerating
/// which slope-monotonicity constraints hold with equality.
pub fn convex_lse_enumeration(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n <= 2 {
        return y.to_vec();
    }
    // g_k(f) = (f_{k+2} - f_{k+1})/h_{k+1} - (f_{k+1} - f_k)/h_k >= 0
    let rows: Vec<DVector<f64>> = (0..n - 2)
        .map(|k| {
            let (h0, h1) = (x[k + 1] - x[k], x[k + 2] - x[k + 1]);
            let mut g = DVector::zeros(n);
            g[k] = 1.0 / h0;
            g[k + 1] = -1.0 / h0 - 1.0 / h1;
            g[k + 2] = 1.0 / h1;
            g
        })
        .collect();
    let yv = DVector::from_column_slice(y);
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0u32..(1 << rows.len()) {
        let active: Vec<&DVector<f64>> = (0..rows.len()).filter(|k| mask >> k & 1 == 1).map(|k| &rows[k]).collect();
        // min |f - y|^2 s.t. G f = 0 via the KKT system
        let p = active.len();
        let mut kkt = DMatrix::zeros(n + p, n + p);
        let mut rhs = DVector::zeros(n + p);
        for i in 0..n {
            kkt[(i, i)] = 2.0;
            rhs[i] = 2.0 * y[i];
        }
        for (r, g) in active.iter().enumerate() {
            for i in 0..n {
                kkt[(n + r, i)] = g[i];
                kkt[(i, n + r)] = g[i];
            }
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        let f = sol.rows(0, n).into_owned();
        if rows.iter().all(|g| g.dot(&f) >= -1e-10) {
            let sse = (&f - &yv).norm_squared();
            if best.as_ref().is_none_or(|(s, _)| sse < *s) {
                best = Some((sse, f));
            }
        }
    }
    best.expect("the all-equality face is always feasible").1.iter().copied().collect()
}

/// Smallest `M` on a grid of step `step` for which a convex interpolant of
/// sorted distinct points with all slopes in `[-M, M]` exists. At interior
/// points the slope must lie between the neighbouring secants; at the ends
/// only one secant restricts it.
pub fn min_interpolating_slope(x: &[f64], y: &[f64], step: f64, max: f64) -> Option<f64> {
    let n = x.len();
    let secant: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / (x[k + 1] - x[k])).collect();
    if secant.windows(2).any(|w| w[1] < w[0]) {
        return None;
    }
    let mut m = 0.0;
    while m <= max {
        let ok = (0..n).all(|i| {
            let lo = if i == 0 { f64::NEG_INFINITY } else { secant[i - 1] };
            let hi = if i == n - 1 { f64::INFINITY } else { secant[i] };
            lo.max(-m) <= hi.min(m) + 1e-12
        });
        if ok {
            return Some(m);
        }
        m += step;
    }
    None
}

/// Maximum violations of the properties every fit must satisfy.
#[derive(Debug, Default, Clone, Copy)]
pub struct PropertyReport {
    pub midpoint_convexity: f64,
    pub subgradient_inequality: f64,
    pub interpolation: f64,
    pub slope_bound: f64,
    pub primal_residual: f64,
    pub kkt_residual: f64,
}

impl PropertyReport {
    pub fn merge(&mut self, other: &PropertyReport) {
        self.midpoint_convexity = self.midpoint_convexity.max(other.midpoint_convexity);
        self.subgradient_inequality = self.subgradient_inequality.max(other.subgradient_inequality);
        self.interpolation = self.interpolation.max(other.interpolation);
        self.slope_bound = self.slope_bound.max(other.slope_bound);
        self.primal_residual = self.primal_residual.max(other.primal_residual);
        self.kkt_residual = self.kkt_residual.max(other.kkt_residual);
    }

    /// Subgradients come from pieces active within a relative 1e-8 of the
    /// maximum, so the subgradient inequality carries the same slack.
    pub fn passes(&self) -> bool {
        self.midpoint_convexity <= 1e-9
            && self.subgradient_inequality <= 1e-8
            && self.interpolation <= 1e-8
            && self.slope_bound <= 1e-8
            && self.primal_residual <= 1e-6
            && self.kkt_residual <= 1e-6
    }
}

/// Convexity and subgradient checks on a grid of the domain plus the data
/// points, interpolation at the data points, slope bound, and solver residuals.
pub fn check_fit(data: &Dataset, fit: &FitResult) -> PropertyReport {
    let mut report = check_model(&fit.model, data.points());
    for (x, f) in data.points().iter().zip(&fit.fitted_values) {
        report.interpolation = report.interpolation.max((fit.model.evaluate(x).unwrap() - f).abs());
    }
    report.primal_residual = fit.diagnostics.max_primal_residual;
    report.kkt_residual = fit.diagnostics.max_kkt_residual;
    report
}

pub fn check_model(model: &MaxAffineModel, points: &[Vec<f64>]) -> PropertyReport {
    let mut report = PropertyReport::default();
    let dom = model.domain();
    let scale = 1.0 + model.pieces().iter().map(|p| p.value.abs()).fold(0.0, f64::max);
    let mut probe: Vec<Vec<f64>> = points.to_vec();
    if dom.d == 1 {
        probe.extend((0..=40).map(|k| vec![dom.a + dom.width() * k as f64 / 40.0]));
    }
    let values: Vec<f64> = probe.iter().map(|x| model.evaluate(x).unwrap()).collect();
    let grads: Vec<Vec<f64>> = probe.iter().map(|x| model.subgradient(x).unwrap()).collect();
    for i in 0..probe.len() {
        for j in 0..probe.len() {
            let mid: Vec<f64> = probe[i].iter().zip(&probe[j]).map(|(a, b)| 0.5 * (a + b)).collect();
            let gap = model.evaluate(&mid).unwrap() - 0.5 * (values[i] + values[j]);
            report.midpoint_convexity = report.midpoint_convexity.max(gap / scale);
            let lin: f64 = values[i]
                + grads[i].iter().zip(probe[j].iter().zip(&probe[i])).map(|(g, (a, b))| g * (a - b)).sum::<f64>();
            report.subgradient_inequality = report.subgradient_inequality.max((lin - values[j]) / scale);
        }
    }
    report.slope_bound = (model.j_inf() - model.grad_bound()).max(0.0);
    report
}

/// `n` points uniform on `[0, 1]`, sorted and distinct, and responses from `f` plus uniform noise.
pub fn random_1d_dataset(seed: u64, n: usize, noise: f64, f: impl Fn(f64) -> f64) -> Dataset {
    let mut rng = rng(seed);
    let mut xs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let ys: Vec<f64> = xs.iter().map(|&x| f(x) + noise * rng.random_range(-1.0..1.0)).collect();
    Dataset::from_1d(&xs, &ys, 0.0, 1.0).unwrap()
}
