//! Data-driven choice of the SSE cap `s`, the gradient bound `u` and the
//! penalty weight `lambda`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimators::{fit_a, fit_c, Dataset};
use crate::qp::SolverTolerances;

/// Penalty weights tried by cross-validation unless told otherwise.
pub const DEFAULT_LAMBDA_CANDIDATES: [f64; 8] = [0.0, 1e-10, 1e-6, 1e-4, 1e-2, 1.0, 1e2, 1e6];

#[derive(Debug, Clone, PartialEq)]
pub enum CellWeights {
    /// Simple average of the cell variances.
    Uniform,
    /// Probability of each cell, indexed like [`PartitionSpec::cell_of`].
    Explicit(Vec<f64>),
}

/// `r` equal subintervals per axis, `r^d` cells in total.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    pub r: usize,
    pub weights: CellWeights,
}

impl PartitionSpec {
    pub fn uniform(r: usize) -> Result<Self> {
        let spec = PartitionSpec { r, weights: CellWeights::Uniform };
        spec.validate(1)?;
        Ok(spec)
    }

    fn validate(&self, d: usize) -> Result<()> {
        if self.r == 0 {
            return Err(Error::invalid("partition needs r >= 1"));
        }
        if let CellWeights::Explicit(w) = &self.weights {
            let cells = self.num_cells(d)?;
            if w.len() != cells {
                return Err(Error::Dimension { expected: cells, got: w.len() });
            }
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::invalid("cell weights must be nonnegative"));
            }
            let total: f64 = w.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("cell weights sum to {total}, expected 1")));
            }
        }
        Ok(())
    }

    pub fn num_cells(&self, d: usize) -> Result<usize> {
        u32::try_from(d)
            .ok()
            .and_then(|d| self.r.checked_pow(d))
            .ok_or_else(|| Error::invalid(format!("{}^{d} cells overflow", self.r)))
    }

    /// Cell index of `x`: axis `k` contributes `idx_k * r^k`; the right
    /// domain edge belongs to the last cell.
    pub fn cell_of(&self, x: &[f64], a: f64, b: f64) -> usize {
        let mut cell = 0;
        let mut stride = 1;
        for &v in x {
            let t = ((v - a) / (b - a) * self.r as f64).floor();
            let idx = (t.max(0.0) as usize).min(self.r - 1);
            cell += idx * stride;
            stride *= self.r;
        }
        cell
    }
}

/// Unbiased sample variance; `None` below two values.
pub fn sample_variance(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Some(values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64)
}

/// Noise-variance estimate from the responses' variance within partition
/// cells. Cells with fewer than two points are skipped and the remaining
/// weights renormalized.
pub fn estimate_s_partition(data: &Dataset, partition: &PartitionSpec) -> Result<f64> {
    let dom = data.domain();
    partition.validate(dom.d)?;
    let mut cells: Vec<Vec<f64>> = vec![Vec::new(); partition.num_cells(dom.d)?];
    for (x, y) in data.points().iter().zip(data.responses()) {
        cells[partition.cell_of(x, dom.a, dom.b)].push(*y);
    }
    let mut weighted = 0.0;
    let mut total_weight = 0.0;
    for (j, ys) in cells.iter().enumerate() {
        let Some(v) = sample_variance(ys) else { continue };
        let w = match &partition.weights {
            CellWeights::Uniform => 1.0,
            CellWeights::Explicit(w) => w[j],
        };
        weighted += w * v;
        total_weight += w;
    }
    if total_weight <= 0.0 {
        return Err(Error::Estimation("no partition cell with positive weight holds two or more points".into()));
    }
    Ok(weighted / total_weight)
}

/// Noise-variance estimate from replicated responses: the `tau`-weighted
/// mean of within-group sample variances.
pub fn estimate_s_replication<F>(groups: &[(Vec<f64>, Vec<f64>)], tau: F) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    if groups.is_empty() {
        return Err(Error::Estimation("no replication groups".into()));
    }
    let mut weighted = 0.0;
    let mut total_weight = 0.0;
    for (i, (x, ys)) in groups.iter().enumerate() {
        let v = sample_variance(ys)
            .ok_or_else(|| Error::Estimation(format!("group {i} has fewer than two replications")))?;
        let w = tau(x);
        if !(w.is_finite() && w >= 0.0) {
            return Err(Error::invalid(format!("density at group {i} is {w}")));
        }
        weighted += w * v;
        total_weight += w;
    }
    if total_weight <= 0.0 {
        return Err(Error::Estimation("density vanishes at every group".into()));
    }
    Ok(weighted / total_weight)
}

/// `sigma2 + c n^{-1/2} sqrt(ln n)`.
pub fn theoretical_s(sigma2: f64, c: f64, n: usize) -> Result<f64> {
    if !(sigma2.is_finite() && sigma2 >= 0.0 && c.is_finite() && c >= 0.0) {
        return Err(Error::invalid(format!("need sigma2 >= 0 and c >= 0, got {sigma2} and {c}")));
    }
    if n < 2 {
        return Err(Error::invalid("theoretical s needs n >= 2"));
    }
    let n = n as f64;
    Ok(sigma2 + c * n.ln().sqrt() / n.sqrt())
}

/// Gradient bound for Problem B: `J_inf` of the Problem-C fit at `s`.
pub fn select_u_from_c(data: &Dataset, s: f64, tol: &SolverTolerances) -> Result<f64> {
    Ok(fit_c(data, s, tol)?.model.j_inf())
}

/// `n^{-0.8}`.
pub fn lambda_schedule(n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("lambda schedule needs n >= 1"));
    }
    Ok((n as f64).powf(-0.8))
}

/// Cells per axis used for the benchmark's `s` estimate: 8, 10 and 16 at
/// n = 120, 300 and 400, otherwise `ceil(n / 25)` clamped to `[2, n / 2]`.
pub fn default_partition_cells(n: usize) -> usize {
    match n {
        120 => 8,
        300 => 10,
        400 => 16,
        _ => n.div_ceil(25).max(2).min((n / 2).max(1)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvOutcome {
    pub lambda: f64,
    pub index: usize,
    /// `CV(lambda)` for every candidate, in candidate order.
    pub curve: Vec<f64>,
}

/// Fold of every observation: seeded shuffle, then contiguous blocks whose
/// sizes differ by at most one (larger blocks first).
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::invalid("cross-validation needs at least two folds"));
    }
    if n < folds {
        return Err(Error::invalid(format!("{n} observations cannot fill {folds} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![0; n];
    let mut pos = 0;
    for k in 0..folds {
        let size = n / folds + usize::from(k < n % folds);
        for &i in &order[pos..pos + size] {
            assignment[i] = k;
        }
        pos += size;
    }
    Ok(assignment)
}

/// K-fold cross-validation of the Problem-A penalty weight:
/// `CV(lambda) = (1/K) sum_k sum_{i in fold k} (y_i - f^{[k]}(X_i))^2`.
/// The smallest score wins, the earliest candidate among ties.
pub fn cross_validate_lambda(
    data: &Dataset,
    candidates: &[f64],
    folds: usize,
    seed: u64,
    tol: &SolverTolerances,
) -> Result<CvOutcome> {
    if candidates.is_empty() {
        return Err(Error::invalid("no penalty candidates"));
    }
    let assignment = fold_assignment(data.len(), folds, seed)?;
    let splits: Vec<(Dataset, Vec<usize>)> = (0..folds)
        .map(|k| {
            let (held, train): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|&i| assignment[i] == k);
            Ok((data.subset(&train)?, held))
        })
        .collect::<Result<_>>()?;

    let jobs: Vec<(usize, usize)> = (0..candidates.len()).flat_map(|c| (0..folds).map(move |k| (c, k))).collect();
    let errors = jobs
        .par_iter()
        .map(|&(c, k)| {
            let (train, held) = &splits[k];
            let fit = fit_a(train, candidates[c], tol)?;
            let mut sq = 0.0;
            for &i in held {
                sq += (data.responses()[i] - fit.model.evaluate(&data.points()[i])?).powi(2);
            }
            Ok(sq)
        })
        .collect::<Result<Vec<f64>>>()?;

    let curve: Vec<f64> =
        errors.chunks(folds).map(|per_fold| per_fold.iter().sum::<f64>() / folds as f64).collect();
    let mut index = 0;
    for (c, &score) in curve.iter().enumerate() {
        if score < curve[index] {
            index = c;
        }
    }
    Ok(CvOutcome { lambda: candidates[index], index, curve })
}
