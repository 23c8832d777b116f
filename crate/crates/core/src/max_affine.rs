//! Max-affine (piecewise-linear convex) functions.
//!
//! Every estimator in this crate reports its fit as the pointwise maximum of
//! affine pieces anchored at the training points,
//! `x -> max_i { value_i + slope_i^T (x - anchor_i) }`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative activation tolerance: a piece is active at `x` when its affine
/// value is within `ACTIVE_REL_TOL * (1 + |max|)` of the maximum.
pub const ACTIVE_REL_TOL: f64 = 1e-8;

/// The hyperrectangle `[a, b]^d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub a: f64,
    pub b: f64,
    pub d: usize,
}

impl Domain {
    pub fn new(a: f64, b: f64, d: usize) -> Result<Self> {
        let domain = Domain { a, b, d };
        domain.validate()?;
        Ok(domain)
    }

    fn validate(&self) -> Result<()> {
        if !(self.a.is_finite() && self.b.is_finite()) || self.a >= self.b {
            return Err(Error::invalid(format!(
                "domain bounds must be finite with a < b, got [{}, {}]",
                self.a, self.b
            )));
        }
        if self.d == 0 {
            return Err(Error::invalid("domain dimension must be at least 1"));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.b - self.a
    }

    /// Membership test with an absolute slack on every coordinate.
    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        x.len() == self.d && x.iter().all(|&v| v >= self.a - tol && v <= self.b + tol)
    }
}

/// One affine piece `x -> value + slope^T (x - anchor)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Piece {
    pub anchor: Vec<f64>,
    pub value: f64,
    pub slope: Vec<f64>,
}

impl Piece {
    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut acc = self.value;
        for ((s, xi), ai) in self.slope.iter().zip(x).zip(&self.anchor) {
            acc += s * (xi - ai);
        }
        acc
    }

    /// Constant term of the piece written as `intercept + slope^T x`.
    pub fn intercept(&self) -> f64 {
        self.value - dot(&self.slope, &self.anchor)
    }
}

/// A fitted piecewise-linear convex function together with its gradient bound.
///
/// Construction validates the structural invariants (nonempty, consistent
/// dimensions, finite numbers, anchors inside the domain). The numerical
/// invariants that depend on a solver tolerance are checked with
/// [`MaxAffineModel::invariant_violation`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModel")]
pub struct MaxAffineModel {
    domain: Domain,
    grad_bound: f64,
    pieces: Vec<Piece>,
}

#[derive(Deserialize)]
struct RawModel {
    domain: Domain,
    grad_bound: f64,
    pieces: Vec<Piece>,
}

impl TryFrom<RawModel> for MaxAffineModel {
    type Error = Error;

    fn try_from(raw: RawModel) -> Result<Self> {
        MaxAffineModel::new(raw.domain, raw.grad_bound, raw.pieces)
    }
}

/// Slack allowed when checking that anchors lie in the domain.
const ANCHOR_TOL: f64 = 1e-12;

impl MaxAffineModel {
    pub fn new(domain: Domain, grad_bound: f64, pieces: Vec<Piece>) -> Result<Self> {
        domain.validate().map_err(|e| Error::InvalidModel(e.to_string()))?;
        if pieces.is_empty() {
            return Err(Error::InvalidModel("model has no pieces".into()));
        }
        if !(grad_bound.is_finite() && grad_bound >= 0.0) {
            return Err(Error::InvalidModel(format!(
                "gradient bound must be finite and nonnegative, got {grad_bound}"
            )));
        }
        let tol = ANCHOR_TOL * (1.0 + domain.a.abs().max(domain.b.abs()));
        for (i, p) in pieces.iter().enumerate() {
            if p.anchor.len() != domain.d || p.slope.len() != domain.d {
                return Err(Error::InvalidModel(format!(
                    "piece {i} has dimension {}/{} but domain has d = {}",
                    p.anchor.len(),
                    p.slope.len(),
                    domain.d
                )));
            }
            let finite = p.value.is_finite()
                && p.anchor.iter().all(|v| v.is_finite())
                && p.slope.iter().all(|v| v.is_finite());
            if !finite {
                return Err(Error::InvalidModel(format!("piece {i} has non-finite entries")));
            }
            if !domain.contains(&p.anchor, tol) {
                return Err(Error::InvalidModel(format!("anchor of piece {i} lies outside the domain")));
            }
        }
        Ok(MaxAffineModel { domain, grad_bound, pieces })
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn grad_bound(&self) -> f64 {
        self.grad_bound
    }

    pub fn pieces(&self) -> &[Piece] {
        &self.pieces
    }

    pub fn dim(&self) -> usize {
        self.domain.d
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.domain.d {
            return Err(Error::Dimension { expected: self.domain.d, got: x.len() });
        }
        Ok(())
    }

    /// Index of the maximizing piece (lowest index among exact ties) and the maximum.
    fn argmax(&self, x: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, p) in self.pieces.iter().enumerate() {
            let v = p.eval(x);
            if v > best.1 {
                best = (i, v);
            }
        }
        best
    }

    /// `max_i { value_i + slope_i^T (x - anchor_i) }`. Points outside the
    /// domain are evaluated by the same formula.
    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.argmax(x).1)
    }

    /// Indices of the pieces active at `x` under [`ACTIVE_REL_TOL`], in piece order.
    pub fn active_pieces(&self, x: &[f64]) -> Result<Vec<usize>> {
        self.check_dim(x)?;
        let values: Vec<f64> = self.pieces.iter().map(|p| p.eval(x)).collect();
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let cutoff = max - ACTIVE_REL_TOL * (1.0 + max.abs());
        Ok(values
            .iter()
            .enumerate()
            .filter(|(_, &v)| v >= cutoff)
            .map(|(i, _)| i)
            .collect())
    }

    /// Slope of the lowest-index active piece.
    pub fn subgradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let active = self.active_pieces(x)?;
        Ok(self.pieces[active[0]].slope.clone())
    }

    /// Slopes of all active pieces; the subdifferential at `x` is their convex hull.
    pub fn subdifferential_extremes(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .active_pieces(x)?
            .into_iter()
            .map(|i| self.pieces[i].slope.clone())
            .collect())
    }

    /// `J_inf` seminorm, the largest sup-norm of any piece slope.
    ///
    /// This equals the essential supremum of the gradient sup-norm only when
    /// every piece is active on a set of positive measure; fitted models are
    /// pruned to satisfy that before they are reported.
    pub fn j_inf(&self) -> f64 {
        self.pieces.iter().map(|p| sup_norm(&p.slope)).fold(0.0, f64::max)
    }

    /// Largest violation of the model invariants: slopes exceeding the
    /// gradient bound and anchor-position convexity
    /// `value_i >= value_j + slope_j^T (anchor_i - anchor_j)`.
    pub fn invariant_violation(&self) -> f64 {
        let mut worst = (self.j_inf() - self.grad_bound).max(0.0);
        for pi in &self.pieces {
            for pj in &self.pieces {
                worst = worst.max(pj.eval(&pi.anchor) - pi.value);
            }
        }
        worst
    }

    /// Same model with every value and slope multiplied by `t`.
    pub fn scaled(&self, t: f64) -> Result<Self> {
        if !(t.is_finite() && t > 0.0) {
            return Err(Error::invalid(format!("scale factor must be positive, got {t}")));
        }
        let pieces = self
            .pieces
            .iter()
            .map(|p| Piece {
                anchor: p.anchor.clone(),
                value: p.value * t,
                slope: p.slope.iter().map(|s| s * t).collect(),
            })
            .collect();
        MaxAffineModel::new(self.domain, self.grad_bound * t, pieces)
    }

    /// Keep only the pieces at the given (sorted, distinct) indices.
    pub fn retain_pieces(&self, keep: &[usize]) -> Result<Self> {
        let pieces = keep.iter().map(|&i| self.pieces[i].clone()).collect();
        MaxAffineModel::new(self.domain, self.grad_bound, pieces)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}
