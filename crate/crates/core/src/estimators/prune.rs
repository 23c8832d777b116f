//! Removal of pieces that never attain the maximum on the domain.
//!
//! A fitted model has one piece per observation, and most of them are
//! duplicates or only touch the envelope at a single point. Dropping them
//! leaves the function unchanged up to a tolerance of order `1e-9` (relative
//! to the largest piece value).

use crate::error::Result;
use crate::max_affine::{sup_norm, MaxAffineModel, Piece};
use crate::qp::{solve_qp, LinearConstraint, QpProblem, QpStatus, SolverTolerances};

/// Segments of the 1-D envelope shorter than this fraction of the domain
/// width are treated as single points.
const SEGMENT_REL_TOL: f64 = 1e-9;
/// Pieces whose best lead over all others is below this (relative to the
/// value scale) are redundant.
const LEAD_REL_TOL: f64 = 1e-9;

pub fn prune_redundant(model: &MaxAffineModel) -> Result<MaxAffineModel> {
    if model.pieces().len() <= 1 {
        return Ok(model.clone());
    }
    let mut keep = if model.dim() == 1 { envelope_1d(model) } else { lp_support(model)? };
    // Extra pieces never change the maximum, so keeping the steepest one
    // costs nothing and preserves J_inf.
    let norm = |i: usize| sup_norm(&model.pieces()[i].slope);
    let steepest = (0..model.pieces().len()).fold(0, |best, i| if norm(i) > norm(best) { i } else { best });
    let kept_max = keep.iter().map(|&i| norm(i)).fold(0.0, f64::max);
    if norm(steepest) - kept_max > 1e-12 * (1.0 + norm(steepest)) {
        if let Err(pos) = keep.binary_search(&steepest) {
            keep.insert(pos, steepest);
        }
    }
    model.retain_pieces(&keep)
}

fn value_scale(pieces: &[Piece]) -> f64 {
    1.0 + pieces.iter().map(|p| p.value.abs()).fold(0.0, f64::max)
}

/// Walks the upper envelope from left to right, then drops envelope pieces
/// whose lead over their neighbours stays below the tolerance. Returns
/// sorted indices.
fn envelope_1d(model: &MaxAffineModel) -> Vec<usize> {
    let pieces = model.pieces();
    let (a, b) = (model.domain().a, model.domain().b);
    let at = |i: usize, x: f64| pieces[i].eval(&[x]);
    let slope = |i: usize| pieces[i].slope[0];
    let scale = value_scale(pieces);
    let value_tol = 1e-12 * scale;
    let lead_tol = LEAD_REL_TOL * scale;
    let len_tol = SEGMENT_REL_TOL * (b - a);
    // Nearly parallel lines cannot overtake within the domain by more than
    // `slope_tol * (b - a)`, so they never start a new segment.
    let slope_tol = 1e-12 * (1.0 + model.j_inf());

    // Among pieces tied at the left end, the steepest one dominates just
    // to the right of it; the lowest index breaks remaining ties.
    let top = (0..pieces.len()).map(|i| at(i, a)).fold(f64::NEG_INFINITY, f64::max);
    let mut current = (0..pieces.len())
        .filter(|&i| top - at(i, a) <= value_tol)
        .fold(None, |best: Option<usize>, i| match best {
            Some(j) if slope(j) >= slope(i) => Some(j),
            _ => Some(i),
        })
        .expect("model has pieces");

    let mut seq = Vec::new();
    let mut x = a;
    loop {
        let mut next: Option<(usize, f64)> = None;
        for j in 0..pieces.len() {
            let ds = slope(j) - slope(current);
            if ds <= slope_tol {
                continue;
            }
            let cross = (x + (at(current, x) - at(j, x)) / ds).max(x);
            next = match next {
                Some((k, xk)) if xk < cross || (xk == cross && slope(k) >= slope(j)) => Some((k, xk)),
                _ => Some((j, cross)),
            };
        }
        let end = next.map_or(b, |(_, xn)| xn.min(b));
        if end - x > len_tol || (next.is_none() && seq.is_empty()) {
            seq.push(current);
        }
        match next {
            Some((j, xn)) if xn < b => {
                current = j;
                x = xn;
            }
            _ => break,
        }
    }
    if seq.is_empty() {
        seq.push(current);
    }

    // Removing seq[k] leaves max(prev, next) on its segment; the largest
    // gap is at a domain end or where the neighbours cross.
    let lead = |seq: &[usize], k: usize| -> f64 {
        let line = seq[k];
        let prev = k.checked_sub(1).map(|p| seq[p]);
        let next = seq.get(k + 1).copied();
        match (prev, next) {
            (None, None) => f64::INFINITY,
            (None, Some(q)) => at(line, a) - at(q, a),
            (Some(p), None) => at(line, b) - at(p, b),
            (Some(p), Some(q)) => {
                let ds = slope(q) - slope(p);
                let cross = if ds > 0.0 { (at(p, a) - at(q, a)) / ds + a } else { a };
                let cross = cross.clamp(a, b);
                at(line, cross) - at(p, cross).max(at(q, cross))
            }
        }
    };
    let mut k = 0;
    while k < seq.len() {
        if seq.len() > 1 && lead(&seq, k) <= lead_tol {
            seq.remove(k);
            k = k.saturating_sub(1);
        } else {
            k += 1;
        }
    }
    seq.sort_unstable();
    seq.dedup();
    seq
}

/// Greedy elimination for `d >= 2`: a piece is dropped when, against the
/// pieces still kept, no point of the domain gives it a lead above the
/// tolerance. Lower indices are examined last, so they survive among
/// duplicates.
fn lp_support(model: &MaxAffineModel) -> Result<Vec<usize>> {
    let pieces = model.pieces();
    let dom = model.domain();
    let d = dom.d;
    let scale = value_scale(pieces);
    let lead_tol = LEAD_REL_TOL * scale;
    let intercepts: Vec<f64> = pieces.iter().map(Piece::intercept).collect();
    let mut kept = vec![true; pieces.len()];
    let tol = SolverTolerances::default();

    for i in (0..pieces.len()).rev() {
        // max t  s.t.  t <= (s_i - s_j)^T x + c_i - c_j for kept j != i, x in box, t <= scale
        let others: Vec<usize> = (0..pieces.len()).filter(|&j| j != i && kept[j]).collect();
        if others.is_empty() {
            break;
        }
        let t = d;
        let mut rows = Vec::with_capacity(others.len() + 2 * d + 1);
        for &j in &others {
            let mut coeffs: Vec<(usize, f64)> =
                (0..d).map(|k| (k, pieces[j].slope[k] - pieces[i].slope[k])).collect();
            coeffs.push((t, 1.0));
            rows.push(LinearConstraint::new(coeffs, intercepts[i] - intercepts[j]));
        }
        for k in 0..d {
            rows.push(LinearConstraint::new(vec![(k, 1.0)], dom.b));
            rows.push(LinearConstraint::new(vec![(k, -1.0)], -dom.a));
        }
        rows.push(LinearConstraint::new(vec![(t, 1.0)], scale));
        let mut linear = vec![0.0; d + 1];
        linear[t] = -1.0;
        let lp = QpProblem::with_diagonal(&vec![0.0; d + 1], linear, rows)?;
        let sol = solve_qp(&lp, &tol)?;
        let lead = match sol.status {
            QpStatus::Optimal => sol.z[t],
            // Keep the piece when the LP is inconclusive.
            _ => f64::INFINITY,
        };
        if lead <= lead_tol {
            kept[i] = false;
        }
    }
    Ok((0..pieces.len()).filter(|&i| kept[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::max_affine::{dot, Domain};

    fn model_1d(lines: &[(f64, f64)]) -> MaxAffineModel {
        let pieces = lines
            .iter()
            .map(|&(anchor, slope)| Piece { anchor: vec![anchor], value: anchor * anchor, slope: vec![slope] })
            .collect();
        MaxAffineModel::new(Domain::new(-1.0, 1.0, 1).unwrap(), 10.0, pieces).unwrap()
    }

    #[test]
    fn keeps_tangents_of_parabola() {
        // tangents of x^2 at -0.5, 0, 0.5 are all active, duplicates are not
        let m = model_1d(&[(-0.5, -1.0), (0.0, 0.0), (0.0, 0.0), (0.5, 1.0)]);
        let pruned = prune_redundant(&m).unwrap();
        assert_eq!(pruned.pieces().len(), 3);
        assert_eq!(pruned.pieces()[1].anchor, vec![0.0]);
    }

    #[test]
    fn drops_dominated_and_point_contact_pieces() {
        // |x| plus a flat piece that only touches at 0 and one strictly below
        let pieces = vec![
            Piece { anchor: vec![-0.5], value: 0.5, slope: vec![-1.0] },
            Piece { anchor: vec![0.0], value: 0.0, slope: vec![0.0] },
            Piece { anchor: vec![0.5], value: 0.5, slope: vec![1.0] },
            Piece { anchor: vec![0.2], value: -1.0, slope: vec![0.3] },
        ];
        let m = MaxAffineModel::new(Domain::new(-1.0, 1.0, 1).unwrap(), 1.0, pieces).unwrap();
        let pruned = prune_redundant(&m).unwrap();
        assert_eq!(pruned.pieces().len(), 2);
        for x in [-1.0, -0.3, 0.0, 0.7, 1.0] {
            assert_eq!(pruned.evaluate(&[x]).unwrap(), m.evaluate(&[x]).unwrap());
        }
    }

    #[test]
    fn two_dimensional_support() {
        let dom = Domain::new(-1.0, 1.0, 2).unwrap();
        let piece = |value: f64, s: [f64; 2]| Piece { anchor: vec![0.0, 0.0], value, slope: s.to_vec() };
        // |x1| + |x2| has four faces; a low constant plane and a duplicate add nothing
        let m = MaxAffineModel::new(
            dom,
            1.0,
            vec![
                piece(0.0, [1.0, 1.0]),
                piece(0.0, [1.0, -1.0]),
                piece(0.0, [-1.0, 1.0]),
                piece(0.0, [-1.0, -1.0]),
                piece(-0.5, [0.0, 0.0]),
                piece(0.0, [1.0, 1.0]),
            ],
        )
        .unwrap();
        let pruned = prune_redundant(&m).unwrap();
        assert_eq!(pruned.pieces().len(), 4);
        assert_eq!(pruned.pieces()[0].slope, vec![1.0, 1.0]);
        for x in [[0.3, -0.9], [-1.0, 1.0], [0.0, 0.0]] {
            assert!((pruned.evaluate(&x).unwrap() - dot(&[1.0, 1.0], &[x[0].abs(), x[1].abs()])).abs() < 1e-12);
        }
    }
}
