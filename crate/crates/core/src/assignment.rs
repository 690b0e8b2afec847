//! Exact min-cost assignment and the two-level matching used for training.
//!
//! The outer level is a Hungarian assignment between predicted and ground-truth
//! instances. The inner level picks, for every pair, the equivalent point
//! ordering of the ground truth that is closest to the prediction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mapcore::{equivalent_orderings, normalize_to_bev, BevRange, MapInstance, Point, VectorMap};

/// Row-major dense cost matrix. `f64::INFINITY` marks a forbidden pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "cost matrix",
                detail: format!("{} entries for {rows}x{cols}", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape {
                op: "cost matrix",
                detail: "ragged rows".into(),
            });
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `(row, col)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Minimum-cost matching of size `min(rows, cols)` (shortest augmenting paths
/// with dual potentials, `O(n^2 m)`).
///
/// Pairs that land on a forbidden entry are dropped from the result. The
/// total cost is summed over the returned pairs in row order.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    let (n, m) = (cost.rows, cost.cols);
    let mut finite_max: f64 = 0.0;
    for (k, &v) in cost.data.iter().enumerate() {
        if v.is_nan() {
            return Err(Error::NanCost(k / m.max(1), k % m.max(1)));
        }
        if v == f64::NEG_INFINITY {
            return Err(Error::Domain("cost of -inf".into()));
        }
        if v.is_finite() {
            finite_max = finite_max.max(v.abs());
        }
    }
    if n == 0 || m == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            total_cost: 0.0,
        });
    }
    // Forbidden entries become a cost larger than any feasible total.
    let big = (finite_max + 1.0) * (n.max(m) as f64 + 1.0);
    let transpose = n > m;
    let (r, c) = if transpose { (m, n) } else { (n, m) };
    let at = |i: usize, j: usize| -> f64 {
        let v = if transpose { cost.get(j, i) } else { cost.get(i, j) };
        if v.is_finite() {
            v
        } else {
            big
        }
    };

    // 1-based potentials / matching, column 0 is the virtual start.
    let mut u = vec![0.0; r + 1];
    let mut v = vec![0.0; c + 1];
    let mut row_of_col = vec![0usize; c + 1];
    let mut way = vec![0usize; c + 1];
    for i in 1..=r {
        row_of_col[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; c + 1];
        let mut used = vec![false; c + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=c {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=c {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=c)
        .filter(|&j| row_of_col[j] != 0)
        .map(|j| {
            let (i, j) = (row_of_col[j] - 1, j - 1);
            if transpose {
                (j, i)
            } else {
                (i, j)
            }
        })
        .filter(|&(i, j)| cost.get(i, j).is_finite())
        .collect();
    pairs.sort_unstable();
    let total_cost = pairs.iter().map(|&(i, j)| cost.get(i, j)).sum();
    Ok(Assignment { pairs, total_cost })
}

/// Relative weights of the classification and point terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchWeights {
    pub w_cls: f64,
    pub w_pts: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        Self {
            w_cls: 2.0,
            w_pts: 5.0,
        }
    }
}

impl MatchWeights {
    pub fn new(w_cls: f64, w_pts: f64) -> Result<Self> {
        if !(w_cls >= 0.0 && w_pts >= 0.0) || (w_cls == 0.0 && w_pts == 0.0) {
            return Err(Error::Precondition(format!(
                "match weights must be non-negative and not both zero, got ({w_cls}, {w_pts})"
            )));
        }
        Ok(Self { w_cls, w_pts })
    }
}

/// Focal-loss parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Focal {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for Focal {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

/// One predicted instance: class probabilities (foreground classes followed by
/// background) and `n_v` points in normalized BEV coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredInstance {
    pub scores: Vec<f64>,
    pub points: Vec<Point>,
}

fn mean_l1(a: &[Point], b: &[Point]) -> f64 {
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(p, q)| (p[0] - q[0]).abs() + (p[1] - q[1]).abs())
        .sum();
    s / a.len() as f64
}

/// Ground-truth orderings in normalized coordinates, in the order of
/// [`equivalent_orderings`].
pub fn normalized_orderings(gt: &MapInstance, range: &BevRange) -> Vec<Vec<Point>> {
    equivalent_orderings(gt)
        .into_iter()
        .map(|seq| normalize_to_bev(&seq, range).0)
        .collect()
}

/// Minimum over equivalent orderings of the mean per-point L1 distance, and
/// the index of the first ordering achieving it.
pub fn point_cost(pred_pts: &[Point], gt: &MapInstance, range: &BevRange) -> Result<(f64, usize)> {
    if pred_pts.len() != gt.points.len() {
        return Err(Error::Shape {
            op: "point_cost",
            detail: format!(
                "prediction has {} points, ground truth {}",
                pred_pts.len(),
                gt.points.len()
            ),
        });
    }
    Ok(best_ordering(pred_pts, &normalized_orderings(gt, range)))
}

fn best_ordering(pred_pts: &[Point], orderings: &[Vec<Point>]) -> (f64, usize) {
    let mut best = (f64::INFINITY, 0);
    for (k, seq) in orderings.iter().enumerate() {
        let c = mean_l1(pred_pts, seq);
        if c < best.0 {
            best = (c, k);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub pairs: Vec<(usize, usize)>,
    /// Per pair: index into the ground truth's equivalent orderings.
    pub chosen_ordering: Vec<usize>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
    pub total_cost: f64,
}

struct Matched {
    result: MatchResult,
    /// Normalized target sequence per pair.
    targets: Vec<Vec<Point>>,
}

fn match_inner(
    preds: &[PredInstance],
    gts: &VectorMap,
    w: MatchWeights,
    range: &BevRange,
) -> Result<Matched> {
    let n_gt = gts.instances.len();
    let orderings: Vec<Vec<Vec<Point>>> = gts
        .instances
        .iter()
        .map(|g| normalized_orderings(g, range))
        .collect();
    let mut data = Vec::with_capacity(preds.len() * n_gt);
    let mut best_idx = Vec::with_capacity(preds.len() * n_gt);
    for p in preds {
        for (j, g) in gts.instances.iter().enumerate() {
            if p.points.len() != g.points.len() {
                return Err(Error::Shape {
                    op: "match_instances",
                    detail: format!(
                        "prediction has {} points, ground truth {j} has {}",
                        p.points.len(),
                        g.points.len()
                    ),
                });
            }
            let score = *p.scores.get(g.class.index()).ok_or_else(|| Error::Shape {
                op: "match_instances",
                detail: format!("{} class scores, class index {}", p.scores.len(), g.class.index()),
            })?;
            let (pc, k) = best_ordering(&p.points, &orderings[j]);
            data.push(w.w_cls * (1.0 - score) + w.w_pts * pc);
            best_idx.push(k);
        }
    }
    let cost = CostMatrix::new(preds.len(), n_gt, data)?;
    let a = hungarian(&cost)?;
    let chosen_ordering: Vec<usize> = a.pairs.iter().map(|&(i, j)| best_idx[i * n_gt + j]).collect();
    let targets = a
        .pairs
        .iter()
        .zip(&chosen_ordering)
        .map(|(&(_, j), &k)| orderings[j][k].clone())
        .collect();
    let unmatched_preds = (0..preds.len())
        .filter(|i| !a.pairs.iter().any(|p| p.0 == *i))
        .collect();
    let unmatched_gts = (0..n_gt)
        .filter(|j| !a.pairs.iter().any(|p| p.1 == *j))
        .collect();
    Ok(Matched {
        result: MatchResult {
            pairs: a.pairs,
            chosen_ordering,
            unmatched_preds,
            unmatched_gts,
            total_cost: a.total_cost,
        },
        targets,
    })
}

/// Hungarian matching over `w_cls * (1 - p_class) + w_pts * point_cost`.
/// Ground-truth instances must already be resampled to the prediction's `n_v`.
pub fn match_instances(
    preds: &[PredInstance],
    gts: &VectorMap,
    w: MatchWeights,
    range: &BevRange,
) -> Result<MatchResult> {
    Ok(match_inner(preds, gts, w, range)?.result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Focal classification term before weighting.
    pub cls: f64,
    /// Mean L1 point term before weighting.
    pub pts: f64,
    pub matching: MatchResult,
    /// d total / d scores, same layout as the inputs.
    pub grad_scores: Vec<Vec<f64>>,
    /// d total / d points.
    pub grad_points: Vec<Vec<Point>>,
}

const PROB_FLOOR: f64 = 1e-12;

/// Focal loss `-alpha_t (1 - p)^gamma ln p` of the target-class probability and
/// its derivative with respect to that probability.
pub fn focal_term(p: f64, alpha_t: f64, gamma: f64) -> (f64, f64) {
    let p = p.clamp(PROB_FLOOR, 1.0);
    let q = 1.0 - p;
    let lnp = p.ln();
    let loss = -alpha_t * q.powf(gamma) * lnp;
    let dq = if gamma == 0.0 {
        0.0
    } else {
        gamma * q.powf(gamma - 1.0)
    };
    let grad = alpha_t * (dq * lnp - q.powf(gamma) / p);
    (loss, grad)
}

/// Set-prediction loss after hierarchical matching.
///
/// `cls` is the focal loss over all predictions (matched ones target their
/// ground-truth class, the rest target background, the last score entry),
/// normalized by `max(1, #gt)`. `pts` is the mean over matched pairs of the
/// mean per-point L1 distance to the chosen ordering. The total is
/// `w_cls * cls + w_pts * pts`. Sums run in prediction order, so the value does
/// not depend on how the ground truth is ordered.
pub fn matching_loss(
    preds: &[PredInstance],
    gts: &VectorMap,
    w: MatchWeights,
    focal: Focal,
    range: &BevRange,
) -> Result<LossBreakdown> {
    let m = match_inner(preds, gts, w, range)?;
    let n_gt = gts.instances.len();
    let cls_norm = 1.0 / (n_gt.max(1) as f64);
    let n_pairs = m.result.pairs.len();
    let pts_norm = 1.0 / (n_pairs.max(1) as f64);

    let mut target_of = vec![None; preds.len()];
    for (k, &(i, j)) in m.result.pairs.iter().enumerate() {
        target_of[i] = Some((gts.instances[j].class.index(), k));
    }

    let mut cls = 0.0;
    let mut pts = 0.0;
    let mut grad_scores = Vec::with_capacity(preds.len());
    let mut grad_points = Vec::with_capacity(preds.len());
    for (i, p) in preds.iter().enumerate() {
        let bg = p.scores.len() - 1;
        let (t, alpha_t) = match target_of[i] {
            Some((c, _)) => (c, focal.alpha),
            None => (bg, 1.0 - focal.alpha),
        };
        let (l, g) = focal_term(p.scores[t], alpha_t, focal.gamma);
        cls += l;
        let mut gs = vec![0.0; p.scores.len()];
        if p.scores[t] >= PROB_FLOOR {
            gs[t] = w.w_cls * cls_norm * g;
        }
        grad_scores.push(gs);

        let mut gp = vec![[0.0; 2]; p.points.len()];
        if let Some((_, k)) = target_of[i] {
            let target = &m.targets[k];
            let nv = p.points.len() as f64;
            let mut s = 0.0;
            for (v, (a, b)) in p.points.iter().zip(target).enumerate() {
                for d in 0..2 {
                    let diff = a[d] - b[d];
                    s += diff.abs();
                    gp[v][d] = w.w_pts * pts_norm * sign(diff) / nv;
                }
            }
            pts += s / nv;
        }
        grad_points.push(gp);
    }
    cls *= cls_norm;
    pts *= pts_norm;
    Ok(LossBreakdown {
        total: w.w_cls * cls + w.w_pts * pts,
        cls,
        pts,
        matching: m.result,
        grad_scores,
        grad_points,
    })
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapcore::MapClass;

    fn cm(rows: &[Vec<f64>]) -> CostMatrix {
        CostMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn diagonal_two_by_two() {
        let a = hungarian(&cm(&[vec![1.0, 2.0], vec![2.0, 1.0]])).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost, 2.0);
    }

    #[test]
    fn rectangular_both_ways() {
        let a = hungarian(&cm(&[vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0]])).unwrap();
        assert_eq!(a.pairs.len(), 2);
        assert_eq!(a.total_cost, 3.0);
        let t = hungarian(&cm(&[vec![4.0, 2.0], vec![1.0, 0.0], vec![3.0, 5.0]])).unwrap();
        assert_eq!(t.pairs.len(), 2);
        assert_eq!(t.total_cost, 3.0);
    }

    #[test]
    fn nan_and_forbidden_entries() {
        assert!(matches!(
            hungarian(&cm(&[vec![1.0, f64::NAN]])),
            Err(Error::NanCost(0, 1))
        ));
        let inf = f64::INFINITY;
        let a = hungarian(&cm(&[vec![inf, 1.0], vec![inf, 2.0]])).unwrap();
        assert_eq!(a.pairs.len(), 1);
        assert_eq!(a.total_cost, 1.0);
        let a = hungarian(&cm(&[vec![inf, 5.0], vec![1.0, inf]])).unwrap();
        assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn empty_matrix() {
        let a = hungarian(&CostMatrix::new(0, 3, vec![]).unwrap()).unwrap();
        assert!(a.pairs.is_empty());
        assert_eq!(a.total_cost, 0.0);
    }

    fn range() -> BevRange {
        BevRange::new((-10.0, 10.0), (-5.0, 5.0)).unwrap()
    }

    fn divider(points: Vec<Point>) -> MapInstance {
        MapInstance::new(MapClass::Divider, points, false).unwrap()
    }

    #[test]
    fn point_cost_reversal_and_offset() {
        let gt = divider(vec![[-5.0, 0.0], [0.0, 1.0], [5.0, 2.0]]);
        let norm = normalize_to_bev(&gt.points, &range()).0;
        let rev: Vec<Point> = norm.iter().rev().copied().collect();
        assert_eq!(point_cost(&rev, &gt, &range()).unwrap(), (0.0, 1));
        let shifted: Vec<Point> = norm.iter().map(|p| [p[0] + 0.03, p[1]]).collect();
        let (c, k) = point_cost(&shifted, &gt, &range()).unwrap();
        assert!((c - 0.03).abs() < 1e-12);
        assert_eq!(k, 0);
        assert!(point_cost(&rev[..2], &gt, &range()).is_err());
    }

    #[test]
    fn focal_derivative_matches_finite_difference() {
        for &(p, a, g) in &[(0.3, 0.25, 2.0), (0.9, 0.75, 2.0), (0.01, 0.25, 0.0), (0.5, 1.0, 1.5)] {
            let (_, d) = focal_term(p, a, g);
            let h = 1e-6;
            let num = (focal_term(p + h, a, g).0 - focal_term(p - h, a, g).0) / (2.0 * h);
            assert!((d - num).abs() < 1e-6 * (1.0 + num.abs()), "{p} {a} {g}: {d} vs {num}");
        }
    }

    #[test]
    fn zero_predictions_leave_all_gts_unmatched() {
        let gts = VectorMap::new(vec![divider(vec![[0.0, 0.0], [1.0, 0.0]])]);
        let r = match_instances(&[], &gts, MatchWeights::default(), &range()).unwrap();
        assert!(r.pairs.is_empty());
        assert_eq!(r.unmatched_gts, vec![0]);
        assert_eq!(r.total_cost, 0.0);
    }

    #[test]
    fn invalid_weights() {
        assert!(MatchWeights::new(0.0, 0.0).is_err());
        assert!(MatchWeights::new(-1.0, 1.0).is_err());
        assert!(MatchWeights::new(0.0, 1.0).is_ok());
    }
}
