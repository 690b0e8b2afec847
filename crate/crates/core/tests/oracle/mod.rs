//! Brute-force reference implementations, written independently of the
//! library code they check.
#![allow(dead_code)]

use satmap_core::mapcore::{MapClass, MapInstance, Point, VectorMap};

/// Minimum total cost over every injection of the smaller side into the
/// larger one, summed in row order.
pub fn assignment_min(cost: &[Vec<f64>]) -> f64 {
    let n = cost.len();
    let m = cost[0].len();
    let transpose = n > m;
    let (small, large) = if transpose { (m, n) } else { (n, m) };
    let mut best = f64::INFINITY;
    let mut chosen = vec![0usize; small];
    let mut used = vec![false; large];
    fn rec(
        k: usize,
        small: usize,
        large: usize,
        chosen: &mut [usize],
        used: &mut [bool],
        f: &mut dyn FnMut(&[usize]),
    ) {
        if k == small {
            f(chosen);
            return;
        }
        for t in 0..large {
            if !used[t] {
                used[t] = true;
                chosen[k] = t;
                rec(k + 1, small, large, chosen, used, f);
                used[t] = false;
            }
        }
    }
    rec(0, small, large, &mut chosen, &mut used, &mut |ch: &[usize]| {
        let mut pairs: Vec<(usize, usize)> = ch
            .iter()
            .enumerate()
            .map(|(k, &t)| if transpose { (t, k) } else { (k, t) })
            .collect();
        pairs.sort_unstable();
        let s: f64 = pairs.iter().map(|&(i, j)| cost[i][j]).sum();
        if s < best {
            best = s;
        }
    });
    best
}

fn lex_less(a: &[Point], b: &[Point]) -> bool {
    for (p, q) in a.iter().zip(b) {
        for d in 0..2 {
            if p[d] < q[d] {
                return true;
            }
            if p[d] > q[d] {
                return false;
            }
        }
    }
    false
}

/// Lexicographically smallest traversal among reversals (and cyclic shifts for
/// closed instances).
fn canonical(inst: &MapInstance) -> Vec<Point> {
    let pts = &inst.points;
    let n = pts.len();
    let mut cands: Vec<Vec<Point>> = Vec::new();
    if inst.closed {
        for s in 0..n {
            cands.push((0..n).map(|k| pts[(s + k) % n]).collect());
            cands.push((0..n).map(|k| pts[(s + n - k) % n]).collect());
        }
    } else {
        cands.push(pts.clone());
        cands.push(pts.iter().rev().copied().collect());
    }
    let mut best = cands[0].clone();
    for c in cands.into_iter().skip(1) {
        if lex_less(&c, &best) {
            best = c;
        }
    }
    best
}

/// Arc-length uniform samples along the canonical traversal.
pub fn densify(inst: &MapInstance, n: usize) -> Vec<Point> {
    let mut pts = canonical(inst);
    if inst.closed {
        pts.push(pts[0]);
    }
    let seg: Vec<f64> = pts
        .windows(2)
        .map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt())
        .collect();
    let total: f64 = seg.iter().sum();
    let step = if inst.closed {
        total / n as f64
    } else {
        total / (n - 1) as f64
    };
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let target = step * i as f64;
        let mut acc = 0.0;
        let mut placed = false;
        for (k, &l) in seg.iter().enumerate() {
            if l > 0.0 && target <= acc + l {
                let t = (target - acc) / l;
                out.push([
                    pts[k][0] + t * (pts[k + 1][0] - pts[k][0]),
                    pts[k][1] + t * (pts[k + 1][1] - pts[k][1]),
                ]);
                placed = true;
                break;
            }
            acc += l;
        }
        if !placed {
            out.push(*pts.last().unwrap());
        }
    }
    out
}

pub fn chamfer(a: &[Point], b: &[Point]) -> f64 {
    let dir = |x: &[Point], y: &[Point]| {
        x.iter()
            .map(|p| {
                y.iter()
                    .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / x.len() as f64
    };
    0.5 * (dir(a, b) + dir(b, a))
}

/// AP of one class at one threshold, predictions pooled over samples.
/// Each sample is `(preds, gts)`; predictions without a score count as 1.
pub fn ap(samples: &[(Vec<MapInstance>, Vec<MapInstance>)], tau: f64, interp: usize) -> f64 {
    let n_gt: usize = samples.iter().map(|s| s.1.len()).sum();
    let n_pred: usize = samples.iter().map(|s| s.0.len()).sum();
    if n_gt == 0 {
        return if n_pred == 0 { 1.0 } else { 0.0 };
    }
    let mut dets: Vec<(f64, usize, usize)> = Vec::new();
    for (s, (preds, _)) in samples.iter().enumerate() {
        for (p, inst) in preds.iter().enumerate() {
            dets.push((inst.score.unwrap_or(1.0), s, p));
        }
    }
    // descending score, ties by (sample, index)
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .0
            .partial_cmp(&dets[a].0)
            .unwrap()
            .then((dets[a].1, dets[a].2).cmp(&(dets[b].1, dets[b].2)))
    });
    let mut claimed: Vec<Vec<bool>> = samples.iter().map(|s| vec![false; s.1.len()]).collect();
    let mut hits = Vec::new();
    for &k in &order {
        let (_, s, p) = dets[k];
        let pd = densify(&samples[s].0[p], interp);
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in samples[s].1.iter().enumerate() {
            let d = chamfer(&pd, &densify(gt, interp));
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((g, d));
            }
        }
        let hit = match best {
            Some((g, d)) if d < tau && !claimed[s][g] => {
                claimed[s][g] = true;
                true
            }
            _ => false,
        };
        hits.push(hit);
    }
    // every true positive contributes 1/n_gt recall at the best precision
    // reachable at or after its rank
    let mut prec = Vec::with_capacity(hits.len());
    let mut tp = 0;
    for (i, &h) in hits.iter().enumerate() {
        if h {
            tp += 1;
        }
        prec.push(tp as f64 / (i + 1) as f64);
    }
    let mut total = 0.0;
    for (i, &h) in hits.iter().enumerate() {
        if h {
            let best_after = prec[i..].iter().cloned().fold(0.0, f64::max);
            total += best_after / n_gt as f64;
        }
    }
    total
}

/// Class-mean of threshold-mean AP over pooled samples.
pub fn map(samples: &[(VectorMap, VectorMap)], classes: &[MapClass], taus: &[f64], interp: usize) -> f64 {
    let mut sum = 0.0;
    for &c in classes {
        let per: Vec<(Vec<MapInstance>, Vec<MapInstance>)> = samples
            .iter()
            .map(|(p, g)| {
                (
                    p.instances.iter().filter(|i| i.class == c).cloned().collect(),
                    g.instances.iter().filter(|i| i.class == c).cloned().collect(),
                )
            })
            .collect();
        sum += taus.iter().map(|&t| ap(&per, t, interp)).sum::<f64>() / taus.len() as f64;
    }
    sum / classes.len() as f64
}
