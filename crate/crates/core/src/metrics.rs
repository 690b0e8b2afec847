//! Chamfer-distance based Average Precision for vectorized maps.
//!
//! Protocol:
//! 1. Every instance is densified to `interp_points` arc-length-uniform points.
//! 2. Chamfer distance is the mean of the two directed average
//!    nearest-neighbor distances.
//! 3. Per class and threshold, predictions pooled over all samples are sorted
//!    by descending score (stable in input order). Each one looks up the
//!    ground truth of its own sample with the smallest Chamfer distance and
//!    counts as a true positive when that distance is below the threshold and
//!    the ground truth has not been claimed yet; otherwise it is a false
//!    positive.
//! 4. AP is the area under the all-point interpolated precision envelope.
//!    A class with no ground truth and no predictions scores 1, one with no
//!    ground truth but some predictions scores 0.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mapcore::{arc_length_sample, equivalent_orderings, MapClass, MapInstance, Point, VectorMap};

pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.5, 1.0, 1.5];
pub const DEFAULT_INTERP_POINTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    pub interp_points: usize,
    pub classes: Vec<MapClass>,
    /// Average per-sample AP instead of pooling predictions across samples.
    #[serde(default)]
    pub per_sample: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            interp_points: DEFAULT_INTERP_POINTS,
            classes: MapClass::ALL.to_vec(),
            per_sample: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty()
            || self.thresholds.iter().any(|t| !(*t > 0.0) || !t.is_finite())
            || self.thresholds.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Precondition(format!(
                "thresholds must be positive and strictly increasing: {:?}",
                self.thresholds
            )));
        }
        if self.interp_points < 2 {
            return Err(Error::Precondition("interp_points must be at least 2".into()));
        }
        if self.classes.is_empty() {
            return Err(Error::Precondition("empty class set".into()));
        }
        Ok(())
    }
}

/// Canonical representative among the equivalent orderings (lexicographic
/// minimum), so densification does not depend on direction or start vertex.
fn canonical(inst: &MapInstance) -> Vec<Point> {
    equivalent_orderings(inst)
        .into_iter()
        .min_by(|a, b| {
            a.iter()
                .flatten()
                .zip(b.iter().flatten())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
        .expect("at least one ordering")
}

/// Dense point set used for Chamfer evaluation.
pub fn densify(inst: &MapInstance, interp: usize) -> Result<Vec<Point>> {
    arc_length_sample(&canonical(inst), inst.closed, interp)
}

fn directed(a: &[Point], b: &[Point]) -> f64 {
    let s: f64 = a
        .iter()
        .map(|p| {
            b.iter()
                .map(|q| (p[0] - q[0]).hypot(p[1] - q[1]))
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    s / a.len() as f64
}

/// Symmetric Chamfer distance between already densified point sets.
pub fn chamfer_dense(a: &[Point], b: &[Point]) -> f64 {
    (directed(a, b) + directed(b, a)) / 2.0
}

/// Symmetric Chamfer distance in meters.
pub fn chamfer_distance(a: &MapInstance, b: &MapInstance, interp: usize) -> Result<f64> {
    if interp < 2 {
        return Err(Error::Precondition(format!("interp must be at least 2, got {interp}")));
    }
    Ok(chamfer_dense(&densify(a, interp)?, &densify(b, interp)?))
}

/// One evaluation sample: scored predictions and ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSample {
    pub pred: VectorMap,
    pub gt: VectorMap,
}

/// Per-class data for one sample with Chamfer distances precomputed.
struct ClassSample {
    scores: Vec<f64>,
    n_gt: usize,
    /// `dist[p][g]`
    dist: Vec<Vec<f64>>,
}

fn class_sample(preds: &[&MapInstance], gts: &[&MapInstance], interp: usize) -> Result<ClassSample> {
    let pd: Vec<Vec<Point>> = preds.iter().map(|p| densify(p, interp)).collect::<Result<_>>()?;
    let gd: Vec<Vec<Point>> = gts.iter().map(|g| densify(g, interp)).collect::<Result<_>>()?;
    let dist = pd
        .iter()
        .map(|p| gd.iter().map(|g| chamfer_dense(p, g)).collect())
        .collect();
    Ok(ClassSample {
        scores: preds.iter().map(|p| p.score.unwrap_or(1.0)).collect(),
        n_gt: gts.len(),
        dist,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ApOutcome {
    ap: f64,
    matched: usize,
}

fn pooled_ap(samples: &[ClassSample], tau: f64) -> ApOutcome {
    let n_gt: usize = samples.iter().map(|s| s.n_gt).sum();
    let mut order: Vec<(usize, usize)> = samples
        .iter()
        .enumerate()
        .flat_map(|(s, cs)| (0..cs.scores.len()).map(move |p| (s, p)))
        .collect();
    if n_gt == 0 {
        let ap = if order.is_empty() { 1.0 } else { 0.0 };
        return ApOutcome { ap, matched: 0 };
    }
    // stable: ties keep (sample, prediction) input order
    order.sort_by(|a, b| samples[b.0].scores[b.1].total_cmp(&samples[a.0].scores[a.1]));

    let mut taken: Vec<Vec<bool>> = samples.iter().map(|s| vec![false; s.n_gt]).collect();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    for (s, p) in order {
        let row = &samples[s].dist[p];
        // nearest gt overall; a prediction whose nearest gt is already
        // claimed is a false positive, so duplicates never add hits
        let mut best: Option<(usize, f64)> = None;
        for (g, &d) in row.iter().enumerate() {
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((g, d));
            }
        }
        match best {
            Some((g, d)) if d < tau && !taken[s][g] => {
                taken[s][g] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    ApOutcome {
        ap: all_point_ap(&recall, &precision),
        matched: tp,
    }
}

/// Area under the precision envelope (all-point interpolation).
pub fn all_point_ap(recall: &[f64], precision: &[f64]) -> f64 {
    let mut env = precision.to_vec();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in recall.iter().zip(&env) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    ap
}

/// AP of one class at one threshold for a single sample. Predictions without a
/// score count as confidence 1.
pub fn average_precision(preds: &[MapInstance], gts: &[MapInstance], tau: f64, cfg: &EvalConfig) -> Result<f64> {
    let p: Vec<&MapInstance> = preds.iter().collect();
    let g: Vec<&MapInstance> = gts.iter().collect();
    let cs = class_sample(&p, &g, cfg.interp_points)?;
    Ok(pooled_ap(&[cs], tau).ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub gt: usize,
    pub pred: usize,
    /// True positives per threshold.
    pub matched: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// class -> threshold -> AP
    pub ap: BTreeMap<String, BTreeMap<String, f64>>,
    pub ap_class: BTreeMap<String, f64>,
    pub map: f64,
    pub counts: BTreeMap<String, ClassCounts>,
    pub samples: usize,
    pub pooling: String,
    /// AP assigned to a class with neither ground truth nor predictions.
    pub empty_class_ap: f64,
}

/// Threshold label used as a JSON key, e.g. `"0.5"`, `"1.0"`.
pub fn tau_key(t: f64) -> String {
    let s = format!("{t}");
    if s.contains('.') {
        s
    } else {
        format!("{s}.0")
    }
}

/// Per-class AP over thresholds, their means, and the class-mean mAP.
pub fn map_score(samples: &[EvalSample], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let mut ap = BTreeMap::new();
    let mut ap_class = BTreeMap::new();
    let mut counts = BTreeMap::new();
    for &class in &cfg.classes {
        let per: Vec<ClassSample> = samples
            .iter()
            .map(|s| {
                let p: Vec<&MapInstance> = s.pred.of_class(class).collect();
                let g: Vec<&MapInstance> = s.gt.of_class(class).collect();
                class_sample(&p, &g, cfg.interp_points)
            })
            .collect::<Result<_>>()?;
        let mut by_tau = BTreeMap::new();
        let mut matched = BTreeMap::new();
        let mut sum = 0.0;
        for &tau in &cfg.thresholds {
            let (v, m) = if cfg.per_sample {
                let outs: Vec<ApOutcome> = per
                    .iter()
                    .map(|cs| pooled_ap(std::slice::from_ref(cs), tau))
                    .collect();
                let mean = if outs.is_empty() {
                    1.0
                } else {
                    outs.iter().map(|o| o.ap).sum::<f64>() / outs.len() as f64
                };
                (mean, outs.iter().map(|o| o.matched).sum())
            } else {
                let o = pooled_ap(&per, tau);
                (o.ap, o.matched)
            };
            sum += v;
            by_tau.insert(tau_key(tau), v);
            matched.insert(tau_key(tau), m);
        }
        let name = class.name().to_string();
        ap_class.insert(name.clone(), sum / cfg.thresholds.len() as f64);
        ap.insert(name.clone(), by_tau);
        counts.insert(
            name,
            ClassCounts {
                gt: per.iter().map(|c| c.n_gt).sum(),
                pred: per.iter().map(|c| c.scores.len()).sum(),
                matched,
            },
        );
    }
    let map = cfg
        .classes
        .iter()
        .map(|c| ap_class[c.name()])
        .sum::<f64>()
        / cfg.classes.len() as f64;
    Ok(EvalReport {
        ap,
        ap_class,
        map,
        counts,
        samples: samples.len(),
        pooling: if cfg.per_sample { "per_sample" } else { "pooled" }.into(),
        empty_class_ap: 1.0,
    })
}

pub const ALL_TAG: &str = "all";
pub const UNTAGGED: &str = "untagged";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    /// One report per tag plus the `"all"` pool.
    pub splits: BTreeMap<String, EvalReport>,
    /// Tags that were not in the expected set (still evaluated).
    pub unknown_tags: Vec<String>,
}

/// Evaluates every tag pool independently (a sample with several tags joins
/// each of them) plus the pool of all samples. Samples without tags form the
/// `"untagged"` pool. When `known_tags` is given, other tags are listed in
/// `unknown_tags` but still evaluated.
pub fn split_report(samples: &[EvalSample], cfg: &EvalConfig, known_tags: Option<&[String]>) -> Result<SplitReport> {
    let mut pools: BTreeMap<String, Vec<EvalSample>> = BTreeMap::new();
    let mut unknown = BTreeSet::new();
    for s in samples {
        let tags: Vec<String> = if s.gt.tags.is_empty() {
            vec![UNTAGGED.to_string()]
        } else {
            let mut t = s.gt.tags.clone();
            t.sort();
            t.dedup();
            t
        };
        for t in tags {
            if let Some(known) = known_tags {
                if !known.contains(&t) {
                    unknown.insert(t.clone());
                }
            }
            pools.entry(t).or_default().push(s.clone());
        }
    }
    let mut splits = BTreeMap::new();
    for (tag, pool) in &pools {
        splits.insert(tag.clone(), map_score(pool, cfg)?);
    }
    splits.insert(ALL_TAG.to_string(), map_score(samples, cfg)?);
    Ok(SplitReport {
        splits,
        unknown_tags: unknown.into_iter().collect(),
    })
}
