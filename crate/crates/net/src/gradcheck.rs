//! Central finite-difference check of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Fault, Graph, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tol: f64,
    /// Denominator floor of the relative error, so entries with a true
    /// gradient near zero are judged on absolute error.
    pub floor: f64,
    /// Entries checked per block; larger blocks are subsampled.
    pub entries_per_block: usize,
    pub seed: u64,
    #[serde(skip)]
    pub fault: Option<Fault>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            floor: 1e-5,
            entries_per_block: 6,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub worst_entry: Option<usize>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tol: f64,
    pub max_rel_err: f64,
    pub pass: bool,
    pub failed_blocks: Vec<String>,
    pub blocks: Vec<BlockCheck>,
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval<F>(store: &ParamStore, build: &F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let out = build(&mut g)?;
    if g.value(out).len() != 1 {
        return Err(Error::NonScalar(g.shape(out).to_vec()));
    }
    Ok(g.scalar(out))
}

/// Compares the backward pass of the scalar graph built by `build` with
/// central differences, block by block.
pub fn grad_check<F>(store: &ParamStore, build: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store).with_fault(cfg.fault.clone());
        let out = build(&mut g)?;
        g.backward(out)?.params(store)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = store.clone();
    let mut blocks = Vec::new();
    for (id, block) in store.blocks().iter().enumerate() {
        let n = block.data.len();
        let grad = &analytic[id];
        let mut idx: Vec<usize> = if n <= cfg.entries_per_block {
            (0..n).collect()
        } else {
            sample(&mut rng, n, cfg.entries_per_block).into_vec()
        };
        // always include the entry with the largest analytic gradient
        if let Some(k) = (0..n).max_by(|&a, &b| grad[a].abs().total_cmp(&grad[b].abs())) {
            if !idx.contains(&k) {
                idx.push(k);
            }
        }
        idx.sort_unstable();
        let mut worst = (0.0f64, None);
        for &k in &idx {
            let orig = block.data[k];
            work.blocks_mut()[id].data[k] = orig + cfg.step;
            let up = eval(&work, &build)?;
            work.blocks_mut()[id].data[k] = orig - cfg.step;
            let down = eval(&work, &build)?;
            work.blocks_mut()[id].data[k] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let e = rel_err(grad[k], numeric, cfg.floor);
            let e = if e.is_nan() { f64::INFINITY } else { e };
            if e > worst.0 || worst.1.is_none() {
                worst = (e, Some(k));
            }
        }
        blocks.push(BlockCheck {
            name: block.name.clone(),
            entries: idx.len(),
            max_rel_err: worst.0,
            worst_entry: worst.1,
            pass: worst.0 < cfg.tol,
        });
    }
    let max_rel_err = blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max);
    let failed_blocks: Vec<String> = blocks.iter().filter(|b| !b.pass).map(|b| b.name.clone()).collect();
    Ok(GradCheckReport {
        tol: cfg.tol,
        max_rel_err,
        pass: failed_blocks.is_empty(),
        failed_blocks,
        blocks,
    })
}
