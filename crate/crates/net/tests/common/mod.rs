#![allow(dead_code)]

pub mod cases;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use satmap_net::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use satmap_net::params::ParamStore;
use satmap_net::tape::{Graph, Var};
use satmap_net::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

/// A store of uniformly random blocks.
pub fn store(rng: &mut ChaCha8Rng, blocks: &[(&str, &[usize])]) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, shape) in blocks {
        let n = shape.iter().product();
        s.add(name, shape, rand_vec(rng, n, 1.0)).unwrap();
    }
    s
}

/// `sum(r * x)` with fixed pseudo-random weights, so every output entry
/// receives a distinct upstream gradient.
pub fn weighted_sum(g: &mut Graph, x: Var) -> Result<Var> {
    let n = g.value(x).len();
    let mut r = rng(n as u64 + 17);
    let w = Arc::new(rand_vec(&mut r, n, 1.0));
    let y = g.mul_const(x, w)?;
    Ok(g.sum(y))
}

pub fn check<F>(store: &ParamStore, build: F, tol: f64) -> GradCheckReport
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let cfg = GradCheckConfig {
        tol,
        entries_per_block: 8,
        ..Default::default()
    };
    grad_check(store, build, &cfg).unwrap()
}

pub fn assert_pass(label: &str, rep: &GradCheckReport) {
    assert!(
        rep.pass,
        "{label}: max relative error {:.3e}, failing blocks {:?}",
        rep.max_rel_err, rep.failed_blocks
    );
}

/// Runs an initializer into a fresh store, then replaces every value with
/// uniform noise so no block sits at a special value such as zero or one.
pub fn random_store<F>(seed: u64, init: F) -> ParamStore
where
    F: FnOnce(&mut satmap_net::params::Initializer) -> Result<()>,
{
    let mut s = ParamStore::new();
    let mut r = rng(seed);
    init(&mut satmap_net::params::Initializer {
        store: &mut s,
        rng: &mut r,
    })
    .unwrap();
    for b in s.blocks_mut() {
        let n = b.data.len();
        b.data = rand_vec(&mut r, n, 0.5);
    }
    s
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn scene_sample(seed: u64) -> satmap_net::model::Sample {
    use satmap_core::synth::{synthesize, SceneParams, SynthConfig};
    let params = SceneParams {
        seed,
        ..Default::default()
    };
    satmap_net::model::Sample::from_scene(&synthesize(&params, &SynthConfig::toy()).unwrap())
}

/// The toy model shrunk further, for full-model gradient checks.
pub fn tiny_config() -> satmap_net::model::ModelConfig {
    let mut cfg = satmap_net::model::ModelConfig::toy();
    cfg.channels = 8;
    cfg.ffn_hidden = 8;
    cfg.n_queries = 3;
    cfg.n_points = 4;
    cfg.cam_hidden = 4;
    cfg.stages = 2;
    cfg
}
