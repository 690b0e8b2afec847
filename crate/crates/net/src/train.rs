//! Seeded SGD training and evaluation at toy scale.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use satmap_core::metrics::{map_score, EvalConfig, EvalReport, EvalSample};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{model_loss, predict, Model, ModelConfig, Sample};
use crate::tape::Graph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Heavy-ball momentum; 0 gives plain SGD.
    pub momentum: f64,
    /// Global gradient norm clip.
    pub clip_norm: f64,
    /// Evaluate mAP on the training data every this many steps (0: never).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 0.01,
            momentum: 0.0,
            clip_norm: 10.0,
            eval_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub scene: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Trace {
    pub steps: Vec<StepLog>,
    pub evals: Vec<EvalPoint>,
}

/// Scene visiting order: a fresh seeded permutation per epoch.
fn schedule(n: usize, steps: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_da7a);
    let mut order = Vec::with_capacity(steps);
    while order.len() < steps {
        let mut epoch: Vec<usize> = (0..n).collect();
        epoch.shuffle(&mut rng);
        order.extend(epoch);
    }
    order.truncate(steps);
    order
}

/// Trains `model` in place for `tc.steps` single-sample steps.
pub fn train_model(model: &mut Model, data: &[Sample], tc: &TrainConfig, seed: u64) -> Result<Trace> {
    if data.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut trace = Trace::default();
    let mut velocity: Vec<Vec<f64>> = model.params.blocks().iter().map(|b| vec![0.0; b.data.len()]).collect();
    for (step, scene) in schedule(data.len(), tc.steps, seed).into_iter().enumerate() {
        let (loss, grads) = {
            let mut g = Graph::new(&model.params);
            let out = model_loss(&mut g, model, &data[scene])?;
            let loss = g.scalar(out.loss);
            if !loss.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            (loss, g.backward(out.loss)?.params(&model.params))
        };
        let norm = grads.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Divergence { step, loss: norm });
        }
        let clip = if norm > tc.clip_norm { tc.clip_norm / norm } else { 1.0 };
        for ((block, g), v) in model.params.blocks_mut().iter_mut().zip(&grads).zip(&mut velocity) {
            for ((p, gi), vi) in block.data.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = tc.momentum * *vi + gi * clip;
                *p -= tc.lr * *vi;
            }
        }
        trace.steps.push(StepLog {
            step,
            scene,
            loss,
            grad_norm: norm,
        });
        if tc.eval_every > 0 && (step + 1) % tc.eval_every == 0 {
            let rep = evaluate(model, data, &EvalConfig::default())?;
            trace.evals.push(EvalPoint { step: step + 1, map: rep.map });
        }
    }
    Ok(trace)
}

/// Initializes a model from `seed` and trains it on `data`.
pub fn train_toy(data: &[Sample], cfg: &ModelConfig, tc: &TrainConfig, seed: u64) -> Result<(Model, Trace)> {
    let rig = &data.first().ok_or_else(|| Error::Config("empty training set".into()))?.rig;
    let mut model = Model::new(cfg.clone(), rig, seed)?;
    let trace = train_model(&mut model, data, tc, seed)?;
    Ok((model, trace))
}

/// Mean summed decoder loss over a dataset, without updates.
pub fn dataset_loss(model: &Model, data: &[Sample]) -> Result<f64> {
    let mut s = 0.0;
    for sample in data {
        let mut g = Graph::new(&model.params);
        let out = model_loss(&mut g, model, sample)?;
        s += g.scalar(out.loss);
    }
    Ok(s / data.len().max(1) as f64)
}

/// Predicted maps paired with ground truth, ready for the metrics module.
pub fn eval_samples(model: &Model, data: &[Sample]) -> Result<Vec<EvalSample>> {
    data.iter()
        .map(|s| {
            let pred = predict(model, s)?.to_vector_map(&model.cfg.range, model.cfg.top_k);
            Ok(EvalSample {
                pred,
                gt: s.gt.clone(),
            })
        })
        .collect()
}

pub fn evaluate(model: &Model, data: &[Sample], cfg: &EvalConfig) -> Result<EvalReport> {
    Ok(map_score(&eval_samples(model, data)?, cfg)?)
}
