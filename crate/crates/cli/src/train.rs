use std::path::{Path, PathBuf};

use satmap_core::io::write_json;
use satmap_net::model::ModelConfig;
use satmap_net::params::save_checkpoint;
use satmap_net::train::{train_toy, Trace, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::args::TrainArgs;
use crate::data::{check_fit, json, load_samples, model_config, resolve_seed};
use crate::failure::{Failure, Outcome};

pub const TRAIN_SCHEMA: &str = "satmap-train/1";

/// Configuration stored inside a checkpoint manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub scenes: usize,
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    schema: &'static str,
    seed: u64,
    steps: usize,
    scenes: usize,
    fusion: &'static str,
    backbone: &'static str,
    params: usize,
    first_loss: f64,
    /// Mean step loss over the last (up to) 50 steps.
    final_loss: f64,
    evals: &'a [satmap_net::train::EvalPoint],
    checkpoint: &'a str,
    trace: &'a str,
}

pub fn trace_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("trace.json")
}

pub fn run(a: TrainArgs) -> Outcome {
    let seed = resolve_seed(a.seed)?;
    let cfg = model_config(a.config.as_deref())?;
    if a.steps == 0 {
        return Err(Failure::Usage("--steps must be at least 1".into()));
    }
    if !(a.lr >= 0.0 && a.clip_norm > 0.0 && (0.0..1.0).contains(&a.momentum)) {
        return Err(Failure::Usage("need lr >= 0, clip norm > 0 and momentum in [0, 1)".into()));
    }
    let data = load_samples(&a.data)?;
    check_fit(&cfg, &data)?;
    let tc = TrainConfig {
        steps: a.steps,
        lr: a.lr,
        momentum: a.momentum,
        clip_norm: a.clip_norm,
        eval_every: a.eval_every,
    };
    let (model, trace) = train_toy(&data, &cfg, &tc, seed)?;
    let run = RunConfig {
        model: cfg.clone(),
        train: tc,
        seed,
        scenes: data.len(),
    };
    let cfg_json = serde_json::to_value(&run).map_err(|e| Failure::Data(e.to_string()))?;
    save_checkpoint(&a.out, &model.params, cfg_json)?;
    let tpath = trace_path(&a.out);
    write_json(&tpath, &trace)?;
    Ok(json(&summary(&run, &trace, model.params.numel(), &a.out, &tpath)))
}

fn summary<'a>(run: &RunConfig, trace: &'a Trace, params: usize, ckpt: &'a Path, tpath: &'a Path) -> Summary<'a> {
    let tail = &trace.steps[trace.steps.len().saturating_sub(50)..];
    Summary {
        schema: TRAIN_SCHEMA,
        seed: run.seed,
        steps: run.train.steps,
        scenes: run.scenes,
        fusion: run.model.fusion.name(),
        backbone: run.model.backbone.name(),
        params,
        first_loss: trace.steps[0].loss,
        final_loss: tail.iter().map(|s| s.loss).sum::<f64>() / tail.len() as f64,
        evals: &trace.evals,
        checkpoint: ckpt.to_str().unwrap_or_default(),
        trace: tpath.to_str().unwrap_or_default(),
    }
}
