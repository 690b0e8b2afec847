use std::collections::BTreeMap;
use std::sync::Mutex;
use std::time::Instant;

use satmap_core::io::write_json;
use satmap_core::metrics::EvalConfig;
use satmap_net::blocks::Backbone;
use satmap_net::model::{Fusion, ModelConfig, Sample};
use satmap_net::train::{evaluate, train_toy, TrainConfig};
use serde::Serialize;

use crate::args::AblateArgs;
use crate::data::{check_fit, json, load_samples, model_config, resolve_seed};
use crate::failure::{Failure, Outcome};

pub const ABLATE_SCHEMA: &str = "satmap-ablate/1";

/// One grid cell. Camera-only runs have no satellite backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Variant {
    backbone: Option<Backbone>,
    fusion: Fusion,
}

impl Variant {
    fn label(&self) -> String {
        match self.backbone {
            Some(b) => format!("{}/{}", b.name(), self.fusion.name()),
            None => self.fusion.name().to_string(),
        }
    }
}

#[derive(Debug, Serialize)]
struct RunRecord {
    backbone: Option<&'static str>,
    fusion: &'static str,
    seed: u64,
    map: f64,
    ap_class: BTreeMap<String, f64>,
    /// Mean step loss over the last (up to) 50 steps.
    final_loss: f64,
}

#[derive(Debug, Serialize)]
struct Cell {
    label: String,
    backbone: Option<&'static str>,
    fusion: &'static str,
    maps: Vec<f64>,
    median_map: f64,
}

#[derive(Debug, Serialize)]
struct Report {
    schema: &'static str,
    steps: usize,
    lr: f64,
    seeds: Vec<u64>,
    train_scenes: usize,
    eval_scenes: usize,
    /// `"held_out"` or `"train"`.
    eval_on: &'static str,
    runs: Vec<RunRecord>,
    cells: Vec<Cell>,
    /// Per backbone: median mAP of conv fusion minus cross-attention fusion.
    conv_minus_cross_attention: BTreeMap<String, f64>,
    /// Per satellite cell: median mAP minus the camera-only median.
    margin_over_camera_only: BTreeMap<String, f64>,
}

fn parse_list<T: serde::de::DeserializeOwned>(s: &str, what: &str) -> Result<Vec<T>, Failure> {
    s.split(',')
        .map(|t| t.trim())
        .filter(|t| !t.is_empty())
        .map(|t| {
            serde_json::from_value(serde_json::Value::String(t.to_string()))
                .map_err(|_| Failure::Usage(format!("unknown {what} {t:?}")))
        })
        .collect()
}

fn parse_grid(grid: &str) -> Result<Vec<Variant>, Failure> {
    let parts: Vec<&str> = grid.split(['×', 'x']).collect();
    let [b, f] = parts[..] else {
        return Err(Failure::Usage(format!("--grid {grid:?}: expected backbones×fusions")));
    };
    let backbones: Vec<Backbone> = parse_list(b, "backbone")?;
    let fusions: Vec<Fusion> = parse_list(f, "fusion")?;
    if fusions.is_empty() || (backbones.is_empty() && fusions.iter().any(|&f| f != Fusion::CameraOnly)) {
        return Err(Failure::Usage(format!("--grid {grid:?} is empty")));
    }
    let mut out = Vec::new();
    for &fusion in &fusions {
        if fusion == Fusion::CameraOnly {
            out.push(Variant { backbone: None, fusion });
        } else {
            out.extend(backbones.iter().map(|&b| Variant { backbone: Some(b), fusion }));
        }
    }
    out.sort();
    out.dedup();
    Ok(out)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

struct Job {
    variant: Variant,
    seed: u64,
}

fn run_job(job: &Job, base: &ModelConfig, tc: &TrainConfig, train: &[Sample], test: &[Sample]) -> Result<RunRecord, Failure> {
    let mut cfg = base.clone();
    cfg.fusion = job.variant.fusion;
    if let Some(b) = job.variant.backbone {
        cfg.backbone = b;
    }
    let t = Instant::now();
    let (model, trace) = train_toy(train, &cfg, tc, job.seed)?;
    let rep = evaluate(&model, test, &EvalConfig::default())?;
    eprintln!(
        "satmap ablate: {} seed {}: mAP {:.4} ({:.0} s)",
        job.variant.label(),
        job.seed,
        rep.map,
        t.elapsed().as_secs_f64()
    );
    let tail = &trace.steps[trace.steps.len().saturating_sub(50)..];
    Ok(RunRecord {
        backbone: job.variant.backbone.map(Backbone::name),
        fusion: job.variant.fusion.name(),
        seed: job.seed,
        map: rep.map,
        ap_class: rep.ap_class,
        final_loss: tail.iter().map(|s| s.loss).sum::<f64>() / tail.len() as f64,
    })
}

pub fn run(a: AblateArgs) -> Outcome {
    let variants = parse_grid(&a.grid)?;
    let seeds = if a.seeds.is_empty() { vec![resolve_seed(None)?] } else { a.seeds.clone() };
    if a.steps == 0 || !(a.lr >= 0.0) {
        return Err(Failure::Usage("need --steps >= 1 and --lr >= 0".into()));
    }
    let base = model_config(a.config.as_deref())?;
    let train = load_samples(&a.data)?;
    let test = match &a.test {
        Some(p) => load_samples(p)?,
        None => train.clone(),
    };
    check_fit(&base, &train)?;
    check_fit(&base, &test)?;
    let tc = TrainConfig {
        steps: a.steps,
        lr: a.lr,
        ..Default::default()
    };

    let jobs: Vec<Job> = variants
        .iter()
        .flat_map(|&variant| seeds.iter().map(move |&seed| Job { variant, seed }))
        .collect();
    let workers = a
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .clamp(1, jobs.len());
    // results land in job order whatever the thread scheduling
    let slots: Vec<Mutex<Option<Result<RunRecord, Failure>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = Mutex::new(0usize);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = {
                    let mut n = next.lock().unwrap();
                    let i = *n;
                    *n += 1;
                    i
                };
                let Some(job) = jobs.get(i) else { break };
                let r = run_job(job, &base, &tc, &train, &test);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    let runs: Vec<RunRecord> = slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every job ran"))
        .collect::<Result<_, _>>()?;

    let mut cells = Vec::new();
    let mut medians = BTreeMap::new();
    for (v, chunk) in variants.iter().zip(runs.chunks(seeds.len())) {
        let maps: Vec<f64> = chunk.iter().map(|r| r.map).collect();
        let m = median(&maps);
        medians.insert(*v, m);
        cells.push(Cell {
            label: v.label(),
            backbone: v.backbone.map(Backbone::name),
            fusion: v.fusion.name(),
            maps,
            median_map: m,
        });
    }
    let mut conv_minus_ca = BTreeMap::new();
    for b in [Backbone::Attention, Backbone::Conv] {
        let get = |fusion| medians.get(&Variant { backbone: Some(b), fusion });
        if let (Some(c), Some(x)) = (get(Fusion::ConvFuser), get(Fusion::CrossAttention)) {
            conv_minus_ca.insert(b.name().to_string(), c - x);
        }
    }
    let mut margin = BTreeMap::new();
    if let Some(cam) = medians.get(&Variant {
        backbone: None,
        fusion: Fusion::CameraOnly,
    }) {
        for (v, m) in &medians {
            if v.backbone.is_some() {
                margin.insert(v.label(), m - cam);
            }
        }
    }
    let report = Report {
        schema: ABLATE_SCHEMA,
        steps: a.steps,
        lr: a.lr,
        seeds,
        train_scenes: train.len(),
        eval_scenes: test.len(),
        eval_on: if a.test.is_some() { "held_out" } else { "train" },
        runs,
        cells,
        conv_minus_cross_attention: conv_minus_ca,
        margin_over_camera_only: margin,
    };
    write_json(&a.out, &report)?;
    Ok(json(&report))
}
