use satmap_core::bevgeom::CameraRig;
use satmap_core::synth::{synthesize, SceneParams, SynthConfig};
use satmap_net::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use satmap_net::model::{model_loss, Model, ModelConfig, Sample};
use satmap_net::tape::{Fault, Graph, OP_KINDS};
use serde::Serialize;

use crate::args::GradcheckArgs;
use crate::data::{check_fit, json, model_config, resolve_seed};
use crate::failure::{Failure, Outcome};

pub const GRADCHECK_SCHEMA: &str = "satmap-gradcheck/1";

#[derive(Serialize)]
struct Output<'a> {
    schema: &'static str,
    seed: u64,
    fusion: &'static str,
    backbone: &'static str,
    corrupt: Option<Corrupt<'a>>,
    params: usize,
    #[serde(flatten)]
    report: &'a GradCheckReport,
}

#[derive(Serialize)]
struct Corrupt<'a> {
    op: &'a str,
    scale: f64,
}

/// A two-camera synthetic scene sized for `cfg`.
fn scene_for(cfg: &ModelConfig, seed: u64) -> Result<Sample, Failure> {
    let (ex, _) = cfg.range.extent();
    let synth = SynthConfig {
        range: cfg.range,
        sat_px_per_m: cfg.sat_size.1 as f64 / ex,
        rig: CameraRig::surround(2, (cfg.cam_size.0 as u32, cfg.cam_size.1 as u32), 100f64.to_radians())?,
        ..SynthConfig::toy()
    };
    let params = SceneParams {
        seed,
        ..Default::default()
    };
    let sample = Sample::from_scene(&synthesize(&params, &synth)?);
    check_fit(cfg, std::slice::from_ref(&sample))?;
    Ok(sample)
}

pub fn run(a: GradcheckArgs) -> Outcome {
    let seed = resolve_seed(a.seed)?;
    let cfg = model_config(a.config.as_deref())?;
    if let Some(op) = &a.corrupt {
        if !OP_KINDS.contains(&op.as_str()) {
            return Err(Failure::Usage(format!("--corrupt {op:?}: known op kinds are {}", OP_KINDS.join(", "))));
        }
    }
    if !(a.tol > 0.0) || a.entries == 0 {
        return Err(Failure::Usage("need --tol > 0 and --entries >= 1".into()));
    }
    let sample = scene_for(&cfg, seed)?;
    let model = Model::new(cfg, &sample.rig, seed)?;
    let gc = GradCheckConfig {
        tol: a.tol,
        entries_per_block: a.entries,
        seed,
        fault: a.corrupt.map(|op| Fault {
            op,
            scale: a.corrupt_scale,
        }),
        ..Default::default()
    };
    let report = grad_check(&model.params, |g: &mut Graph| Ok(model_loss(g, &model, &sample)?.loss), &gc)?;
    let out = json(&Output {
        schema: GRADCHECK_SCHEMA,
        seed,
        fusion: model.cfg.fusion.name(),
        backbone: model.cfg.backbone.name(),
        corrupt: gc.fault.as_ref().map(|f| Corrupt {
            op: &f.op,
            scale: f.scale,
        }),
        params: model.params.numel(),
        report: &report,
    });
    if report.pass {
        Ok(out)
    } else {
        Err(Failure::Check {
            message: format!(
                "max relative error {:.3e} exceeds {:.1e} in {} block(s): {}",
                report.max_rel_err,
                report.tol,
                report.failed_blocks.len(),
                report.failed_blocks.join(", ")
            ),
            report: out,
        })
    }
}
