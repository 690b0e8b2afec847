use std::path::Path;

use satmap_core::io::read_json;
use satmap_core::mapcore::VectorMap;
use satmap_core::metrics::{map_score, split_report, EvalConfig, EvalSample};
use serde_json::Value;

use crate::args::EvalArgs;
use crate::data::json;
use crate::failure::{Failure, Outcome};

/// One map, or an array of maps.
fn read_maps(path: &Path) -> Result<Vec<VectorMap>, Failure> {
    let value: Value = read_json(path)?;
    let parsed = if value.is_array() {
        serde_json::from_value(value)
    } else {
        serde_json::from_value(value).map(|m| vec![m])
    };
    parsed.map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

pub fn run(a: EvalArgs) -> Outcome {
    let cfg: EvalConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => EvalConfig::default(),
    };
    cfg.validate()?;
    let preds = read_maps(&a.pred)?;
    let gts = read_maps(&a.gt)?;
    if preds.len() != gts.len() {
        return Err(Failure::Data(format!("{} predicted maps for {} ground-truth maps", preds.len(), gts.len())));
    }
    let samples: Vec<EvalSample> = preds.into_iter().zip(gts).map(|(pred, gt)| EvalSample { pred, gt }).collect();
    Ok(if a.per_tag {
        json(&split_report(&samples, &cfg, None)?)
    } else {
        json(&map_score(&samples, &cfg)?)
    })
}
