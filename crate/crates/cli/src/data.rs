use std::path::Path;

use satmap_core::io::to_json_string;
use satmap_core::synth::load_dataset;
use satmap_net::model::{ModelConfig, Sample};
use serde::Serialize;

use crate::failure::Failure;

pub const SEED_ENV: &str = "SATMAP_SEED";

/// The `--seed` flag, else `SATMAP_SEED`, else 0.
pub fn resolve_seed(flag: Option<u64>) -> Result<u64, Failure> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Failure::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

pub fn load_samples(dir: &Path) -> Result<Vec<Sample>, Failure> {
    let (_, scenes) = load_dataset(dir)?;
    if scenes.is_empty() {
        return Err(Failure::Data(format!("{}: dataset has no scenes", dir.display())));
    }
    Ok(scenes.iter().map(Sample::from_scene).collect())
}

pub fn model_config(path: Option<&Path>) -> Result<ModelConfig, Failure> {
    Ok(match path {
        Some(p) => ModelConfig::load(p)?,
        None => ModelConfig::toy(),
    })
}

/// Fails early when the data does not fit the model's input sizes.
pub fn check_fit(cfg: &ModelConfig, data: &[Sample]) -> Result<(), Failure> {
    for (i, s) in data.iter().enumerate() {
        if s.cam_size != cfg.cam_size || s.sat_size != cfg.sat_size {
            return Err(Failure::Data(format!(
                "scene {i}: cameras {:?} and satellite {:?} do not match the model's {:?} and {:?}",
                s.cam_size, s.sat_size, cfg.cam_size, cfg.sat_size
            )));
        }
    }
    Ok(())
}

pub fn json<T: Serialize>(value: &T) -> String {
    to_json_string(value)
}
