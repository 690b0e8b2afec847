use satmap_core::io::read_json;
use satmap_core::synth::{write_dataset, DatasetSpec, SceneParams, SynthConfig};

use crate::args::SynthArgs;
use crate::data::{json, resolve_seed};
use crate::failure::{Failure, Outcome};

pub fn run(a: SynthArgs) -> Outcome {
    if a.n == 0 {
        return Err(Failure::Usage("--n must be at least 1".into()));
    }
    let mut template: SceneParams = match &a.template {
        Some(p) => read_json(p)?,
        None => SceneParams::default(),
    };
    template.occlusion_frac = a.occlusion;
    template.misalign_px = a.misalign;
    template.cam_occluder_count = a.occluders;
    template
        .validate()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let spec = DatasetSpec {
        base_seed: resolve_seed(a.seed)?,
        n_scenes: a.n,
        template,
        weather_tags: a.weather,
        synth: SynthConfig::toy(),
    };
    let manifest = write_dataset(&spec, &a.out)?;
    Ok(json(&manifest))
}
