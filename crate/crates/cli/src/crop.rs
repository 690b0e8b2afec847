use satmap_core::geomath::{ego_crop_window, stitch_and_crop, FillPolicy, GeoPose, TileStore};

use crate::args::CropArgs;
use crate::data::json;
use crate::failure::{Failure, Outcome};

pub fn run(a: CropArgs) -> Outcome {
    let [len_x, len_y] = a.range[..] else {
        return Err(Failure::Usage("--range takes two lengths: forward,lateral".into()));
    };
    let policy = match a.fill[..] {
        [] => FillPolicy::Strict,
        [r, g, b] => FillPolicy::Fill([r, g, b]),
        _ => return Err(Failure::Usage("--fill takes three channel values r,g,b".into())),
    };
    let pose = GeoPose::new(a.lat, a.lon, a.heading.to_radians()).map_err(|e| Failure::Usage(e.to_string()))?;
    let store = TileStore::load_dir(&a.tiles, a.zoom)?;
    let spec = ego_crop_window(&pose, (len_x, len_y), a.zoom, store.tile_px)?;
    let sat = stitch_and_crop(&store, &spec, policy)?;
    sat.save(&a.out)?;
    Ok(json(&sat.meta))
}
