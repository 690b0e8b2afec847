use image::imageops::{overlay, resize, FilterType};
use image::{Rgb, RgbImage};
use satmap_core::geomath::SatImage;
use satmap_core::io::write_png;
use satmap_core::mapcore::{draw_map, rasterize_map, raster_size, BevRange, VectorMap};
use serde::Serialize;

use crate::args::RasterizeArgs;
use crate::data::json;
use crate::failure::{Failure, Outcome};

pub const FIGURE_SCHEMA: &str = "satmap-figure/1";
const GAP_PX: u32 = 4;

#[derive(Serialize)]
struct Panel {
    kind: &'static str,
    instances: usize,
}

#[derive(Serialize)]
struct Figure<'a> {
    schema: &'static str,
    out: &'a str,
    width: u32,
    height: u32,
    panels: Vec<Panel>,
}

/// Places panels left to right on a white canvas.
fn join(panels: &[RgbImage]) -> RgbImage {
    let height = panels.iter().map(RgbImage::height).max().unwrap_or(1);
    let width = panels.iter().map(RgbImage::width).sum::<u32>() + GAP_PX * (panels.len() as u32 - 1);
    let mut canvas = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let mut x = 0;
    for p in panels {
        overlay(&mut canvas, p, x as i64, 0);
        x += p.width() + GAP_PX;
    }
    canvas
}

pub fn run(a: RasterizeArgs) -> Outcome {
    let [x0, x1, y0, y1] = a.range[..] else {
        return Err(Failure::Usage("--range takes x_min,x_max,y_min,y_max".into()));
    };
    if !(x1 > x0 && y1 > y0 && a.px_per_m > 0.0) {
        return Err(Failure::Usage("need a non-empty --range and --px-per-m > 0".into()));
    }
    let range = BevRange { x: (x0, x1), y: (y0, y1) };
    let map = VectorMap::load(&a.map)?;
    let (rows, cols) = raster_size(&range, a.px_per_m);

    let mut images = Vec::new();
    let mut panels = Vec::new();
    if let Some(p) = &a.sat {
        let sat = SatImage::load(p)?;
        // the crop is assumed to span the drawing range
        let mut img = resize(&sat.image, cols, rows, FilterType::Triangle);
        draw_map(&mut img, &map, &range, a.px_per_m, a.stroke);
        images.push(img);
        panels.push(Panel {
            kind: "satellite",
            instances: map.instances.len(),
        });
    }
    images.push(rasterize_map(&map, &range, a.px_per_m, a.stroke)?);
    panels.push(Panel {
        kind: "map",
        instances: map.instances.len(),
    });
    if let Some(p) = &a.pred {
        let mut pred = VectorMap::load(p)?;
        pred.instances.retain(|i| i.score.is_none_or(|s| s >= a.min_score));
        images.push(rasterize_map(&pred, &range, a.px_per_m, a.stroke)?);
        panels.push(Panel {
            kind: "prediction",
            instances: pred.instances.len(),
        });
    }
    let fig = join(&images);
    write_png(&a.out, &fig)?;
    Ok(json(&Figure {
        schema: FIGURE_SCHEMA,
        out: a.out.to_str().unwrap_or_default(),
        width: fig.width(),
        height: fig.height(),
        panels,
    }))
}
