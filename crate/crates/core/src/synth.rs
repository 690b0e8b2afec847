//! Deterministic synthetic driving scenes.
//!
//! A scene is a gently curved road with parallel lane dividers, two road
//! boundaries and up to a couple of pedestrian crossings, all clipped to the
//! BEV range. From the ground truth we render a satellite raster (with opaque
//! occluders and a rigid misalignment) and pinhole camera views (with opaque
//! boxes). Every random draw comes from a ChaCha stream derived from the
//! scene seed, so a seed fully determines the scene.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bevgeom::{project_to_camera, CameraRig};
use crate::error::{Error, Result};
use crate::geomath::{GeoPose, SatImage, SatMeta};
use crate::io;
use crate::mapcore::{draw_map, ego_to_raster, raster_size, BevRange, MapClass, MapInstance, Point, VectorMap};

pub const MANIFEST_SCHEMA: &str = "satmap-synth/1";
pub const OCCLUDED_TAG: &str = "occluded";
pub const CLEAN_TAG: &str = "clean";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub seed: u64,
    /// Inclusive range for the number of lane dividers.
    pub n_lanes: (usize, usize),
    /// Maximum absolute road curvature in 1/m.
    pub curvature: f64,
    pub occlusion_frac: f64,
    pub misalign_px: u32,
    pub cam_occluder_count: usize,
    pub weather_tag: String,
    /// Inclusive range for the number of pedestrian crossings.
    #[serde(default = "default_crossings")]
    pub ped_crossings: (usize, usize),
    #[serde(default = "default_lane_width")]
    pub lane_width: f64,
}

fn default_crossings() -> (usize, usize) {
    (0, 2)
}

fn default_lane_width() -> f64 {
    3.2
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            seed: 0,
            n_lanes: (1, 2),
            curvature: 0.01,
            occlusion_frac: 0.0,
            misalign_px: 0,
            cam_occluder_count: 0,
            weather_tag: "sunny".into(),
            ped_crossings: default_crossings(),
            lane_width: default_lane_width(),
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_lanes.0 > self.n_lanes.1 || self.ped_crossings.0 > self.ped_crossings.1 {
            return Err(Error::Precondition("empty count range".into()));
        }
        if !(0.0..=1.0).contains(&self.occlusion_frac) {
            return Err(Error::Precondition(format!(
                "occlusion_frac {} outside [0, 1]",
                self.occlusion_frac
            )));
        }
        if !(self.curvature >= 0.0) || !(self.lane_width > 0.0) {
            return Err(Error::Precondition("curvature must be >= 0 and lane width > 0".into()));
        }
        Ok(())
    }

    /// Tags written next to the ground truth: weather plus occlusion state.
    pub fn tags(&self) -> Vec<String> {
        let occ = if self.occlusion_frac > 0.0 || self.cam_occluder_count > 0 {
            OCCLUDED_TAG
        } else {
            CLEAN_TAG
        };
        vec![self.weather_tag.clone(), occ.to_string()]
    }
}

/// Rendering setup shared by every scene of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub range: BevRange,
    pub sat_px_per_m: f64,
    pub sat_stroke_px: u32,
    pub cam_stroke_px: f64,
    pub rig: CameraRig,
}

impl SynthConfig {
    /// 30 m x 15 m range, 128 x 64 satellite raster, two 32 x 64 cameras.
    pub fn toy() -> Self {
        Self {
            range: BevRange {
                x: (-15.0, 15.0),
                y: (-7.5, 7.5),
            },
            sat_px_per_m: 128.0 / 30.0,
            sat_stroke_px: 3,
            cam_stroke_px: 2.0,
            rig: CameraRig::surround(2, (32, 64), 100f64.to_radians()).expect("valid toy rig"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub gt: VectorMap,
    pub pose: GeoPose,
    pub rig: CameraRig,
    pub sat: SatImage,
    pub cam_images: Vec<RgbImage>,
    pub params: SceneParams,
}

/// Ground truth and pose only.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGeometry {
    pub gt: VectorMap,
    pub pose: GeoPose,
}

fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

const STREAM_GEOMETRY: u64 = 1;
const STREAM_SAT_NOISE: u64 = 2;
const STREAM_CAM: u64 = 16;

/// Liang-Barsky clip of segment `a -> b`; returns the parameter interval.
fn clip_segment(a: Point, b: Point, range: &BevRange) -> Option<(f64, f64)> {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let mut t0: f64 = 0.0;
    let mut t1: f64 = 1.0;
    for (p, q) in [
        (-dx, a[0] - range.x.0),
        (dx, range.x.1 - a[0]),
        (-dy, a[1] - range.y.0),
        (dy, range.y.1 - a[1]),
    ] {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    (t0 <= t1).then_some((t0, t1))
}

fn clamp_to(p: Point, range: &BevRange) -> Point {
    [p[0].clamp(range.x.0, range.x.1), p[1].clamp(range.y.0, range.y.1)]
}

fn lerp(a: Point, b: Point, t: f64) -> Point {
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
}

/// Splits an open polyline into its maximal runs inside the range.
pub fn clip_polyline(points: &[Point], range: &BevRange) -> Vec<Vec<Point>> {
    let mut runs: Vec<Vec<Point>> = Vec::new();
    let mut cur: Vec<Point> = Vec::new();
    for w in points.windows(2) {
        match clip_segment(w[0], w[1], range) {
            Some((t0, t1)) => {
                let s = clamp_to(lerp(w[0], w[1], t0), range);
                let e = clamp_to(lerp(w[0], w[1], t1), range);
                if cur.last() != Some(&s) {
                    if !cur.is_empty() {
                        runs.push(std::mem::take(&mut cur));
                    }
                    cur.push(s);
                }
                if e != s {
                    cur.push(e);
                }
                if t1 < 1.0 {
                    runs.push(std::mem::take(&mut cur));
                }
            }
            None => {
                if !cur.is_empty() {
                    runs.push(std::mem::take(&mut cur));
                }
            }
        }
    }
    if !cur.is_empty() {
        runs.push(cur);
    }
    runs.retain(|r| r.len() >= 2);
    runs
}

/// Sutherland-Hodgman clip of a closed polygon against the range.
pub fn clip_polygon(points: &[Point], range: &BevRange) -> Vec<Point> {
    type Edge = (usize, f64, bool); // axis, bound, keep-if-greater
    let edges: [Edge; 4] = [
        (0, range.x.0, true),
        (0, range.x.1, false),
        (1, range.y.0, true),
        (1, range.y.1, false),
    ];
    let mut poly = points.to_vec();
    for (axis, bound, greater) in edges {
        if poly.is_empty() {
            break;
        }
        let inside = |p: &Point| if greater { p[axis] >= bound } else { p[axis] <= bound };
        let mut out = Vec::new();
        for i in 0..poly.len() {
            let cur = poly[i];
            let prev = poly[(i + poly.len() - 1) % poly.len()];
            let cross = |a: Point, b: Point| {
                let t = (bound - a[axis]) / (b[axis] - a[axis]);
                let mut p = lerp(a, b, t);
                p[axis] = bound;
                p
            };
            match (inside(&prev), inside(&cur)) {
                (true, true) => out.push(cur),
                (true, false) => out.push(cross(prev, cur)),
                (false, true) => {
                    out.push(cross(prev, cur));
                    out.push(cur);
                }
                (false, false) => {}
            }
        }
        poly = out;
    }
    let mut dedup: Vec<Point> = Vec::with_capacity(poly.len());
    for p in poly.into_iter().map(|p| clamp_to(p, range)) {
        if dedup.last() != Some(&p) {
            dedup.push(p);
        }
    }
    while dedup.len() > 1 && dedup.first() == dedup.last() {
        dedup.pop();
    }
    dedup
}

fn polyline_len(p: &[Point]) -> f64 {
    p.windows(2).map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1])).sum()
}

/// Ground-truth geometry for a scene; fully determined by `params.seed`.
pub fn gen_scene(params: &SceneParams, range: &BevRange) -> Result<SceneGeometry> {
    params.validate()?;
    let mut rng = stream(params.seed, STREAM_GEOMETRY);
    let pose = GeoPose::new(
        rng.random_range(-60.0..60.0),
        rng.random_range(-180.0..180.0),
        rng.random_range(-PI..PI),
    )?;
    let n_div = rng.random_range(params.n_lanes.0..=params.n_lanes.1);
    let n_ped = rng.random_range(params.ped_crossings.0..=params.ped_crossings.1);
    let tilt: f64 = rng.random_range(-0.08..0.08);
    let kappa = if params.curvature > 0.0 {
        rng.random_range(-params.curvature..=params.curvature)
    } else {
        0.0
    };
    let width = params.lane_width * rng.random_range(0.9..1.1);
    let half = (n_div + 1) as f64 * width / 2.0;
    // the ego drives near the middle of a random lane
    let ego_lane = rng.random_range(0..=n_div);
    let y0 = half - (ego_lane as f64 + 0.5) * width + rng.random_range(-0.4..0.4);
    let center = move |x: f64| y0 + tilt * x + 0.5 * kappa * x * x;

    let mut offsets: Vec<(MapClass, f64)> = vec![(MapClass::Boundary, -half)];
    for k in 0..n_div {
        offsets.push((MapClass::Divider, -half + (k + 1) as f64 * width));
    }
    offsets.push((MapClass::Boundary, half));

    let mut instances = Vec::new();
    let step = 1.0;
    let n_steps = ((range.x.1 - range.x.0 + 4.0) / step).ceil() as usize;
    for (class, off) in &offsets {
        let line: Vec<Point> = (0..=n_steps)
            .map(|i| {
                let x = range.x.0 - 2.0 + i as f64 * step;
                [x, center(x) + off]
            })
            .collect();
        for run in clip_polyline(&line, range) {
            if polyline_len(&run) >= 1.0 {
                instances.push(MapInstance::new(*class, run, false)?);
            }
        }
    }

    let (lo, hi) = (range.x.0 + 3.0, range.x.1 - 3.0);
    let mid = (lo + hi) / 2.0;
    for k in 0..n_ped {
        let xc = match (n_ped, k) {
            (1, _) => rng.random_range(lo..hi),
            (_, 0) => rng.random_range(lo..mid - 3.0),
            _ => rng.random_range(mid + 3.0..hi),
        };
        let depth = rng.random_range(2.5..4.0);
        let (x0, x1) = (xc - depth / 2.0, xc + depth / 2.0);
        let poly = vec![
            [x0, center(x0) - half],
            [x1, center(x1) - half],
            [x1, center(x1) + half],
            [x0, center(x0) + half],
        ];
        let clipped = clip_polygon(&poly, range);
        if clipped.len() >= 3 {
            instances.push(MapInstance::new(MapClass::PedCrossing, clipped, true)?);
        }
    }

    Ok(SceneGeometry {
        gt: VectorMap {
            frame: Some(pose),
            instances,
            tags: params.tags(),
        },
        pose,
    })
}

/// Asphalt-like gray noise. A pixel's value depends only on the seed and its
/// position relative to `origin` (row, col), so shifted canvases agree.
pub fn road_texture(rows: u32, cols: u32, origin: (i64, i64), seed: u64) -> RgbImage {
    let mut img = RgbImage::new(cols, rows);
    for (c, r, p) in img.enumerate_pixels_mut() {
        let key = ((r as i64 - origin.0) as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (c as i64 - origin.1) as u64;
        let g = 82 + (mix64(seed ^ mix64(key)) % 21) as u8;
        *p = Rgb([g, g, g + 4]);
    }
    img
}

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const OCCLUDER_COLORS: [[u8; 3]; 4] = [[34, 85, 34], [120, 64, 48], [150, 150, 150], [60, 110, 40]];

/// Satellite raster of the scene: ground truth drawn over road texture, then
/// rigidly shifted by a seed-determined offset, then covered by opaque
/// rectangles until `occlusion_frac` of the pixels are hidden.
pub fn render_satellite(
    gt: &VectorMap,
    range: &BevRange,
    px_per_m: f64,
    stroke_px: u32,
    params: &SceneParams,
) -> Result<SatImage> {
    if !(px_per_m > 0.0) {
        return Err(Error::Precondition(format!("px_per_m must be positive, got {px_per_m}")));
    }
    params.validate()?;
    let (rows, cols) = raster_size(range, px_per_m);
    let m = params.misalign_px;
    let pad = m as f64 / px_per_m;
    let canvas_range = BevRange {
        x: (range.x.0 - pad, range.x.1 + pad),
        y: (range.y.0 - pad, range.y.1 + pad),
    };
    let mut canvas = road_texture(rows + 2 * m, cols + 2 * m, (m as i64, m as i64), params.seed);
    draw_map(&mut canvas, gt, &canvas_range, px_per_m, stroke_px);

    let mut rng = stream(params.seed, STREAM_SAT_NOISE);
    let (dx, dy) = if m > 0 {
        (rng.random_range(-(m as i32)..=m as i32), rng.random_range(-(m as i32)..=m as i32))
    } else {
        (0, 0)
    };
    let mut img = RgbImage::new(cols, rows);
    for r in 0..rows {
        for c in 0..cols {
            let sr = (r as i64 + m as i64 - dy as i64) as u32;
            let sc = (c as i64 + m as i64 - dx as i64) as u32;
            img.put_pixel(c, r, *canvas.get_pixel(sc, sr));
        }
    }

    let total = (rows * cols) as usize;
    let target = (params.occlusion_frac * total as f64).round() as usize;
    let mut covered = vec![false; total];
    let mut n_cov = 0usize;
    let side_max = (rows.min(cols) / 6).max(2);
    let mut guard = 0;
    while n_cov < target && guard < 100_000 {
        guard += 1;
        let mut w = rng.random_range(2..=side_max);
        let mut h = rng.random_range(2..=side_max);
        let remaining = target - n_cov;
        if (w * h) as usize > remaining {
            w = w.min(remaining as u32).max(1);
            h = (remaining as u32).div_ceil(w).clamp(1, h);
        }
        let c0 = rng.random_range(0..=cols - w.min(cols));
        let r0 = rng.random_range(0..=rows - h.min(rows));
        let color = Rgb(OCCLUDER_COLORS[rng.random_range(0..OCCLUDER_COLORS.len())]);
        for r in r0..(r0 + h).min(rows) {
            for c in c0..(c0 + w).min(cols) {
                img.put_pixel(c, r, color);
                let k = (r * cols + c) as usize;
                if !covered[k] {
                    covered[k] = true;
                    n_cov += 1;
                }
            }
        }
    }

    Ok(SatImage::from_image(
        img,
        SatMeta {
            crop: None,
            px_per_m,
            misalign_offset_px: Some((dx, dy)),
            occluded_frac: Some(n_cov as f64 / total as f64),
            valid_frac: 1.0,
        },
    ))
}

/// Opaque boxes `(col0, row0, width, height)` for one camera. The list for a
/// larger count always extends the list for a smaller one.
pub fn camera_occluders(seed: u64, camera: usize, count: usize, size: (u32, u32)) -> Vec<(u32, u32, u32, u32)> {
    let mut rng = stream(seed, STREAM_CAM + 2 * camera as u64 + 1);
    let (h, w) = size;
    (0..count)
        .map(|_| {
            let bw = rng.random_range((w / 8).max(1)..=(w / 3).max(1));
            let bh = rng.random_range((h / 6).max(1)..=(h / 2).max(1));
            let c0 = rng.random_range(0..=w - bw);
            let r0 = rng.random_range(0..=h - bh);
            (c0, r0, bw, bh)
        })
        .collect()
}

pub const CAM_OCCLUDER_COLOR: Rgb<u8> = Rgb([150, 28, 28]);
const SKY: Rgb<u8> = Rgb([135, 170, 215]);
const GROUND: Rgb<u8> = Rgb([72, 72, 76]);

/// Pinhole renderings of the ground-plane map, one per camera.
///
/// Each polyline is sampled every 5 cm at z = 0, projected, and painted far
/// to near as discs of `stroke_px` diameter. Occluder boxes are drawn last.
pub fn render_cameras(gt: &VectorMap, rig: &CameraRig, stroke_px: f64, params: &SceneParams) -> Vec<RgbImage> {
    rig.cameras
        .iter()
        .enumerate()
        .map(|(ci, cam)| {
            let (h, w) = cam.size;
            let mut img = RgbImage::from_pixel(w, h, GROUND);
            // sky above the horizon: the viewing ray has a non-negative ego z
            let k = &cam.k;
            let t = &cam.t_ego_cam;
            for r in 0..h {
                for c in 0..w {
                    let xc = (c as f64 + 0.5 - k[0][2]) / k[0][0];
                    let yc = (r as f64 + 0.5 - k[1][2]) / k[1][1];
                    // ego z of the ray is the third column of R^T applied to (xc, yc, 1)
                    let z = t[0][2] * xc + t[1][2] * yc + t[2][2];
                    if z >= 0.0 {
                        img.put_pixel(c, r, SKY);
                    }
                }
            }
            let mut dots: Vec<(f64, f64, f64, Rgb<u8>)> = Vec::new();
            for inst in &gt.instances {
                let mut pts = inst.points.clone();
                if inst.closed {
                    pts.push(inst.points[0]);
                }
                for seg in pts.windows(2) {
                    let len = (seg[1][0] - seg[0][0]).hypot(seg[1][1] - seg[0][1]);
                    let n = (len / 0.05).ceil().max(1.0) as usize;
                    for i in 0..=n {
                        let p = lerp(seg[0], seg[1], i as f64 / n as f64);
                        let pr = project_to_camera(cam, [p[0], p[1], 0.0]);
                        if pr.visible {
                            dots.push((pr.depth, pr.u, pr.v, inst.class.color()));
                        }
                    }
                }
            }
            dots.sort_by(|a, b| b.0.total_cmp(&a.0));
            let rad = stroke_px / 2.0;
            for (_, u, v, color) in dots {
                let (c0, c1) = ((u - rad).floor().max(0.0) as u32, ((u + rad).ceil() as u32).min(w));
                let (r0, r1) = ((v - rad).floor().max(0.0) as u32, ((v + rad).ceil() as u32).min(h));
                for r in r0..r1 {
                    for c in c0..c1 {
                        if (c as f64 + 0.5 - u).hypot(r as f64 + 0.5 - v) <= rad {
                            img.put_pixel(c, r, color);
                        }
                    }
                }
            }
            for (c0, r0, bw, bh) in camera_occluders(params.seed, ci, params.cam_occluder_count, cam.size) {
                for r in r0..r0 + bh {
                    for c in c0..c0 + bw {
                        img.put_pixel(c, r, CAM_OCCLUDER_COLOR);
                    }
                }
            }
            img
        })
        .collect()
}

/// Geometry plus every rendering.
pub fn synthesize(params: &SceneParams, cfg: &SynthConfig) -> Result<Scene> {
    let geo = gen_scene(params, &cfg.range)?;
    let sat = render_satellite(&geo.gt, &cfg.range, cfg.sat_px_per_m, cfg.sat_stroke_px, params)?;
    let cam_images = render_cameras(&geo.gt, &cfg.rig, cfg.cam_stroke_px, params);
    Ok(Scene {
        gt: geo.gt,
        pose: geo.pose,
        rig: cfg.rig.clone(),
        sat,
        cam_images,
        params: params.clone(),
    })
}

/// Everything needed to regenerate a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub base_seed: u64,
    pub n_scenes: usize,
    /// Per-scene parameters; `seed` and `weather_tag` are overridden.
    pub template: SceneParams,
    /// Weather tags assigned round-robin.
    pub weather_tags: Vec<String>,
    pub synth: SynthConfig,
}

impl DatasetSpec {
    pub fn scene_params(&self, i: usize) -> SceneParams {
        let mut p = self.template.clone();
        p.seed = self.base_seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        if !self.weather_tags.is_empty() {
            p.weather_tag = self.weather_tags[i % self.weather_tags.len()].clone();
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub dir: String,
    pub seed: u64,
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub spec: DatasetSpec,
    pub scenes: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn scene_dir_name(i: usize) -> String {
    format!("scene_{i:04}")
}

/// Writes one scene directory.
pub fn write_scene(scene: &Scene, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    scene.gt.save(&dir.join("map.json"))?;
    scene.sat.save(&dir.join("sat.png"))?;
    for (i, img) in scene.cam_images.iter().enumerate() {
        io::write_png(&dir.join(format!("cam_{i}.png")), img)?;
    }
    scene.rig.save(&dir.join("rig.json"))?;
    io::write_json(&dir.join("params.json"), &scene.params)
}

pub fn load_scene(dir: &Path) -> Result<Scene> {
    let gt = VectorMap::load(&dir.join("map.json"))?;
    let sat = SatImage::load(&dir.join("sat.png"))?;
    let rig = CameraRig::load(&dir.join("rig.json"))?;
    let params: SceneParams = io::read_json(&dir.join("params.json"))?;
    let cam_images = (0..rig.cameras.len())
        .map(|i| io::read_png(&dir.join(format!("cam_{i}.png"))))
        .collect::<Result<Vec<_>>>()?;
    let pose = gt
        .frame
        .ok_or_else(|| Error::Invalid(format!("{}: map.json has no frame", dir.display())))?;
    Ok(Scene {
        gt,
        pose,
        rig,
        sat,
        cam_images,
        params,
    })
}

/// Generates and writes `spec.n_scenes` scenes plus `manifest.json`.
pub fn write_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut scenes = Vec::with_capacity(spec.n_scenes);
    for i in 0..spec.n_scenes {
        let params = spec.scene_params(i);
        let scene = synthesize(&params, &spec.synth)?;
        let dir = scene_dir_name(i);
        write_scene(&scene, &out_dir.join(&dir))?;
        scenes.push(ManifestEntry {
            id: format!("{i:04}"),
            dir,
            seed: params.seed,
            tags: scene.gt.tags.clone(),
        });
    }
    let manifest = Manifest {
        schema: MANIFEST_SCHEMA.into(),
        spec: spec.clone(),
        scenes,
    };
    io::write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let m: Manifest = io::read_json(&dir.join(MANIFEST_FILE))?;
    if m.schema != MANIFEST_SCHEMA {
        return Err(Error::Invalid(format!(
            "unsupported manifest schema {:?}, expected {MANIFEST_SCHEMA:?}",
            m.schema
        )));
    }
    Ok(m)
}

/// Rebuilds a dataset from an existing manifest into `out_dir`.
pub fn regenerate(manifest_dir: &Path, out_dir: &Path) -> Result<Manifest> {
    let m = read_manifest(manifest_dir)?;
    write_dataset(&m.spec, out_dir)
}

/// Loads every scene listed in a dataset manifest, in manifest order.
pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<Scene>)> {
    let m = read_manifest(dir)?;
    let scenes = m
        .scenes
        .iter()
        .map(|e| load_scene(&dir.join(&e.dir)))
        .collect::<Result<Vec<_>>>()?;
    Ok((m, scenes))
}

/// Scene directory paths of a dataset, in manifest order.
pub fn scene_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(read_manifest(dir)?.scenes.iter().map(|e| dir.join(&e.dir)).collect())
}

/// Pixel position `(col, row)` of an ego point in a satellite raster that
/// covers `range` at `px_per_m`.
pub fn sat_pixel(p: Point, range: &BevRange, px_per_m: f64) -> (f64, f64) {
    ego_to_raster(p, range, px_per_m)
}
