//! Vectorized map model: class-labeled polylines and polygons in the ego frame.
//!
//! The ego frame has +x along the driving direction and +y to the left, in
//! meters. Polygons are stored with implicit closure: the first vertex is not
//! repeated at the end.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geomath::GeoPose;
use crate::io;

pub type Point = [f64; 2];

pub const DEFAULT_NUM_POINTS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapClass {
    PedCrossing,
    Divider,
    Boundary,
}

impl MapClass {
    pub const ALL: [MapClass; 3] = [MapClass::PedCrossing, MapClass::Divider, MapClass::Boundary];

    pub fn index(self) -> usize {
        match self {
            MapClass::PedCrossing => 0,
            MapClass::Divider => 1,
            MapClass::Boundary => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            MapClass::PedCrossing => "ped_crossing",
            MapClass::Divider => "divider",
            MapClass::Boundary => "boundary",
        }
    }

    /// Crossings are polygons, lane dividers and road boundaries are open.
    pub fn default_closed(self) -> bool {
        matches!(self, MapClass::PedCrossing)
    }

    pub fn color(self) -> Rgb<u8> {
        match self {
            MapClass::PedCrossing => Rgb([40, 110, 255]),
            MapClass::Divider => Rgb([255, 205, 0]),
            MapClass::Boundary => Rgb([0, 200, 70]),
        }
    }
}

impl fmt::Display for MapClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MapClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown map class {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawInstance")]
pub struct MapInstance {
    pub class: MapClass,
    pub closed: bool,
    pub points: Vec<Point>,
    /// Confidence for predicted instances; absent on ground truth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Deserialize)]
struct RawInstance {
    class: MapClass,
    closed: Option<bool>,
    points: Vec<Point>,
    #[serde(default)]
    score: Option<f64>,
}

impl TryFrom<RawInstance> for MapInstance {
    type Error = Error;

    fn try_from(raw: RawInstance) -> Result<Self> {
        let closed = raw.closed.unwrap_or_else(|| raw.class.default_closed());
        let mut inst = MapInstance::new(raw.class, raw.points, closed)?;
        inst.score = raw.score;
        Ok(inst)
    }
}

impl MapInstance {
    /// Validates the geometry. A closed instance whose last vertex repeats the
    /// first has the duplicate dropped.
    pub fn new(class: MapClass, mut points: Vec<Point>, closed: bool) -> Result<Self> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite map coordinate".into()));
        }
        if closed && points.len() > 2 && points.first() == points.last() {
            points.pop();
        }
        if points.len() < 2 {
            return Err(Error::Invalid(format!(
                "map instance needs at least 2 points, got {}",
                points.len()
            )));
        }
        Ok(Self {
            class,
            closed,
            points,
            score: None,
        })
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Polyline length, including the closing segment for polygons.
    pub fn length(&self) -> f64 {
        path_length(&self.points, self.closed)
    }
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn path_length(points: &[Point], closed: bool) -> f64 {
    let mut len: f64 = points.windows(2).map(|w| dist(w[0], w[1])).sum();
    if closed {
        len += dist(points[points.len() - 1], points[0]);
    }
    len
}

/// `n` points uniformly spaced by arc length along the geometry.
///
/// Open paths keep both endpoints. Closed paths start at the first vertex and
/// cover the loop without repeating it.
pub fn arc_length_sample(points: &[Point], closed: bool, n: usize) -> Result<Vec<Point>> {
    if n < 2 {
        return Err(Error::Precondition(format!("need at least 2 samples, got {n}")));
    }
    if points.len() < 2 {
        return Err(Error::Degenerate("fewer than 2 vertices".into()));
    }
    let mut verts = points.to_vec();
    if closed {
        verts.push(points[0]);
    }
    let mut cum = Vec::with_capacity(verts.len());
    cum.push(0.0);
    for w in verts.windows(2) {
        cum.push(cum[cum.len() - 1] + dist(w[0], w[1]));
    }
    let total = cum[cum.len() - 1];
    if !(total > 0.0) {
        return Err(Error::Degenerate("zero-length geometry".into()));
    }
    let denom = if closed { n as f64 } else { (n - 1) as f64 };
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    for k in 0..n {
        if !closed && k == n - 1 {
            out.push(verts[verts.len() - 1]);
            break;
        }
        let s = total * k as f64 / denom;
        while seg + 2 < cum.len() && cum[seg + 1] <= s {
            seg += 1;
        }
        let (a, b) = (verts[seg], verts[seg + 1]);
        let span = cum[seg + 1] - cum[seg];
        let t = if span > 0.0 { (s - cum[seg]) / span } else { 0.0 };
        if t == 0.0 {
            out.push(a);
        } else {
            out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
        }
    }
    Ok(out)
}

/// Resamples an instance to `n_v` arc-length-uniform points.
pub fn resample_polyline(inst: &MapInstance, n_v: usize) -> Result<MapInstance> {
    let points = arc_length_sample(&inst.points, inst.closed, n_v)?;
    Ok(MapInstance {
        class: inst.class,
        closed: inst.closed,
        points,
        score: inst.score,
    })
}

/// All point sequences that trace the same geometry.
///
/// Open: forward then reversed. Closed: every cyclic shift of the forward
/// sequence, then every cyclic shift of the reversed one. Exact duplicates are
/// dropped, keeping the first occurrence.
pub fn equivalent_orderings(inst: &MapInstance) -> Vec<Vec<Point>> {
    let pts = &inst.points;
    let n = pts.len();
    let mut all: Vec<Vec<Point>> = Vec::new();
    if inst.closed {
        for shift in 0..n {
            all.push((0..n).map(|k| pts[(shift + k) % n]).collect());
        }
        for shift in 0..n {
            all.push((0..n).map(|k| pts[(shift + n - k) % n]).collect());
        }
    } else {
        all.push(pts.clone());
        all.push(pts.iter().rev().copied().collect());
    }
    let mut unique: Vec<Vec<Point>> = Vec::with_capacity(all.len());
    for seq in all {
        if !unique.contains(&seq) {
            unique.push(seq);
        }
    }
    unique
}

/// Perception range in the ego frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevRange {
    pub x: (f64, f64),
    pub y: (f64, f64),
}

impl BevRange {
    pub fn new(x: (f64, f64), y: (f64, f64)) -> Result<Self> {
        let ok = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && a < b;
        if !ok(x) || !ok(y) {
            return Err(Error::Precondition(format!("invalid BEV range x={x:?} y={y:?}")));
        }
        Ok(Self { x, y })
    }

    /// The 60 m x 30 m range used throughout the benchmark literature.
    pub fn standard() -> Self {
        Self {
            x: (-30.0, 30.0),
            y: (-15.0, 15.0),
        }
    }

    pub fn extent(&self) -> (f64, f64) {
        (self.x.1 - self.x.0, self.y.1 - self.y.0)
    }

    pub fn contains(&self, p: Point) -> bool {
        (self.x.0..=self.x.1).contains(&p[0]) && (self.y.0..=self.y.1).contains(&p[1])
    }
}

/// Affine map of the range onto the unit square, with per-point in-range flags.
pub fn normalize_to_bev(points: &[Point], range: &BevRange) -> (Vec<Point>, Vec<bool>) {
    let (ex, ey) = range.extent();
    points
        .iter()
        .map(|p| {
            let q = [(p[0] - range.x.0) / ex, (p[1] - range.y.0) / ey];
            let inside = (0.0..=1.0).contains(&q[0]) && (0.0..=1.0).contains(&q[1]);
            (q, inside)
        })
        .unzip()
}

pub fn denormalize_from_bev(points: &[Point], range: &BevRange) -> Vec<Point> {
    let (ex, ey) = range.extent();
    points
        .iter()
        .map(|q| [range.x.0 + q[0] * ex, range.y.0 + q[1] * ey])
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorMap {
    pub frame: Option<GeoPose>,
    pub instances: Vec<MapInstance>,
    #[serde(default)]
    pub tags: Vec<String>,
}

impl VectorMap {
    pub fn new(instances: Vec<MapInstance>) -> Self {
        Self {
            frame: None,
            instances,
            tags: Vec::new(),
        }
    }

    pub fn of_class(&self, class: MapClass) -> impl Iterator<Item = &MapInstance> {
        self.instances.iter().filter(move |i| i.class == class)
    }

    pub fn load(path: &Path) -> Result<Self> {
        io::read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }
}

pub const BACKGROUND: Rgb<u8> = Rgb([28, 28, 32]);

/// Raster size `(rows, cols)` for a range at the given resolution.
/// Columns run along +x, rows along -y.
pub fn raster_size(range: &BevRange, px_per_m: f64) -> (u32, u32) {
    let (ex, ey) = range.extent();
    (
        (ey * px_per_m).round().max(1.0) as u32,
        (ex * px_per_m).round().max(1.0) as u32,
    )
}

/// Continuous pixel coordinates `(col, row)` of an ego point; pixel `(c, r)`
/// covers `[c, c+1) x [r, r+1)`.
pub fn ego_to_raster(p: Point, range: &BevRange, px_per_m: f64) -> (f64, f64) {
    ((p[0] - range.x.0) * px_per_m, (range.y.1 - p[1]) * px_per_m)
}

/// Class-colored strokes over a flat background.
pub fn rasterize_map(map: &VectorMap, range: &BevRange, px_per_m: f64, stroke_px: u32) -> Result<RgbImage> {
    if !(px_per_m > 0.0) {
        return Err(Error::Precondition(format!("px_per_m must be positive, got {px_per_m}")));
    }
    let (rows, cols) = raster_size(range, px_per_m);
    let mut img = RgbImage::from_pixel(cols, rows, BACKGROUND);
    draw_map(&mut img, map, range, px_per_m, stroke_px);
    Ok(img)
}

/// Draws every instance onto an existing raster in instance order.
pub fn draw_map(img: &mut RgbImage, map: &VectorMap, range: &BevRange, px_per_m: f64, stroke_px: u32) {
    for inst in &map.instances {
        let px: Vec<(f64, f64)> = inst
            .points
            .iter()
            .map(|p| ego_to_raster(*p, range, px_per_m))
            .collect();
        let color = inst.class.color();
        for w in px.windows(2) {
            stroke_segment(img, w[0], w[1], stroke_px as f64, color);
        }
        if inst.closed {
            stroke_segment(img, px[px.len() - 1], px[0], stroke_px as f64, color);
        }
    }
}

/// Paints every pixel whose center lies within `width / 2` of the segment.
pub fn stroke_segment(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), width: f64, color: Rgb<u8>) {
    let half = width / 2.0;
    let (w, h) = (img.width() as i64, img.height() as i64);
    let x0 = ((a.0.min(b.0) - half).floor() as i64).max(0);
    let x1 = ((a.0.max(b.0) + half).ceil() as i64).min(w - 1);
    let y0 = ((a.1.min(b.1) - half).floor() as i64).max(0);
    let y1 = ((a.1.max(b.1) + half).ceil() as i64).min(h - 1);
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = if len2 > 0.0 {
                (((cx - a.0) * dx + (cy - a.1) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
            if (cx - qx).hypot(cy - qy) <= half {
                img.put_pixel(x as u32, y as u32, color);
            }
        }
    }
}
