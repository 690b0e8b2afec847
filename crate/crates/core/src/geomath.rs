//! WGS84 / spherical Web-Mercator conversions and ego-centric satellite crops.
//!
//! World pixels follow the slippy-map convention: `x` grows east, `y` grows
//! south, and the whole world spans `tile_px * 2^zoom` pixels on each axis.
//! A pixel with integer index `p` has its center at `p + 0.5`.
//!
//! Crops are ego-aligned rasters: columns run along the ego +x axis (heading)
//! and rows run along ego -y, so the left side of the vehicle is at the top.

use std::collections::{BTreeSet, HashMap};
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

/// Equatorial circumference of the WGS84 ellipsoid in meters.
pub const EARTH_CIRCUMFERENCE_M: f64 = 40_075_016.686;

/// Latitude at which the Web-Mercator world becomes square, `atan(sinh(pi))`.
pub const MAX_LATITUDE: f64 = 85.051_128_779_806_59;

pub const DEFAULT_ZOOM: u32 = 20;
pub const DEFAULT_TILE_PX: u32 = 256;

/// Ego pose in geodetic coordinates. `heading` is counterclockwise from east.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPose {
    pub lat: f64,
    pub lon: f64,
    pub heading: f64,
}

impl GeoPose {
    pub fn new(lat: f64, lon: f64, heading: f64) -> Result<Self> {
        check_lat(lat)?;
        check_lon(lon)?;
        if !heading.is_finite() {
            return Err(Error::Domain(format!("heading {heading} is not finite")));
        }
        Ok(Self {
            lat,
            lon,
            heading: wrap_angle(heading),
        })
    }
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

fn check_lat(lat: f64) -> Result<()> {
    if !lat.is_finite() || lat.abs() > MAX_LATITUDE {
        return Err(Error::Domain(format!(
            "latitude {lat} outside Web-Mercator band [-{MAX_LATITUDE}, {MAX_LATITUDE}]"
        )));
    }
    Ok(())
}

fn check_lon(lon: f64) -> Result<()> {
    if !lon.is_finite() || !(-180.0..=180.0).contains(&lon) {
        return Err(Error::Domain(format!("longitude {lon} outside [-180, 180]")));
    }
    Ok(())
}

fn world_size(zoom: u32, tile_px: u32) -> Result<f64> {
    if zoom > 30 || tile_px == 0 {
        return Err(Error::Domain(format!(
            "unsupported zoom {zoom} / tile size {tile_px}"
        )));
    }
    Ok(tile_px as f64 * (1u64 << zoom) as f64)
}

/// Forward spherical Mercator: degrees to fractional world pixels.
pub fn wgs84_to_world_px(lat: f64, lon: f64, zoom: u32, tile_px: u32) -> Result<(f64, f64)> {
    check_lat(lat)?;
    check_lon(lon)?;
    let size = world_size(zoom, tile_px)?;
    let x = size * (lon + 180.0) / 360.0;
    let phi = lat.to_radians();
    let y = size * (1.0 - (phi.tan() + 1.0 / phi.cos()).ln() / PI) / 2.0;
    Ok((x, y))
}

/// Exact inverse of [`wgs84_to_world_px`].
pub fn world_px_to_wgs84(x: f64, y: f64, zoom: u32, tile_px: u32) -> Result<(f64, f64)> {
    let size = world_size(zoom, tile_px)?;
    if !(0.0..=size).contains(&x) || !(0.0..=size).contains(&y) {
        return Err(Error::Domain(format!(
            "world pixel ({x}, {y}) outside [0, {size}]"
        )));
    }
    let lon = x / size * 360.0 - 180.0;
    let lat = (PI * (1.0 - 2.0 * y / size)).sinh().atan().to_degrees();
    Ok((lat, lon))
}

/// Ground resolution of one world pixel at the given latitude.
pub fn meters_per_pixel(lat: f64, zoom: u32, tile_px: u32) -> Result<f64> {
    check_lat(lat)?;
    let size = world_size(zoom, tile_px)?;
    Ok(EARTH_CIRCUMFERENCE_M * lat.to_radians().cos() / size)
}

/// An ego-centered, heading-aligned crop window in world-pixel space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    pub center_world_px: (f64, f64),
    /// Angle of the crop +x axis, counterclockwise from east.
    pub rotation: f64,
    /// `(rows, cols)`; rows span the lateral range, cols the forward range.
    pub out_size: (u32, u32),
    pub meters_per_px: f64,
    pub zoom: u32,
    pub tile_px: u32,
}

impl CropSpec {
    /// Fractional world-pixel position of the center of crop pixel `(row, col)`.
    pub fn crop_to_world(&self, row: f64, col: f64) -> (f64, f64) {
        let (h, w) = (self.out_size.0 as f64, self.out_size.1 as f64);
        // offsets in crop pixels along ego +x and ego +y
        let ex = col + 0.5 - w / 2.0;
        let ey = h / 2.0 - (row + 0.5);
        let (s, c) = self.rotation.sin_cos();
        let east = ex * c - ey * s;
        let north = ex * s + ey * c;
        (
            self.center_world_px.0 + east,
            self.center_world_px.1 - north,
        )
    }

    /// Inverse of [`CropSpec::crop_to_world`]; returns fractional `(row, col)`.
    pub fn world_to_crop(&self, wx: f64, wy: f64) -> (f64, f64) {
        let (h, w) = (self.out_size.0 as f64, self.out_size.1 as f64);
        let east = wx - self.center_world_px.0;
        let north = self.center_world_px.1 - wy;
        let (s, c) = self.rotation.sin_cos();
        let ex = east * c + north * s;
        let ey = -east * s + north * c;
        (h / 2.0 - ey - 0.5, ex + w / 2.0 - 0.5)
    }
}

/// Crop window covering `range_m = (len_x, len_y)` meters around the pose.
pub fn ego_crop_window(
    pose: &GeoPose,
    range_m: (f64, f64),
    zoom: u32,
    tile_px: u32,
) -> Result<CropSpec> {
    let (len_x, len_y) = range_m;
    if !(len_x > 0.0 && len_y > 0.0) || !len_x.is_finite() || !len_y.is_finite() {
        return Err(Error::Precondition(format!(
            "crop range must be positive, got ({len_x}, {len_y})"
        )));
    }
    let center = wgs84_to_world_px(pose.lat, pose.lon, zoom, tile_px)?;
    let mpp = meters_per_pixel(pose.lat, zoom, tile_px)?;
    let rows = (len_y / mpp).round().max(1.0) as u32;
    let cols = (len_x / mpp).round().max(1.0) as u32;
    Ok(CropSpec {
        center_world_px: center,
        rotation: pose.heading,
        out_size: (rows, cols),
        meters_per_px: mpp,
        zoom,
        tile_px,
    })
}

/// Slippy-map tiles of one zoom level, keyed by `(z, x, y)`.
#[derive(Debug, Clone, Default)]
pub struct TileStore {
    pub zoom: u32,
    pub tile_px: u32,
    tiles: HashMap<(u32, u32, u32), RgbImage>,
}

impl TileStore {
    pub fn new(zoom: u32, tile_px: u32) -> Self {
        Self {
            zoom,
            tile_px,
            tiles: HashMap::new(),
        }
    }

    pub fn insert(&mut self, x: u32, y: u32, tile: RgbImage) -> Result<()> {
        let n = 1u64 << self.zoom;
        if x as u64 >= n || y as u64 >= n {
            return Err(Error::Domain(format!(
                "tile index ({x}, {y}) outside [0, {n}) at zoom {}",
                self.zoom
            )));
        }
        if tile.width() != self.tile_px || tile.height() != self.tile_px {
            return Err(Error::Invalid(format!(
                "tile {}/{x}/{y} is {}x{}, expected {}",
                self.zoom,
                tile.width(),
                tile.height(),
                self.tile_px
            )));
        }
        self.tiles.insert((self.zoom, x, y), tile);
        Ok(())
    }

    pub fn get(&self, x: u32, y: u32) -> Option<&RgbImage> {
        self.tiles.get(&(self.zoom, x, y))
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    /// Loads every `<root>/<zoom>/<x>/<y>.png`.
    pub fn load_dir(root: &Path, zoom: u32) -> Result<Self> {
        let zdir = root.join(zoom.to_string());
        let mut store: Option<TileStore> = None;
        let mut xs: Vec<_> = fs::read_dir(&zdir)
            .map_err(|e| Error::io(&zdir, e))?
            .filter_map(|e| e.ok())
            .collect();
        xs.sort_by_key(|e| e.file_name());
        for xentry in xs {
            let Some(x) = xentry.file_name().to_str().and_then(|s| s.parse::<u32>().ok()) else {
                continue;
            };
            let xdir = xentry.path();
            let mut ys: Vec<_> = fs::read_dir(&xdir)
                .map_err(|e| Error::io(&xdir, e))?
                .filter_map(|e| e.ok())
                .collect();
            ys.sort_by_key(|e| e.file_name());
            for yentry in ys {
                let path = yentry.path();
                if path.extension().and_then(|e| e.to_str()) != Some("png") {
                    continue;
                }
                let Some(y) = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .and_then(|s| s.parse::<u32>().ok())
                else {
                    continue;
                };
                let tile = io::read_png(&path)?;
                let store = store.get_or_insert_with(|| TileStore::new(zoom, tile.width()));
                store.insert(x, y, tile)?;
            }
        }
        store.ok_or_else(|| Error::Invalid(format!("no tiles under {}", zdir.display())))
    }

    /// Writes the store as `<root>/<zoom>/<x>/<y>.png`.
    pub fn save_dir(&self, root: &Path) -> Result<()> {
        let mut keys: Vec<_> = self.tiles.keys().copied().collect();
        keys.sort_unstable();
        for (z, x, y) in keys {
            let path = root
                .join(z.to_string())
                .join(x.to_string())
                .join(format!("{y}.png"));
            io::write_png(&path, &self.tiles[&(z, x, y)])?;
        }
        Ok(())
    }

    /// Splits a merged mosaic whose top-left corner is `georef.origin_tile`.
    pub fn from_mosaic(mosaic: &RgbImage, georef: &MosaicGeoRef) -> Result<Self> {
        let tp = georef.tile_px;
        if tp == 0 || mosaic.width() % tp != 0 || mosaic.height() % tp != 0 {
            return Err(Error::Invalid(format!(
                "mosaic {}x{} is not a whole number of {tp}-px tiles",
                mosaic.width(),
                mosaic.height()
            )));
        }
        let mut store = TileStore::new(georef.zoom, tp);
        for ty in 0..mosaic.height() / tp {
            for tx in 0..mosaic.width() / tp {
                let tile = image::imageops::crop_imm(mosaic, tx * tp, ty * tp, tp, tp).to_image();
                store.insert(georef.origin_tile.0 + tx, georef.origin_tile.1 + ty, tile)?;
            }
        }
        Ok(store)
    }
}

/// JSON sidecar for a merged tile mosaic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MosaicGeoRef {
    pub zoom: u32,
    pub tile_px: u32,
    pub origin_tile: (u32, u32),
}

/// What to do when a crop touches a tile that is not in the store.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FillPolicy {
    Strict,
    Fill([u8; 3]),
}

/// Metadata carried next to a satellite raster.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SatMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<CropSpec>,
    /// Ground resolution in pixels per meter.
    pub px_per_m: f64,
    /// Applied content shift `(dx cols, dy rows)` for synthetic misalignment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub misalign_offset_px: Option<(i32, i32)>,
    /// Fraction of pixels covered by synthetic occluders.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occluded_frac: Option<f64>,
    /// Fraction of pixels sampled from tiles that were present.
    pub valid_frac: f64,
}

/// Ego-aligned RGB satellite raster with a per-pixel validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SatImage {
    pub image: RgbImage,
    pub valid: Vec<bool>,
    pub meta: SatMeta,
}

impl SatImage {
    pub fn from_image(image: RgbImage, meta: SatMeta) -> Self {
        let n = (image.width() * image.height()) as usize;
        Self {
            image,
            valid: vec![true; n],
            meta,
        }
    }

    pub fn height(&self) -> u32 {
        self.image.height()
    }

    pub fn width(&self) -> u32 {
        self.image.width()
    }

    /// Writes `<stem>.png` and the `<stem>.json` sidecar.
    pub fn save(&self, png: &Path) -> Result<()> {
        io::write_png(png, &self.image)?;
        let side = Sidecar {
            meta: self.meta.clone(),
            invalid_runs: invalid_runs(&self.valid),
        };
        io::write_json(&png.with_extension("json"), &side)
    }

    /// Reads a raster and its sidecar.
    pub fn load(png: &Path) -> Result<Self> {
        let image = io::read_png(png)?;
        let side: Sidecar = io::read_json(&png.with_extension("json"))?;
        let mut img = Self::from_image(image, side.meta);
        for (start, len) in side.invalid_runs {
            let (a, b) = (start as usize, (start + len) as usize);
            if b > img.valid.len() {
                return Err(Error::Invalid(format!("{}: invalid-pixel run past the raster", png.display())));
            }
            img.valid[a..b].iter_mut().for_each(|v| *v = false);
        }
        Ok(img)
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    #[serde(flatten)]
    meta: SatMeta,
    /// `(first pixel, length)` runs of the row-major validity mask that are
    /// false.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    invalid_runs: Vec<(u32, u32)>,
}

fn invalid_runs(valid: &[bool]) -> Vec<(u32, u32)> {
    let mut runs = Vec::new();
    let mut i = 0;
    while i < valid.len() {
        if valid[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < valid.len() && !valid[i] {
            i += 1;
        }
        runs.push((start as u32, (i - start) as u32));
    }
    runs
}

/// Bilinearly resamples the merged tile raster through the crop window.
pub fn stitch_and_crop(store: &TileStore, spec: &CropSpec, policy: FillPolicy) -> Result<SatImage> {
    if store.zoom != spec.zoom || store.tile_px != spec.tile_px {
        return Err(Error::Precondition(format!(
            "crop at zoom {} / {} px does not match store at zoom {} / {} px",
            spec.zoom, spec.tile_px, store.zoom, store.tile_px
        )));
    }
    let (rows, cols) = spec.out_size;
    let tp = store.tile_px as i64;
    let world = tp << store.zoom;
    let fill = match policy {
        FillPolicy::Fill(c) => c,
        FillPolicy::Strict => [0, 0, 0],
    };
    let mut missing = BTreeSet::new();
    let mut image = RgbImage::new(cols, rows);
    let mut valid = vec![true; (rows * cols) as usize];

    let fetch = |px: i64, py: i64, missing: &mut BTreeSet<(u32, u32, u32)>| -> Option<[f64; 3]> {
        if px < 0 || py < 0 || px >= world || py >= world {
            return None;
        }
        let (tx, ty) = ((px / tp) as u32, (py / tp) as u32);
        match store.get(tx, ty) {
            Some(tile) => {
                let p = tile.get_pixel((px % tp) as u32, (py % tp) as u32).0;
                Some([p[0] as f64, p[1] as f64, p[2] as f64])
            }
            None => {
                missing.insert((store.zoom, tx, ty));
                None
            }
        }
    };

    for r in 0..rows {
        for c in 0..cols {
            let (wx, wy) = spec.crop_to_world(r as f64, c as f64);
            let (fx, fy) = (wx - 0.5, wy - 0.5);
            let (x0, y0) = (fx.floor(), fy.floor());
            let (ax, ay) = (fx - x0, fy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let mut acc = [0.0; 3];
            let mut ok = true;
            for (dy, wyv) in [(0, 1.0 - ay), (1, ay)] {
                for (dx, wxv) in [(0, 1.0 - ax), (1, ax)] {
                    let wgt = wxv * wyv;
                    if wgt == 0.0 {
                        continue;
                    }
                    match fetch(x0 + dx, y0 + dy, &mut missing) {
                        Some(p) => {
                            for k in 0..3 {
                                acc[k] += wgt * p[k];
                            }
                        }
                        None => ok = false,
                    }
                }
            }
            let px = if ok {
                Rgb([
                    acc[0].round().clamp(0.0, 255.0) as u8,
                    acc[1].round().clamp(0.0, 255.0) as u8,
                    acc[2].round().clamp(0.0, 255.0) as u8,
                ])
            } else {
                valid[(r * cols + c) as usize] = false;
                Rgb(fill)
            };
            image.put_pixel(c, r, px);
        }
    }

    if policy == FillPolicy::Strict && !missing.is_empty() {
        return Err(Error::MissingTiles(missing.into_iter().collect()));
    }
    let valid_frac = valid.iter().filter(|v| **v).count() as f64 / valid.len().max(1) as f64;
    Ok(SatImage {
        image,
        valid,
        meta: SatMeta {
            crop: Some(*spec),
            px_per_m: 1.0 / spec.meters_per_px,
            misalign_offset_px: None,
            occluded_frac: None,
            valid_frac,
        },
    })
}
