//! BEV grid, pinhole cameras and geometry-guided kernel sampling.
//!
//! Grid rows run along the driving axis (+x) and columns along +y; cell
//! `(r, c)` is centered at `(x_min + (r + 0.5) cell, y_min + (c + 0.5) cell)`.
//! Feature maps are channels-last, `(rows, cols, channels)` row-major.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::mapcore::BevRange;

pub const DEFAULT_CELL_M: f64 = 0.75;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BevGrid {
    pub range: BevRange,
    pub cell_m: f64,
    pub rows: usize,
    pub cols: usize,
}

pub fn make_grid(range: BevRange, cell_m: f64) -> Result<BevGrid> {
    if !(cell_m > 0.0) || !cell_m.is_finite() {
        return Err(Error::Precondition(format!("cell size must be positive, got {cell_m}")));
    }
    let (ex, ey) = range.extent();
    let count = |extent: f64| -> Result<usize> {
        let n = extent / cell_m;
        if (n - n.round()).abs() > 1e-9 || n.round() < 1.0 {
            return Err(Error::Precondition(format!(
                "extent {extent} m is not a multiple of the {cell_m} m cell"
            )));
        }
        Ok(n.round() as usize)
    };
    Ok(BevGrid {
        range,
        cell_m,
        rows: count(ex)?,
        cols: count(ey)?,
    })
}

impl BevGrid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_center(&self, r: usize, c: usize) -> (f64, f64) {
        (
            self.range.x.0 + (r as f64 + 0.5) * self.cell_m,
            self.range.y.0 + (c as f64 + 0.5) * self.cell_m,
        )
    }

    /// Cell centers in row-major order.
    pub fn cell_centers(&self) -> Vec<(f64, f64)> {
        (0..self.rows)
            .flat_map(|r| (0..self.cols).map(move |c| (r, c)))
            .map(|(r, c)| self.cell_center(r, c))
            .collect()
    }
}

pub type Mat3 = [[f64; 3]; 3];
pub type Mat4 = [[f64; 4]; 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// Pinhole intrinsics.
    #[serde(rename = "K")]
    pub k: Mat3,
    /// Rigid transform taking ego-frame points into the camera frame
    /// (x right, y down, z along the optical axis).
    #[serde(rename = "T_ego_cam")]
    pub t_ego_cam: Mat4,
    /// `(height, width)` in pixels.
    pub size: (u32, u32),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub visible: bool,
}

impl Camera {
    pub fn new(k: Mat3, t_ego_cam: Mat4, size: (u32, u32)) -> Result<Self> {
        let cam = Self { k, t_ego_cam, size };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let (fx, fy, cx, cy) = (self.k[0][0], self.k[1][1], self.k[0][2], self.k[1][2]);
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::Invalid(format!("focal lengths must be positive: {fx}, {fy}")));
        }
        let (h, w) = (self.size.0 as f64, self.size.1 as f64);
        if !(0.0..=w).contains(&cx) || !(0.0..=h).contains(&cy) {
            return Err(Error::Invalid(format!(
                "principal point ({cx}, {cy}) outside {w}x{h} image"
            )));
        }
        Ok(())
    }

    /// Camera mounted at ego position `pos`, optical axis at `yaw` from +x and
    /// pitched down by `pitch`, with a horizontal field of view `hfov`.
    pub fn looking(pos: [f64; 3], yaw: f64, pitch: f64, hfov: f64, size: (u32, u32)) -> Result<Self> {
        let (h, w) = (size.0 as f64, size.1 as f64);
        let f = (w / 2.0) / (hfov / 2.0).tan();
        let k = [[f, 0.0, w / 2.0], [0.0, f, h / 2.0], [0.0, 0.0, 1.0]];
        let (sy, cy) = yaw.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let z = [cy * cp, sy * cp, -sp];
        let x = [sy, -cy, 0.0];
        let y = [
            z[1] * x[2] - z[2] * x[1],
            z[2] * x[0] - z[0] * x[2],
            z[0] * x[1] - z[1] * x[0],
        ];
        let rot = [x, y, z];
        let mut t = [[0.0; 4]; 4];
        for i in 0..3 {
            t[i][..3].copy_from_slice(&rot[i]);
            t[i][3] = -(rot[i][0] * pos[0] + rot[i][1] * pos[1] + rot[i][2] * pos[2]);
        }
        t[3][3] = 1.0;
        Self::new(k, t, size)
    }

    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let t = &self.t_ego_cam;
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = t[i][0] * p[0] + t[i][1] * p[1] + t[i][2] * p[2] + t[i][3];
        }
        out
    }

    /// Projects camera-frame coordinates.
    pub fn project_camera_frame(&self, pc: [f64; 3]) -> Projection {
        let k = &self.k;
        let depth = pc[2];
        let u = (k[0][0] * pc[0] + k[0][1] * pc[1]) / depth + k[0][2];
        let v = k[1][1] * pc[1] / depth + k[1][2];
        let (h, w) = (self.size.0 as f64, self.size.1 as f64);
        let visible = depth > 0.0 && (0.0..w).contains(&u) && (0.0..h).contains(&v);
        Projection { u, v, depth, visible }
    }
}

/// Pinhole projection of an ego-frame point.
pub fn project_to_camera(cam: &Camera, p_ego: [f64; 3]) -> Projection {
    cam.project_camera_frame(cam.to_camera(p_ego))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub cameras: Vec<Camera>,
}

impl CameraRig {
    pub fn new(cameras: Vec<Camera>) -> Result<Self> {
        if cameras.is_empty() {
            return Err(Error::Invalid("camera rig is empty".into()));
        }
        for c in &cameras {
            c.validate()?;
        }
        Ok(Self { cameras })
    }

    /// `n` cameras evenly spaced in yaw around the vehicle, 1.6 m high,
    /// pitched 12 degrees down.
    pub fn surround(n: usize, size: (u32, u32), hfov: f64) -> Result<Self> {
        let cams = (0..n)
            .map(|i| {
                let yaw = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                Camera::looking([0.0, 0.0, 1.6], yaw, 12f64.to_radians(), hfov, size)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(cams)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let rig: CameraRig = io::read_json(path)?;
        Self::new(rig.cameras)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }
}

/// Geometry-guided kernel hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GktConfig {
    pub heights: Vec<f64>,
    /// `(kh, kw)`, both odd.
    pub kernel: (usize, usize),
    /// Image pixels per feature pixel.
    pub feature_stride: f64,
}

impl Default for GktConfig {
    fn default() -> Self {
        Self {
            heights: vec![-0.5, 0.0, 0.5],
            kernel: (3, 3),
            feature_stride: 4.0,
        }
    }
}

/// A sparse linear gather: `out[row] += weight * input[in_row]`, applied
/// channel-wise.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseGather {
    pub out_rows: usize,
    pub in_rows: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseGather {
    pub fn apply(&self, input: &[f64], channels: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.out_rows * channels];
        for &(o, i, w) in &self.entries {
            let src = &input[i * channels..(i + 1) * channels];
            for (d, s) in out[o * channels..(o + 1) * channels].iter_mut().zip(src) {
                *d += w * s;
            }
        }
        out
    }
}

/// Precomputed sampling for a rig, grid and feature geometry.
///
/// For each height anchor, `per_height[h]` maps the stacked camera features
/// (camera 0 rows first) to `cells * kernel_len` rows: row `cell * K + k`
/// holds kernel tap `k` averaged over every camera and height that sees the
/// cell. Channels are untouched, so the gathered block reshapes to
/// `(cells, K * C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GktPlan {
    pub cells: usize,
    pub kernel_len: usize,
    pub per_height: Vec<SparseGather>,
    /// Number of `(camera, height)` sources that see each cell.
    pub sources: Vec<usize>,
    pub feature_rows: usize,
}

impl GktPlan {
    pub fn visible(&self, cell: usize) -> bool {
        self.sources[cell] > 0
    }

    /// 1.0 for cells seen by at least one camera, else 0.0.
    pub fn visibility_mask(&self) -> Vec<f64> {
        self.sources.iter().map(|&s| if s > 0 { 1.0 } else { 0.0 }).collect()
    }
}

/// Bilinear taps at a fractional feature coordinate with border clamping.
fn bilinear_taps(fx: f64, fy: f64, fw: usize, fh: usize) -> [(usize, usize, f64); 4] {
    let x = fx.clamp(0.0, (fw - 1) as f64);
    let y = fy.clamp(0.0, (fh - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(fw - 1), (y0 + 1).min(fh - 1));
    let (ax, ay) = (x - x0 as f64, y - y0 as f64);
    [
        (x0, y0, (1.0 - ax) * (1.0 - ay)),
        (x1, y0, ax * (1.0 - ay)),
        (x0, y1, (1.0 - ax) * ay),
        (x1, y1, ax * ay),
    ]
}

/// Builds the sampling plan. `feature_dims[i]` is `(rows, cols)` of camera
/// `i`'s feature map.
pub fn build_gkt_plan(
    rig: &CameraRig,
    grid: &BevGrid,
    cfg: &GktConfig,
    feature_dims: &[(usize, usize)],
) -> Result<GktPlan> {
    let (kh, kw) = cfg.kernel;
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Precondition(format!("kernel {kh}x{kw} must be odd-sized")));
    }
    if feature_dims.len() != rig.cameras.len() {
        return Err(Error::Shape {
            op: "gkt_sample",
            detail: format!("{} feature maps for {} cameras", feature_dims.len(), rig.cameras.len()),
        });
    }
    if cfg.heights.is_empty() || !(cfg.feature_stride > 0.0) {
        return Err(Error::Precondition("need at least one height and a positive stride".into()));
    }
    let kernel_len = kh * kw;
    let mut offsets = Vec::with_capacity(kernel_len);
    for dy in 0..kh {
        for dx in 0..kw {
            offsets.push((dx as f64 - (kw / 2) as f64, dy as f64 - (kh / 2) as f64));
        }
    }
    let mut cam_offset = Vec::with_capacity(feature_dims.len());
    let mut total = 0;
    for &(h, w) in feature_dims {
        if h == 0 || w == 0 {
            return Err(Error::Shape {
                op: "gkt_sample",
                detail: "empty feature map".into(),
            });
        }
        cam_offset.push(total);
        total += h * w;
    }

    let centers = grid.cell_centers();
    // (cell, height, camera, fx, fy)
    let mut hits: Vec<(usize, usize, usize, f64, f64)> = Vec::new();
    let mut sources = vec![0usize; centers.len()];
    for (cell, &(x, y)) in centers.iter().enumerate() {
        for (hi, &z) in cfg.heights.iter().enumerate() {
            for (ci, cam) in rig.cameras.iter().enumerate() {
                let p = project_to_camera(cam, [x, y, z]);
                if p.visible {
                    hits.push((cell, hi, ci, p.u / cfg.feature_stride - 0.5, p.v / cfg.feature_stride - 0.5));
                    sources[cell] += 1;
                }
            }
        }
    }
    let mut per_height: Vec<SparseGather> = (0..cfg.heights.len())
        .map(|_| SparseGather {
            out_rows: centers.len() * kernel_len,
            in_rows: total,
            entries: Vec::new(),
        })
        .collect();
    for (cell, hi, ci, fx, fy) in hits {
        let norm = 1.0 / sources[cell] as f64;
        let (fh, fw) = feature_dims[ci];
        for (k, &(ox, oy)) in offsets.iter().enumerate() {
            for (x, y, w) in bilinear_taps(fx + ox, fy + oy, fw, fh) {
                if w != 0.0 {
                    per_height[hi].entries.push((cell * kernel_len + k, cam_offset[ci] + y * fw + x, w * norm));
                }
            }
        }
    }
    Ok(GktPlan {
        cells: centers.len(),
        kernel_len,
        per_height,
        sources,
        feature_rows: total,
    })
}

/// Learned combination for [`gkt_sample`].
#[derive(Debug, Clone, PartialEq)]
pub struct GktWeights {
    /// One `(K * C_in) x C_out` row-major matrix per height anchor.
    pub per_height: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    /// Embedding for cells no camera sees.
    pub null: Vec<f64>,
}

/// Reference evaluator of geometry-guided kernel sampling.
///
/// `features` holds one `(rows, cols, C)` map per camera, stacked. Returns the
/// `(cells, C_out)` BEV feature, row-major.
pub fn gkt_sample(plan: &GktPlan, features: &[f64], channels: usize, weights: &GktWeights) -> Result<Vec<f64>> {
    if features.len() != plan.feature_rows * channels {
        return Err(Error::Shape {
            op: "gkt_sample",
            detail: format!(
                "{} feature values for {} rows x {channels} channels",
                features.len(),
                plan.feature_rows
            ),
        });
    }
    let c_out = weights.bias.len();
    let kc = plan.kernel_len * channels;
    if weights.per_height.len() != plan.per_height.len()
        || weights.per_height.iter().any(|w| w.len() != kc * c_out)
        || weights.null.len() != c_out
    {
        return Err(Error::Shape {
            op: "gkt_sample",
            detail: "combine weights do not match plan".into(),
        });
    }
    let mut out = vec![0.0; plan.cells * c_out];
    for (gather, w) in plan.per_height.iter().zip(&weights.per_height) {
        let g = gather.apply(features, channels);
        for cell in 0..plan.cells {
            let row = &g[cell * kc..(cell + 1) * kc];
            let dst = &mut out[cell * c_out..(cell + 1) * c_out];
            for (i, &v) in row.iter().enumerate() {
                if v == 0.0 {
                    continue;
                }
                for (o, d) in dst.iter_mut().enumerate() {
                    *d += v * w[i * c_out + o];
                }
            }
        }
    }
    for cell in 0..plan.cells {
        let dst = &mut out[cell * c_out..(cell + 1) * c_out];
        if plan.visible(cell) {
            for (d, b) in dst.iter_mut().zip(&weights.bias) {
                *d += b;
            }
        } else {
            dst.copy_from_slice(&weights.null);
        }
    }
    Ok(out)
}
