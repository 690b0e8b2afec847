//! Model configuration, parameters and the end-to-end forward pass.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use satmap_core::assignment::{matching_loss, Focal, LossBreakdown, MatchWeights, PredInstance};
use satmap_core::bevgeom::{build_gkt_plan, make_grid, BevGrid, CameraRig, GktConfig, SparseGather};
use satmap_core::mapcore::{denormalize_from_bev, resample_polyline, BevRange, MapClass, MapInstance, Point, VectorMap};
use satmap_core::synth::Scene;
use serde::{Deserialize, Serialize};

use crate::blocks::{self, Backbone, DecoderConsts, GktConsts, LayerOut, SatEncoderSpec};
use crate::error::{Error, Result, StageExt};
use crate::params::{Initializer, ParamStore};
use crate::tape::{Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    ConvFuser,
    CrossAttention,
    CameraOnly,
}

impl Fusion {
    pub fn name(self) -> &'static str {
        match self {
            Fusion::ConvFuser => "conv_fuser",
            Fusion::CrossAttention => "cross_attention",
            Fusion::CameraOnly => "camera_only",
        }
    }
}

impl Backbone {
    pub fn name(self) -> &'static str {
        match self {
            Backbone::Attention => "attention",
            Backbone::Conv => "conv",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub range: BevRange,
    pub cell_m: f64,
    pub channels: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub n_queries: usize,
    pub n_points: usize,
    pub decoder_layers: usize,
    pub fusion: Fusion,
    pub backbone: Backbone,
    /// Satellite raster `(rows, cols)`.
    pub sat_size: (usize, usize),
    pub patch: usize,
    pub stages: usize,
    pub window: usize,
    /// Camera image `(rows, cols)`.
    pub cam_size: (usize, usize),
    pub cam_hidden: usize,
    pub gkt: GktConfig,
    /// Width of the decoder's spatial attention prior per head, in meters.
    pub prior_sigmas_m: Vec<f64>,
    pub match_weights: MatchWeights,
    pub focal: Focal,
    /// Candidates kept when converting predictions to a scored map.
    pub top_k: usize,
}

impl ModelConfig {
    /// Desk-scale dims: a 20 x 10 grid of 1.5 m cells over 30 m x 15 m.
    pub fn toy() -> Self {
        Self {
            range: BevRange {
                x: (-15.0, 15.0),
                y: (-7.5, 7.5),
            },
            cell_m: 1.5,
            channels: 32,
            heads: 4,
            ffn_hidden: 64,
            n_queries: 15,
            n_points: 10,
            decoder_layers: 2,
            fusion: Fusion::ConvFuser,
            backbone: Backbone::Attention,
            sat_size: (64, 128),
            patch: 4,
            stages: 3,
            window: 4,
            cam_size: (32, 64),
            cam_hidden: 16,
            gkt: GktConfig::default(),
            prior_sigmas_m: vec![1.5, 3.0, 6.0, 12.0],
            match_weights: MatchWeights::default(),
            focal: Focal::default(),
            top_k: 50,
        }
    }

    pub fn sat_spec(&self) -> SatEncoderSpec {
        SatEncoderSpec {
            backbone: self.backbone,
            channels: self.channels,
            patch: self.patch,
            stages: self.stages,
            window: self.window,
            heads: self.heads,
            ffn_hidden: self.ffn_hidden,
        }
    }

    pub fn grid(&self) -> Result<BevGrid> {
        Ok(make_grid(self.range, self.cell_m)?)
    }

    pub fn cam_feature_dims(&self) -> (usize, usize) {
        (self.cam_size.0.div_ceil(4), self.cam_size.1.div_ceil(4))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return bad(format!("channels {} not divisible by {} heads", self.channels, self.heads));
        }
        if self.n_queries == 0 || self.n_points < 2 || self.decoder_layers == 0 {
            return bad("need at least one query, two points per query and one decoder layer".into());
        }
        if self.top_k == 0 {
            return bad("top_k must be positive".into());
        }
        self.grid()?;
        self.sat_spec().level_dims(self.sat_size.0, self.sat_size.1)?;
        if self.cam_size.0 < 4 || self.cam_size.1 < 4 {
            return bad(format!("camera images {:?} too small", self.cam_size));
        }
        DecoderConsts::new(&self.grid()?, self.n_queries, self.n_points, self.channels, self.heads, &self.prior_sigmas_m)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = satmap_core::io::read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(satmap_core::io::write_json(path, self)?)
    }
}

/// One training or evaluation example with images as normalized HWC floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub cams: Vec<Vec<f64>>,
    pub cam_size: (usize, usize),
    pub sat: Vec<f64>,
    pub sat_size: (usize, usize),
    pub rig: CameraRig,
    pub gt: VectorMap,
}

fn image_to_f64(img: &image::RgbImage) -> Vec<f64> {
    img.as_raw().iter().map(|&v| v as f64 / 255.0 - 0.5).collect()
}

impl Sample {
    pub fn from_scene(scene: &Scene) -> Self {
        let cam_size = scene
            .cam_images
            .first()
            .map(|i| (i.height() as usize, i.width() as usize))
            .unwrap_or((0, 0));
        let mut gt = scene.gt.clone();
        gt.tags = scene.params.tags();
        Self {
            cams: scene.cam_images.iter().map(image_to_f64).collect(),
            cam_size,
            sat: image_to_f64(&scene.sat.image),
            sat_size: (scene.sat.image.height() as usize, scene.sat.image.width() as usize),
            rig: scene.rig.clone(),
            gt,
        }
    }

    /// Ground truth resampled to `n_v` points per instance.
    pub fn gt_resampled(&self, n_v: usize) -> Result<VectorMap> {
        let mut out = self.gt.clone();
        out.instances = self
            .gt
            .instances
            .iter()
            .map(|i| resample_polyline(i, n_v))
            .collect::<std::result::Result<_, _>>()?;
        Ok(out)
    }
}

/// Per-rig constants.
#[derive(Debug, Clone)]
struct RigConsts {
    rig: CameraRig,
    gkt: GktConsts,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    grid: BevGrid,
    rig: RigConsts,
    sat_to_grid: Arc<SparseGather>,
    dec: DecoderConsts,
}

impl Model {
    /// A freshly initialized model for a camera rig.
    pub fn new(cfg: ModelConfig, rig: &CameraRig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = cfg.grid()?;
        let dec = DecoderConsts::new(&grid, cfg.n_queries, cfg.n_points, cfg.channels, cfg.heads, &cfg.prior_sigmas_m)?;
        {
            let mut init = Initializer {
                store: &mut params,
                rng: &mut rng,
            };
            let c = cfg.channels;
            blocks::init_cam_encoder(&mut init, cfg.cam_hidden, c)?;
            let (kh, kw) = cfg.gkt.kernel;
            blocks::init_gkt(&mut init, cfg.gkt.heights.len(), kh * kw, c)?;
            if cfg.fusion != Fusion::CameraOnly {
                let spec = cfg.sat_spec();
                blocks::init_sat_encoder(&mut init, &spec)?;
                blocks::init_pyramid_merge(&mut init, spec.stages, &vec![c; spec.stages], c)?;
            }
            match cfg.fusion {
                Fusion::ConvFuser => blocks::init_fuse_conv(&mut init, c)?,
                Fusion::CrossAttention => blocks::init_fuse_cross_attention(&mut init, grid.len(), c)?,
                Fusion::CameraOnly => {}
            }
            blocks::init_decoder(&mut init, &dec, cfg.decoder_layers, cfg.ffn_hidden)?;
        }
        Self::with_params(cfg, rig, params)
    }

    /// A model around existing parameters (from a checkpoint, say).
    pub fn with_params(cfg: ModelConfig, rig: &CameraRig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let grid = cfg.grid()?;
        let dec = DecoderConsts::new(&grid, cfg.n_queries, cfg.n_points, cfg.channels, cfg.heads, &cfg.prior_sigmas_m)?;
        let (h1, w1) = cfg.sat_spec().level_dims(cfg.sat_size.0, cfg.sat_size.1)?[0];
        let sat_to_grid = Arc::new(blocks::sat_to_grid_map(h1, w1, &grid));
        let rig = Self::rig_consts(&cfg, &grid, rig)?;
        Ok(Self {
            cfg,
            params,
            grid,
            rig,
            sat_to_grid,
            dec,
        })
    }

    fn rig_consts(cfg: &ModelConfig, grid: &BevGrid, rig: &CameraRig) -> Result<RigConsts> {
        let dims = vec![cfg.cam_feature_dims(); rig.cameras.len()];
        let plan = build_gkt_plan(rig, grid, &cfg.gkt, &dims)?;
        Ok(RigConsts {
            rig: rig.clone(),
            gkt: GktConsts::new(&plan, cfg.channels),
        })
    }

    pub fn grid(&self) -> &BevGrid {
        &self.grid
    }

    pub fn decoder_consts(&self) -> &DecoderConsts {
        &self.dec
    }

    pub fn gkt_consts(&self) -> &GktConsts {
        &self.rig.gkt
    }
}

/// Every stage output of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub stages: BTreeMap<String, Var>,
    pub layers: Vec<LayerOut>,
}

impl Forward {
    pub fn last(&self) -> LayerOut {
        *self.layers.last().expect("decoder has at least one layer")
    }
}

/// Runs the model on one sample. Stage outputs are recorded by name:
/// `cam_features_{i}`, `cam_bev`, `sat_level_{l}`, `sat_bev`, `fused_bev`,
/// `queries`, `dec{l}_probs` and `dec{l}_points`.
pub fn model_forward(g: &mut Graph, model: &Model, sample: &Sample) -> Result<Forward> {
    let cfg = &model.cfg;
    let mut stages = BTreeMap::new();
    let (ch, cw) = cfg.cam_size;
    if sample.cam_size != cfg.cam_size || sample.cams.len() != sample.rig.cameras.len() {
        return Err(Error::Config(format!(
            "sample has {} camera images of {:?} for {} cameras; model expects {:?}",
            sample.cams.len(),
            sample.cam_size,
            sample.rig.cameras.len(),
            cfg.cam_size
        )))
        .stage("camera_encoder");
    }
    let rig_local;
    let rig = if sample.rig == model.rig.rig {
        &model.rig
    } else {
        rig_local = Model::rig_consts(cfg, &model.grid, &sample.rig).stage("gkt")?;
        &rig_local
    };
    let mut feats = Vec::with_capacity(sample.cams.len());
    for (i, img) in sample.cams.iter().enumerate() {
        let x = g.input(&[ch, cw, 3], img.clone()).stage("camera_encoder")?;
        let f = blocks::encode_camera(g, x).stage("camera_encoder")?;
        stages.insert(format!("cam_features_{i}"), f);
        feats.push(f);
    }
    let cam = blocks::gkt_to_bev(g, &rig.gkt, &feats).stage("gkt")?;
    let grid = &model.grid;
    let cam_bev = g.reshape(cam, &[grid.rows, grid.cols, cfg.channels]).stage("gkt")?;
    stages.insert("cam_bev".into(), cam_bev);

    let sat_bev = if cfg.fusion == Fusion::CameraOnly {
        None
    } else {
        if sample.sat_size != cfg.sat_size {
            return Err(Error::Config(format!("satellite raster {:?}, model expects {:?}", sample.sat_size, cfg.sat_size)))
                .stage("satellite_encoder");
        }
        let s = g.input(&[cfg.sat_size.0, cfg.sat_size.1, 3], sample.sat.clone()).stage("satellite_encoder")?;
        let levels = blocks::encode_satellite_pyramid(g, &cfg.sat_spec(), s).stage("satellite_encoder")?;
        for (l, &v) in levels.iter().enumerate() {
            stages.insert(format!("sat_level_{l}"), v);
        }
        let bev = blocks::pyramid_merge_to_bev(g, &levels, grid, Some(&model.sat_to_grid)).stage("pyramid_merge")?;
        stages.insert("sat_bev".into(), bev);
        Some(bev)
    };

    let mut queries = blocks::initial_queries(g, &model.dec).stage("decoder")?;
    let bev = match (cfg.fusion, sat_bev) {
        (Fusion::ConvFuser, Some(s)) => blocks::fuse_conv(g, cam_bev, s).stage("fusion")?,
        (Fusion::CrossAttention, Some(s)) => {
            queries = blocks::fuse_cross_attention(g, queries, s, cfg.heads).stage("fusion")?.queries;
            cam_bev
        }
        _ => cam_bev,
    };
    stages.insert("fused_bev".into(), bev);
    stages.insert("queries".into(), queries);
    let layers = blocks::decode_map(g, &model.dec, bev, queries, cfg.decoder_layers).stage("decoder")?;
    for (l, o) in layers.iter().enumerate() {
        stages.insert(format!("dec{l}_probs"), o.probs);
        stages.insert(format!("dec{l}_points"), o.points);
    }
    Ok(Forward { stages, layers })
}

/// Decoder output as plain values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedMap {
    /// Per query: probabilities over the classes then background.
    pub probs: Vec<Vec<f64>>,
    /// Per query: `n_v` normalized points.
    pub points: Vec<Vec<Point>>,
}

impl PredictedMap {
    pub fn from_layer(g: &Graph, out: LayerOut, n_v: usize) -> Self {
        let k = *g.shape(out.probs).last().unwrap_or(&0);
        let probs = g.value(out.probs).chunks(k).map(|r| r.to_vec()).collect();
        let points = g
            .value(out.points)
            .chunks(2 * n_v)
            .map(|r| r.chunks(2).map(|p| [p[0], p[1]]).collect())
            .collect();
        Self { probs, points }
    }

    pub fn instances(&self) -> Vec<PredInstance> {
        self.probs
            .iter()
            .zip(&self.points)
            .map(|(s, p)| PredInstance {
                scores: s.clone(),
                points: p.clone(),
            })
            .collect()
    }

    /// Every (query, class) pair scored by its probability; the `top_k` best
    /// become instances in ego coordinates. Ties keep query order.
    pub fn to_vector_map(&self, range: &BevRange, top_k: usize) -> VectorMap {
        let mut cands: Vec<(f64, usize, MapClass)> = Vec::new();
        for (q, probs) in self.probs.iter().enumerate() {
            for class in MapClass::ALL {
                cands.push((probs[class.index()], q, class));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.index().cmp(&b.2.index())));
        let mut out = Vec::new();
        for (score, q, class) in cands {
            if out.len() == top_k {
                break;
            }
            let pts = denormalize_from_bev(&self.points[q], range);
            if let Ok(inst) = MapInstance::new(class, pts, class.default_closed()) {
                if inst.length() > 0.0 {
                    out.push(inst.with_score(score));
                }
            }
        }
        VectorMap::new(out)
    }
}

/// Loss of every decoder layer against the sample's ground truth, summed.
pub struct LossOut {
    pub loss: Var,
    pub forward: Forward,
    pub per_layer: Vec<LossBreakdown>,
}

pub fn model_loss(g: &mut Graph, model: &Model, sample: &Sample) -> Result<LossOut> {
    let cfg = &model.cfg;
    let gt = sample.gt_resampled(cfg.n_points).stage("loss")?;
    let forward = model_forward(g, model, sample)?;
    let mut total: Option<Var> = None;
    let mut per_layer = Vec::with_capacity(forward.layers.len());
    for &out in &forward.layers {
        let pred = PredictedMap::from_layer(g, out, cfg.n_points);
        let lb = matching_loss(&pred.instances(), &gt, cfg.match_weights, cfg.focal, &cfg.range).stage("loss")?;
        let gs: Vec<f64> = lb.grad_scores.iter().flatten().copied().collect();
        let gp: Vec<f64> = lb.grad_points.iter().flatten().flat_map(|p| [p[0], p[1]]).collect();
        let l = g.external(&[out.probs, out.points], lb.total, vec![gs, gp]).stage("loss")?;
        total = Some(match total {
            Some(t) => g.add(t, l).stage("loss")?,
            None => l,
        });
        per_layer.push(lb);
    }
    Ok(LossOut {
        loss: total.expect("at least one decoder layer"),
        forward,
        per_layer,
    })
}

/// Final-layer prediction for one sample.
pub fn predict(model: &Model, sample: &Sample) -> Result<PredictedMap> {
    let mut g = Graph::new(&model.params);
    let f = model_forward(&mut g, model, sample)?;
    Ok(PredictedMap::from_layer(&g, f.last(), model.cfg.n_points))
}
