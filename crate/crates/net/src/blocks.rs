//! Model stages: satellite encoders, pyramid merge, camera encoder and
//! kernel-transformer head, the two fusers and the map decoder.

use std::sync::Arc;

use rand::Rng;
use satmap_core::bevgeom::{BevGrid, GktPlan, SparseGather};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::layers::{self, attention_block, AttnBias, AttnOut};
use crate::params::Initializer;
use crate::tape::{Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// Patch embedding and stages of window / shifted-window attention.
    Attention,
    /// Purely convolutional residual stages.
    Conv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SatEncoderSpec {
    pub backbone: Backbone,
    pub channels: usize,
    pub patch: usize,
    pub stages: usize,
    pub window: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
}

impl SatEncoderSpec {
    /// Level dims for an `h x w` input.
    pub fn level_dims(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        let div = self.patch * (1 << self.stages.saturating_sub(1));
        if self.stages == 0 || self.patch == 0 || h % div != 0 || w % div != 0 {
            return shape_err(
                "encode_satellite_pyramid",
                format!("{h}x{w} input not divisible by patch {} x 2^({} - 1)", self.patch, self.stages),
            );
        }
        Ok((0..self.stages).map(|s| (h / self.patch >> s, w / self.patch >> s)).collect())
    }

    /// Window used at a level: the configured window clamped to the level.
    pub fn window_at(&self, h: usize, w: usize) -> usize {
        self.window.min(h).min(w)
    }
}

pub fn init_sat_encoder(init: &mut Initializer, spec: &SatEncoderSpec) -> Result<()> {
    let c = spec.channels;
    init.conv("sat.patch", spec.patch, 3, c, true)?;
    if spec.backbone == Backbone::Attention {
        init.layer_norm("sat.patch_ln", c)?;
    }
    for s in 0..spec.stages {
        match spec.backbone {
            Backbone::Attention => {
                layers::init_swin_block(init, &format!("sat.s{s}.b0"), c, spec.ffn_hidden)?;
                layers::init_swin_block(init, &format!("sat.s{s}.b1"), c, spec.ffn_hidden)?;
            }
            Backbone::Conv => layers::init_res_block(init, &format!("sat.s{s}.res"), c)?,
        }
        if s + 1 < spec.stages {
            init.conv(&format!("sat.down{s}"), 2, c, c, true)?;
            if spec.backbone == Backbone::Attention {
                init.layer_norm(&format!("sat.down{s}_ln"), c)?;
            }
        }
    }
    Ok(())
}

/// Multi-scale features of a satellite raster `sat: [H, W, 3]`, finest first.
pub fn encode_satellite_pyramid(g: &mut Graph, spec: &SatEncoderSpec, sat: Var) -> Result<Vec<Var>> {
    let s = g.shape(sat).to_vec();
    if s.len() != 3 || s[2] != 3 {
        return shape_err("encode_satellite_pyramid", format!("satellite input {s:?}"));
    }
    let dims = spec.level_dims(s[0], s[1])?;
    let mut x = layers::conv(g, "sat.patch", sat, spec.patch, 0)?;
    x = match spec.backbone {
        Backbone::Attention => layers::layer_norm(g, "sat.patch_ln", x)?,
        Backbone::Conv => g.silu(x),
    };
    let mut levels = Vec::with_capacity(spec.stages);
    for (st, &(h, w)) in dims.iter().enumerate() {
        x = match spec.backbone {
            Backbone::Attention => {
                let win = spec.window_at(h, w);
                let y = layers::swin_block(g, &format!("sat.s{st}.b0"), x, win, false, spec.heads)?;
                layers::swin_block(g, &format!("sat.s{st}.b1"), y, win, true, spec.heads)?
            }
            Backbone::Conv => layers::res_block(g, &format!("sat.s{st}.res"), x)?,
        };
        levels.push(x);
        if st + 1 < spec.stages {
            x = layers::conv(g, &format!("sat.down{st}"), x, 2, 0)?;
            x = match spec.backbone {
                Backbone::Attention => layers::layer_norm(g, &format!("sat.down{st}_ln"), x)?,
                Backbone::Conv => g.silu(x),
            };
        }
    }
    Ok(levels)
}

/// Bilinear taps (border-clamped) at fractional `(row, col)` positions of an
/// `h x w` map, one output row per position.
pub fn bilinear_gather(h: usize, w: usize, positions: &[(f64, f64)]) -> SparseGather {
    let mut entries = Vec::with_capacity(positions.len() * 4);
    for (o, &(r, c)) in positions.iter().enumerate() {
        let r = r.clamp(0.0, (h - 1) as f64);
        let c = c.clamp(0.0, (w - 1) as f64);
        let (r0, c0) = (r.floor() as usize, c.floor() as usize);
        let (r1, c1) = ((r0 + 1).min(h - 1), (c0 + 1).min(w - 1));
        let (fr, fc) = (r - r0 as f64, c - c0 as f64);
        for (rr, cc, wt) in [
            (r0, c0, (1.0 - fr) * (1.0 - fc)),
            (r0, c1, (1.0 - fr) * fc),
            (r1, c0, fr * (1.0 - fc)),
            (r1, c1, fr * fc),
        ] {
            if wt != 0.0 {
                entries.push((o, rr * w + cc, wt));
            }
        }
    }
    SparseGather {
        out_rows: positions.len(),
        in_rows: h * w,
        entries,
    }
}

/// Resampling of an ego-aligned satellite feature map (columns along +x,
/// rows along -y, covering the grid's range) onto the BEV grid cells.
pub fn sat_to_grid_map(h: usize, w: usize, grid: &BevGrid) -> SparseGather {
    let (ex, ey) = grid.range.extent();
    let pos: Vec<(f64, f64)> = grid
        .cell_centers()
        .iter()
        .map(|&(x, y)| {
            let col = (x - grid.range.x.0) / ex * w as f64 - 0.5;
            let row = (grid.range.y.1 - y) / ey * h as f64 - 0.5;
            (row, col)
        })
        .collect();
    bilinear_gather(h, w, &pos)
}

pub fn init_pyramid_merge(init: &mut Initializer, levels: usize, c_in: &[usize], c: usize) -> Result<()> {
    for l in 0..levels {
        init.conv(&format!("pyr.lat{l}"), 1, c_in[l], c, false)?;
        if l + 1 < levels {
            init.conv(&format!("pyr.smooth{l}"), 3, c, c, false)?;
        }
    }
    Ok(())
}

/// Top-down merge `P_l = lat_l(F_l) + smooth_l(up(P_{l+1}))`, then bilinear
/// resampling of the finest level onto the grid. Returns `[rows, cols, C]`.
pub fn pyramid_merge_to_bev(g: &mut Graph, levels: &[Var], grid: &BevGrid, to_grid: Option<&Arc<SparseGather>>) -> Result<Var> {
    if levels.is_empty() {
        return shape_err("pyramid_merge_to_bev", "empty pyramid");
    }
    let mut p = layers::conv(g, &format!("pyr.lat{}", levels.len() - 1), levels[levels.len() - 1], 1, 0)?;
    for l in (0..levels.len() - 1).rev() {
        let (fine, coarse) = (g.shape(levels[l]).to_vec(), g.shape(p).to_vec());
        if fine.len() != 3 || fine[0] % coarse[0] != 0 || fine[1] % coarse[1] != 0 {
            return shape_err("pyramid_merge_to_bev", format!("level {l} {fine:?} above {coarse:?}"));
        }
        let up = g.upsample(p, fine[0] / coarse[0], fine[1] / coarse[1])?;
        let sm = layers::conv(g, &format!("pyr.smooth{l}"), up, 1, 1)?;
        let lat = layers::conv(g, &format!("pyr.lat{l}"), levels[l], 1, 0)?;
        p = g.add(lat, sm)?;
    }
    let s = g.shape(p).to_vec();
    let map = match to_grid {
        Some(m) => m.clone(),
        None => Arc::new(sat_to_grid_map(s[0], s[1], grid)),
    };
    if map.in_rows != s[0] * s[1] || map.out_rows != grid.len() {
        return shape_err("pyramid_merge_to_bev", format!("finest level {s:?} does not match the grid resampler"));
    }
    let t = g.reshape(p, &[s[0] * s[1], s[2]])?;
    let t = g.sparse(t, map)?;
    g.reshape(t, &[grid.rows, grid.cols, s[2]])
}

pub fn init_cam_encoder(init: &mut Initializer, hidden: usize, c: usize) -> Result<()> {
    init.conv("cam.c1", 3, 3, hidden, true)?;
    init.conv("cam.c2", 3, hidden, c, true)
}

/// Stride-4 convolutional features of one camera image `[h, w, 3]`.
pub fn encode_camera(g: &mut Graph, img: Var) -> Result<Var> {
    let x = layers::conv(g, "cam.c1", img, 2, 1)?;
    let x = g.silu(x);
    let x = layers::conv(g, "cam.c2", x, 2, 1)?;
    Ok(g.silu(x))
}

/// Constant parts of the differentiable kernel-transformer head.
#[derive(Debug, Clone)]
pub struct GktConsts {
    pub per_height: Vec<Arc<SparseGather>>,
    pub cells: usize,
    pub kernel_len: usize,
    pub feature_rows: usize,
    /// Visibility per (cell, channel).
    pub mask: Arc<Vec<f64>>,
    /// Places the null embedding into unseen cells.
    pub null_map: Arc<SparseGather>,
}

impl GktConsts {
    pub fn new(plan: &GktPlan, channels: usize) -> Self {
        let mask = (0..plan.cells)
            .flat_map(|cell| std::iter::repeat_n(if plan.visible(cell) { 1.0 } else { 0.0 }, channels))
            .collect();
        let null_map = SparseGather {
            out_rows: plan.cells,
            in_rows: 1,
            entries: (0..plan.cells).filter(|&c| !plan.visible(c)).map(|c| (c, 0, 1.0)).collect(),
        };
        Self {
            per_height: plan.per_height.iter().cloned().map(Arc::new).collect(),
            cells: plan.cells,
            kernel_len: plan.kernel_len,
            feature_rows: plan.feature_rows,
            mask: Arc::new(mask),
            null_map: Arc::new(null_map),
        }
    }
}

pub fn init_gkt(init: &mut Initializer, heights: usize, kernel_len: usize, c: usize) -> Result<()> {
    for h in 0..heights {
        init.xavier(&format!("gkt.h{h}.w"), &[kernel_len * c, c], kernel_len * c, c)?;
    }
    init.constant("gkt.bias", &[c], 0.0)?;
    init.uniform("gkt.null", &[1, c], 0.1)?;
    Ok(())
}

/// Kernel-transformer sampling of stacked camera features into `[cells, C]`.
pub fn gkt_to_bev(g: &mut Graph, k: &GktConsts, cam_feats: &[Var]) -> Result<Var> {
    let mut rows = Vec::with_capacity(cam_feats.len());
    let mut c = 0;
    for &f in cam_feats {
        let s = g.shape(f).to_vec();
        if s.len() != 3 {
            return shape_err("gkt", format!("camera feature {s:?}"));
        }
        c = s[2];
        rows.push(g.reshape(f, &[s[0] * s[1], s[2]])?);
    }
    let stack = g.concat_rows(&rows)?;
    if g.shape(stack)[0] != k.feature_rows {
        return shape_err("gkt", format!("{} feature rows, plan expects {}", g.shape(stack)[0], k.feature_rows));
    }
    let mut acc: Option<Var> = None;
    for (h, gather) in k.per_height.iter().enumerate() {
        let t = g.sparse(stack, gather.clone())?;
        let t = g.reshape(t, &[k.cells, k.kernel_len * c])?;
        let y = layers::linear(g, &format!("gkt.h{h}"), t)?;
        acc = Some(match acc {
            Some(a) => g.add(a, y)?,
            None => y,
        });
    }
    let Some(y) = acc else {
        return shape_err("gkt", "no height anchors");
    };
    let bias = g.param_named("gkt.bias")?;
    let y = g.add_bias(y, bias)?;
    let y = g.mul_const(y, k.mask.clone())?;
    let null = g.param_named("gkt.null")?;
    let n = g.sparse(null, k.null_map.clone())?;
    g.add(y, n)
}

pub fn init_fuse_conv(init: &mut Initializer, c: usize) -> Result<()> {
    init.conv("fuse.cam_proj", 1, c, c, true)?;
    init.conv("fuse.sat_proj", 1, c, c, true)?;
    init.conv("fuse.mix", 3, 2 * c, c, true)?;
    layers::init_res_block(init, "fuse.res0", c)?;
    layers::init_res_block(init, "fuse.res1", c)
}

/// 1x1 projections, channel concatenation, a 3x3 mixing conv and two
/// residual blocks, all on `[H, W, C]` BEV maps.
pub fn fuse_conv(g: &mut Graph, cam: Var, sat: Var) -> Result<Var> {
    let (cs, ss) = (g.shape(cam).to_vec(), g.shape(sat).to_vec());
    if cs.len() != 3 || ss.len() != 3 || cs[..2] != ss[..2] {
        return shape_err("fuse_conv", format!("camera BEV {cs:?} vs satellite BEV {ss:?}"));
    }
    let a = layers::conv(g, "fuse.cam_proj", cam, 1, 0)?;
    let b = layers::conv(g, "fuse.sat_proj", sat, 1, 0)?;
    let x = g.concat_last(&[a, b])?;
    let x = layers::conv(g, "fuse.mix", x, 1, 1)?;
    let x = g.silu(x);
    let x = layers::res_block(g, "fuse.res0", x)?;
    layers::res_block(g, "fuse.res1", x)
}

pub fn init_fuse_cross_attention(init: &mut Initializer, cells: usize, c: usize) -> Result<()> {
    init.uniform("fuse_ca.pos", &[cells, c], 0.1)?;
    layers::init_attention(init, "fuse_ca.attn", c)?;
    init.layer_norm("fuse_ca.ln", c)
}

#[derive(Debug, Clone)]
pub struct CrossFuseOut {
    pub queries: Var,
    pub attended: AttnOut,
}

/// Queries `[N, C]` attend over the flattened satellite BEV with learned
/// positional embeddings on the keys; residual and layer norm follow.
pub fn fuse_cross_attention(g: &mut Graph, queries: Var, sat_bev: Var, heads: usize) -> Result<CrossFuseOut> {
    let (qs, ss) = (g.shape(queries).to_vec(), g.shape(sat_bev).to_vec());
    if qs.len() != 2 || ss.len() != 3 || qs[1] != ss[2] {
        return shape_err("fuse_cross_attention", format!("queries {qs:?} vs satellite BEV {ss:?}"));
    }
    let kv = g.reshape(sat_bev, &[ss[0] * ss[1], ss[2]])?;
    let pos = g.param_named("fuse_ca.pos")?;
    if g.shape(pos) != g.shape(kv) {
        return shape_err("fuse_cross_attention", format!("positional table {:?} for {:?}", g.shape(pos), g.shape(kv)));
    }
    let keys = g.add(kv, pos)?;
    let attended = attention_block(g, "fuse_ca.attn", queries, keys, kv, heads, AttnBias::None)?;
    let q = g.add(queries, attended.out)?;
    let queries = layers::layer_norm(g, "fuse_ca.ln", q)?;
    Ok(CrossFuseOut { queries, attended })
}

/// Constant parts of the decoder for one grid and query layout.
#[derive(Debug, Clone)]
pub struct DecoderConsts {
    pub n_q: usize,
    pub n_v: usize,
    pub channels: usize,
    pub heads: usize,
    /// Instance embedding row `i` to every point query of instance `i`.
    pub repeat: Arc<SparseGather>,
    /// Point embedding row `j` to point `j` of every instance.
    pub tile: Arc<SparseGather>,
    /// Mean over each instance's point queries.
    pub pool: Arc<SparseGather>,
    /// Sinusoidal encoding of the cell centers, `[cells, C]`.
    pub bev_pos: Vec<f64>,
    /// Normalized cell centers.
    pub centers: Arc<Vec<[f64; 2]>>,
    /// Spatial prior coefficients `(ax, ay)` per head.
    pub prior: Vec<(f64, f64)>,
}

impl DecoderConsts {
    pub fn new(grid: &BevGrid, n_q: usize, n_v: usize, channels: usize, heads: usize, prior_sigmas_m: &[f64]) -> Result<Self> {
        if n_q == 0 || n_v == 0 {
            return shape_err("decode_map", format!("{n_q} queries x {n_v} points"));
        }
        if channels % 4 != 0 {
            return shape_err("decode_map", format!("positional encoding needs channels divisible by 4, got {channels}"));
        }
        if prior_sigmas_m.len() != heads {
            return shape_err("decode_map", format!("{} prior widths for {heads} heads", prior_sigmas_m.len()));
        }
        let nq = n_q * n_v;
        let repeat = SparseGather {
            out_rows: nq,
            in_rows: n_q,
            entries: (0..nq).map(|k| (k, k / n_v, 1.0)).collect(),
        };
        let tile = SparseGather {
            out_rows: nq,
            in_rows: n_v,
            entries: (0..nq).map(|k| (k, k % n_v, 1.0)).collect(),
        };
        let pool = SparseGather {
            out_rows: n_q,
            in_rows: nq,
            entries: (0..nq).map(|k| (k / n_v, k, 1.0 / n_v as f64)).collect(),
        };
        let (ex, ey) = grid.range.extent();
        let centers: Vec<[f64; 2]> = grid
            .cell_centers()
            .iter()
            .map(|&(x, y)| [(x - grid.range.x.0) / ex, (y - grid.range.y.0) / ey])
            .collect();
        let nf = channels / 4;
        let mut bev_pos = Vec::with_capacity(centers.len() * channels);
        for c in &centers {
            for axis in 0..2 {
                for k in 0..nf {
                    let f = std::f64::consts::PI * (k + 1) as f64;
                    bev_pos.push((f * c[axis]).sin());
                    bev_pos.push((f * c[axis]).cos());
                }
            }
        }
        let prior = prior_sigmas_m
            .iter()
            .map(|s| (ex * ex / (2.0 * s * s), ey * ey / (2.0 * s * s)))
            .collect();
        Ok(Self {
            n_q,
            n_v,
            channels,
            heads,
            repeat: Arc::new(repeat),
            tile: Arc::new(tile),
            pool: Arc::new(pool),
            bev_pos,
            centers: Arc::new(centers),
            prior,
        })
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn init_decoder(init: &mut Initializer, k: &DecoderConsts, layers_n: usize, ffn_hidden: usize) -> Result<()> {
    let c = k.channels;
    init.uniform("dec.inst", &[k.n_q, c], 0.5)?;
    init.uniform("dec.pt", &[k.n_v, c], 0.5)?;
    // reference polylines: short random segments spread over the range
    let mut refs = Vec::with_capacity(k.n_q * k.n_v * 2);
    for _ in 0..k.n_q {
        let cx = init.rng.random_range(0.15..0.85);
        let cy = init.rng.random_range(0.15..0.85);
        let a = init.rng.random_range(0.0..std::f64::consts::PI);
        for j in 0..k.n_v {
            let t = if k.n_v > 1 { j as f64 / (k.n_v - 1) as f64 - 0.5 } else { 0.0 };
            refs.push(logit((cx + 0.2 * t * a.cos()).clamp(0.02, 0.98)));
            refs.push(logit((cy + 0.2 * t * a.sin()).clamp(0.02, 0.98)));
        }
    }
    init.store.add("dec.ref0", &[k.n_q * k.n_v, 2], refs)?;
    init.linear("dec.qpos", 2, c, true)?;
    for l in 0..layers_n {
        layers::init_attention(init, &format!("dec.l{l}.sa"), c)?;
        init.layer_norm(&format!("dec.l{l}.ln1"), c)?;
        layers::init_attention(init, &format!("dec.l{l}.ca"), c)?;
        init.layer_norm(&format!("dec.l{l}.ln2"), c)?;
        layers::init_ffn(init, &format!("dec.l{l}.ffn"), c, ffn_hidden)?;
        init.layer_norm(&format!("dec.l{l}.ln3"), c)?;
    }
    init.uniform("dec.reg.w", &[c, 2], 0.01)?;
    init.constant("dec.reg.b", &[2], 0.0)?;
    init.linear("dec.cls", c, 4, true)?;
    Ok(())
}

/// Hierarchical queries: instance embedding plus point embedding, `[n_q * n_v, C]`.
pub fn initial_queries(g: &mut Graph, k: &DecoderConsts) -> Result<Var> {
    let inst = g.param_named("dec.inst")?;
    let pt = g.param_named("dec.pt")?;
    let a = g.sparse(inst, k.repeat.clone())?;
    let b = g.sparse(pt, k.tile.clone())?;
    g.add(a, b)
}

/// Output of one decoder layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerOut {
    /// `[n_q, classes + 1]`, background last.
    pub probs: Var,
    /// `[n_q * n_v, 2]` normalized points.
    pub points: Var,
}

/// Decoder with iterative refinement. Each layer runs self-attention over all
/// point queries, cross-attention to the BEV map (positional encoding on keys
/// and values, plus a per-head Gaussian prior around the current points), and
/// a feed-forward block, post-norm. A shared head adds offsets to the
/// reference logits; a shared class head reads each instance's mean query.
pub fn decode_map(g: &mut Graph, k: &DecoderConsts, bev: Var, queries: Var, layers_n: usize) -> Result<Vec<LayerOut>> {
    if layers_n == 0 {
        return shape_err("decode_map", "need at least one layer");
    }
    let bs = g.shape(bev).to_vec();
    if bs.len() != 3 || bs[2] != k.channels || bs[0] * bs[1] != k.centers.len() {
        return shape_err("decode_map", format!("BEV {bs:?} for {} cells x {} channels", k.centers.len(), k.channels));
    }
    if g.shape(queries) != [k.n_q * k.n_v, k.channels] {
        return shape_err("decode_map", format!("queries {:?}", g.shape(queries)));
    }
    let tokens = g.reshape(bev, &[bs[0] * bs[1], bs[2]])?;
    let kv = g.add_const(tokens, &k.bev_pos)?;
    let mut q = queries;
    let mut r = g.param_named("dec.ref0")?;
    let mut outs = Vec::with_capacity(layers_n);
    for l in 0..layers_n {
        let pts = g.sigmoid(r);
        let qpos = layers::linear(g, "dec.qpos", pts)?;
        let qq = g.add(q, qpos)?;
        let sa = attention_block(g, &format!("dec.l{l}.sa"), qq, qq, q, k.heads, AttnBias::None)?;
        let x = g.add(q, sa.out)?;
        q = layers::layer_norm(g, &format!("dec.l{l}.ln1"), x)?;
        let qq = g.add(q, qpos)?;
        let mut priors = Vec::with_capacity(k.heads);
        for &(ax, ay) in &k.prior {
            priors.push(g.gauss_prior(pts, k.centers.clone(), ax, ay)?);
        }
        let ca = attention_block(g, &format!("dec.l{l}.ca"), qq, kv, kv, k.heads, AttnBias::PerHead(&priors))?;
        let x = g.add(q, ca.out)?;
        q = layers::layer_norm(g, &format!("dec.l{l}.ln2"), x)?;
        let f = layers::ffn(g, &format!("dec.l{l}.ffn"), q)?;
        let x = g.add(q, f)?;
        q = layers::layer_norm(g, &format!("dec.l{l}.ln3"), x)?;
        let qq = g.add(q, qpos)?;
        let delta = layers::linear(g, "dec.reg", qq)?;
        r = g.add(r, delta)?;
        let points = g.sigmoid(r);
        let inst = g.sparse(q, k.pool.clone())?;
        let logits = layers::linear(g, "dec.cls", inst)?;
        let probs = g.softmax(logits);
        outs.push(LayerOut { probs, points });
    }
    Ok(outs)
}
