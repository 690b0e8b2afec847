//! Parameterized layers built from tape ops. Parameters are looked up by
//! name: a layer with prefix `p` reads `p.w`, `p.b` and so on.

use std::sync::Arc;

use satmap_core::bevgeom::SparseGather;

use crate::error::{shape_err, Result};
use crate::params::Initializer;
use crate::tape::{Graph, Var};

fn name(prefix: &str, leaf: &str) -> String {
    format!("{prefix}.{leaf}")
}

/// `x @ w + b`; the bias is optional and used when present in the store.
pub fn linear(g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param_named(&name(prefix, "w"))?;
    let b = if g.has_param(&name(prefix, "b")) {
        Some(g.param_named(&name(prefix, "b"))?)
    } else {
        None
    };
    g.linear(x, w, b)
}

pub fn conv(g: &mut Graph, prefix: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = g.param_named(&name(prefix, "w"))?;
    let b = if g.has_param(&name(prefix, "b")) {
        Some(g.param_named(&name(prefix, "b"))?)
    } else {
        None
    };
    g.conv2d(x, w, b, stride, pad)
}

pub fn layer_norm(g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
    let gain = g.param_named(&name(prefix, "g"))?;
    let shift = g.param_named(&name(prefix, "b"))?;
    g.layer_norm(x, gain, shift)
}

pub fn init_ffn(init: &mut Initializer, prefix: &str, c: usize, hidden: usize) -> Result<()> {
    init.linear(&name(prefix, "fc1"), c, hidden, true)?;
    init.linear(&name(prefix, "fc2"), hidden, c, true)
}

/// Two-layer feed-forward network with a SiLU in between.
pub fn ffn(g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, &name(prefix, "fc1"), x)?;
    let h = g.silu(h);
    linear(g, &name(prefix, "fc2"), h)
}

pub fn init_res_block(init: &mut Initializer, prefix: &str, c: usize) -> Result<()> {
    init.conv(&name(prefix, "c1"), 3, c, c, true)?;
    init.conv(&name(prefix, "c2"), 3, c, c, true)
}

/// `x + conv(silu(conv(x)))` with 3x3 same-padded convolutions.
pub fn res_block(g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
    let h = conv(g, &name(prefix, "c1"), x, 1, 1)?;
    let h = g.silu(h);
    let h = conv(g, &name(prefix, "c2"), h, 1, 1)?;
    g.add(x, h)
}

pub fn init_attention(init: &mut Initializer, prefix: &str, c: usize) -> Result<()> {
    for p in ["q", "k", "v", "o"] {
        init.linear(&name(prefix, p), c, c, true)?;
    }
    Ok(())
}

/// Additive attention logits bias.
#[derive(Clone, Copy)]
pub enum AttnBias<'a> {
    None,
    /// The same constant for every head, laid out like the logits.
    Const(&'a [f64]),
    /// One graph node per head, laid out like the logits.
    PerHead(&'a [Var]),
}

#[derive(Debug, Clone)]
pub struct AttnOut {
    pub out: Var,
    /// Attention probabilities per head, `[.., N, M]`.
    pub probs: Vec<Var>,
}

/// Multi-head attention with learned q/k/v/output projections.
///
/// `q_in: [.., N, C]`, `k_in, v_in: [.., M, C]` with equal leading dims.
pub fn attention_block(g: &mut Graph, prefix: &str, q_in: Var, k_in: Var, v_in: Var, heads: usize, bias: AttnBias) -> Result<AttnOut> {
    let c = *g.shape(q_in).last().unwrap_or(&0);
    if heads == 0 || c % heads != 0 {
        return shape_err("attention_block", format!("embedding dim {c} not divisible by {heads} heads"));
    }
    if g.shape(k_in).last() != Some(&c) || g.shape(v_in) != g.shape(k_in) {
        return shape_err("attention_block", format!("queries {:?}, keys {:?}, values {:?}", g.shape(q_in), g.shape(k_in), g.shape(v_in)));
    }
    if let AttnBias::PerHead(b) = bias {
        if b.len() != heads {
            return shape_err("attention_block", format!("{} bias terms for {heads} heads", b.len()));
        }
    }
    let d = c / heads;
    let q = linear(g, &name(prefix, "q"), q_in)?;
    let k = linear(g, &name(prefix, "k"), k_in)?;
    let v = linear(g, &name(prefix, "v"), v_in)?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_last(q, h * d, d)?;
        let kh = g.slice_last(k, h * d, d)?;
        let vh = g.slice_last(v, h * d, d)?;
        let s = g.matmul(qh, kh, true)?;
        let mut s = g.scale(s, scale);
        match bias {
            AttnBias::None => {}
            AttnBias::Const(m) => s = g.add_const(s, m)?,
            AttnBias::PerHead(b) => s = g.add(s, b[h])?,
        }
        let p = g.softmax(s);
        outs.push(g.matmul(p, vh, false)?);
        probs.push(p);
    }
    let cat = g.concat_last(&outs)?;
    let out = linear(g, &name(prefix, "o"), cat)?;
    Ok(AttnOut { out, probs })
}

/// Token permutation and mask for (shifted) window attention on an `h x w` map.
#[derive(Debug, Clone)]
pub struct WindowPlan {
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub shift: usize,
    /// Row-major tokens to window-major order.
    pub to_windows: Arc<SparseGather>,
    pub from_windows: Arc<SparseGather>,
    /// `[windows, n, n]` logits mask (0 or -inf) when shifted.
    pub mask: Option<Vec<f64>>,
    /// `order[k]` is the row-major token at window-major slot `k`.
    pub order: Vec<usize>,
}

impl WindowPlan {
    pub fn new(h: usize, w: usize, window: usize, shifted: bool) -> Result<Self> {
        if window == 0 || h % window != 0 || w % window != 0 {
            return shape_err("windowed_attention", format!("map {h}x{w} not divisible by window {window}"));
        }
        // A shift only makes sense when there is more than one window per axis.
        let shift = if shifted && h.min(w) > window { window / 2 } else { 0 };
        let (wy, wx) = (h / window, w / window);
        let n = window * window;
        let mut order = Vec::with_capacity(h * w);
        // (window, region) label of each window-major slot
        let mut region = Vec::with_capacity(h * w);
        let band = |r: usize, extent: usize| -> usize {
            if shift == 0 || r < extent - window {
                0
            } else if r < extent - shift {
                1
            } else {
                2
            }
        };
        for by in 0..wy {
            for bx in 0..wx {
                for iy in 0..window {
                    for ix in 0..window {
                        let (sr, sc) = (by * window + iy, bx * window + ix);
                        let r = (sr + shift) % h;
                        let c = (sc + shift) % w;
                        order.push(r * w + c);
                        region.push(band(sr, h) * 3 + band(sc, w));
                    }
                }
            }
        }
        let to_windows = SparseGather {
            out_rows: h * w,
            in_rows: h * w,
            entries: order.iter().enumerate().map(|(k, &t)| (k, t, 1.0)).collect(),
        };
        let from_windows = SparseGather {
            out_rows: h * w,
            in_rows: h * w,
            entries: order.iter().enumerate().map(|(k, &t)| (t, k, 1.0)).collect(),
        };
        let mask = (shift > 0).then(|| {
            let mut m = Vec::with_capacity(wy * wx * n * n);
            for b in 0..wy * wx {
                for i in 0..n {
                    for j in 0..n {
                        let same = region[b * n + i] == region[b * n + j];
                        m.push(if same { 0.0 } else { f64::NEG_INFINITY });
                    }
                }
            }
            m
        });
        Ok(Self {
            h,
            w,
            window,
            shift,
            to_windows: Arc::new(to_windows),
            from_windows: Arc::new(from_windows),
            mask,
            order,
        })
    }

    pub fn windows(&self) -> usize {
        (self.h / self.window) * (self.w / self.window)
    }

    /// Expands per-window probabilities `[windows, n, n]` to a dense
    /// `[h*w, h*w]` matrix over row-major tokens.
    pub fn dense_attention(&self, probs: &[f64]) -> Vec<f64> {
        let n = self.window * self.window;
        let tokens = self.h * self.w;
        let mut out = vec![0.0; tokens * tokens];
        for b in 0..self.windows() {
            for i in 0..n {
                for j in 0..n {
                    let (ti, tj) = (self.order[b * n + i], self.order[b * n + j]);
                    out[ti * tokens + tj] = probs[(b * n + i) * n + j];
                }
            }
        }
        out
    }
}

/// Self-attention of row-major tokens `x: [h*w, C]` within (shifted) windows.
pub fn window_attention(g: &mut Graph, prefix: &str, x: Var, plan: &WindowPlan, heads: usize) -> Result<AttnOut> {
    let c = *g.shape(x).last().unwrap_or(&0);
    if g.shape(x) != [plan.h * plan.w, c] {
        return shape_err("windowed_attention", format!("tokens {:?} for a {}x{} map", g.shape(x), plan.h, plan.w));
    }
    let n = plan.window * plan.window;
    let t = g.sparse(x, plan.to_windows.clone())?;
    let t = g.reshape(t, &[plan.windows(), n, c])?;
    let bias = match &plan.mask {
        Some(m) => AttnBias::Const(m),
        None => AttnBias::None,
    };
    let a = attention_block(g, prefix, t, t, t, heads, bias)?;
    let o = g.reshape(a.out, &[plan.h * plan.w, c])?;
    let out = g.sparse(o, plan.from_windows.clone())?;
    Ok(AttnOut { out, probs: a.probs })
}

pub fn init_swin_block(init: &mut Initializer, prefix: &str, c: usize, hidden: usize) -> Result<()> {
    init.layer_norm(&name(prefix, "ln1"), c)?;
    init_attention(init, &name(prefix, "attn"), c)?;
    init.layer_norm(&name(prefix, "ln2"), c)?;
    init_ffn(init, &name(prefix, "ffn"), c, hidden)
}

/// Pre-norm transformer block with window attention on `x: [H, W, C]`.
pub fn swin_block(g: &mut Graph, prefix: &str, x: Var, window: usize, shifted: bool, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return shape_err("windowed_attention", format!("feature map {s:?}"));
    }
    let plan = WindowPlan::new(s[0], s[1], window, shifted)?;
    let t = g.reshape(x, &[s[0] * s[1], s[2]])?;
    let h = layer_norm(g, &name(prefix, "ln1"), t)?;
    let a = window_attention(g, &name(prefix, "attn"), h, &plan, heads)?;
    let t = g.add(t, a.out)?;
    let h = layer_norm(g, &name(prefix, "ln2"), t)?;
    let f = ffn(g, &name(prefix, "ffn"), h)?;
    let t = g.add(t, f)?;
    g.reshape(t, &s)
}
