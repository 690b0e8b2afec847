//! Tape-based reverse-mode autodiff over dense f64 tensors.
//!
//! A [`Graph`] records every operation as a node holding its output value.
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! over fan-out. Feature maps are `[H, W, C]`, token sets are `[N, C]` or
//! `[B, N, C]`. Ops that act on the last axis accept any leading shape.

use std::sync::Arc;

use satmap_core::bevgeom::SparseGather;

use crate::error::{shape_err, Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Scales the upstream gradient of the first node of kind `op` during
/// backward. Only used to test that gradient checks catch broken rules.
#[derive(Debug, Clone, PartialEq)]
pub struct Fault {
    pub op: String,
    pub scale: f64,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    AddConst(Var),
    MulConst(Var, Arc<Vec<f64>>),
    Scale(Var, f64),
    LayerNorm { x: Var, g: Var, b: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax(Var),
    Silu(Var),
    Sigmoid(Var),
    Upsample { x: Var, fy: usize, fx: usize },
    ConcatLast(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceLast { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Reshape(Var),
    Sparse { x: Var, map: Arc<SparseGather> },
    GaussPrior { p: Var, centers: Arc<Vec<[f64; 2]>>, ax: f64, ay: f64 },
    Sum(Var),
    Mean(Var),
    External { inputs: Vec<Var>, local: Vec<Vec<f64>> },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::AddConst(..) => "add_const",
            Op::MulConst(..) => "mul_const",
            Op::Scale(..) => "scale",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(..) => "softmax",
            Op::Silu(..) => "silu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Upsample { .. } => "upsample",
            Op::ConcatLast(..) => "concat_last",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceLast { .. } => "slice_last",
            Op::SliceRows { .. } => "slice_rows",
            Op::Reshape(..) => "reshape",
            Op::Sparse { .. } => "sparse",
            Op::GaussPrior { .. } => "gauss_prior",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::External { .. } => "external",
        }
    }
}

/// Every op kind that has a backward rule.
pub const OP_KINDS: &[&str] = &[
    "conv2d",
    "linear",
    "matmul",
    "add",
    "sub",
    "mul",
    "add_bias",
    "add_const",
    "mul_const",
    "scale",
    "layer_norm",
    "softmax",
    "silu",
    "sigmoid",
    "upsample",
    "concat_last",
    "concat_rows",
    "slice_last",
    "slice_rows",
    "reshape",
    "sparse",
    "gauss_prior",
    "sum",
    "mean",
    "external",
];

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    fault: Option<Fault>,
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    param_nodes: Vec<Option<Var>>,
}

impl Gradients {
    /// Gradient of a node, or `None` if nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of a parameter block; zeros for unused blocks.
    pub fn param(&self, id: ParamId, len: usize) -> Vec<f64> {
        match self.param_nodes.get(id).copied().flatten().and_then(|v| self.get(v)) {
            Some(g) => g.to_vec(),
            None => vec![0.0; len],
        }
    }

    /// Gradients of every parameter block of `store`, in block order.
    pub fn params(&self, store: &ParamStore) -> Vec<Vec<f64>> {
        store
            .blocks()
            .iter()
            .enumerate()
            .map(|(id, b)| self.param(id, b.data.len()))
            .collect()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn last(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.blocks().len()],
            fault: None,
        }
    }

    pub fn with_fault(mut self, fault: Option<Fault>) -> Self {
        self.fault = fault;
        self
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if numel(shape) != data.len() {
            return shape_err("input", format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()));
        }
        Ok(self.push(shape.to_vec(), data, Op::Input, false))
    }

    /// The graph node of a parameter block; one node per block.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        let block = &self.store.blocks()[id];
        let v = self.push(block.shape.clone(), block.data.clone(), Op::Param, true);
        self.param_vars[id] = Some(v);
        v
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let id = self.store.id(name).ok_or_else(|| Error::MissingParam(name.to_string()))?;
        Ok(self.param(id))
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.store.id(name).is_some()
    }

    /// 2-D convolution of `x: [H, W, Ci]` with `w: [kh, kw, Ci, Co]` and zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[2] != xs[2] || stride == 0 {
            return shape_err("conv2d", format!("input {xs:?}, kernel {ws:?}, stride {stride}"));
        }
        let (h, wd, ci) = (xs[0], xs[1], xs[2]);
        let (kh, kw, co) = (ws[0], ws[1], ws[3]);
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return shape_err("conv2d", format!("bias {:?} for {co} output channels", self.shape(b)));
            }
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return shape_err("conv2d", format!("input {xs:?} smaller than kernel {ws:?} with pad {pad}"));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let xv = self.value(x);
        let wv = self.value(w);
        let mut y = vec![0.0; ho * wo * co];
        if let Some(b) = b {
            let bv = self.value(b);
            for px in y.chunks_mut(co) {
                px.copy_from_slice(bv);
            }
        }
        for oy in 0..ho {
            for ox in 0..wo {
                let out = &mut y[(oy * wo + ox) * co..][..co];
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let xin = &xv[(iy as usize * wd + ix as usize) * ci..][..ci];
                        let wk = &wv[(ky * kw + kx) * ci * co..][..ci * co];
                        for (c, &xc) in xin.iter().enumerate() {
                            let wr = &wk[c * co..][..co];
                            for (o, &wo_) in out.iter_mut().zip(wr) {
                                *o += xc * wo_;
                            }
                        }
                    }
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        Ok(self.push(vec![ho, wo, co], y, Op::Conv2d { x, w, b, stride, pad }, ng))
    }

    /// `x[..., Ci] @ w[Ci, Co] + b[Co]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || last(&xs) != ws[0] {
            return shape_err("linear", format!("input {xs:?}, weight {ws:?}"));
        }
        let (ci, co) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return shape_err("linear", format!("bias {:?} for {co} outputs", self.shape(b)));
            }
        }
        let n = numel(&xs) / ci.max(1);
        let xv = self.value(x);
        let wv = self.value(w);
        let mut y = vec![0.0; n * co];
        if let Some(b) = b {
            let bv = self.value(b);
            for row in y.chunks_mut(co) {
                row.copy_from_slice(bv);
            }
        }
        for r in 0..n {
            let out = &mut y[r * co..][..co];
            for (c, &xc) in xv[r * ci..][..ci].iter().enumerate() {
                for (o, &wv_) in out.iter_mut().zip(&wv[c * co..][..co]) {
                    *o += xc * wv_;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = co;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        Ok(self.push(shape, y, Op::Linear { x, w, b }, ng))
    }

    /// Batched matrix product over shared leading dims: `[.., N, K] @ [.., K, M]`,
    /// or `[.., N, K] @ [.., M, K]^T` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() < 2 || as_.len() != bs.len() || as_[..as_.len() - 2] != bs[..bs.len() - 2] {
            return shape_err("matmul", format!("{as_:?} x {bs:?}"));
        }
        let r = as_.len();
        let (n, k) = (as_[r - 2], as_[r - 1]);
        let (kb, m) = if trans_b { (bs[r - 1], bs[r - 2]) } else { (bs[r - 2], bs[r - 1]) };
        if k != kb {
            return shape_err("matmul", format!("{as_:?} x {bs:?} (transposed: {trans_b})"));
        }
        let batch = numel(&as_[..r - 2]);
        let av = self.value(a);
        let bv = self.value(b);
        let mut y = vec![0.0; batch * n * m];
        for t in 0..batch {
            let a_t = &av[t * n * k..][..n * k];
            let b_t = &bv[t * k * m..][..k * m];
            let y_t = &mut y[t * n * m..][..n * m];
            for i in 0..n {
                let yi = &mut y_t[i * m..][..m];
                let ai = &a_t[i * k..][..k];
                if trans_b {
                    for (j, yij) in yi.iter_mut().enumerate() {
                        let bj = &b_t[j * k..][..k];
                        *yij = ai.iter().zip(bj).map(|(p, q)| p * q).sum();
                    }
                } else {
                    for (kk, &aik) in ai.iter().enumerate() {
                        for (yij, &bkj) in yi.iter_mut().zip(&b_t[kk * m..][..m]) {
                            *yij += aik * bkj;
                        }
                    }
                }
            }
        }
        let mut shape = as_[..r - 2].to_vec();
        shape.extend([n, m]);
        let ng = self.ng(&[a, b]);
        Ok(self.push(shape, y, Op::MatMul { a, b, trans_b }, ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn elementwise(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, node: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let y = self.value(a).iter().zip(self.value(b)).map(|(&p, &q)| f(p, q)).collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), y, node, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    /// Adds `b: [C]` to every row of `x: [..., C]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = last(self.shape(x));
        if self.shape(b) != [c] {
            return shape_err("add_bias", format!("{:?} + {:?}", self.shape(x), self.shape(b)));
        }
        let bv = self.value(b);
        let y = self.value(x).chunks(c).flat_map(|row| row.iter().zip(bv).map(|(p, q)| p + q)).collect();
        let ng = self.ng(&[x, b]);
        Ok(self.push(self.shape(x).to_vec(), y, Op::AddBias(x, b), ng))
    }

    /// Adds a constant of the same size (an attention mask, for instance).
    pub fn add_const(&mut self, x: Var, c: &[f64]) -> Result<Var> {
        if c.len() != self.value(x).len() {
            return shape_err("add_const", format!("{:?} + constant of length {}", self.shape(x), c.len()));
        }
        let y = self.value(x).iter().zip(c).map(|(p, q)| p + q).collect();
        let ng = self.ng(&[x]);
        Ok(self.push(self.shape(x).to_vec(), y, Op::AddConst(x), ng))
    }

    /// Elementwise product with a constant of the same size.
    pub fn mul_const(&mut self, x: Var, c: Arc<Vec<f64>>) -> Result<Var> {
        if c.len() != self.value(x).len() {
            return shape_err("mul_const", format!("{:?} * constant of length {}", self.shape(x), c.len()));
        }
        let y = self.value(x).iter().zip(c.iter()).map(|(p, q)| p * q).collect();
        let ng = self.ng(&[x]);
        Ok(self.push(self.shape(x).to_vec(), y, Op::MulConst(x, c), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let y = self.value(x).iter().map(|p| p * s).collect();
        let ng = self.ng(&[x]);
        self.push(self.shape(x).to_vec(), y, Op::Scale(x, s), ng)
    }

    /// Layer normalization over the last axis with gain `g` and shift `b`.
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let c = last(self.shape(x));
        if self.shape(g) != [c] || self.shape(b) != [c] {
            return shape_err("layer_norm", format!("input {:?}, gain {:?}, shift {:?}", self.shape(x), self.shape(g), self.shape(b)));
        }
        let xv = self.value(x);
        let (gv, bv) = (self.value(g), self.value(b));
        let rows = xv.len() / c;
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut y = Vec::with_capacity(xv.len());
        for row in xv.chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + EPS).sqrt();
            rstd.push(r);
            for (k, v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                y.push(h * gv[k] + bv[k]);
            }
        }
        let ng = self.ng(&[x, g, b]);
        Ok(self.push(self.shape(x).to_vec(), y, Op::LayerNorm { x, g, b, xhat, rstd }, ng))
    }

    /// Softmax over the last axis. Entries of `-inf` get probability zero.
    pub fn softmax(&mut self, x: Var) -> Var {
        let c = last(self.shape(x));
        let mut y = self.value(x).to_vec();
        for row in y.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let ng = self.ng(&[x]);
        self.push(self.shape(x).to_vec(), y, Op::Softmax(x), ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let y = self.value(x).iter().map(|&v| v * sigmoid(v)).collect();
        let ng = self.ng(&[x]);
        self.push(self.shape(x).to_vec(), y, Op::Silu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let ng = self.ng(&[x]);
        self.push(self.shape(x).to_vec(), y, Op::Sigmoid(x), ng)
    }

    /// Nearest-neighbor upsampling of `[H, W, C]` by integer factors.
    pub fn upsample(&mut self, x: Var, fy: usize, fx: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || fy == 0 || fx == 0 {
            return shape_err("upsample", format!("input {xs:?}, factors ({fy}, {fx})"));
        }
        let (h, w, c) = (xs[0], xs[1], xs[2]);
        let xv = self.value(x);
        let mut y = Vec::with_capacity(h * fy * w * fx * c);
        for r in 0..h * fy {
            for q in 0..w * fx {
                y.extend_from_slice(&xv[((r / fy) * w + q / fx) * c..][..c]);
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(vec![h * fy, w * fx, c], y, Op::Upsample { x, fy, fx }, ng))
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return shape_err("concat_last", "no inputs");
        };
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut widths = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return shape_err("concat_last", format!("{:?} vs {:?}", self.shape(first), s));
            }
            widths.push(last(s));
        }
        let total: usize = widths.iter().sum();
        let rows = numel(&lead);
        let mut y = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                y.extend_from_slice(&self.value(x)[r * w..][..w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let ng = self.ng(xs);
        Ok(self.push(shape, y, Op::ConcatLast(xs.to_vec()), ng))
    }

    /// Concatenation along the first axis.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return shape_err("concat_rows", "no inputs");
        };
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut y = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if s.is_empty() || s[1..] != tail[..] {
                return shape_err("concat_rows", format!("{:?} vs {:?}", self.shape(first), s));
            }
            rows += s[0];
            y.extend_from_slice(self.value(x));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let ng = self.ng(xs);
        Ok(self.push(shape, y, Op::ConcatRows(xs.to_vec()), ng))
    }

    /// `x[..., start..start + len]`.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = last(&xs);
        if start + len > c {
            return shape_err("slice_last", format!("{start}..{} of {xs:?}", start + len));
        }
        let y = self.value(x).chunks(c).flat_map(|row| row[start..start + len].iter().copied()).collect();
        let mut shape = xs;
        *shape.last_mut().unwrap() = len;
        let ng = self.ng(&[x]);
        Ok(self.push(shape, y, Op::SliceLast { x, start }, ng))
    }

    /// `x[start..start + len, ...]`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() || start + len > xs[0] {
            return shape_err("slice_rows", format!("rows {start}..{} of {xs:?}", start + len));
        }
        let inner = numel(&xs[1..]);
        let y = self.value(x)[start * inner..(start + len) * inner].to_vec();
        let mut shape = xs;
        shape[0] = len;
        let ng = self.ng(&[x]);
        Ok(self.push(shape, y, Op::SliceRows { x, start }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(x)));
        }
        let y = self.value(x).to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(shape.to_vec(), y, Op::Reshape(x), ng))
    }

    /// Row gather `y[o] = sum_k w_k x[i_k]` over `x: [Nin, ...]`.
    pub fn sparse(&mut self, x: Var, map: Arc<SparseGather>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() || xs[0] != map.in_rows {
            return shape_err("sparse", format!("input {xs:?}, gather expects {} rows", map.in_rows));
        }
        let inner = numel(&xs[1..]);
        let y = map.apply(self.value(x), inner);
        let mut shape = xs;
        shape[0] = map.out_rows;
        let ng = self.ng(&[x]);
        Ok(self.push(shape, y, Op::Sparse { x, map }, ng))
    }

    /// Log-Gaussian spatial prior `-(ax (px - cx)^2 + ay (py - cy)^2)` between
    /// points `p: [N, 2]` and fixed centers, shape `[N, M]`.
    pub fn gauss_prior(&mut self, p: Var, centers: Arc<Vec<[f64; 2]>>, ax: f64, ay: f64) -> Result<Var> {
        let ps = self.shape(p).to_vec();
        if ps.len() != 2 || ps[1] != 2 {
            return shape_err("gauss_prior", format!("points {ps:?}"));
        }
        let pv = self.value(p);
        let mut y = Vec::with_capacity(ps[0] * centers.len());
        for pt in pv.chunks(2) {
            for c in centers.iter() {
                let dx = pt[0] - c[0];
                let dy = pt[1] - c[1];
                y.push(-(ax * dx * dx + ay * dy * dy));
            }
        }
        let ng = self.ng(&[p]);
        Ok(self.push(vec![ps[0], centers.len()], y, Op::GaussPrior { p, centers, ax, ay }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let ng = self.ng(&[x]);
        self.push(vec![1], vec![s], Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let ng = self.ng(&[x]);
        self.push(vec![1], vec![s], Op::Mean(x), ng)
    }

    /// A scalar computed outside the tape together with its local gradients
    /// with respect to each input.
    pub fn external(&mut self, inputs: &[Var], value: f64, local: Vec<Vec<f64>>) -> Result<Var> {
        if inputs.len() != local.len() {
            return shape_err("external", format!("{} inputs, {} gradients", inputs.len(), local.len()));
        }
        for (&x, l) in inputs.iter().zip(&local) {
            if self.value(x).len() != l.len() {
                return shape_err("external", format!("input {:?}, gradient of length {}", self.shape(x), l.len()));
            }
        }
        let ng = self.ng(inputs);
        Ok(self.push(vec![1], vec![value], Op::External { inputs: inputs.to_vec(), local }, ng))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).len() != 1 {
            return Err(Error::NonScalar(self.shape(out).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![1.0]);
        let mut fault = self.fault.clone();
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(mut gy) = grads[i].take() else {
                continue;
            };
            if let Some(f) = &fault {
                if f.op == node.op.kind() {
                    gy.iter_mut().for_each(|v| *v *= f.scale);
                    fault = None;
                }
            }
            self.backward_node(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Gradients {
            grads,
            param_nodes: self.param_vars.clone(),
        })
    }

    fn backward_node(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let g = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(g);
        };
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let (xs, ws) = (&nodes[x.0].shape, &nodes[w.0].shape);
                let (h, wd, ci) = (xs[0], xs[1], xs[2]);
                let (kh, kw, co) = (ws[0], ws[1], ws[3]);
                let (ho, wo) = (node.shape[0], node.shape[1]);
                let xv = &nodes[x.0].value;
                let wv = &nodes[w.0].value;
                let taps = |f: &mut dyn FnMut(usize, usize, usize)| {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - *pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - *pad as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    f(oy * wo + ox, iy as usize * wd + ix as usize, ky * kw + kx);
                                }
                            }
                        }
                    }
                };
                acc(*x, &mut |gx| {
                    taps(&mut |o, i, k| {
                        let g = &gy[o * co..][..co];
                        let wk = &wv[k * ci * co..][..ci * co];
                        for (c, gxc) in gx[i * ci..][..ci].iter_mut().enumerate() {
                            *gxc += wk[c * co..][..co].iter().zip(g).map(|(p, q)| p * q).sum::<f64>();
                        }
                    })
                });
                acc(*w, &mut |gw| {
                    taps(&mut |o, i, k| {
                        let g = &gy[o * co..][..co];
                        let gk = &mut gw[k * ci * co..][..ci * co];
                        for (c, &xc) in xv[i * ci..][..ci].iter().enumerate() {
                            for (t, &gg) in gk[c * co..][..co].iter_mut().zip(g) {
                                *t += xc * gg;
                            }
                        }
                    })
                });
                if let Some(b) = b {
                    acc(*b, &mut |gb| {
                        for px in gy.chunks(co) {
                            for (t, g) in gb.iter_mut().zip(px) {
                                *t += g;
                            }
                        }
                    });
                }
            }
            Op::Linear { x, w, b } => {
                let ws = &nodes[w.0].shape;
                let (ci, co) = (ws[0], ws[1]);
                let xv = &nodes[x.0].value;
                let wv = &nodes[w.0].value;
                let n = xv.len() / ci.max(1);
                acc(*x, &mut |gx| {
                    for r in 0..n {
                        let g = &gy[r * co..][..co];
                        for (c, t) in gx[r * ci..][..ci].iter_mut().enumerate() {
                            *t += wv[c * co..][..co].iter().zip(g).map(|(p, q)| p * q).sum::<f64>();
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    for r in 0..n {
                        let g = &gy[r * co..][..co];
                        for (c, &xc) in xv[r * ci..][..ci].iter().enumerate() {
                            for (t, &gg) in gw[c * co..][..co].iter_mut().zip(g) {
                                *t += xc * gg;
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |gb| {
                        for row in gy.chunks(co) {
                            for (t, g) in gb.iter_mut().zip(row) {
                                *t += g;
                            }
                        }
                    });
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let as_ = &nodes[a.0].shape;
                let r = as_.len();
                let (n, k) = (as_[r - 2], as_[r - 1]);
                let m = node.shape[r - 1];
                let batch = numel(&as_[..r - 2]);
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                // b element (kk, j) of batch t
                let bidx = |t: usize, kk: usize, j: usize| if *trans_b { t * k * m + j * k + kk } else { t * k * m + kk * m + j };
                acc(*a, &mut |ga| {
                    for t in 0..batch {
                        for i in 0..n {
                            let g = &gy[(t * n + i) * m..][..m];
                            for kk in 0..k {
                                let mut s = 0.0;
                                for (j, gg) in g.iter().enumerate() {
                                    s += gg * bv[bidx(t, kk, j)];
                                }
                                ga[(t * n + i) * k + kk] += s;
                            }
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for t in 0..batch {
                        for i in 0..n {
                            let g = &gy[(t * n + i) * m..][..m];
                            let ai = &av[(t * n + i) * k..][..k];
                            for (kk, &aik) in ai.iter().enumerate() {
                                for (j, gg) in g.iter().enumerate() {
                                    gb[bidx(t, kk, j)] += aik * gg;
                                }
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| add_into(g, gy));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| g.iter_mut().zip(gy).for_each(|(t, v)| *t -= v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |g| {
                    for ((t, v), q) in g.iter_mut().zip(gy).zip(bv) {
                        *t += v * q;
                    }
                });
                acc(*b, &mut |g| {
                    for ((t, v), p) in g.iter_mut().zip(gy).zip(av) {
                        *t += v * p;
                    }
                });
            }
            Op::AddBias(x, b) => {
                let c = last(&node.shape);
                acc(*x, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| {
                    for row in gy.chunks(c) {
                        add_into(g, row);
                    }
                });
            }
            Op::AddConst(x) | Op::Reshape(x) => acc(*x, &mut |g| add_into(g, gy)),
            Op::MulConst(x, c) => acc(*x, &mut |g| {
                for ((t, v), q) in g.iter_mut().zip(gy).zip(c.iter()) {
                    *t += v * q;
                }
            }),
            Op::Scale(x, s) => acc(*x, &mut |g| g.iter_mut().zip(gy).for_each(|(t, v)| *t += v * s)),
            Op::LayerNorm { x, g, b, xhat, rstd } => {
                let c = last(&node.shape);
                let gv = &nodes[g.0].value;
                acc(*x, &mut |gx| {
                    for (r, (grow, hrow)) in gy.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let dh: Vec<f64> = grow.iter().zip(gv).map(|(p, q)| p * q).collect();
                        let m1 = dh.iter().sum::<f64>() / c as f64;
                        let m2 = dh.iter().zip(hrow).map(|(p, q)| p * q).sum::<f64>() / c as f64;
                        for k in 0..c {
                            gx[r * c + k] += rstd[r] * (dh[k] - m1 - hrow[k] * m2);
                        }
                    }
                });
                acc(*g, &mut |gg| {
                    for (grow, hrow) in gy.chunks(c).zip(xhat.chunks(c)) {
                        for ((t, p), q) in gg.iter_mut().zip(grow).zip(hrow) {
                            *t += p * q;
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for grow in gy.chunks(c) {
                        add_into(gb, grow);
                    }
                });
            }
            Op::Softmax(x) => {
                let c = last(&node.shape);
                acc(*x, &mut |gx| {
                    for ((t, grow), yrow) in gx.chunks_mut(c).zip(gy.chunks(c)).zip(node.value.chunks(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(p, q)| p * q).sum();
                        for k in 0..c {
                            t[k] += yrow[k] * (grow[k] - dot);
                        }
                    }
                });
            }
            Op::Silu(x) => {
                let xv = &nodes[x.0].value;
                acc(*x, &mut |g| {
                    for ((t, v), &xx) in g.iter_mut().zip(gy).zip(xv) {
                        let s = sigmoid(xx);
                        *t += v * s * (1.0 + xx * (1.0 - s));
                    }
                });
            }
            Op::Sigmoid(x) => acc(*x, &mut |g| {
                for ((t, v), y) in g.iter_mut().zip(gy).zip(&node.value) {
                    *t += v * y * (1.0 - y);
                }
            }),
            Op::Upsample { x, fy, fx } => {
                let (w, c) = (nodes[x.0].shape[1], nodes[x.0].shape[2]);
                let (ho, wo) = (node.shape[0], node.shape[1]);
                acc(*x, &mut |g| {
                    for r in 0..ho {
                        for q in 0..wo {
                            let src = ((r / fy) * w + q / fx) * c;
                            add_into(&mut g[src..src + c], &gy[(r * wo + q) * c..][..c]);
                        }
                    }
                });
            }
            Op::ConcatLast(xs) => {
                let total = last(&node.shape);
                let mut off = 0;
                for &x in xs {
                    let w = last(&nodes[x.0].shape);
                    acc(x, &mut |g| {
                        for (grow, row) in g.chunks_mut(w).zip(gy.chunks(total)) {
                            add_into(grow, &row[off..off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = nodes[x.0].value.len();
                    acc(x, &mut |g| add_into(g, &gy[off..off + n]));
                    off += n;
                }
            }
            Op::SliceLast { x, start } => {
                let c = last(&nodes[x.0].shape);
                let len = last(&node.shape);
                acc(*x, &mut |g| {
                    for (grow, row) in g.chunks_mut(c).zip(gy.chunks(len)) {
                        add_into(&mut grow[*start..start + len], row);
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let inner = numel(&node.shape[1..]);
                acc(*x, &mut |g| add_into(&mut g[start * inner..start * inner + gy.len()], gy));
            }
            Op::Sparse { x, map } => {
                let inner = numel(&node.shape[1..]);
                acc(*x, &mut |g| {
                    for &(o, i, w) in &map.entries {
                        for (t, v) in g[i * inner..][..inner].iter_mut().zip(&gy[o * inner..][..inner]) {
                            *t += w * v;
                        }
                    }
                });
            }
            Op::GaussPrior { p, centers, ax, ay } => {
                let pv = &nodes[p.0].value;
                let m = centers.len();
                acc(*p, &mut |g| {
                    for (n, pt) in pv.chunks(2).enumerate() {
                        let (mut sx, mut sy) = (0.0, 0.0);
                        for (c, gg) in centers.iter().zip(&gy[n * m..][..m]) {
                            sx += gg * (pt[0] - c[0]);
                            sy += gg * (pt[1] - c[1]);
                        }
                        g[2 * n] -= 2.0 * ax * sx;
                        g[2 * n + 1] -= 2.0 * ay * sy;
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |g| g.iter_mut().for_each(|t| *t += gy[0])),
            Op::Mean(x) => {
                let n = nodes[x.0].value.len().max(1) as f64;
                acc(*x, &mut |g| g.iter_mut().for_each(|t| *t += gy[0] / n));
            }
            Op::External { inputs, local } => {
                for (&x, l) in inputs.iter().zip(local) {
                    acc(x, &mut |g| g.iter_mut().zip(l).for_each(|(t, v)| *t += gy[0] * v));
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
