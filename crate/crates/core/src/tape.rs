//! Reverse-mode automatic differentiation on a linear tape.
//!
//! A [`Tape`] borrows a [`ParamStore`] and records every primitive applied to
//! it. Nodes only carry gradient bookkeeping when some ancestor is a trainable
//! parameter, so frozen sub-networks cost a plain forward pass and frozen
//! parameters never receive a gradient entry.

mod kernels;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use kernels::{col2im, gemm, im2col, ConvGeom, MatRef};

use crate::{Error, Result, Tensor};

/// Negative-side slope of the leaky rectifier.
pub const LEAKY_SLOPE: f32 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Named parameter tensors in declaration order, each with a freeze flag.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> ParamId {
        self.entries.push(ParamEntry { name: name.into(), tensor, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn freeze_all(&mut self) {
        for e in &mut self.entries {
            e.trainable = false;
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.tensor.len()).sum()
    }
}

/// Gradients for the trainable parameters reached by a backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<f32> },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    Upsample2 { x: Var },
    LeakyRelu { x: Var },
    Concat { parts: Vec<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Sum(Var),
    Mean(Var),
    ChannelAffine { x: Var, a: Var, b: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    record_grads: bool,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new(), record_grads: true }
    }

    /// A tape that treats every parameter as frozen; backward yields nothing.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new(), record_grads: false }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.get(id),
            _ => &self.nodes[v.0].value,
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let trainable = self.record_grads && self.params.is_trainable(id);
        self.push(Tensor::default(), Op::Param(id), trainable)
    }

    /// Stride-1 convolution with symmetric zero padding.
    ///
    /// `x: [Cin, H, W]`, `w: [Cout, Cin, k, k]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let (cin, h, wd) = self.value(x).dims3().map_err(|_| {
            shape_err("conv2d", format!("input must be [C,H,W], got {:?}", self.value(x).shape()))
        })?;
        let ws = self.value(w).shape().to_vec();
        let [cout, wcin, k, k2] = ws[..] else {
            return Err(shape_err("conv2d", format!("kernel must be [Cout,Cin,k,k], got {ws:?}")));
        };
        if wcin != cin || k != k2 {
            return Err(shape_err("conv2d", format!("input {cin} channels vs kernel {ws:?}")));
        }
        if self.value(b).shape() != [cout] {
            return Err(shape_err("conv2d", format!("bias {:?} vs {cout} outputs", self.value(b).shape())));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err("conv2d", format!("kernel {k} larger than padded input {h}x{wd}")));
        }
        let geom = ConvGeom { cin, h, w: wd, k, pad, oh: h + 2 * pad + 1 - k, ow: wd + 2 * pad + 1 - k };
        let n = geom.cols();
        let cols = im2col(self.value(x).data(), &geom);
        let mut out = vec![0.0f32; cout * n];
        for (co, &bias) in self.value(b).data().iter().enumerate() {
            out[co * n..(co + 1) * n].fill(bias);
        }
        gemm(cout, geom.rows(), n, MatRef::rows(self.value(w).data(), geom.rows()), MatRef::rows(&cols, n), 1.0, &mut out);
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        let cols = if self.needs(w) { cols } else { Vec::new() };
        let value = Tensor::new(vec![cout, geom.oh, geom.ow], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, cols }, needs))
    }

    /// 2x2 max-pool with stride 2; spatial dims must be even.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err("max_pool2", format!("spatial dims {h}x{w} must be even")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![0.0f32; c * oh * ow];
        let mut argmax = vec![0u32; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = ch * h * w + 2 * oy * w + 2 * ox;
                    let mut best = base;
                    for idx in [base + 1, base + w, base + w + 1] {
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    let o = (ch * oh + oy) * ow + ox;
                    out[o] = src[best];
                    argmax[o] = best as u32;
                }
            }
        }
        let needs = self.needs(x);
        let value = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, needs))
    }

    /// 2x nearest-neighbour upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let src = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0f32; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                let srow = &src[(ch * h + oy / 2) * w..(ch * h + oy / 2 + 1) * w];
                let drow = &mut out[(ch * oh + oy) * ow..(ch * oh + oy + 1) * ow];
                for (ox, d) in drow.iter_mut().enumerate() {
                    *d = srow[ox / 2];
                }
            }
        }
        let needs = self.needs(x);
        let value = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.push(value, Op::Upsample2 { x }, needs))
    }

    pub fn leaky_relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| if v > 0.0 { v } else { LEAKY_SLOPE * v }).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(value, Op::LeakyRelu { x }, needs)
    }

    /// Concatenates `[C_i, H, W]` tensors along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat", String::from("no inputs")));
        };
        let (_, h, w) = self.value(first).dims3()?;
        let mut channels = 0;
        for &p in parts {
            let (c, ph, pw) = self.value(p).dims3()?;
            if (ph, pw) != (h, w) {
                return Err(shape_err("concat", format!("spatial dims {ph}x{pw} vs {h}x{w}")));
            }
            channels += c;
        }
        let mut data = Vec::with_capacity(channels * h * w);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let value = Tensor::new(vec![channels, h, w], data)?;
        Ok(self.push(value, Op::Concat { parts: parts.to_vec() }, needs))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("add", a, b, |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("sub", a, b, |x, y| x - y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("mul", a, b, |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(value, Op::Scale(x, factor), needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum() as f32);
        let needs = self.needs(x);
        self.push(value, Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean() as f32);
        let needs = self.needs(x);
        self.push(value, Op::Mean(x), needs)
    }

    /// Channel-wise affine map `(1 + a[c]) * x[c, h, w] + b[c]`.
    pub fn channel_affine(&mut self, x: Var, a: Var, b: Var) -> Result<Var> {
        let value = channel_affine_forward(self.value(x), self.value(a).data(), self.value(b).data())?;
        let needs = self.needs(x) || self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::ChannelAffine { x, a, b }, needs))
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss { shape: lv.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<f32>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    let shape = self.params.get(*id).shape().to_vec();
                    out.grads.insert(*id, Tensor::new(shape, g)?);
                }
                Op::Conv2d { x, w, b, geom, cols } => {
                    let cout = node.value.shape()[0];
                    let n = geom.cols();
                    if self.needs(*b) {
                        let db = (0..cout)
                            .map(|co| g[co * n..(co + 1) * n].iter().map(|&v| v as f64).sum::<f64>() as f32)
                            .collect();
                        accumulate(&mut grads, *b, db);
                    }
                    if self.needs(*w) {
                        let mut dw = vec![0.0f32; cout * geom.rows()];
                        gemm(cout, n, geom.rows(), MatRef::rows(&g, n), MatRef::transposed(cols, n), 0.0, &mut dw);
                        accumulate(&mut grads, *w, dw);
                    }
                    if self.needs(*x) {
                        let mut dcols = vec![0.0f32; geom.rows() * n];
                        let wt = MatRef::transposed(self.value(*w).data(), geom.rows());
                        gemm(geom.rows(), cout, n, wt, MatRef::rows(&g, n), 0.0, &mut dcols);
                        let mut dx = vec![0.0f32; geom.cin * geom.h * geom.w];
                        col2im(&dcols, geom, &mut dx);
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::MaxPool2 { x, argmax } => {
                    let mut dx = vec![0.0f32; self.value(*x).len()];
                    for (&gi, &src) in g.iter().zip(argmax) {
                        dx[src as usize] += gi;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Upsample2 { x } => {
                    let (c, h, w) = self.value(*x).dims3()?;
                    let ow = 2 * w;
                    let mut dx = vec![0.0f32; c * h * w];
                    for ch in 0..c {
                        for oy in 0..2 * h {
                            let grow = &g[(ch * 2 * h + oy) * ow..(ch * 2 * h + oy + 1) * ow];
                            let drow = &mut dx[(ch * h + oy / 2) * w..(ch * h + oy / 2 + 1) * w];
                            for (ox, &gv) in grow.iter().enumerate() {
                                drow[ox / 2] += gv;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::LeakyRelu { x } => {
                    let dx = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&v, &gv)| if v > 0.0 { gv } else { LEAKY_SLOPE * gv })
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Concat { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        if self.needs(p) {
                            accumulate(&mut grads, p, g[offset..offset + len].to_vec());
                        }
                        offset += len;
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.iter().map(|v| -v).collect());
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let da = g.iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let db = g.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Scale(x, f) => {
                    accumulate(&mut grads, *x, g.iter().map(|v| v * f).collect());
                }
                Op::Sum(x) => {
                    accumulate(&mut grads, *x, vec![g[0]; self.value(*x).len()]);
                }
                Op::Mean(x) => {
                    let n = self.value(*x).len();
                    accumulate(&mut grads, *x, vec![(g[0] as f64 / n as f64) as f32; n]);
                }
                Op::ChannelAffine { x, a, b } => {
                    let (c, h, w) = self.value(*x).dims3()?;
                    let plane = h * w;
                    if self.needs(*x) {
                        let av = self.value(*a).data();
                        let mut dx = g.clone();
                        for ch in 0..c {
                            let s = 1.0 + av[ch];
                            for v in &mut dx[ch * plane..(ch + 1) * plane] {
                                *v *= s;
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.needs(*a) {
                        let xv = self.value(*x).data();
                        let da = (0..c)
                            .map(|ch| {
                                let r = ch * plane..(ch + 1) * plane;
                                xv[r.clone()].iter().zip(&g[r]).map(|(&p, &q)| p as f64 * q as f64).sum::<f64>()
                                    as f32
                            })
                            .collect();
                        accumulate(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let db = (0..c)
                            .map(|ch| g[ch * plane..(ch + 1) * plane].iter().map(|&v| v as f64).sum::<f64>() as f32)
                            .collect();
                        accumulate(&mut grads, *b, db);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], v: Var, g: Vec<f32>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// `(1 + a[c]) * x[c, h, w] + b[c]` on a `[C, H, W]` tensor.
pub fn channel_affine_forward(x: &Tensor, a: &[f32], b: &[f32]) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if a.len() != c || b.len() != c {
        return Err(shape_err(
            "channel_affine",
            format!("{} channels vs scale {} / shift {}", c, a.len(), b.len()),
        ));
    }
    let plane = h * w;
    let mut out = x.clone();
    for ch in 0..c {
        let s = 1.0 + a[ch];
        for v in out.channel_mut(ch) {
            *v = s * *v + b[ch];
        }
    }
    debug_assert_eq!(out.len(), c * plane);
    Ok(out)
}
