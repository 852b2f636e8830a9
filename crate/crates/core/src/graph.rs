//! Recording context: eager forward evaluation onto a tape, reverse-mode
//! backward, and the operation counters every primitive reports into.
//!
//! A context is confined to one thread. Independent contexts share nothing
//! and can run concurrently; parameters are only read during a forward pass.

use std::collections::HashMap;
use std::mem::size_of;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::counters::OpCounters;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Handle to a value recorded in a [`Context`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    GeluExact,
    GeluTanh,
}

/// Deliberate defects used to prove that the invariant checks can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Negates the normalized value inside layer norm.
    LnSign,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum RemapKind {
    Gather,
    Reshape,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    WeightedSum(Var, Arc<Vec<T>>),
    LayerNorm { x: Var, gain: Var, bias: Var, stats: Vec<(T, T)> },
    Conv { x: Var, k: Var, b: Option<Var>, geom: ConvGeom },
    Depthwise { x: Var, k: Var, b: Var },
    Gelu(Var, Activation),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Remap { xs: Vec<Var>, src: Arc<Vec<(u32, u32)>> },
    MatMul { a: Var, b: Var, trans_b: bool },
    Softmax(Var),
    AvgPool2(Var),
    CrossEntropy { logits: Var, targets: Arc<Vec<usize>>, probs: Vec<T> },
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Sum(a) | Op::WeightedSum(a, _) | Op::Gelu(a, _) | Op::Softmax(a) | Op::AvgPool2(a) => {
                vec![*a]
            }
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Conv { x, k, b, .. } => {
                let mut v = vec![*x, *k];
                v.extend(b);
                v
            }
            Op::Depthwise { x, k, b } => vec![*x, *k, *b],
            Op::Concat(xs) | Op::Remap { xs, .. } => xs.clone(),
            Op::Slice { x, .. } => vec![*x],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Context<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    counters: OpCounters,
    params: HashMap<ParamId, Var>,
    backward_done: bool,
    exec: Exec,
    fault: Option<Fault>,
}

impl<T: Scalar> Default for Context<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Context<T> {
    pub fn new() -> Self {
        Self::with_exec(Exec::default())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Context {
            nodes: Vec::new(),
            grads: Vec::new(),
            counters: OpCounters::default(),
            params: HashMap::new(),
            backward_done: false,
            exec,
            fault: None,
        }
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn set_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
    }

    pub fn counters(&self) -> &OpCounters {
        &self.counters
    }

    pub fn reset_counters(&mut self) {
        self.counters.reset();
    }

    /// Drops the recorded graph, gradients and counters.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.params.clear();
        self.counters.reset();
        self.backward_done = false;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, what: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(what));
        }
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        self.counters.allocations += 1;
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn copied(&mut self, elems: usize) {
        self.counters.copied_bytes += (elems * size_of::<T>()) as u64;
    }

    /// Records a constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf, "input")
    }

    /// Records a leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor<T>) -> Result<Var> {
        let v = self.push(t, Op::Leaf, "variable")?;
        self.nodes[v.0].needs_grad = true;
        Ok(v)
    }

    /// Loads a stored parameter, once per forward pass. Frozen parameters
    /// behave as constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, "param")?;
        self.nodes[v.0].needs_grad = !p.frozen;
        self.params.insert(id, v);
        Ok(v)
    }

    /// Copies gradients of every loaded, trainable parameter into the store.
    pub fn write_param_grads(&self, store: &mut ParamStore<T>) {
        for (&id, &v) in &self.params {
            let p = store.get_mut(id);
            p.grad = if p.frozen { None } else { self.grad(v).cloned() };
        }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dims() != vb.dims() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", va.dims(), vb.dims())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x + *y).collect();
        let out = Tensor::new(va.dims(), data)?;
        self.counters.flops += out.len() as u64;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dims() != vb.dims() {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", va.dims(), vb.dims())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x * *y).collect();
        let out = Tensor::new(va.dims(), data)?;
        self.counters.flops += out.len() as u64;
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let va = self.value(a);
        let out = Tensor::new(va.dims(), va.data().iter().map(|x| *x * s).collect())?;
        self.counters.flops += out.len() as u64;
        self.push(out, Op::Scale(a, s), "scale")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        self.counters.flops += self.value(a).len() as u64;
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    /// `sum(a ⊙ w)` for a constant weight tensor of the same shape.
    pub fn weighted_sum(&mut self, a: Var, w: &Tensor<T>) -> Result<Var> {
        let va = self.value(a);
        if va.dims() != w.dims() {
            return Err(Error::shape("weighted_sum", format!("{:?} vs {:?}", va.dims(), w.dims())));
        }
        let s = va.data().iter().zip(w.data()).map(|(x, y)| *x * *y).sum();
        self.counters.flops += 2 * w.len() as u64;
        self.push(Tensor::scalar(s), Op::WeightedSum(a, Arc::new(w.data().to_vec())), "weighted_sum")
    }

    pub fn gelu(&mut self, x: Var, act: Activation) -> Result<Var> {
        let vx = self.value(x);
        let f = match act {
            Activation::GeluExact => kernels::gelu_exact::<T>,
            Activation::GeluTanh => kernels::gelu_tanh::<T>,
        };
        let out = Tensor::new(vx.dims(), vx.data().iter().map(|v| f(*v)).collect())?;
        self.counters.flops += 8 * out.len() as u64;
        self.push(out, Op::Gelu(x, act), "gelu")
    }

    // ---- normalization ----

    /// Layer norm over the channel axis of a feature map. One call is one
    /// normalization pass.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        Ok(self.layer_norm_group(&[x], gain, bias, eps)?[0])
    }

    /// Normalizes several feature maps with one parameter set in a single
    /// pass over all of them.
    pub fn layer_norm_group(&mut self, xs: &[Var], gain: Var, bias: Var, eps: f64) -> Result<Vec<Var>> {
        if eps <= 0.0 {
            return Err(Error::Invalid(format!("layer norm eps must be positive, got {eps}")));
        }
        self.counters.ln_passes += 1;
        let mut outs = Vec::with_capacity(xs.len());
        for &x in xs {
            let (n, c, h, w) = self.value(x).dim4()?;
            let (g, b) = (self.value(gain), self.value(bias));
            if g.dims() != [c] || b.dims() != [c] {
                return Err(Error::shape(
                    "layer_norm",
                    format!("gain {:?} / bias {:?} for {c} channels", g.dims(), b.dims()),
                ));
            }
            let flip = if self.fault == Some(Fault::LnSign) { -T::one() } else { T::one() };
            let (xd, gd, bd) = (self.value(x).data(), g.data(), b.data());
            let plane = h * w;
            let cnt = T::of(c as f64);
            let eps = T::of(eps);
            let mut stats = Vec::with_capacity(n * plane);
            let mut out = vec![T::zero(); xd.len()];
            for bi in 0..n {
                for p in 0..plane {
                    let at = |ch: usize| (bi * c + ch) * plane + p;
                    let mean = (0..c).map(|ch| xd[at(ch)]).sum::<T>() / cnt;
                    let var = (0..c).map(|ch| (xd[at(ch)] - mean).powi(2)).sum::<T>() / cnt;
                    let rstd = T::one() / (var + eps).sqrt();
                    for ch in 0..c {
                        out[at(ch)] = flip * (xd[at(ch)] - mean) * rstd * gd[ch] + bd[ch];
                    }
                    stats.push((mean, rstd));
                }
            }
            self.counters.flops += 8 * out.len() as u64;
            let out = Tensor::new(&[n, c, h, w], out)?;
            outs.push(self.push(out, Op::LayerNorm { x, gain, bias, stats }, "layer_norm")?);
        }
        Ok(outs)
    }

    // ---- convolution ----

    /// 2-D convolution. `k` is `[co, ci, kh, kw]`, or `[co, ci]` for a
    /// per-pixel linear map.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, ci, h, w) = self.value(x).dim4()?;
        let (co, kci, kh, kw) = match *self.value(k).dims() {
            [co, kci, kh, kw] => (co, kci, kh, kw),
            [co, kci] => (co, kci, 1, 1),
            ref d => return Err(Error::shape("conv2d", format!("kernel dims {d:?}"))),
        };
        if kci != ci {
            return Err(Error::shape("conv2d", format!("kernel expects {kci} input channels, input has {ci}")));
        }
        if let Some(b) = b {
            if self.value(b).dims() != [co] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {co} outputs", self.value(b).dims())));
            }
        }
        let geom = ConvGeom::new(n, ci, h, w, co, kh, kw, stride, pad)
            .ok_or_else(|| Error::shape("conv2d", format!("kernel {kh}x{kw} larger than padded input {h}x{w}")))?;
        let data = kernels::conv2d(
            self.exec,
            geom,
            self.value(x).data(),
            self.value(k).data(),
            b.map(|b| self.value(b).data()),
        );
        self.counters.flops += geom.flops();
        let out = Tensor::new(&[n, co, geom.oh, geom.ow], data)?;
        self.push(out, Op::Conv { x, k, b, geom }, "conv2d")
    }

    /// 3×3 convolution, stride 1, zero padding 1.
    pub fn conv2d_3x3(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        match *self.value(k).dims() {
            [_, _, 3, 3] => self.conv2d(x, k, Some(b), 1, 1),
            ref d => Err(Error::shape("conv2d_3x3", format!("kernel dims {d:?}"))),
        }
    }

    /// Per-channel scale and shift; channels never mix. `k` holds one scalar
    /// per channel (`[c]` or `[c, 1, 1, 1]`).
    pub fn depthwise_conv1x1(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dim4()?;
        let (kv, bv) = (self.value(k), self.value(b));
        if kv.len() != c || bv.len() != c {
            return Err(Error::shape(
                "depthwise_conv1x1",
                format!("{} kernel / {} bias values for {c} channels", kv.len(), bv.len()),
            ));
        }
        let plane = h * w;
        let xd = self.value(x).data();
        let data = xd
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let ch = (i / plane) % c;
                kv.data()[ch] * *v + bv.data()[ch]
            })
            .collect();
        self.counters.flops += 2 * xd.len() as u64;
        self.push(Tensor::new(&[n, c, h, w], data)?, Op::Depthwise { x, k, b }, "depthwise_conv1x1")
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dim4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("avg_pool2", format!("odd spatial size {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let quarter = T::of(0.25);
        let out = Tensor::from_fn(&[n, c, oh, ow], |i| {
            let (plane, r) = (i / (oh * ow), i % (oh * ow));
            let (y, xx) = (r / ow, r % ow);
            let base = plane * h * w;
            let at = |dy: usize, dx: usize| xd[base + (2 * y + dy) * w + 2 * xx + dx];
            (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) * quarter
        });
        self.counters.flops += 4 * out.len() as u64;
        self.push(out, Op::AvgPool2(x), "avg_pool2")
    }

    // ---- data movement ----

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::Invalid("concat of zero tensors".into()));
        };
        let (n, _, h, w) = self.value(first).dim4()?;
        let mut total = 0;
        for &x in xs {
            let (nn, c, hh, ww) = self.value(x).dim4()?;
            if (nn, hh, ww) != (n, h, w) {
                return Err(Error::shape("concat_channels", format!("({nn},{hh},{ww}) vs ({n},{h},{w})")));
            }
            total += c;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for &x in xs {
                let c = self.value(x).dims()[1];
                data.extend_from_slice(&self.value(x).data()[b * c * plane..][..c * plane]);
            }
        }
        self.counters.concats += 1;
        self.copied(data.len());
        self.push(Tensor::new(&[n, total, h, w], data)?, Op::Concat(xs.to_vec()), "concat_channels")
    }

    /// Channels `start..start + len` of a feature map.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dim4()?;
        if start + len > c {
            return Err(Error::IndexOutOfRange { index: start + len - 1, len: c });
        }
        let plane = h * w;
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            data.extend_from_slice(&xd[(b * c + start) * plane..][..len * plane]);
        }
        self.copied(data.len());
        self.push(Tensor::new(&[n, len, h, w], data)?, Op::Slice { x, start }, "slice_channels")
    }

    fn remap(&mut self, xs: Vec<Var>, dims: &[usize], src: Vec<(u32, u32)>, kind: RemapKind) -> Result<Var> {
        let data = src.iter().map(|&(i, o)| self.value(xs[i as usize]).data()[o as usize]).collect();
        match kind {
            RemapKind::Gather => self.counters.gathers += 1,
            RemapKind::Reshape => self.counters.reshapes += 1,
        }
        self.copied(src.len());
        let out = Tensor::new(dims, data)?;
        self.push(out, Op::Remap { xs, src: Arc::new(src) }, "remap")
    }

    /// Selects rows (height indices) of a feature map in plan order.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dim4()?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= h) {
            return Err(Error::IndexOutOfRange { index: bad, len: h });
        }
        let mut src = Vec::with_capacity(n * c * rows.len() * w);
        for plane in 0..n * c {
            for &r in rows {
                for col in 0..w {
                    src.push((0, ((plane * h + r) * w + col) as u32));
                }
            }
        }
        self.remap(vec![x], &[n, c, rows.len(), w], src, RemapKind::Gather)
    }

    /// Collects the given flattened spatial positions into a token matrix
    /// `[batch, positions, channels]`.
    pub fn gather_tokens(&mut self, x: Var, positions: &[usize]) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dim4()?;
        let plane = h * w;
        if let Some(&bad) = positions.iter().find(|&&p| p >= plane) {
            return Err(Error::IndexOutOfRange { index: bad, len: plane });
        }
        let mut src = Vec::with_capacity(n * positions.len() * c);
        for b in 0..n {
            for &p in positions {
                for ch in 0..c {
                    src.push((0, ((b * c + ch) * plane + p) as u32));
                }
            }
        }
        self.remap(vec![x], &[n, positions.len(), c], src, RemapKind::Gather)
    }

    /// Writes token matrices back to a `[n, c, h, w]` map. Part `i` fills the
    /// positions `groups[i]`; together the groups must cover every position
    /// exactly once.
    pub fn scatter_tokens(&mut self, parts: &[Var], groups: &[Vec<usize>], h: usize, w: usize) -> Result<Var> {
        if parts.len() != groups.len() || parts.is_empty() {
            return Err(Error::shape("scatter_tokens", format!("{} parts for {} groups", parts.len(), groups.len())));
        }
        let (n, _, c) = match *self.value(parts[0]).dims() {
            [n, l, c] => (n, l, c),
            ref d => return Err(Error::shape("scatter_tokens", format!("token dims {d:?}"))),
        };
        let plane = h * w;
        let mut owner: Vec<Option<(u32, u32)>> = vec![None; plane];
        for (pi, (&part, group)) in parts.iter().zip(groups).enumerate() {
            if self.value(part).dims() != [n, group.len(), c] {
                return Err(Error::shape("scatter_tokens", format!("part {pi} dims {:?}", self.value(part).dims())));
            }
            for (l, &p) in group.iter().enumerate() {
                let slot = owner.get_mut(p).ok_or(Error::IndexOutOfRange { index: p, len: plane })?;
                if slot.replace((pi as u32, l as u32)).is_some() {
                    return Err(Error::Invalid(format!("position {p} written twice")));
                }
            }
        }
        let mut src = Vec::with_capacity(n * c * plane);
        for b in 0..n {
            for ch in 0..c {
                for slot in &owner {
                    let (pi, l) = slot.ok_or_else(|| Error::Invalid("scatter leaves positions unwritten".into()))?;
                    let len = groups[pi as usize].len();
                    src.push((pi, ((b * len + l as usize) * c + ch) as u32));
                }
            }
        }
        self.remap(parts.to_vec(), &[n, c, h, w], src, RemapKind::Gather)
    }

    /// Physically relayouts a whole buffer: `out[i] = x[src[i]]`. Counted as
    /// a reshape.
    pub fn relayout(&mut self, x: Var, dims: &[usize], src: &[usize]) -> Result<Var> {
        let len = self.value(x).len();
        if src.len() != len || dims.iter().product::<usize>() != len {
            return Err(Error::shape("relayout", format!("{} sources for {len} values into {dims:?}", src.len())));
        }
        let src = src.iter().map(|&s| (0, s as u32)).collect();
        self.remap(vec![x], dims, src, RemapKind::Reshape)
    }

    // ---- token algebra ----

    /// Batched `a · b` (or `a · bᵀ`) on rank-3 tensors.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ba, m, k) = match self.value(a).dims() {
            &[x, y, z] => (x, y, z),
            d => return Err(Error::shape("matmul", format!("lhs dims {d:?}"))),
        };
        let (bb, n, kb) = match (self.value(b).dims(), trans_b) {
            (&[x, y, z], false) => (x, z, y),
            (&[x, y, z], true) => (x, y, z),
            (d, _) => return Err(Error::shape("matmul", format!("rhs dims {d:?}"))),
        };
        if ba != bb || k != kb {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", self.value(a).dims(), self.value(b).dims())));
        }
        let data = kernels::bmm(self.exec, self.value(a).data(), self.value(b).data(), ba, m, k, n, false, trans_b);
        self.counters.flops += 2 * (ba * m * n * k) as u64;
        self.push(Tensor::new(&[ba, m, n], data)?, Op::MatMul { a, b, trans_b }, "matmul")
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let cols = *vx.dims().last().expect("rank >= 1");
        let data = kernels::softmax_rows(self.exec, vx.data(), cols);
        let out = Tensor::new(vx.dims(), data)?;
        self.counters.flops += 4 * out.len() as u64;
        self.push(out, Op::Softmax(x), "softmax_rows")
    }

    /// Mean per-pixel softmax cross-entropy of `[n, k, h, w]` logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, k, h, w) = self.value(logits).dim4()?;
        let plane = h * w;
        if targets.len() != n * plane {
            return Err(Error::shape("cross_entropy", format!("{} targets for {} pixels", targets.len(), n * plane)));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::IndexOutOfRange { index: bad, len: k });
        }
        let ld = self.value(logits).data();
        let mut probs = vec![T::zero(); ld.len()];
        let mut loss = T::zero();
        for b in 0..n {
            for p in 0..plane {
                let at = |c: usize| (b * k + c) * plane + p;
                let max = (0..k).map(|c| ld[at(c)]).fold(T::neg_infinity(), T::max);
                let z: T = (0..k).map(|c| (ld[at(c)] - max).exp()).sum();
                for c in 0..k {
                    probs[at(c)] = (ld[at(c)] - max).exp() / z;
                }
                let t = targets[b * plane + p];
                loss += z.ln() + max - ld[at(t)];
            }
        }
        let loss = loss / T::of((n * plane) as f64);
        self.counters.flops += 6 * ld.len() as u64;
        let op = Op::CrossEntropy { logits, targets: Arc::new(targets.to_vec()), probs };
        self.push(Tensor::scalar(loss), op, "cross_entropy")
    }

    // ---- reverse mode ----

    /// Back-propagates from a scalar loss. Runs at most once per recorded
    /// graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::GraphConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", format!("loss dims {:?}", self.value(loss).dims())));
        }
        if !self.nodes[loss.0].needs_grad {
            return Err(Error::Detached);
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match g {
                Some(g) if n.needs_grad => Some(Tensor::new(n.value.dims(), g).expect("grad shape")),
                _ => None,
            })
            .collect();
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let exec = self.exec;
        let wants = |v: &Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(contrib).for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, g.iter().zip(vb).map(|(g, y)| *g * *y).collect());
                acc(*b, g.iter().zip(va).map(|(g, x)| *g * *x).collect());
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|v| *v * *s).collect()),
            Op::Sum(a) => acc(*a, vec![g[0]; self.value(*a).len()]),
            Op::WeightedSum(a, w) => acc(*a, w.iter().map(|v| *v * g[0]).collect()),
            Op::Gelu(x, act) => {
                let d = match act {
                    Activation::GeluExact => kernels::gelu_exact_grad::<T>,
                    Activation::GeluTanh => kernels::gelu_tanh_grad::<T>,
                };
                acc(*x, g.iter().zip(self.value(*x).data()).map(|(g, v)| *g * d(*v)).collect());
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let (n, c, h, w) = self.value(*x).dim4().expect("rank 4");
                let plane = h * w;
                let xd = self.value(*x).data();
                let gd = self.value(*gain).data();
                let cnt = T::of(c as f64);
                let mut gx = vec![T::zero(); xd.len()];
                let mut ggain = vec![T::zero(); c];
                let mut gbias = vec![T::zero(); c];
                for b in 0..n {
                    for p in 0..plane {
                        let (mean, rstd) = stats[b * plane + p];
                        let at = |ch: usize| (b * c + ch) * plane + p;
                        let mut sum_dy = T::zero();
                        let mut sum_dy_xhat = T::zero();
                        for ch in 0..c {
                            let xhat = (xd[at(ch)] - mean) * rstd;
                            let dy = g[at(ch)] * gd[ch];
                            sum_dy += dy;
                            sum_dy_xhat += dy * xhat;
                            ggain[ch] += g[at(ch)] * xhat;
                            gbias[ch] += g[at(ch)];
                        }
                        for ch in 0..c {
                            let xhat = (xd[at(ch)] - mean) * rstd;
                            let dy = g[at(ch)] * gd[ch];
                            gx[at(ch)] = rstd * (dy - sum_dy / cnt - xhat * sum_dy_xhat / cnt);
                        }
                    }
                }
                acc(*x, gx);
                acc(*gain, ggain);
                acc(*bias, gbias);
            }
            Op::Conv { x, k, b, geom } => {
                if wants(x) {
                    acc(*x, kernels::conv2d_grad_input(exec, *geom, g, self.value(*k).data()));
                }
                if wants(k) {
                    acc(*k, kernels::conv2d_grad_kernel(exec, *geom, g, self.value(*x).data()));
                }
                if let Some(b) = b {
                    acc(*b, kernels::channel_sums(g, geom.n, geom.co, geom.oh * geom.ow));
                }
            }
            Op::Depthwise { x, k, b } => {
                let (n, c, h, w) = self.value(*x).dim4().expect("rank 4");
                let plane = h * w;
                let kd = self.value(*k).data();
                let xd = self.value(*x).data();
                acc(*x, g.iter().enumerate().map(|(i, gv)| *gv * kd[(i / plane) % c]).collect());
                let mut gk = vec![T::zero(); c];
                for (i, gv) in g.iter().enumerate() {
                    gk[(i / plane) % c] += *gv * xd[i];
                }
                acc(*k, gk);
                acc(*b, kernels::channel_sums(g, n, c, plane));
            }
            Op::AvgPool2(x) => {
                let (_, _, h, w) = self.value(*x).dim4().expect("rank 4");
                let (oh, ow) = (h / 2, w / 2);
                let mut gx = vec![T::zero(); self.value(*x).len()];
                let quarter = T::of(0.25);
                for (i, gv) in g.iter().enumerate() {
                    let (plane, r) = (i / (oh * ow), i % (oh * ow));
                    let (y, xx) = (r / ow, r % ow);
                    let base = plane * h * w;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        gx[base + (2 * y + dy) * w + 2 * xx + dx] += *gv * quarter;
                    }
                }
                acc(*x, gx);
            }
            Op::Concat(xs) => {
                let (n, total, h, w) = node.value.dim4().expect("rank 4");
                let plane = h * w;
                let mut offset = 0;
                for &x in xs {
                    let c = self.value(x).dims()[1];
                    if wants(&x) {
                        let mut gx = Vec::with_capacity(n * c * plane);
                        for b in 0..n {
                            gx.extend_from_slice(&g[(b * total + offset) * plane..][..c * plane]);
                        }
                        acc(x, gx);
                    }
                    offset += c;
                }
            }
            Op::Slice { x, start } => {
                let (n, c, h, w) = self.value(*x).dim4().expect("rank 4");
                let len = node.value.dims()[1];
                let plane = h * w;
                let mut gx = vec![T::zero(); n * c * plane];
                for b in 0..n {
                    gx[(b * c + start) * plane..][..len * plane].copy_from_slice(&g[b * len * plane..][..len * plane]);
                }
                acc(*x, gx);
            }
            Op::Remap { xs, src } => {
                let mut gxs: Vec<Vec<T>> = xs.iter().map(|x| vec![T::zero(); self.value(*x).len()]).collect();
                for (gv, &(xi, off)) in g.iter().zip(src.iter()) {
                    gxs[xi as usize][off as usize] += *gv;
                }
                for (x, gx) in xs.iter().zip(gxs) {
                    acc(*x, gx);
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let (ba, m, k) = match *self.value(*a).dims() {
                    [x, y, z] => (x, y, z),
                    _ => unreachable!(),
                };
                let n = node.value.dims()[2];
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if wants(a) {
                    acc(*a, kernels::bmm(exec, g, bd, ba, m, n, k, false, !*trans_b));
                }
                if wants(b) {
                    let gb = if *trans_b {
                        kernels::bmm(exec, g, ad, ba, n, m, k, true, false)
                    } else {
                        kernels::bmm(exec, ad, g, ba, k, m, n, true, false)
                    };
                    acc(*b, gb);
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let cols = *node.value.dims().last().expect("rank >= 1");
                let mut gx = vec![T::zero(); y.len()];
                for ((gr, yr), dst) in g.chunks(cols).zip(y.chunks(cols)).zip(gx.chunks_mut(cols)) {
                    let dot: T = gr.iter().zip(yr).map(|(a, b)| *a * *b).sum();
                    for ((d, gv), yv) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = *yv * (*gv - dot);
                    }
                }
                acc(*x, gx);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let (_, k, h, w) = self.value(*logits).dim4().expect("rank 4");
                let plane = h * w;
                let scale = g[0] / T::of(targets.len() as f64);
                let mut gl: Vec<T> = probs.iter().map(|p| *p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    let (b, p) = (i / plane, i % plane);
                    gl[(b * k + t) * plane + p] -= scale;
                }
                acc(*logits, gl);
            }
        }
    }
}
