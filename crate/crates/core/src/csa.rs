//! Cross-shaped stripe attention.
//!
//! Horizontal stripes are bands of `s` full rows, vertical stripes bands of
//! `s` full columns. Single-head attention runs inside each stripe; the two
//! orientations are concatenated on channels and merged by a 3×3 convolution.
//! Stripe members are selected through precomputed index plans, so the
//! gather path never relayouts a buffer. [`AttnImpl::Reshape`] is the
//! window-partition baseline that does.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Context, Var};
use crate::norm::NormHandle;
use crate::scalar::Scalar;
use crate::tensor::{Component, ParamId, ParamStore, Role, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    Horizontal,
    Vertical,
}

/// Partition of an `height × width` grid into non-overlapping stripes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StripePlan {
    pub orientation: Orientation,
    pub height: usize,
    pub width: usize,
    pub stripe_count: usize,
    pub stripe_size: usize,
    /// Flattened `h * width + w` positions of each stripe, row-major inside
    /// the stripe.
    pub index_table: Vec<Vec<usize>>,
}

pub fn build_stripe_plan(height: usize, width: usize, stripe_count: usize, orientation: Orientation) -> Result<StripePlan> {
    if stripe_count < 1 {
        return Err(Error::Invalid("stripe count must be at least 1".into()));
    }
    let extent = match orientation {
        Orientation::Horizontal => height,
        Orientation::Vertical => width,
    };
    if extent % stripe_count != 0 {
        return Err(Error::Invalid(format!(
            "{orientation:?} extent {extent} is not divisible into {stripe_count} stripes"
        )));
    }
    let s = extent / stripe_count;
    let index_table = (0..stripe_count)
        .map(|m| match orientation {
            Orientation::Horizontal => (m * s * width..(m + 1) * s * width).collect(),
            Orientation::Vertical => (0..height)
                .flat_map(|row| (m * s..(m + 1) * s).map(move |col| row * width + col))
                .collect(),
        })
        .collect();
    Ok(StripePlan { orientation, height, width, stripe_count, stripe_size: s, index_table })
}

/// Largest stripe size not above `preferred` that divides `extent`.
pub fn stripe_size_for(extent: usize, preferred: usize) -> usize {
    (1..=preferred.clamp(1, extent.max(1))).rev().find(|s| extent.is_multiple_of(*s)).unwrap_or(1)
}

/// Plan for one orientation with stripes of (at most) `stripe_size` pixels.
pub fn plan_for(height: usize, width: usize, stripe_size: usize, orientation: Orientation) -> Result<StripePlan> {
    let extent = match orientation {
        Orientation::Horizontal => height,
        Orientation::Vertical => width,
    };
    let s = stripe_size_for(extent, stripe_size);
    build_stripe_plan(height, width, extent / s, orientation)
}

/// Window of a 1-D token sequence around `position`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CrossWindowIndices {
    pub position: usize,
    pub window_size: usize,
    pub indices: Vec<usize>,
}

/// The clipped range `[max(0, p - w), min(L - 1, p + w)]`.
pub fn cross_window_indices(position: usize, window_size: usize, seq_length: usize) -> Result<CrossWindowIndices> {
    if position >= seq_length {
        return Err(Error::IndexOutOfRange { index: position, len: seq_length });
    }
    let lo = position.saturating_sub(window_size);
    let hi = position.saturating_add(window_size).min(seq_length - 1);
    Ok(CrossWindowIndices { position, window_size, indices: (lo..=hi).collect() })
}

/// Where layer norm sits relative to the query/key/value projections.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LnOrder {
    /// `LN(F W)`: normalize the projected features.
    #[default]
    AfterProjection,
    /// `LN(F) W`: normalize the inputs, then project.
    BeforeProjection,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttnImpl {
    /// Index-plan selection of stripe members.
    #[default]
    Gather,
    /// Window partition by relayout of the full buffers.
    Reshape,
}

#[derive(Clone, Copy, Debug)]
pub struct CsaOptions {
    pub stripe_size: usize,
    pub ln_order: LnOrder,
    pub attn_impl: AttnImpl,
}

impl Default for CsaOptions {
    fn default() -> Self {
        CsaOptions { stripe_size: 2, ln_order: LnOrder::default(), attn_impl: AttnImpl::default() }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Projection {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Projection {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        role: Role,
        (out, inp): (usize, usize),
        component: Component,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let scale = 1.0 / (inp as f64).sqrt();
        Ok(Projection {
            weight: store.add(format!("{name}.weight"), role, component, Tensor::uniform(&[out, inp], scale, rng))?,
            bias: store.add(format!("{name}.bias"), Role::Bias, component, Tensor::zeros(&[out]))?,
        })
    }

    /// Per-pixel linear map of a feature map.
    pub fn apply<T: Scalar>(&self, ctx: &mut Context<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = ctx.param(store, self.weight)?;
        let b = ctx.param(store, self.bias)?;
        ctx.conv2d(x, w, Some(b), 1, 0)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Convolution kernel with bias.
#[derive(Clone, Copy, Debug)]
pub struct ConvParams {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl ConvParams {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        (out, inp, k): (usize, usize, usize),
        component: Component,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let scale = 1.0 / ((inp * k * k) as f64).sqrt();
        Ok(ConvParams {
            kernel: store.add(format!("{name}.kernel"), Role::ConvKernel, component, Tensor::uniform(&[out, inp, k, k], scale, rng))?,
            bias: store.add(format!("{name}.bias"), Role::Bias, component, Tensor::zeros(&[out]))?,
        })
    }

    pub fn zeroed<T: Scalar>(store: &mut ParamStore<T>, name: &str, (out, inp, k): (usize, usize, usize), component: Component) -> Result<Self> {
        Ok(ConvParams {
            kernel: store.add(format!("{name}.kernel"), Role::ConvKernel, component, Tensor::zeros(&[out, inp, k, k]))?,
            bias: store.add(format!("{name}.bias"), Role::Bias, component, Tensor::zeros(&[out]))?,
        })
    }

    pub fn conv<T: Scalar>(&self, ctx: &mut Context<T>, store: &ParamStore<T>, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let k = ctx.param(store, self.kernel)?;
        let b = ctx.param(store, self.bias)?;
        ctx.conv2d(x, k, Some(b), stride, pad)
    }

    pub fn conv3x3<T: Scalar>(&self, ctx: &mut Context<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let k = ctx.param(store, self.kernel)?;
        let b = ctx.param(store, self.bias)?;
        ctx.conv2d_3x3(x, k, b)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.kernel, self.bias]
    }
}

/// Query/key/value projections and the 3×3 merge of the two orientations.
#[derive(Clone, Copy, Debug)]
pub struct AttnParams {
    pub width: usize,
    pub query: Projection,
    pub key: Projection,
    pub value: Projection,
    pub merge: ConvParams,
}

impl AttnParams {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, width: usize, component: Component, rng: &mut impl Rng) -> Result<Self> {
        Ok(AttnParams {
            width,
            query: Projection::init(store, &format!("{prefix}.query"), Role::QueryProj, (width, width), component, rng)?,
            key: Projection::init(store, &format!("{prefix}.key"), Role::KeyProj, (width, width), component, rng)?,
            value: Projection::init(store, &format!("{prefix}.value"), Role::ValueProj, (width, width), component, rng)?,
            merge: ConvParams::init(store, &format!("{prefix}.merge"), (width, 2 * width, 3), component, rng)?,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [self.query.ids(), self.key.ids(), self.value.ids(), self.merge.ids()].concat()
    }
}

/// Features waiting for the shared normalization.
#[derive(Clone, Debug)]
pub struct CsaPending {
    order: LnOrder,
    to_normalize: Vec<Var>,
}

impl CsaPending {
    pub fn to_normalize(&self) -> &[Var] {
        &self.to_normalize
    }
}

fn check_pair<T: Scalar>(ctx: &Context<T>, f_q: Var, f_kv: Var, width: usize) -> Result<(usize, usize, usize, usize)> {
    let dq = ctx.value(f_q).dim4()?;
    let dk = ctx.value(f_kv).dim4()?;
    if dq != dk {
        return Err(Error::shape("csa", format!("query {dq:?} vs key/value {dk:?}")));
    }
    if dq.1 != width {
        return Err(Error::shape("csa", format!("{} channels, block width {width}", dq.1)));
    }
    Ok(dq)
}

/// Computes everything that precedes normalization.
pub fn csa_prepare<T: Scalar>(
    ctx: &mut Context<T>,
    store: &ParamStore<T>,
    f_q: Var,
    f_kv: Var,
    params: &AttnParams,
    order: LnOrder,
) -> Result<CsaPending> {
    check_pair(ctx, f_q, f_kv, params.width)?;
    let to_normalize = match order {
        LnOrder::AfterProjection => vec![
            params.query.apply(ctx, store, f_q)?,
            params.key.apply(ctx, store, f_kv)?,
            params.value.apply(ctx, store, f_kv)?,
        ],
        LnOrder::BeforeProjection => vec![f_q, f_kv],
    };
    Ok(CsaPending { order, to_normalize })
}

/// Normalized queries, keys and values as full feature maps.
pub fn csa_resolve<T: Scalar>(
    ctx: &mut Context<T>,
    store: &ParamStore<T>,
    pending: &CsaPending,
    params: &AttnParams,
    norm: &mut NormHandle,
) -> Result<[Var; 3]> {
    let n = norm.normalize(ctx, store, &pending.to_normalize)?;
    match pending.order {
        LnOrder::AfterProjection => Ok([n[0], n[1], n[2]]),
        LnOrder::BeforeProjection => Ok([
            params.query.apply(ctx, store, n[0])?,
            params.key.apply(ctx, store, n[1])?,
            params.value.apply(ctx, store, n[1])?,
        ]),
    }
}

fn attention_core<T: Scalar>(ctx: &mut Context<T>, q: Var, k: Var, v: Var) -> Result<Var> {
    let d = *ctx.dims(q).last().expect("token rank 3");
    let scores = ctx.matmul(q, k, true)?;
    let scaled = ctx.scale(scores, T::of(1.0 / (d as f64).sqrt()))?;
    let weights = ctx.softmax_rows(scaled)?;
    ctx.matmul(weights, v, false)
}

/// Single-head attention inside every stripe of `plan`, on already
/// normalized query/key/value maps.
pub fn attend_stripes<T: Scalar>(ctx: &mut Context<T>, [q, k, v]: [Var; 3], plan: &StripePlan, imp: AttnImpl) -> Result<Var> {
    let (n, c, h, w) = ctx.value(q).dim4()?;
    if (h, w) != (plan.height, plan.width) {
        return Err(Error::shape("stripe attention", format!("plan for {}x{}, features {h}x{w}", plan.height, plan.width)));
    }
    match imp {
        AttnImpl::Gather => {
            let mut parts = Vec::with_capacity(plan.stripe_count);
            for idx in &plan.index_table {
                let qm = ctx.gather_tokens(q, idx)?;
                let km = ctx.gather_tokens(k, idx)?;
                let vm = ctx.gather_tokens(v, idx)?;
                parts.push(attention_core(ctx, qm, km, vm)?);
            }
            ctx.scatter_tokens(&parts, &plan.index_table, h, w)
        }
        AttnImpl::Reshape => {
            let windows = plan.stripe_count;
            let len = h * w / windows;
            // window (b, m), token l, channel ch  <-  map (b, ch, position)
            let mut to_windows = Vec::with_capacity(n * c * h * w);
            for b in 0..n {
                for idx in &plan.index_table {
                    for &p in idx {
                        for ch in 0..c {
                            to_windows.push((b * c + ch) * h * w + p);
                        }
                    }
                }
            }
            let mut to_map = vec![0; to_windows.len()];
            for (i, &src) in to_windows.iter().enumerate() {
                to_map[src] = i;
            }
            let dims = [n * windows, len, c];
            let qw = ctx.relayout(q, &dims, &to_windows)?;
            let kw = ctx.relayout(k, &dims, &to_windows)?;
            let vw = ctx.relayout(v, &dims, &to_windows)?;
            let out = attention_core(ctx, qw, kw, vw)?;
            ctx.relayout(out, &[n, c, h, w], &to_map)
        }
    }
}

/// Attention for one orientation: `SA(LN(F_q W^Q), LN(F_kv W^K), LN(F_kv W^V))`
/// per stripe of `plan`.
#[allow(clippy::too_many_arguments)]
pub fn stripe_attention<T: Scalar>(
    ctx: &mut Context<T>,
    store: &ParamStore<T>,
    f_q: Var,
    f_kv: Var,
    plan: &StripePlan,
    params: &AttnParams,
    norm: &mut NormHandle,
    order: LnOrder,
) -> Result<Var> {
    let pending = csa_prepare(ctx, store, f_q, f_kv, params, order)?;
    let qkv = csa_resolve(ctx, store, &pending, params, norm)?;
    attend_stripes(ctx, qkv, plan, AttnImpl::Gather)
}

/// Finishes cross-shaped attention from pending pre-normalization features.
pub fn csa_finish<T: Scalar>(
    ctx: &mut Context<T>,
    store: &ParamStore<T>,
    pending: &CsaPending,
    params: &AttnParams,
    norm: &mut NormHandle,
    opts: &CsaOptions,
) -> Result<Var> {
    let qkv = csa_resolve(ctx, store, pending, params, norm)?;
    let (_, _, h, w) = ctx.value(qkv[0]).dim4()?;
    let horizontal = plan_for(h, w, opts.stripe_size, Orientation::Horizontal)?;
    let vertical = plan_for(h, w, opts.stripe_size, Orientation::Vertical)?;
    let a_h = attend_stripes(ctx, qkv, &horizontal, opts.attn_impl)?;
    let a_v = attend_stripes(ctx, qkv, &vertical, opts.attn_impl)?;
    let both = ctx.concat_channels(&[a_h, a_v])?;
    params.merge.conv3x3(ctx, store, both)
}

/// `Conv3×3(Concat(A_H, A_V))` with `f_q` supplying queries and `f_kv` keys
/// and values.
pub fn csa_forward<T: Scalar>(
    ctx: &mut Context<T>,
    store: &ParamStore<T>,
    f_q: Var,
    f_kv: Var,
    params: &AttnParams,
    norm: &mut NormHandle,
    opts: &CsaOptions,
) -> Result<Var> {
    let pending = csa_prepare(ctx, store, f_q, f_kv, params, opts.ln_order)?;
    csa_finish(ctx, store, &pending, params, norm, opts)
}
