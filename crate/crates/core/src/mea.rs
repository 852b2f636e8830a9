//! Memory-efficient adapter block: attention, feed-forward and depthwise
//! convolution branches in parallel, fused by a 3×3 projection of
//! `Concat(attn; ffn; conv; F_q; F_kv)`.
//!
//! The attention and feed-forward branches draw their layer norm from one
//! [`NormHandle`], so a full block performs a single normalization pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::csa::{self, AttnImpl, AttnParams, ConvParams, CsaOptions, LnOrder};
use crate::error::{Error, Result};
use crate::graph::{Activation, Context, Var};
use crate::norm::{LnParams, NormHandle, DEFAULT_LN_EPS};
use crate::scalar::Scalar;
use crate::tensor::{Component, ParamId, ParamStore, Role, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeaConfig {
    /// Channel width of the adapter stream.
    pub width: usize,
    /// Cascaded heads per injector/extractor.
    pub head_count: usize,
    /// Preferred stripe size; the stripe count follows from the feature size.
    pub stripe_size: usize,
    pub enable_attn: bool,
    pub enable_ffn: bool,
    pub enable_conv: bool,
    pub enable_cascade: bool,
    pub shared_ln: bool,
    pub activation: Activation,
    pub ln_order: LnOrder,
    pub attn_impl: AttnImpl,
    pub ln_eps: f64,
}

impl Default for MeaConfig {
    fn default() -> Self {
        MeaConfig {
            width: 256,
            head_count: 16,
            stripe_size: 2,
            enable_attn: true,
            enable_ffn: true,
            enable_conv: true,
            enable_cascade: true,
            shared_ln: true,
            activation: Activation::GeluExact,
            ln_order: LnOrder::AfterProjection,
            attn_impl: AttnImpl::Gather,
            ln_eps: DEFAULT_LN_EPS,
        }
    }
}

impl MeaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::Config("width must be positive".into()));
        }
        if !(self.enable_attn || self.enable_ffn || self.enable_conv) {
            return Err(Error::Config("at least one of attn/ffn/conv branches must be enabled".into()));
        }
        if self.enable_cascade && (self.head_count == 0 || !self.width.is_multiple_of(self.head_count)) {
            return Err(Error::Config(format!("head count {} does not divide width {}", self.head_count, self.width)));
        }
        if self.stripe_size == 0 {
            return Err(Error::Config("stripe size must be positive".into()));
        }
        if self.ln_eps <= 0.0 {
            return Err(Error::Config("ln eps must be positive".into()));
        }
        Ok(())
    }

    pub fn csa_options(&self) -> CsaOptions {
        CsaOptions { stripe_size: self.stripe_size, ln_order: self.ln_order, attn_impl: self.attn_impl }
    }

    /// Number of operands fused by the output projection.
    pub fn fused_operands(&self) -> usize {
        2 + [self.enable_attn, self.enable_ffn, self.enable_conv].iter().filter(|b| **b).count()
    }
}

/// `F_tem = LN(Conv3×3(Concat(F_q; F_kv)))`, then two MLPs (each a pair of
/// 3×3 convolutions) around the activation.
#[derive(Clone, Copy, Debug)]
pub struct FfnParams {
    pub pre: ConvParams,
    pub mlp1: [ConvParams; 2],
    pub mlp2: [ConvParams; 2],
}

impl FfnParams {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, width: usize, component: Component, rng: &mut impl Rng) -> Result<Self> {
        let mut conv = |name: &str, inp| ConvParams::init(store, &format!("{prefix}.{name}"), (width, inp, 3), component, rng);
        Ok(FfnParams {
            pre: conv("pre", 2 * width)?,
            mlp1: [conv("mlp1.0", width)?, conv("mlp1.1", width)?],
            mlp2: [conv("mlp2.0", width)?, conv("mlp2.1", width)?],
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [self.pre, self.mlp1[0], self.mlp1[1], self.mlp2[0], self.mlp2[1]].iter().flat_map(|c| c.ids()).collect()
    }
}

/// Depthwise kernel: one scale per channel plus a bias.
#[derive(Clone, Copy, Debug)]
pub struct DepthwiseParams {
    pub kernel: ParamId,
    pub bias: ParamId,
}

/// Pointwise `2·width → width` projection followed by three depthwise 1×1
/// convolutions with activations between them.
#[derive(Clone, Copy, Debug)]
pub struct ConvBranchParams {
    pub pointwise: ConvParams,
    pub depthwise: [DepthwiseParams; 3],
}

impl ConvBranchParams {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, width: usize, component: Component, rng: &mut impl Rng) -> Result<Self> {
        let pointwise = ConvParams::init(store, &format!("{prefix}.pointwise"), (width, 2 * width, 1), component, rng)?;
        let mut dw = |i: usize| -> Result<DepthwiseParams> {
            Ok(DepthwiseParams {
                kernel: store.add(
                    format!("{prefix}.dw{i}.kernel"),
                    Role::ConvKernel,
                    component,
                    Tensor::from_fn(&[width, 1, 1, 1], |_| T::of(rng.gen_range(0.5..1.5))),
                )?,
                bias: store.add(format!("{prefix}.dw{i}.bias"), Role::Bias, component, Tensor::zeros(&[width]))?,
            })
        };
        Ok(ConvBranchParams { pointwise, depthwise: [dw(0)?, dw(1)?, dw(2)?] })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.pointwise.ids().to_vec();
        v.extend(self.depthwise.iter().flat_map(|d| [d.kernel, d.bias]));
        v
    }
}

#[derive(Clone, Debug)]
pub struct MeaParams {
    pub width: usize,
    pub attn: Option<AttnParams>,
    pub ffn: Option<FfnParams>,
    pub conv: Option<ConvBranchParams>,
    /// The shared norm, or the attention branch's own norm when sharing is off.
    pub ln: Option<LnParams>,
    /// Feed-forward norm when sharing is off.
    pub ffn_ln: Option<LnParams>,
    pub fuse: ConvParams,
}

/// Parameter groups that the branch toggles add or remove.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Attn,
    Ffn,
    Conv,
    Norm,
    Fuse,
}

impl MeaParams {
    /// Allocates a block of `width` channels with the branches `cfg` enables.
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        width: usize,
        cfg: &MeaConfig,
        component: Component,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let attn = cfg.enable_attn.then(|| AttnParams::init(store, &format!("{prefix}.attn"), width, component, rng)).transpose()?;
        let ffn = cfg.enable_ffn.then(|| FfnParams::init(store, &format!("{prefix}.ffn"), width, component, rng)).transpose()?;
        let conv = cfg.enable_conv.then(|| ConvBranchParams::init(store, &format!("{prefix}.conv"), width, component, rng)).transpose()?;
        let (ln, ffn_ln) = if cfg.shared_ln {
            let shared = (cfg.enable_attn || cfg.enable_ffn).then(|| LnParams::init(store, &format!("{prefix}.ln"), width, component)).transpose()?;
            (shared, None)
        } else {
            (
                cfg.enable_attn.then(|| LnParams::init(store, &format!("{prefix}.attn_ln"), width, component)).transpose()?,
                cfg.enable_ffn.then(|| LnParams::init(store, &format!("{prefix}.ffn_ln"), width, component)).transpose()?,
            )
        };
        let fuse = ConvParams::init(store, &format!("{prefix}.fuse"), (width, cfg.fused_operands() * width, 3), component, rng)?;
        Ok(MeaParams { width, attn, ffn, conv, ln, ffn_ln, fuse })
    }

    pub fn group_ids(&self, group: ParamGroup) -> Vec<ParamId> {
        match group {
            ParamGroup::Attn => self.attn.map(|a| a.ids()).unwrap_or_default(),
            ParamGroup::Ffn => self.ffn.map(|f| f.ids()).unwrap_or_default(),
            ParamGroup::Conv => self.conv.map(|c| c.ids()).unwrap_or_default(),
            ParamGroup::Norm => self.ln.iter().chain(&self.ffn_ln).flat_map(LnParams::ids).collect(),
            ParamGroup::Fuse => self.fuse.ids().to_vec(),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [ParamGroup::Attn, ParamGroup::Ffn, ParamGroup::Conv, ParamGroup::Norm, ParamGroup::Fuse]
            .into_iter()
            .flat_map(|g| self.group_ids(g))
            .collect()
    }

    fn attn_norm(&self, cfg: &MeaConfig) -> Result<NormHandle> {
        let p = self.ln.ok_or_else(|| Error::Invalid("block has no attention norm".into()))?;
        Ok(NormHandle::new(p, cfg.ln_eps))
    }

    fn ffn_norm(&self, cfg: &MeaConfig) -> Result<NormHandle> {
        let p = self.ffn_ln.or(self.ln).ok_or_else(|| Error::Invalid("block has no feed-forward norm".into()))?;
        Ok(NormHandle::new(p, cfg.ln_eps))
    }
}

fn check_inputs<T: Scalar>(ctx: &Context<T>, f_q: Var, f_kv: Var, width: usize) -> Result<()> {
    let (a, b) = (ctx.value(f_q).dim4()?, ctx.value(f_kv).dim4()?);
    if a != b {
        return Err(Error::shape("mea block", format!("{a:?} vs {b:?}")));
    }
    if a.1 != width {
        return Err(Error::shape("mea block", format!("{} channels, block width {width}", a.1)));
    }
    Ok(())
}

/// Cross-shaped attention with `f_q` as queries and `f_kv` as keys/values.
pub fn attn_branch<T: Scalar>(
    ctx: &mut Context<T>,
    store: &ParamStore<T>,
    f_q: Var,
    f_kv: Var,
    params: &AttnParams,
    norm: &mut NormHandle,
    cfg: &MeaConfig,
) -> Result<Var> {
    csa::csa_forward(ctx, store, f_q, f_kv, params, norm, &cfg.csa_options())
}

/// The pre-normalization part of the feed-forward branch.
pub fn ffn_prepare<T: Scalar>(ctx: &mut Context<T>, store: &ParamStore<T>, f_q: Var, f_kv: Var, params: &FfnParams) -> Result<Var> {
    let cat = ctx.concat_channels(&[f_q, f_kv])?;
    params.pre.conv3x3(ctx, store, cat)
}

pub fn ffn_finish<T: Scalar>(
    ctx: &mut Context<T>,
    store: &ParamStore<T>,
    pre: Var,
    params: &FfnParams,
    norm: &mut NormHandle,
    act: Activation,
) -> Result<Var> {
    let mut x = norm.normalize(ctx, store, &[pre])?[0];
    for c in &params.mlp1 {
        x = c.conv3x3(ctx, store, x)?;
    }
    x = ctx.gelu(x, act)?;
    for c in &params.mlp2 {
        x = c.conv3x3(ctx, store, x)?;
    }
    Ok(x)
}

pub fn ffn_branch<T: Scalar>(
    ctx: &mut Context<T>,
    store: &ParamStore<T>,
    f_q: Var,
    f_kv: Var,
    params: &FfnParams,
    norm: &mut NormHandle,
    act: Activation,
) -> Result<Var> {
    let pre = ffn_prepare(ctx, store, f_q, f_kv, params)?;
    ffn_finish(ctx, store, pre, params, norm, act)
}

/// `DC(act(DC(act(DC(P(Concat(F_q; F_kv)))))))` with `P` the pointwise
/// channel-reducing projection.
pub fn conv_branch<T: Scalar>(
    ctx: &mut Context<T>,
    store: &ParamStore<T>,
    f_q: Var,
    f_kv: Var,
    params: &ConvBranchParams,
    act: Activation,
) -> Result<Var> {
    let cat = ctx.concat_channels(&[f_q, f_kv])?;
    let mut x = params.pointwise.conv(ctx, store, cat, 1, 0)?;
    for (i, dw) in params.depthwise.iter().enumerate() {
        if i > 0 {
            x = ctx.gelu(x, act)?;
        }
        let k = ctx.param(store, dw.kernel)?;
        let b = ctx.param(store, dw.bias)?;
        x = ctx.depthwise_conv1x1(x, k, b)?;
    }
    Ok(x)
}

/// Branch outputs of one block evaluation, before and after fusion.
#[derive(Clone, Copy, Debug)]
pub struct MeaOutputs {
    pub attn: Option<Var>,
    pub ffn: Option<Var>,
    pub conv: Option<Var>,
    pub fused: Var,
}

pub fn mea_forward<T: Scalar>(
    ctx: &mut Context<T>,
    store: &ParamStore<T>,
    f_q: Var,
    f_kv: Var,
    params: &MeaParams,
    cfg: &MeaConfig,
) -> Result<Var> {
    Ok(mea_forward_parts(ctx, store, f_q, f_kv, params, cfg)?.fused)
}

pub fn mea_forward_parts<T: Scalar>(
    ctx: &mut Context<T>,
    store: &ParamStore<T>,
    f_q: Var,
    f_kv: Var,
    params: &MeaParams,
    cfg: &MeaConfig,
) -> Result<MeaOutputs> {
    check_inputs(ctx, f_q, f_kv, params.width)?;
    if params.attn.is_none() && params.ffn.is_none() && params.conv.is_none() {
        return Err(Error::Config("all branches disabled".into()));
    }
    let opts = cfg.csa_options();
    let attn_pending = params.attn.as_ref().map(|p| csa::csa_prepare(ctx, store, f_q, f_kv, p, opts.ln_order)).transpose()?;
    let ffn_pre = params.ffn.as_ref().map(|p| ffn_prepare(ctx, store, f_q, f_kv, p)).transpose()?;

    // Everything awaiting normalization is normalized up front: one pass when
    // the norm is shared, one per branch otherwise.
    let mut attn_norm = None;
    let mut ffn_norm = None;
    if cfg.shared_ln && (attn_pending.is_some() || ffn_pre.is_some()) {
        let mut shared = params.attn_norm(cfg)?;
        let mut all: Vec<Var> = attn_pending.iter().flat_map(|p| p.to_normalize().to_vec()).collect();
        all.extend(ffn_pre);
        shared.normalize(ctx, store, &all)?;
        attn_norm = Some(shared);
    } else {
        if let Some(p) = &attn_pending {
            let mut h = params.attn_norm(cfg)?;
            h.normalize(ctx, store, p.to_normalize())?;
            attn_norm = Some(h);
        }
        if let Some(pre) = ffn_pre {
            let mut h = params.ffn_norm(cfg)?;
            h.normalize(ctx, store, &[pre])?;
            ffn_norm = Some(h);
        }
    }

    let attn = match (&params.attn, &attn_pending) {
        (Some(p), Some(pending)) => {
            let norm = attn_norm.as_mut().expect("attention norm prepared");
            Some(csa::csa_finish(ctx, store, pending, p, norm, &opts)?)
        }
        _ => None,
    };
    let ffn = match (&params.ffn, ffn_pre) {
        (Some(p), Some(pre)) => {
            let norm = ffn_norm.as_mut().or(attn_norm.as_mut()).expect("feed-forward norm prepared");
            Some(ffn_finish(ctx, store, pre, p, norm, cfg.activation)?)
        }
        _ => None,
    };
    let conv = params.conv.as_ref().map(|p| conv_branch(ctx, store, f_q, f_kv, p, cfg.activation)).transpose()?;

    let fused = fuse(ctx, store, params, [attn, ffn, conv], f_q, f_kv)?;
    Ok(MeaOutputs { attn, ffn, conv, fused })
}

/// `Conv3×3(Concat(branches...; F_q; F_kv))`, skipping disabled branches.
pub fn fuse<T: Scalar>(
    ctx: &mut Context<T>,
    store: &ParamStore<T>,
    params: &MeaParams,
    branches: [Option<Var>; 3],
    f_q: Var,
    f_kv: Var,
) -> Result<Var> {
    let mut operands: Vec<Var> = branches.into_iter().flatten().collect();
    operands.extend([f_q, f_kv]);
    let cat = ctx.concat_channels(&operands)?;
    params.fuse.conv3x3(ctx, store, cat)
}
