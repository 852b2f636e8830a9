//! Toy four-block backbone with a trainable adapter: a convolutional spatial
//! prior, and per block a cascaded injector writing into the backbone stream
//! and a cascaded extractor reading from it.
//!
//! Block `i` downsamples (1/4, 1/8, 1/16, 1/32 of the image) and then runs one
//! pre-norm transformer layer. Between blocks the adapter stream is
//! resampled by 2×2 average pooling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::csa::{plan_for, ConvParams, Orientation, Projection};
use crate::error::{Error, Result};
use crate::graph::{Context, Var};
use crate::mea::{self, MeaConfig, MeaParams};
use crate::norm::LnParams;
use crate::scalar::Scalar;
use crate::tensor::{Component, ParamId, ParamStore, Role, Tensor};

pub const DEPTH: usize = 4;

/// Cascaded multi-head wrapper around MEA blocks.
#[derive(Clone, Debug)]
pub struct CascadeParams {
    /// One block per head (width / heads channels each), or a single
    /// full-width block when the cascade is disabled.
    pub heads: Vec<MeaParams>,
    pub proj: ConvParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CarryMode {
    /// Head `h` receives the previous head's output added to both inputs.
    Cascade,
    /// Heads run independently.
    Zeroed,
}

impl CascadeParams {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &MeaConfig,
        zero_proj: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let (heads, head_width) = if cfg.enable_cascade { (cfg.head_count, cfg.width / cfg.head_count) } else { (1, cfg.width) };
        let heads = (0..heads)
            .map(|h| MeaParams::init(store, &format!("{prefix}.head{h}"), head_width, cfg, Component::Adapter, rng))
            .collect::<Result<Vec<_>>>()?;
        let proj_shape = (cfg.width, cfg.width, 3);
        let proj = if zero_proj {
            ConvParams::zeroed(store, &format!("{prefix}.proj"), proj_shape, Component::Adapter)?
        } else {
            ConvParams::init(store, &format!("{prefix}.proj"), proj_shape, Component::Adapter, rng)?
        };
        Ok(CascadeParams { heads, proj })
    }

    pub fn head_width(&self) -> usize {
        self.heads[0].width
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.heads.iter().flat_map(MeaParams::ids).collect();
        v.extend(self.proj.ids());
        v
    }
}

/// Splits both inputs into head slices along channels, runs head `h` on
/// `(q_h + carry, kv_h + carry)` with `carry` the output of head `h - 1`,
/// and projects the concatenated head outputs with a 3×3 convolution.
pub fn cascade_forward<T: Scalar>(
    ctx: &mut Context<T>,
    store: &ParamStore<T>,
    f_q: Var,
    f_kv: Var,
    params: &CascadeParams,
    cfg: &MeaConfig,
    carry: CarryMode,
) -> Result<Var> {
    let (_, c, _, _) = ctx.value(f_q).dim4()?;
    let d = params.head_width();
    if d * params.heads.len() != c {
        return Err(Error::shape("cascade", format!("{c} channels for {} heads of {d}", params.heads.len())));
    }
    let mut outs = Vec::with_capacity(params.heads.len());
    let mut prev: Option<Var> = None;
    for (h, head) in params.heads.iter().enumerate() {
        let (mut q, mut kv) = if params.heads.len() == 1 {
            (f_q, f_kv)
        } else {
            (ctx.slice_channels(f_q, h * d, d)?, ctx.slice_channels(f_kv, h * d, d)?)
        };
        if let (Some(p), CarryMode::Cascade) = (prev, carry) {
            q = ctx.add(q, p)?;
            kv = ctx.add(kv, p)?;
        }
        let out = mea::mea_forward(ctx, store, q, kv, head, cfg)?;
        outs.push(out);
        prev = Some(out);
    }
    let cat = if outs.len() == 1 { outs[0] } else { ctx.concat_channels(&outs)? };
    params.proj.conv3x3(ctx, store, cat)
}

/// Injector: backbone features are the queries, the adapter stream the keys
/// and values.
pub fn injector_forward<T: Scalar>(
    ctx: &mut Context<T>,
    store: &ParamStore<T>,
    f_sp_prev: Var,
    f_vit: Var,
    params: &CascadeParams,
    cfg: &MeaConfig,
) -> Result<Var> {
    cascade_forward(ctx, store, f_vit, f_sp_prev, params, cfg, CarryMode::Cascade)
}

/// Extractor: the injector output is the query, backbone features the keys
/// and values.
pub fn extractor_forward<T: Scalar>(
    ctx: &mut Context<T>,
    store: &ParamStore<T>,
    f_hat: Var,
    f_vit: Var,
    params: &CascadeParams,
    cfg: &MeaConfig,
) -> Result<Var> {
    cascade_forward(ctx, store, f_hat, f_vit, params, cfg, CarryMode::Cascade)
}

/// Patch-merge downsample plus one pre-norm transformer layer.
#[derive(Clone, Debug)]
pub struct BackboneBlock {
    pub down: ConvParams,
    pub down_stride: usize,
    pub ln1: LnParams,
    pub query: Projection,
    pub key: Projection,
    pub value: Projection,
    pub out: Projection,
    pub ln2: LnParams,
    pub mlp_in: Projection,
    pub mlp_out: Projection,
}

impl BackboneBlock {
    fn init<T: Scalar>(store: &mut ParamStore<T>, i: usize, in_ch: usize, width: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let c = Component::Backbone;
        let p = format!("backbone.{i}");
        let (k, stride) = if i == 0 { (4, 4) } else { (3, 2) };
        Ok(BackboneBlock {
            down: ConvParams::init(store, &format!("{p}.down"), (width, in_ch, k), c, rng)?,
            down_stride: stride,
            ln1: LnParams::init(store, &format!("{p}.ln1"), width, c)?,
            query: Projection::init(store, &format!("{p}.query"), Role::QueryProj, (width, width), c, rng)?,
            key: Projection::init(store, &format!("{p}.key"), Role::KeyProj, (width, width), c, rng)?,
            value: Projection::init(store, &format!("{p}.value"), Role::ValueProj, (width, width), c, rng)?,
            out: Projection::init(store, &format!("{p}.out"), Role::MlpWeight, (width, width), c, rng)?,
            ln2: LnParams::init(store, &format!("{p}.ln2"), width, c)?,
            mlp_in: Projection::init(store, &format!("{p}.mlp_in"), Role::MlpWeight, (2 * width, width), c, rng)?,
            mlp_out: Projection::init(store, &format!("{p}.mlp_out"), Role::MlpWeight, (width, 2 * width), c, rng)?,
        })
    }

    fn downsample<T: Scalar>(&self, ctx: &mut Context<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let pad = if self.down_stride == 4 { 0 } else { 1 };
        self.down.conv(ctx, store, x, self.down_stride, pad)
    }

    fn layer<T: Scalar>(&self, ctx: &mut Context<T>, store: &ParamStore<T>, x: Var, eps: f64) -> Result<Var> {
        let (_, c, h, w) = ctx.value(x).dim4()?;
        let g = ctx.param(store, self.ln1.gain)?;
        let b = ctx.param(store, self.ln1.bias)?;
        let normed = ctx.layer_norm(x, g, b, eps)?;
        let q = self.query.apply(ctx, store, normed)?;
        let k = self.key.apply(ctx, store, normed)?;
        let v = self.value.apply(ctx, store, normed)?;
        // global attention is a single stripe covering the map
        let all = plan_for(h, w, h, Orientation::Horizontal)?;
        let idx = &all.index_table[0];
        let (qt, kt, vt) = (ctx.gather_tokens(q, idx)?, ctx.gather_tokens(k, idx)?, ctx.gather_tokens(v, idx)?);
        let scores = ctx.matmul(qt, kt, true)?;
        let scores = ctx.scale(scores, T::of(1.0 / (c as f64).sqrt()))?;
        let weights = ctx.softmax_rows(scores)?;
        let attended = ctx.matmul(weights, vt, false)?;
        let attended = ctx.scatter_tokens(&[attended], &all.index_table, h, w)?;
        let attended = self.out.apply(ctx, store, attended)?;
        let x = ctx.add(x, attended)?;

        let g = ctx.param(store, self.ln2.gain)?;
        let b = ctx.param(store, self.ln2.bias)?;
        let normed = ctx.layer_norm(x, g, b, eps)?;
        let hidden = self.mlp_in.apply(ctx, store, normed)?;
        let hidden = ctx.gelu(hidden, Default::default())?;
        let hidden = self.mlp_out.apply(ctx, store, hidden)?;
        ctx.add(x, hidden)
    }
}

/// Three 3×3 convolutions (strides 2, 1, 2) then a 1×1 projection to the
/// adapter width: the image encoded at 1/4 resolution.
#[derive(Clone, Debug)]
pub struct SpatialPrior {
    pub stem: [ConvParams; 3],
    pub proj: ConvParams,
}

impl SpatialPrior {
    fn init<T: Scalar>(store: &mut ParamStore<T>, in_ch: usize, width: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let c = Component::Adapter;
        let mid = (width / 2).max(1);
        Ok(SpatialPrior {
            stem: [
                ConvParams::init(store, "prior.stem0", (mid, in_ch, 3), c, rng)?,
                ConvParams::init(store, "prior.stem1", (mid, mid, 3), c, rng)?,
                ConvParams::init(store, "prior.stem2", (width, mid, 3), c, rng)?,
            ],
            proj: ConvParams::init(store, "prior.proj", (width, width, 1), c, rng)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub mea: MeaConfig,
    pub in_channels: usize,
    pub classes: usize,
    pub freeze_backbone: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            mea: MeaConfig { width: 32, head_count: 2, ..MeaConfig::default() },
            in_channels: 3,
            classes: 3,
            freeze_backbone: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdapterNet {
    pub backbone: Vec<BackboneBlock>,
    pub prior: SpatialPrior,
    pub injectors: Vec<CascadeParams>,
    pub extractors: Vec<CascadeParams>,
    pub head: ConvParams,
}

/// Parameters plus the structure that names them.
#[derive(Clone, Debug)]
pub struct AdapterState<T> {
    pub config: AdapterConfig,
    pub store: ParamStore<T>,
    pub net: AdapterNet,
}

impl<T: Scalar> AdapterState<T> {
    /// Seeded initialization. Injector output projections start at zero, so
    /// the adapted backbone initially computes exactly the plain backbone.
    pub fn init(config: AdapterConfig, seed: u64) -> Result<Self> {
        config.mea.validate()?;
        if config.classes == 0 {
            return Err(Error::Config("classes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let width = config.mea.width;
        let backbone = (0..DEPTH)
            .map(|i| BackboneBlock::init(&mut store, i, if i == 0 { config.in_channels } else { width }, width, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let prior = SpatialPrior::init(&mut store, config.in_channels, width, &mut rng)?;
        let injectors = (0..DEPTH)
            .map(|i| CascadeParams::init(&mut store, &format!("injector.{i}"), &config.mea, true, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let extractors = (0..DEPTH)
            .map(|i| CascadeParams::init(&mut store, &format!("extractor.{i}"), &config.mea, false, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let head = ConvParams::init(&mut store, "head", (config.classes, width, 1), Component::Adapter, &mut rng)?;
        store.set_frozen(Component::Backbone, config.freeze_backbone);
        Ok(AdapterState { config, store, net: AdapterNet { backbone, prior, injectors, extractors, head } })
    }
}

fn check_image<T: Scalar>(ctx: &Context<T>, image: Var, in_channels: usize) -> Result<()> {
    let (_, c, h, w) = ctx.value(image).dim4()?;
    if c != in_channels {
        return Err(Error::shape("image", format!("{c} channels, expected {in_channels}")));
    }
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(Error::shape("image", format!("{h}x{w} is not a positive multiple of 32")));
    }
    Ok(())
}

pub fn spatial_prior_forward<T: Scalar>(ctx: &mut Context<T>, state: &AdapterState<T>, image: Var) -> Result<Var> {
    check_image(ctx, image, state.config.in_channels)?;
    let prior = &state.net.prior;
    let act = state.config.mea.activation;
    let mut x = image;
    for (conv, stride) in prior.stem.iter().zip([2, 1, 2]) {
        x = conv.conv(ctx, &state.store, x, stride, 1)?;
        x = ctx.gelu(x, act)?;
    }
    prior.proj.conv(ctx, &state.store, x, 1, 0)
}

/// Plain backbone without any adapter; returns the four block outputs.
pub fn backbone_forward<T: Scalar>(ctx: &mut Context<T>, state: &AdapterState<T>, image: Var) -> Result<Vec<Var>> {
    check_image(ctx, image, state.config.in_channels)?;
    let eps = state.config.mea.ln_eps;
    let mut x = image;
    let mut feats = Vec::with_capacity(DEPTH);
    for block in &state.net.backbone {
        x = block.downsample(ctx, &state.store, x)?;
        x = block.layer(ctx, &state.store, x, eps)?;
        feats.push(x);
    }
    Ok(feats)
}

#[derive(Clone, Debug)]
pub struct AdapterOutputs {
    /// Backbone stream after injection, per block.
    pub vit: Vec<Var>,
    /// Adapter stream after each extractor.
    pub sp: Vec<Var>,
    /// `vit + sp` per scale; the multi-scale output.
    pub features: Vec<Var>,
}

pub fn adapter_full_forward<T: Scalar>(ctx: &mut Context<T>, state: &AdapterState<T>, image: Var) -> Result<AdapterOutputs> {
    let store = &state.store;
    let cfg = &state.config.mea;
    let mut sp = spatial_prior_forward(ctx, state, image)?;
    let mut x = image;
    let mut out = AdapterOutputs { vit: vec![], sp: vec![], features: vec![] };
    for (i, block) in state.net.backbone.iter().enumerate() {
        x = block.downsample(ctx, store, x)?;
        let sp_in = if i == 0 { sp } else { ctx.avg_pool2(sp)? };
        let f_hat = injector_forward(ctx, store, sp_in, x, &state.net.injectors[i], cfg)?;
        x = ctx.add(x, f_hat)?;
        x = block.layer(ctx, store, x, cfg.ln_eps)?;
        let extracted = extractor_forward(ctx, store, f_hat, x, &state.net.extractors[i], cfg)?;
        sp = ctx.add(sp_in, extracted)?;
        out.vit.push(x);
        out.sp.push(sp);
        out.features.push(ctx.add(x, sp)?);
    }
    Ok(out)
}

/// 1×1 classifier on the finest feature map.
pub fn toy_head<T: Scalar>(ctx: &mut Context<T>, state: &AdapterState<T>, features: &[Var]) -> Result<Var> {
    let finest = *features.first().ok_or_else(|| Error::Invalid("no feature maps".into()))?;
    state.net.head.conv(ctx, &state.store, finest, 1, 0)
}

/// Per-pixel softmax cross-entropy of the toy head against `targets`
/// (`batch × h × w` class indices at the finest scale).
pub fn toy_head_and_loss<T: Scalar>(ctx: &mut Context<T>, state: &AdapterState<T>, features: &[Var], targets: &[usize]) -> Result<Var> {
    let logits = toy_head(ctx, state, features)?;
    ctx.cross_entropy(logits, targets)
}

/// Convenience wrapper: image in, scalar loss out.
pub fn forward_loss<T: Scalar>(ctx: &mut Context<T>, state: &AdapterState<T>, image: &Tensor<T>, targets: &[usize]) -> Result<Var> {
    let img = ctx.input(image.clone())?;
    let out = adapter_full_forward(ctx, state, img)?;
    toy_head_and_loss(ctx, state, &out.features, targets)
}
