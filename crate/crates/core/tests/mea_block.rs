mod common;

use common::{concat, conv3x3, from_map, gelu, layer_norm, map_fn, max_diff, pointwise, random, rng, to_map, value, Map};
use meta_core::gradcheck::check_param_grads;
use meta_core::graph::{Context, Var};
use meta_core::instrument::{count_ids, count_params, Scope};
use meta_core::mea::{attn_branch, conv_branch, ffn_branch, fuse, mea_forward, mea_forward_parts, MeaConfig, MeaParams, ParamGroup};
use meta_core::norm::NormHandle;
use meta_core::tensor::{Component, ParamStore, Tensor};

fn cfg(width: usize) -> MeaConfig {
    MeaConfig { width, head_count: 1, ..MeaConfig::default() }
}

fn block(cfg: &MeaConfig, seed: u64) -> (ParamStore<f64>, MeaParams) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let p = MeaParams::init(&mut store, "b", cfg.width, cfg, Component::Adapter, &mut r).unwrap();
    for ln in [p.ln, p.ffn_ln].into_iter().flatten() {
        ln.randomize(&mut store, &mut r);
    }
    let biases: Vec<_> = store.iter().filter(|(_, t)| t.name.ends_with(".bias") && !t.name.contains("ln")).map(|(id, _)| id).collect();
    for id in biases {
        let n = store.get(id).value.len();
        let salt = store.get(id).name.bytes().fold(seed, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
        store.get_mut(id).value = random(&[n], 0.2, &mut rng(salt));
    }
    (store, p)
}

fn inputs(width: usize, hw: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let mut r = rng(seed);
    (random(&[1, width, hw, hw], 1.0, &mut r), random(&[1, width, hw, hw], 1.0, &mut r))
}

fn forward(store: &ParamStore<f64>, p: &MeaParams, cfg: &MeaConfig, q: &Tensor<f64>, kv: &Tensor<f64>) -> (Tensor<f64>, u64) {
    let mut ctx = Context::new();
    let (qv, kvv) = (ctx.input(q.clone()).unwrap(), ctx.input(kv.clone()).unwrap());
    let y = mea_forward(&mut ctx, store, qv, kvv, p, cfg).unwrap();
    (ctx.value(y).clone(), ctx.counters().ln_passes)
}

#[test]
fn full_width_block_shapes() {
    let c = MeaConfig { head_count: 16, ..MeaConfig::default() };
    let (store, p) = block(&c, 1);
    let (q, kv) = inputs(256, 8, 2);
    let mut ctx = Context::new();
    let (qv, kvv) = (ctx.input(q).unwrap(), ctx.input(kv).unwrap());
    let y = mea_forward(&mut ctx, &store, qv, kvv, &p, &c).unwrap();
    assert_eq!(ctx.dims(y), &[1, 256, 8, 8]);
    assert_eq!(store.get(p.fuse.kernel).value.dims(), &[256, 1280, 3, 3]);
}

#[test]
fn ffn_matches_straight_line_reimplementation() {
    let c = cfg(4);
    let (store, p) = block(&c, 3);
    let f = p.ffn.unwrap();
    let ln = p.ln.unwrap();
    let (q, kv) = inputs(4, 5, 4);
    let mut ctx = Context::new();
    let (qv, kvv) = (ctx.input(q.clone()).unwrap(), ctx.input(kv.clone()).unwrap());
    let mut norm = NormHandle::new(ln, c.ln_eps);
    let y = ffn_branch(&mut ctx, &store, qv, kvv, &f, &mut norm, c.activation).unwrap();

    let conv = |m: &Map, cp: meta_core::csa::ConvParams| conv3x3(m, &value(&store, cp.kernel), &value(&store, cp.bias));
    let mut x = conv(&concat(&to_map(&q), &to_map(&kv)), f.pre);
    x = layer_norm(&x, &value(&store, ln.gain), &value(&store, ln.bias), c.ln_eps);
    x = conv(&conv(&x, f.mlp1[0]), f.mlp1[1]);
    x = map_fn(&x, gelu);
    x = conv(&conv(&x, f.mlp2[0]), f.mlp2[1]);
    assert!(max_diff(ctx.value(y), &from_map(&x)) <= 1e-12);
}

#[test]
fn ffn_with_zero_last_layer_is_zero() {
    let c = cfg(4);
    let (mut store, p) = block(&c, 5);
    let f = p.ffn.unwrap();
    store.get_mut(f.mlp2[1].kernel).value = Tensor::zeros(&[4, 4, 3, 3]);
    store.get_mut(f.mlp2[1].bias).value = Tensor::zeros(&[4]);
    let (q, kv) = inputs(4, 4, 6);
    let mut ctx = Context::new();
    let (qv, kvv) = (ctx.input(q).unwrap(), ctx.input(kv).unwrap());
    let mut norm = NormHandle::new(p.ln.unwrap(), c.ln_eps);
    let y = ffn_branch(&mut ctx, &store, qv, kvv, &f, &mut norm, c.activation).unwrap();
    assert!(ctx.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_branch_matches_reimplementation() {
    let c = cfg(3);
    let (store, p) = block(&c, 7);
    let cb = p.conv.unwrap();
    let (q, kv) = inputs(3, 4, 8);
    let mut ctx = Context::new();
    let (qv, kvv) = (ctx.input(q.clone()).unwrap(), ctx.input(kv.clone()).unwrap());
    let y = conv_branch(&mut ctx, &store, qv, kvv, &cb, c.activation).unwrap();

    let mut x = pointwise(&concat(&to_map(&q), &to_map(&kv)), &value(&store, cb.pointwise.kernel), &value(&store, cb.pointwise.bias));
    for (i, dw) in cb.depthwise.iter().enumerate() {
        if i > 0 {
            x = map_fn(&x, gelu);
        }
        let (k, b) = (value(&store, dw.kernel), value(&store, dw.bias));
        for img in &mut x {
            for (ch, plane) in img.iter_mut().enumerate() {
                for row in plane.iter_mut() {
                    for v in row.iter_mut() {
                        *v = *v * k[ch] + b[ch];
                    }
                }
            }
        }
    }
    assert!(max_diff(ctx.value(y), &from_map(&x)) <= 1e-12);
}

/// With a `[I | I]` pointwise projection and unit depthwise kernels the
/// branch is `GELU(GELU(q + kv))` channelwise.
#[test]
fn identity_depthwise_chain() {
    let w = 3;
    let c = cfg(w);
    let (mut store, p) = block(&c, 9);
    let cb = p.conv.unwrap();
    store.get_mut(cb.pointwise.kernel).value = Tensor::from_fn(&[w, 2 * w, 1, 1], |i| if i % (2 * w) % w == i / (2 * w) { 1.0 } else { 0.0 });
    store.get_mut(cb.pointwise.bias).value = Tensor::zeros(&[w]);
    for dw in cb.depthwise {
        store.get_mut(dw.kernel).value = Tensor::full(&[w, 1, 1, 1], 1.0);
        store.get_mut(dw.bias).value = Tensor::zeros(&[w]);
    }
    let mut r = rng(10);
    let q = Tensor::from_fn(&[1, w, 3, 3], |_| rand::Rng::gen_range(&mut r, 0.0..2.0));
    let kv = Tensor::from_fn(&[1, w, 3, 3], |_| rand::Rng::gen_range(&mut r, 0.0..2.0));
    let mut ctx = Context::new();
    let (qv, kvv) = (ctx.input(q.clone()).unwrap(), ctx.input(kv.clone()).unwrap());
    let y = conv_branch(&mut ctx, &store, qv, kvv, &cb, c.activation).unwrap();
    let want = Tensor::from_fn(q.dims(), |i| gelu(gelu(q.data()[i] + kv.data()[i])));
    assert!(max_diff(ctx.value(y), &want) <= 1e-12);
}

#[test]
fn conv_branch_channel_independence_after_projection() {
    let w = 4;
    let c = cfg(w);
    let (mut store, p) = block(&c, 11);
    let cb = p.conv.unwrap();
    store.get_mut(cb.pointwise.kernel).value = Tensor::from_fn(&[w, 2 * w, 1, 1], |i| if i % (2 * w) % w == i / (2 * w) { 1.0 } else { 0.0 });
    let (q, kv) = inputs(w, 3, 12);
    let eval = |q: &Tensor<f64>| {
        let mut ctx = Context::new();
        let (qv, kvv) = (ctx.input(q.clone()).unwrap(), ctx.input(kv.clone()).unwrap());
        let y = conv_branch(&mut ctx, &store, qv, kvv, &cb, c.activation).unwrap();
        ctx.value(y).clone()
    };
    let base = eval(&q);
    for ch in 0..w {
        let mut bumped = q.clone();
        bumped.data_mut()[ch * 9 + 4] += 0.5;
        let y = eval(&bumped);
        for (i, (a, b)) in base.data().iter().zip(y.data()).enumerate() {
            if i / 9 != ch {
                assert_eq!(a, b);
            }
        }
    }
}

#[test]
fn attention_roles_are_asymmetric() {
    let c = cfg(4);
    let (store, p) = block(&c, 13);
    let (q, kv) = inputs(4, 4, 14);
    let run = |a: &Tensor<f64>, b: &Tensor<f64>| {
        let mut ctx = Context::new();
        let (av, bv) = (ctx.input(a.clone()).unwrap(), ctx.input(b.clone()).unwrap());
        let mut norm = NormHandle::new(p.ln.unwrap(), c.ln_eps);
        let y = attn_branch(&mut ctx, &store, av, bv, p.attn.as_ref().unwrap(), &mut norm, &c).unwrap();
        ctx.value(y).clone()
    };
    assert!(max_diff(&run(&q, &kv), &run(&kv, &q)) > 1e-6);
}

/// With zero keys/values the attention output cannot depend on the queries.
#[test]
fn zero_kv_makes_attention_query_independent() {
    let c = cfg(4);
    let (store, p) = block(&c, 15);
    let zero = Tensor::zeros(&[1, 4, 4, 4]);
    let run = |q: Tensor<f64>| {
        let mut ctx = Context::new();
        let (qv, kvv) = (ctx.input(q).unwrap(), ctx.input(zero.clone()).unwrap());
        let mut norm = NormHandle::new(p.ln.unwrap(), c.ln_eps);
        let y = attn_branch(&mut ctx, &store, qv, kvv, p.attn.as_ref().unwrap(), &mut norm, &c).unwrap();
        ctx.value(y).clone()
    };
    let (a, b) = inputs(4, 4, 16);
    assert!(max_diff(&run(a), &run(b)) <= 1e-12);
}

#[test]
fn zero_fusion_gives_zero_output() {
    let c = cfg(4);
    let (mut store, p) = block(&c, 17);
    let k = store.get(p.fuse.kernel).value.dims().to_vec();
    store.get_mut(p.fuse.kernel).value = Tensor::zeros(&k);
    store.get_mut(p.fuse.bias).value = Tensor::zeros(&[4]);
    let (q, kv) = inputs(4, 4, 18);
    assert!(forward(&store, &p, &c, &q, &kv).0.data().iter().all(|&v| v == 0.0));
}

#[test]
fn shared_and_separate_norms_agree_and_count_passes() {
    for seed in 0..4 {
        let shared = cfg(6);
        let separate = MeaConfig { shared_ln: false, ..shared };
        let (sa, pa) = block(&shared, seed);
        let (mut sb, pb) = block(&separate, seed);
        let src = pa.ln.unwrap();
        for dst in [pb.ln.unwrap(), pb.ffn_ln.unwrap()] {
            sb.get_mut(dst.gain).value = sa.get(src.gain).value.clone();
            sb.get_mut(dst.bias).value = sa.get(src.bias).value.clone();
        }
        let (q, kv) = inputs(6, 8, 100 + seed);
        let (ya, na) = forward(&sa, &pa, &shared, &q, &kv);
        let (yb, nb) = forward(&sb, &pb, &separate, &q, &kv);
        assert_eq!((na, nb), (1, 2));
        assert!(max_diff(&ya, &yb) <= 1e-12);
    }
}

#[test]
fn block_equals_fusion_of_independent_branches() {
    let c = cfg(4);
    let (store, p) = block(&c, 19);
    let (q, kv) = inputs(4, 6, 20);
    let (whole, _) = forward(&store, &p, &c, &q, &kv);

    let mut ctx = Context::new();
    let (qv, kvv) = (ctx.input(q).unwrap(), ctx.input(kv).unwrap());
    let mut n1 = NormHandle::new(p.ln.unwrap(), c.ln_eps);
    let mut n2 = NormHandle::new(p.ln.unwrap(), c.ln_eps);
    let a = attn_branch(&mut ctx, &store, qv, kvv, p.attn.as_ref().unwrap(), &mut n1, &c).unwrap();
    let f = ffn_branch(&mut ctx, &store, qv, kvv, p.ffn.as_ref().unwrap(), &mut n2, c.activation).unwrap();
    let cv = conv_branch(&mut ctx, &store, qv, kvv, p.conv.as_ref().unwrap(), c.activation).unwrap();
    let y = fuse(&mut ctx, &store, &p, [Some(a), Some(f), Some(cv)], qv, kvv).unwrap();
    assert!(max_diff(&whole, ctx.value(y)) <= 1e-6);
}

#[test]
fn gradient_over_all_block_parameters() {
    for (i, c) in [cfg(4), MeaConfig { shared_ln: false, ..cfg(4) }, MeaConfig { enable_conv: false, ..cfg(3) }].into_iter().enumerate() {
        let (store, p) = block(&c, 21 + i as u64);
        let (q, kv) = inputs(c.width, 4, 22);
        let w = random(&[1, c.width, 4, 4], 1.0, &mut rng(23));
        let report = check_param_grads(
            &store,
            |ctx: &mut Context<f64>, st: &ParamStore<f64>| -> meta_core::Result<Var> {
                let (qv, kvv) = (ctx.input(q.clone())?, ctx.input(kv.clone())?);
                let y = mea_forward(ctx, st, qv, kvv, &p, &c)?;
                ctx.weighted_sum(y, &w)
            },
            1e-5,
            None,
            0,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-5, "config {i}: {:?}", report.params.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error)));
    }
}

#[test]
fn toggles_remove_exactly_their_groups() {
    let w = 8;
    let full = cfg(w);
    let (store, p) = block(&full, 24);
    let total = count_params(&store, Scope::All);
    let per_operand = w * w * 9;
    for (group, toggled) in [
        (ParamGroup::Attn, MeaConfig { enable_attn: false, ..full }),
        (ParamGroup::Ffn, MeaConfig { enable_ffn: false, ..full }),
        (ParamGroup::Conv, MeaConfig { enable_conv: false, ..full }),
    ] {
        let (st, _) = block(&toggled, 24);
        assert_eq!(count_params(&st, Scope::All), total - count_ids(&store, &p.group_ids(group)) - per_operand, "{group:?}");
    }
    let (sep, _) = block(&MeaConfig { shared_ln: false, ..full }, 24);
    assert_eq!(count_params(&sep, Scope::All), total + 2 * w);
    let only_conv = MeaConfig { enable_attn: false, enable_ffn: false, ..full };
    let (st, pc) = block(&only_conv, 24);
    assert!(pc.ln.is_none() && pc.ffn_ln.is_none());
    assert_eq!(count_params(&st, Scope::All), count_ids(&st, &pc.ids()));
}

#[test]
fn disabled_branches_are_absent_from_outputs() {
    let c = MeaConfig { enable_ffn: false, ..cfg(4) };
    let (store, p) = block(&c, 25);
    let (q, kv) = inputs(4, 4, 26);
    let mut ctx = Context::new();
    let (qv, kvv) = (ctx.input(q).unwrap(), ctx.input(kv).unwrap());
    let parts = mea_forward_parts(&mut ctx, &store, qv, kvv, &p, &c).unwrap();
    assert!(parts.ffn.is_none() && parts.attn.is_some() && parts.conv.is_some());
    assert_eq!(store.get(p.fuse.kernel).value.dims(), &[4, 16, 3, 3]);
    let none = MeaConfig { enable_attn: false, enable_ffn: false, enable_conv: false, ..cfg(4) };
    assert!(none.validate().is_err());
}
