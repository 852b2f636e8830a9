//! Runs every acceptance criterion at its stated tolerance and time budget,
//! printing one PASS/FAIL line each. Exits non-zero if any criterion fails.

mod common;

use std::time::{Duration, Instant};

use common::{cross_shaped_attention, from_map, max_diff, pseudo_code_window, random, rng, to_map, unrolled_cascade, CsaWeights};
use meta_core::adapter::{adapter_full_forward, backbone_forward, cascade_forward, forward_loss, AdapterConfig, AdapterState, CarryMode, CascadeParams};
use meta_core::app::config::RunConfig;
use meta_core::app::train::{summarize, train_losses};
use meta_core::csa::{cross_window_indices, csa_forward, AttnImpl, AttnParams, ConvParams, CsaOptions};
use meta_core::gradcheck::{check_input_grads, check_param_grads};
use meta_core::graph::{Activation, Context, Var};
use meta_core::instrument::{count_ids, count_params, entropy_report, mutual_info_estimate, Scope};
use meta_core::mea::{mea_forward, MeaConfig, MeaParams, ParamGroup};
use meta_core::norm::{LnParams, NormHandle, DEFAULT_LN_EPS};
use meta_core::tensor::{Component, ParamStore, Tensor};
use meta_core::Result;
use rand::Rng;

type Outcome = std::result::Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mea(width: usize, heads: usize) -> MeaConfig {
    MeaConfig { width, head_count: heads, ..MeaConfig::default() }
}

fn weighted(ctx: &mut Context<f64>, y: Var, seed: u64) -> Result<Var> {
    let dims = ctx.dims(y).to_vec();
    let w = random(&dims, 1.0, &mut rng(seed ^ 0xABCD));
    ctx.weighted_sum(y, &w)
}

type OpCase = fn(&mut rand_chacha::ChaCha8Rng, u64) -> Result<f64>;

fn op_cases() -> Vec<(&'static str, OpCase)> {
    fn d4(r: &mut rand_chacha::ChaCha8Rng) -> [usize; 4] {
        [r.gen_range(1..3), r.gen_range(2..5), r.gen_range(2..5), r.gen_range(2..5)]
    }
    fn chk(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Context<f64>, &[Var]) -> Result<Var> + Sync) -> Result<f64> {
        check_input_grads(Context::new, &inputs, f, 1e-5)
    }
    vec![
        ("add/mul", |r, i| {
            let d = d4(r);
            chk(vec![random(&d, 1.0, r), random(&d, 1.0, r)], |c, v| {
                let s = c.add(v[0], v[1])?;
                let p = c.mul(s, v[1])?;
                let p = c.scale(p, 0.7)?;
                weighted(c, p, i)
            })
        }),
        ("gelu", |r, i| {
            chk(vec![random(&d4(r), 3.0, r)], |c, v| {
                let a = c.gelu(v[0], Activation::GeluExact)?;
                let b = c.gelu(v[0], Activation::GeluTanh)?;
                let y = c.add(a, b)?;
                weighted(c, y, i)
            })
        }),
        ("layer norm", |r, i| {
            let d = d4(r);
            chk(vec![random(&d, 2.0, r), random(&d, 2.0, r), random(&[d[1]], 1.5, r), random(&[d[1]], 1.0, r)], |c, v| {
                let single = c.layer_norm(v[0], v[2], v[3], 1e-5)?;
                let pair = c.layer_norm_group(&[v[0], v[1]], v[2], v[3], 1e-5)?;
                let y = c.mul(pair[0], pair[1])?;
                let y = c.add(y, single)?;
                weighted(c, y, i)
            })
        }),
        ("convolutions", |r, i| {
            let d = [1, r.gen_range(1..4), 4, 4];
            let co = r.gen_range(1..4);
            chk(
                vec![random(&d, 1.0, r), random(&[co, d[1], 3, 3], 0.5, r), random(&[co], 0.5, r), random(&[d[1], 1, 1, 1], 1.0, r), random(&[d[1]], 1.0, r)],
                |c, v| {
                    let a = c.conv2d_3x3(v[0], v[1], v[2])?;
                    let b = c.conv2d(v[0], v[1], None, 2, 1)?;
                    let p = c.depthwise_conv1x1(v[0], v[3], v[4])?;
                    let p = c.avg_pool2(p)?;
                    let (a, b, p) = (weighted(c, a, i)?, weighted(c, b, i + 1)?, weighted(c, p, i + 2)?);
                    let s = c.add(a, b)?;
                    c.add(s, p)
                },
            )
        }),
        ("data movement", |r, i| {
            let d = d4(r);
            let plane = d[2] * d[3];
            let cut = r.gen_range(1..plane);
            let rows: Vec<usize> = (0..3).map(|_| r.gen_range(0..d[2])).collect();
            let mut perm: Vec<usize> = (0..plane).collect();
            for j in (1..plane).rev() {
                perm.swap(j, r.gen_range(0..=j));
            }
            let groups = vec![perm[..cut].to_vec(), perm[cut..].to_vec()];
            let n: usize = d.iter().product();
            let layout: Vec<usize> = (0..n).rev().collect();
            chk(vec![random(&d, 1.0, r), random(&d, 1.0, r)], move |c, v| {
                let cat = c.concat_channels(&[v[0], v[1]])?;
                let sq = c.mul(cat, cat)?;
                let s = c.slice_channels(sq, 1, d[1])?;
                let g = c.gather_rows(s, &rows)?;
                let parts = groups.iter().map(|grp| c.gather_tokens(s, grp)).collect::<Result<Vec<_>>>()?;
                let back = c.scatter_tokens(&parts, &groups, d[2], d[3])?;
                let flat = c.relayout(back, &[n], &layout)?;
                let (g, f) = (weighted(c, g, i)?, weighted(c, flat, i + 1)?);
                c.add(g, f)
            })
        }),
        ("matmul/softmax", |r, i| {
            let (b, m, k, n) = (r.gen_range(1..3), r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
            chk(vec![random(&[b, m, k], 1.0, r), random(&[b, k, n], 1.0, r), random(&[b, n, k], 1.0, r)], |c, v| {
                let p = c.matmul(v[0], v[1], false)?;
                let q = c.matmul(v[0], v[2], true)?;
                let s = c.softmax_rows(p)?;
                let (s, q) = (weighted(c, s, i)?, weighted(c, q, i + 3)?);
                c.add(s, q)
            })
        }),
        ("cross entropy", |r, _| {
            let d = [r.gen_range(1..3), r.gen_range(2..5), r.gen_range(1..4), r.gen_range(1..4)];
            let targets: Vec<usize> = (0..d[0] * d[2] * d[3]).map(|_| r.gen_range(0..d[1])).collect();
            chk(vec![random(&d, 2.0, r)], move |c, v| c.cross_entropy(v[0], &targets))
        }),
    ]
}

fn gradient_fidelity() -> Outcome {
    let mut ops: f64 = 0.0;
    for (name, case) in op_cases() {
        for i in 0..10u64 {
            let mut r = rng(i * 7919 + name.len() as u64);
            ops = ops.max(case(&mut r, i).map_err(|e| format!("{name}: {e}"))?);
        }
    }
    let cfg = AdapterConfig { mea: mea(32, 2), freeze_backbone: false, ..AdapterConfig::default() };
    let mut state = AdapterState::<f64>::init(cfg, 5).map_err(|e| e.to_string())?;
    let mut r = rng(6);
    let zeroed: Vec<_> = state.store.iter().filter(|(_, p)| p.value.data().iter().all(|&v| v == 0.0)).map(|(id, _)| id).collect();
    for id in zeroed {
        let dims = state.store.get(id).value.dims().to_vec();
        state.store.get_mut(id).value = random(&dims, 0.05, &mut r);
    }
    let image = random(&[1, 3, 32, 32], 1.0, &mut r);
    let labels: Vec<usize> = (0..64).map(|i| (i * 7 + i / 8) % 3).collect();
    let (config, net) = (state.config.clone(), state.net.clone());
    let report = check_param_grads(
        &state.store,
        |ctx, store| {
            let s = AdapterState { config: config.clone(), store: store.clone(), net: net.clone() };
            forward_loss(ctx, &s, &image, &labels)
        },
        1e-5,
        Some(1),
        7,
    )
    .map_err(|e| e.to_string())?;
    let net_err = report.max_rel_error;
    ensure(
        ops <= 1e-5 && net_err <= 1e-4,
        format!("ops max rel err {ops:.2e} (<= 1e-5), full net {net_err:.2e} (<= 1e-4) over {} tensors, 32x32 input", report.params.len()),
    )
}

fn csa_unit(width: usize, seed: u64) -> (ParamStore<f64>, AttnParams, LnParams) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let params = AttnParams::init(&mut store, "attn", width, Component::Adapter, &mut r).unwrap();
    let ln = LnParams::init(&mut store, "ln", width, Component::Adapter).unwrap();
    ln.randomize(&mut store, &mut r);
    for id in [params.query.bias, params.key.bias, params.value.bias, params.merge.bias] {
        store.get_mut(id).value = random(&[width], 0.3, &mut r);
    }
    (store, params, ln)
}

fn run_csa(store: &ParamStore<f64>, params: &AttnParams, ln: LnParams, q: &Tensor<f64>, kv: &Tensor<f64>, opts: CsaOptions) -> (Tensor<f64>, u64) {
    let mut ctx = Context::new();
    let (qv, kvv) = (ctx.input(q.clone()).unwrap(), ctx.input(kv.clone()).unwrap());
    let mut norm = NormHandle::new(ln, DEFAULT_LN_EPS);
    let y = csa_forward(&mut ctx, store, qv, kvv, params, &mut norm, &opts).unwrap();
    (ctx.value(y).clone(), ctx.counters().reshapes)
}

fn stripe_oracle() -> Outcome {
    let mut worst: f64 = 0.0;
    let n = 24;
    for i in 0..n {
        let mut r = rng(1000 + i);
        let (width, stripe) = (r.gen_range(2..6), r.gen_range(1..5));
        let (store, params, ln) = csa_unit(width, i);
        let q = random(&[1, width, 8, 8], 1.0, &mut r);
        let kv = random(&[1, width, 8, 8], 1.0, &mut r);
        let (got, _) = run_csa(&store, &params, ln, &q, &kv, CsaOptions { stripe_size: stripe, ..CsaOptions::default() });
        let v = |id| common::value(&store, id);
        let w = CsaWeights {
            wq: v(params.query.weight),
            bq: v(params.query.bias),
            wk: v(params.key.weight),
            bk: v(params.key.bias),
            wv: v(params.value.weight),
            bv: v(params.value.bias),
            gain: v(ln.gain),
            bias: v(ln.bias),
            merge_k: v(params.merge.kernel),
            merge_b: v(params.merge.bias),
            eps: DEFAULT_LN_EPS,
        };
        let want = from_map(&cross_shaped_attention(&to_map(&q), &to_map(&kv), &w, stripe));
        worst = worst.max(max_diff(&got, &want));
    }
    ensure(worst <= 1e-10, format!("{n} instances, max abs deviation {worst:.2e} (<= 1e-10)"))
}

fn index_generator() -> Outcome {
    let mut cases = 0;
    for l in 1..=32usize {
        for w in 0..=8usize {
            for p in 0..l {
                let got = cross_window_indices(p, w, l).map_err(|e| e.to_string())?.indices;
                if got != pseudo_code_window(p as i64, w as i64, l as i64) {
                    return Err(format!("mismatch at position {p}, window {w}, length {l}"));
                }
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} cases equal"))
}

fn block(cfg: &MeaConfig, seed: u64) -> (ParamStore<f64>, MeaParams) {
    let mut store = ParamStore::new();
    let p = MeaParams::init(&mut store, "b", cfg.width, cfg, Component::Adapter, &mut rng(seed)).unwrap();
    (store, p)
}

fn mea_run(store: &ParamStore<f64>, p: &MeaParams, cfg: &MeaConfig, q: &Tensor<f64>, kv: &Tensor<f64>) -> (Tensor<f64>, meta_core::OpCounters) {
    let mut ctx = Context::new();
    let (qv, kvv) = (ctx.input(q.clone()).unwrap(), ctx.input(kv.clone()).unwrap());
    let y = mea_forward(&mut ctx, store, qv, kvv, p, cfg).unwrap();
    (ctx.value(y).clone(), *ctx.counters())
}

fn shared_norm() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut passes = Vec::new();
    for seed in 0..4 {
        let shared = mea(16, 1);
        let separate = MeaConfig { shared_ln: false, ..shared };
        let (mut sa, pa) = block(&shared, seed);
        let (mut sb, pb) = block(&separate, seed);
        let mut r = rng(seed + 50);
        let src = pb.ln.unwrap();
        src.randomize(&mut sb, &mut r);
        let (gain, bias) = (sb.get(src.gain).value.clone(), sb.get(src.bias).value.clone());
        for (store, dst) in [(&mut sa, pa.ln.unwrap()), (&mut sb, pb.ffn_ln.unwrap())] {
            store.get_mut(dst.gain).value = gain.clone();
            store.get_mut(dst.bias).value = bias.clone();
        }
        let q = random(&[1, 16, 8, 8], 1.0, &mut r);
        let kv = random(&[1, 16, 8, 8], 1.0, &mut r);
        let (ya, ca) = mea_run(&sa, &pa, &shared, &q, &kv);
        let (yb, cb) = mea_run(&sb, &pb, &separate, &q, &kv);
        passes.push((ca.ln_passes, cb.ln_passes));
        worst = worst.max(max_diff(&ya, &yb));
    }
    ensure(
        passes.iter().all(|&p| p == (1, 2)) && worst <= 1e-12,
        format!("ln_passes shared/separate {:?}, max output deviation {worst:.2e} (<= 1e-12)", passes[0]),
    )
}

fn reshape_free() -> Outcome {
    let mut gather_max = 0;
    let mut baseline_min = u64::MAX;
    for i in 0..10 {
        let mut r = rng(300 + i);
        let (store, params, ln) = csa_unit(8, i);
        let side = [4, 8, 12][i as usize % 3];
        let q = random(&[2, 8, side, side], 1.0, &mut r);
        let kv = random(&[2, 8, side, side], 1.0, &mut r);
        let (a, ra) = run_csa(&store, &params, ln, &q, &kv, CsaOptions::default());
        let (b, rb) = run_csa(&store, &params, ln, &q, &kv, CsaOptions { attn_impl: AttnImpl::Reshape, ..CsaOptions::default() });
        if max_diff(&a, &b) > 1e-12 {
            return Err("baseline disagrees with the gather path".into());
        }
        gather_max = gather_max.max(ra);
        baseline_min = baseline_min.min(rb);
    }
    ensure(gather_max == 0 && baseline_min >= 2, format!("gather reshapes max {gather_max}, baseline min {baseline_min} per call"))
}

fn cascade() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut exact = true;
    for seed in 0..5 {
        let cfg = mea(8, 2);
        let mut store = ParamStore::new();
        let p = CascadeParams::init(&mut store, "inj", &cfg, false, &mut rng(seed)).unwrap();
        let mut r = rng(seed + 10);
        let q = random(&[1, 8, 8, 8], 1.0, &mut r);
        let kv = random(&[1, 8, 8, 8], 1.0, &mut r);
        let mut ctx = Context::new();
        let (qv, kvv) = (ctx.input(q.clone()).unwrap(), ctx.input(kv.clone()).unwrap());
        let y = cascade_forward(&mut ctx, &store, qv, kvv, &p, &cfg, CarryMode::Cascade).unwrap();
        worst = worst.max(max_diff(ctx.value(y), &unrolled_cascade(&store, &p, &cfg, &q, &kv)));

        let z = cascade_forward(&mut ctx, &store, qv, kvv, &p, &cfg, CarryMode::Zeroed).unwrap();
        let outs: Vec<_> = (0..2)
            .map(|h| {
                let a = ctx.slice_channels(qv, h * 4, 4).unwrap();
                let b = ctx.slice_channels(kvv, h * 4, 4).unwrap();
                mea_forward(&mut ctx, &store, a, b, &p.heads[h], &cfg).unwrap()
            })
            .collect();
        let cat = ctx.concat_channels(&outs).unwrap();
        let par = p.proj.conv3x3(&mut ctx, &store, cat).unwrap();
        exact &= ctx.value(z).data() == ctx.value(par).data();
    }
    ensure(worst <= 1e-10 && exact, format!("recurrence deviation {worst:.2e} (<= 1e-10), zeroed carries equal parallel heads: {exact}"))
}

fn identity_at_init() -> Outcome {
    let mut maps = 0;
    for seed in [1, 2, 3] {
        let state = AdapterState::<f32>::init(AdapterConfig { mea: mea(16, 2), ..AdapterConfig::default() }, seed).map_err(|e| e.to_string())?;
        let image = Tensor::<f32>::uniform(&[2, 3, 64, 64], 1.0, &mut rng(seed));
        let mut ctx = Context::new();
        let img = ctx.input(image).unwrap();
        let adapted = adapter_full_forward(&mut ctx, &state, img).map_err(|e| e.to_string())?;
        let plain = backbone_forward(&mut ctx, &state, img).map_err(|e| e.to_string())?;
        for (a, b) in adapted.vit.iter().zip(&plain) {
            let (a, b) = (ctx.value(*a), ctx.value(*b));
            if a.dims() != b.dims() || a.data().iter().zip(b.data()).any(|(x, y)| x.to_bits() != y.to_bits()) {
                return Err(format!("seed {seed}: adapted block output differs from the backbone"));
            }
            maps += 1;
        }
    }
    Ok(format!("{maps} block outputs bitwise equal"))
}

fn training() -> Outcome {
    let cfg = RunConfig::default();
    let (state, first) = train_losses(&cfg).map_err(|e| e.to_string())?;
    let (_, second) = train_losses(&cfg).map_err(|e| e.to_string())?;
    let s = summarize(&cfg, &state, &first);
    let same = first.len() == second.len() && first.iter().zip(&second).all(|(a, b)| a.to_bits() == b.to_bits());
    ensure(
        s.ratio <= 0.5 && same,
        format!(
            "seed {}, {} steps, loss {:.4} -> {:.4} (ratio {:.3} <= 0.5), repeat run bitwise identical: {same}",
            cfg.seed, s.steps, s.initial_loss, s.final_loss, s.ratio
        ),
    )
}

fn entropy() -> Outcome {
    let mut r = rng(44);
    let mut identity: f64 = 0.0;
    let mut min_mi = f64::INFINITY;
    for bins in [1, 2, 4, 8, 16, 32] {
        for _ in 0..20 {
            let x: Vec<f64> = (0..1000).map(|_| r.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = x.iter().map(|v| v * v + r.gen_range(-0.2..0.2)).collect();
            let rep = entropy_report(&x, &y, bins).map_err(|e| e.to_string())?;
            identity = identity.max((rep.h_joint - (rep.h_vit + rep.h_con - rep.mi)).abs());
            min_mi = min_mi.min(rep.mi);
        }
    }
    let x: Vec<f64> = (0..100_000).map(|_| r.gen()).collect();
    let y: Vec<f64> = (0..100_000).map(|_| r.gen()).collect();
    let indep = mutual_info_estimate(&x, &y, 8).map_err(|e| e.to_string())?;
    ensure(
        identity <= 1e-12 && min_mi >= 0.0 && indep <= 0.05,
        format!("identity residual {identity:.1e} (<= 1e-12), min mi {min_mi:.2e} (>= 0), independent mi {indep:.2e} (<= 0.05)"),
    )
}

fn parameter_accounting() -> Outcome {
    let mut store = ParamStore::<f32>::new();
    ConvParams::init(&mut store, "fuse", (256, 1280, 3), Component::Adapter, &mut rng(0)).unwrap();
    let fusion = count_params(&store, Scope::All);
    let mut problems = Vec::new();
    if fusion != 2_949_376 {
        problems.push(format!("fusion conv {fusion}"));
    }
    let full = mea(256, 1);
    let (st, p) = block(&full, 1);
    let total = count_params(&st, Scope::All);
    for (group, toggled) in [
        (ParamGroup::Attn, MeaConfig { enable_attn: false, ..full }),
        (ParamGroup::Ffn, MeaConfig { enable_ffn: false, ..full }),
        (ParamGroup::Conv, MeaConfig { enable_conv: false, ..full }),
    ] {
        let (s2, _) = block(&toggled, 1);
        let expected = total - count_ids(&st, &p.group_ids(group)) - 256 * 256 * 9;
        if count_params(&s2, Scope::All) != expected {
            problems.push(format!("{group:?} toggle"));
        }
    }
    let (sep, _) = block(&MeaConfig { shared_ln: false, ..full }, 1);
    if count_params(&sep, Scope::All) != total + 2 * 256 {
        problems.push("separate norm".into());
    }
    let state = AdapterState::<f32>::init(AdapterConfig { mea: mea(32, 2), ..AdapterConfig::default() }, 1).unwrap();
    let all = count_params(&state.store, Scope::All);
    if count_params(&state.store, Scope::Adapter) + count_params(&state.store, Scope::Backbone) != all {
        problems.push("adapter + backbone != all".into());
    }
    ensure(problems.is_empty(), if problems.is_empty() { format!("fusion conv {fusion}, branch toggles exact") } else { problems.join(", ") })
}

fn main() {
    let criteria: [(&str, u64, fn() -> Outcome); 10] = [
        ("gradient fidelity", 120, gradient_fidelity),
        ("stripe attention oracle", 30, stripe_oracle),
        ("window index generator", 5, index_generator),
        ("shared normalization", 10, shared_norm),
        ("reshape-free attention", 10, reshape_free),
        ("cascade correctness", 30, cascade),
        ("identity at init", 10, identity_at_init),
        ("toy training", 300, training),
        ("entropy diagnostic", 60, entropy),
        ("parameter accounting", 5, parameter_accounting),
    ];
    let mut failed = 0;
    for (i, (name, budget, f)) in criteria.into_iter().enumerate() {
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = t.elapsed();
        let in_time = elapsed <= Duration::from_secs(budget);
        let (ok, detail) = match outcome {
            Ok(d) => (in_time, d),
            Err(d) => (false, d),
        };
        failed += usize::from(!ok);
        let timing = format!("{:.1}s of {budget}s{}", elapsed.as_secs_f64(), if in_time { "" } else { ", over budget" });
        println!("{} {:>2} {name}: {detail} [{timing}]", if ok { "PASS" } else { "FAIL" }, i + 1);
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
