//! Invariant suites run by the `check` command.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::RunConfig;
use crate::adapter::{adapter_full_forward, backbone_forward, cascade_forward, forward_loss, AdapterState, CarryMode, CascadeParams};
use crate::csa::{self, attend_stripes, cross_window_indices, plan_for, AttnImpl, AttnParams, ConvParams, CsaOptions, Orientation};
use crate::error::Result;
use crate::gradcheck::{check_input_grads, check_param_grads};
use crate::graph::{Activation, Context, Fault, Var};
use crate::instrument::{compare_memory_ops, count_ids, count_params, entropy_report, Scope};
use crate::io;
use crate::mea::{self, mea_forward, mea_forward_parts, MeaConfig, MeaParams, ParamGroup};
use crate::norm::{LnParams, NormHandle};
use crate::tensor::{Component, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
}

#[derive(Clone, Debug, Serialize)]
pub struct InvariantResult {
    pub name: String,
    pub status: Status,
    pub measured_error: f64,
    pub tolerance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub config_hash: String,
    pub seed: u64,
    pub passed: bool,
    pub invariants: Vec<InvariantResult>,
}

const GRAD_STEP: f64 = 1e-5;

struct Suite<'a> {
    cfg: &'a RunConfig,
    fault: Option<Fault>,
    results: Vec<InvariantResult>,
}

impl Suite<'_> {
    fn ctx(&self) -> Context<f64> {
        let mut c = Context::new();
        c.set_fault(self.fault);
        c
    }

    fn rng(&self, salt: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.cfg.seed ^ salt.wrapping_mul(0x2545_F491_4F6C_DD1D))
    }

    fn run(&mut self, name: &str, tolerance: f64, f: impl FnOnce(&Self) -> Result<f64>) {
        let (measured_error, detail) = match f(self) {
            Ok(e) => (e, None),
            Err(e) => (f64::INFINITY, Some(e.to_string())),
        };
        let status = if measured_error <= tolerance { Status::Pass } else { Status::Fail };
        self.results.push(InvariantResult { name: name.into(), status, measured_error, tolerance, detail });
    }

    /// A block config with every branch on, so the structural invariants
    /// apply regardless of the run's toggles.
    fn block_cfg(&self, width: usize, heads: usize) -> MeaConfig {
        MeaConfig {
            width,
            head_count: heads,
            enable_attn: true,
            enable_ffn: true,
            enable_conv: true,
            ..self.cfg.mea()
        }
    }
}

fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    if a.dims() != b.dims() {
        return f64::INFINITY;
    }
    a.max_abs_diff(b)
}

fn block(cfg: &MeaConfig, seed: u64) -> Result<(ParamStore<f64>, MeaParams)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = MeaParams::init(&mut store, "block", cfg.width, cfg, Component::Adapter, &mut rng)?;
    if let Some(ln) = params.ln {
        ln.randomize(&mut store, &mut rng);
    }
    if let Some(ln) = params.ffn_ln {
        ln.randomize(&mut store, &mut rng);
    }
    Ok((store, params))
}

fn maps(rng: &mut ChaCha8Rng, dims: &[usize]) -> (Tensor<f64>, Tensor<f64>) {
    (Tensor::uniform(dims, 1.0, rng), Tensor::uniform(dims, 1.0, rng))
}

/// Transposes the spatial axes of an `[n, c, h, w]` map.
fn transpose_hw(t: &Tensor<f64>) -> Tensor<f64> {
    let (n, c, h, w) = t.dim4().expect("rank 4");
    let mut out = Vec::with_capacity(t.len());
    for b in 0..n {
        for ch in 0..c {
            for x in 0..w {
                for y in 0..h {
                    out.push(t.at4(b, ch, y, x));
                }
            }
        }
    }
    Tensor::new(&[n, c, w, h], out).expect("dims")
}

fn pseudo_code_indices(position: usize, window_size: usize, seq_length: usize) -> Vec<usize> {
    let mut indices = vec![position as i64];
    let (p, w, l) = (position as i64, window_size as i64, seq_length as i64);
    for offset in -w..=w {
        if p + offset >= 0 && p + offset < l {
            indices.push(p + offset);
        }
    }
    indices.sort_unstable();
    indices.dedup();
    indices.into_iter().map(|i| i as usize).collect()
}

pub fn run_check(cfg: &RunConfig) -> Result<CheckReport> {
    let mut s = Suite { cfg, fault: cfg.fault()?, results: Vec::new() };

    s.run("layer_norm_reference", 1e-9, |s| {
        let mut ctx = s.ctx();
        let x = ctx.input(Tensor::new(&[1, 3, 1, 1], vec![1.0, 2.0, 3.0])?)?;
        let g = ctx.input(Tensor::full(&[3], 1.0))?;
        let b = ctx.input(Tensor::zeros(&[3]))?;
        let y = ctx.layer_norm(x, g, b, 1e-5)?;
        let sd = (2.0f64 / 3.0 + 1e-5).sqrt();
        let expect = Tensor::new(&[1, 3, 1, 1], vec![-1.0 / sd, 0.0, 1.0 / sd])?;
        Ok(max_diff(ctx.value(y), &expect))
    });

    let ln_moments = |s: &Suite| -> Result<(f64, f64)> {
        let mut rng = s.rng(1);
        let (c, h, w) = (16, 4, 4);
        let x = Tensor::from_fn(&[2, c, h, w], |_| rng.gen_range(-3.0..3.0) + 1.5);
        let mut ctx = s.ctx();
        let xv = ctx.input(x)?;
        let g = ctx.input(Tensor::full(&[c], 1.0))?;
        let b = ctx.input(Tensor::zeros(&[c]))?;
        let y = ctx.layer_norm(xv, g, b, 1e-5)?;
        let y = ctx.value(y);
        let (mut worst_mean, mut worst_var) = (0.0f64, 0.0f64);
        for n in 0..2 {
            for yy in 0..h {
                for xx in 0..w {
                    let vals: Vec<f64> = (0..c).map(|ch| y.at4(n, ch, yy, xx)).collect();
                    let mean = vals.iter().sum::<f64>() / c as f64;
                    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                    worst_mean = worst_mean.max(mean.abs());
                    worst_var = worst_var.max((var - 1.0).abs());
                }
            }
        }
        Ok((worst_mean, worst_var))
    };
    s.run("layer_norm_mean", 1e-6, |s| Ok(ln_moments(s)?.0));
    s.run("layer_norm_variance", 1e-4, |s| Ok(ln_moments(s)?.1));

    s.run("softmax_rows_sum_and_shift", 1e-6, |s| {
        let mut rng = s.rng(2);
        let x = Tensor::<f64>::uniform(&[3, 5, 7], 4.0, &mut rng);
        let shifted = Tensor::from_fn(x.dims(), |i| x.data()[i] + 10.0 * ((i / 7) % 3) as f64);
        let mut ctx = s.ctx();
        let (a, b) = (ctx.input(x)?, ctx.input(shifted)?);
        let (pa, pb) = (ctx.softmax_rows(a)?, ctx.softmax_rows(b)?);
        let sums = ctx.value(pa).data().chunks(7).map(|r| (r.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
        Ok(sums.max(max_diff(ctx.value(pa), ctx.value(pb))))
    });

    s.run("depthwise_channel_independence", 0.0, |s| {
        let mut rng = s.rng(3);
        let (c, hw) = (6, 9);
        let x = Tensor::<f64>::uniform(&[1, c, 3, 3], 1.0, &mut rng);
        let k = Tensor::<f64>::uniform(&[c, 1, 1, 1], 1.0, &mut rng);
        let b = Tensor::<f64>::uniform(&[c], 1.0, &mut rng);
        let eval = |x: &Tensor<f64>| -> Result<Tensor<f64>> {
            let mut ctx = s.ctx();
            let (xv, kv, bv) = (ctx.input(x.clone())?, ctx.input(k.clone())?, ctx.input(b.clone())?);
            let y = ctx.depthwise_conv1x1(xv, kv, bv)?;
            Ok(ctx.value(y).clone())
        };
        let base = eval(&x)?;
        let mut leak = 0.0f64;
        for ch in 0..c {
            let mut p = x.clone();
            for v in &mut p.data_mut()[ch * hw..(ch + 1) * hw] {
                *v += 0.5;
            }
            let y = eval(&p)?;
            for (i, (a, b)) in base.data().iter().zip(y.data()).enumerate() {
                if i / hw != ch {
                    leak = leak.max((a - b).abs());
                }
            }
        }
        Ok(leak)
    });

    s.run("counter_hygiene", 0.0, |s| {
        let mut rng = s.rng(4);
        let mut ctx = s.ctx();
        let x = ctx.input(Tensor::uniform(&[1, 4, 4, 4], 1.0, &mut rng))?;
        ctx.gather_rows(x, &[0, 2])?;
        let after_gather = ctx.counters().reshapes;
        ctx.reset_counters();
        let k = ctx.input(Tensor::uniform(&[4, 4, 3, 3], 1.0, &mut rng))?;
        let y = ctx.conv2d(x, k, None, 1, 1)?;
        let g = ctx.input(Tensor::full(&[4], 1.0))?;
        let b = ctx.input(Tensor::zeros(&[4]))?;
        ctx.layer_norm(y, g, b, 1e-5)?;
        Ok((after_gather + ctx.counters().gathers + ctx.counters().reshapes) as f64)
    });

    s.run("op_gradients", 1e-5, |s| {
        let mut rng = s.rng(5);
        let make = || s.ctx();
        let mut worst = 0.0f64;
        let mut check = |inputs: Vec<Tensor<f64>>, f: &(dyn Fn(&mut Context<f64>, &[Var]) -> Result<Var> + Sync)| -> Result<()> {
            worst = worst.max(check_input_grads(make, &inputs, f, GRAD_STEP)?);
            Ok(())
        };
        let w4 = Tensor::<f64>::uniform(&[1, 3, 4, 4], 1.0, &mut rng);
        let wsum = move |ctx: &mut Context<f64>, y: Var| ctx.weighted_sum(y, &w4);
        let x = Tensor::<f64>::uniform(&[1, 3, 4, 4], 1.0, &mut rng);
        let z = Tensor::<f64>::uniform(&[1, 3, 4, 4], 1.0, &mut rng);
        let gain = Tensor::<f64>::uniform(&[3], 1.0, &mut rng);
        let bias = Tensor::<f64>::uniform(&[3], 1.0, &mut rng);
        let k3 = Tensor::<f64>::uniform(&[3, 3, 3, 3], 0.5, &mut rng);
        check(vec![x.clone(), z.clone()], &|c, v| {
            let y = c.mul(v[0], v[1])?;
            let y = c.add(y, v[0])?;
            wsum(c, y)
        })?;
        check(vec![x.clone()], &|c, v| {
            let y = c.gelu(v[0], Activation::GeluExact)?;
            let y2 = c.gelu(v[0], Activation::GeluTanh)?;
            let y = c.add(y, y2)?;
            wsum(c, y)
        })?;
        check(vec![x.clone(), gain, bias], &|c, v| {
            let y = c.layer_norm(v[0], v[1], v[2], 1e-5)?;
            wsum(c, y)
        })?;
        check(vec![x.clone(), k3, Tensor::uniform(&[3], 0.5, &mut rng)], &|c, v| {
            let y = c.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            wsum(c, y)
        })?;
        check(vec![x.clone(), Tensor::uniform(&[3, 1, 1, 1], 1.0, &mut rng), Tensor::uniform(&[3], 1.0, &mut rng)], &|c, v| {
            let y = c.depthwise_conv1x1(v[0], v[1], v[2])?;
            wsum(c, y)
        })?;
        check(vec![x.clone(), z.clone()], &|c, v| {
            let cat = c.concat_channels(&[v[0], v[1]])?;
            let a = c.slice_channels(cat, 2, 3)?;
            let p = c.avg_pool2(a)?;
            let p = c.gather_rows(p, &[1, 0])?;
            let s = c.scale(p, 1.5)?;
            let q = c.mul(s, s)?;
            c.sum(q)
        })?;
        let positions: Vec<usize> = vec![5, 1, 12, 7];
        check(vec![x.clone(), z], &|c, v| {
            let q = c.gather_tokens(v[0], &positions)?;
            let k = c.gather_tokens(v[1], &positions)?;
            let scores = c.matmul(q, k, true)?;
            let p = c.softmax_rows(scores)?;
            let o = c.matmul(p, k, false)?;
            let rest: Vec<usize> = (0..16).filter(|i| !positions.contains(i)).collect();
            let r = c.gather_tokens(v[0], &rest)?;
            let back = c.scatter_tokens(&[o, r], &[positions.clone(), rest], 4, 4)?;
            wsum(c, back)
        })?;
        let perm: Vec<usize> = (0..48).map(|i| (i * 7) % 48).collect();
        check(vec![x], &|c, v| {
            let y = c.relayout(v[0], &[4, 12], &perm)?;
            let y = c.mul(y, y)?;
            c.sum(y)
        })?;
        let targets: Vec<usize> = (0..16).map(|i| i % 3).collect();
        check(vec![Tensor::uniform(&[1, 3, 4, 4], 2.0, &mut rng)], &|c, v| c.cross_entropy(v[0], &targets))?;
        Ok(worst)
    });

    s.run("mea_block_gradient", 1e-5, |s| {
        let cfg = s.block_cfg(4, 2);
        let (store, params) = block(&cfg, s.cfg.seed)?;
        let mut rng = s.rng(6);
        let (q, kv) = maps(&mut rng, &[1, 4, 4, 4]);
        let w = Tensor::<f64>::uniform(&[1, 4, 4, 4], 1.0, &mut rng);
        let fault = s.fault;
        let report = check_param_grads(
            &store,
            |ctx, st| {
                ctx.set_fault(fault);
                let (qv, kvv) = (ctx.input(q.clone())?, ctx.input(kv.clone())?);
                let y = mea_forward(ctx, st, qv, kvv, &params, &cfg)?;
                ctx.weighted_sum(y, &w)
            },
            GRAD_STEP,
            None,
            s.cfg.seed,
        )?;
        Ok(report.max_rel_error)
    });

    let attn_setup = |s: &Suite, salt: u64, width: usize| -> Result<(ParamStore<f64>, AttnParams, LnParams, ChaCha8Rng)> {
        let mut rng = s.rng(salt);
        let mut store = ParamStore::new();
        let params = AttnParams::init(&mut store, "attn", width, Component::Adapter, &mut rng)?;
        let ln = LnParams::init(&mut store, "ln", width, Component::Adapter)?;
        ln.randomize(&mut store, &mut rng);
        Ok((store, params, ln, rng))
    };

    s.run("stripe_locality", 0.0, |s| {
        let mut worst = 0.0f64;
        for inst in 0..10 {
            let mut rng = s.rng(100 + inst);
            let (h, w, c) = (8, 6, 3);
            let plan = plan_for(h, w, 2, Orientation::Horizontal)?;
            let q = Tensor::<f64>::uniform(&[1, c, h, w], 1.0, &mut rng);
            let kv = Tensor::<f64>::uniform(&[1, c, h, w], 1.0, &mut rng);
            let eval = |kv: &Tensor<f64>| -> Result<Tensor<f64>> {
                let mut ctx = s.ctx();
                let (qv, kvv) = (ctx.input(q.clone())?, ctx.input(kv.clone())?);
                let y = attend_stripes(&mut ctx, [qv, kvv, kvv], &plan, AttnImpl::Gather)?;
                Ok(ctx.value(y).clone())
            };
            let base = eval(&kv)?;
            let m = rng.gen_range(0..plan.stripe_count);
            let pos = plan.index_table[m][rng.gen_range(0..plan.index_table[m].len())];
            let mut p = kv.clone();
            for ch in 0..c {
                p.data_mut()[ch * h * w + pos] += 1.0;
            }
            let y = eval(&p)?;
            for (i, (a, b)) in base.data().iter().zip(y.data()).enumerate() {
                if !plan.index_table[m].contains(&(i % (h * w))) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
        Ok(worst)
    });

    s.run("vertical_equals_transposed_horizontal", 1e-6, |s| {
        let mut rng = s.rng(7);
        let (h, w, c) = (4, 6, 3);
        let qkv: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::uniform(&[1, c, h, w], 1.0, &mut rng)).collect();
        let mut ctx = s.ctx();
        let vars = qkv.iter().map(|t| ctx.input(t.clone())).collect::<Result<Vec<_>>>()?;
        let tvars = qkv.iter().map(|t| ctx.input(transpose_hw(t))).collect::<Result<Vec<_>>>()?;
        let vplan = plan_for(h, w, 2, Orientation::Vertical)?;
        let hplan = plan_for(w, h, 2, Orientation::Horizontal)?;
        let a = attend_stripes(&mut ctx, [vars[0], vars[1], vars[2]], &vplan, AttnImpl::Gather)?;
        let b = attend_stripes(&mut ctx, [tvars[0], tvars[1], tvars[2]], &hplan, AttnImpl::Gather)?;
        Ok(max_diff(ctx.value(a), &transpose_hw(ctx.value(b))))
    });

    s.run("cross_window_indices_match_pseudo_code", 0.0, |_| {
        let mut mismatches = 0usize;
        for l in 1..=32 {
            for w in 0..=8 {
                for p in 0..l {
                    if cross_window_indices(p, w, l)?.indices != pseudo_code_indices(p, w, l) {
                        mismatches += 1;
                    }
                }
            }
        }
        Ok(mismatches as f64)
    });

    s.run("gather_matches_reshape_baseline", 1e-12, |s| {
        let width = s.cfg.model.width;
        let (store, params, ln, mut rng) = attn_setup(s, 8, width)?;
        let (q, kv) = maps(&mut rng, &[1, width, 8, 8]);
        let mut out = Vec::new();
        for imp in [AttnImpl::Gather, AttnImpl::Reshape] {
            let mut ctx = s.ctx();
            let (qv, kvv) = (ctx.input(q.clone())?, ctx.input(kv.clone())?);
            let mut norm = NormHandle::new(ln, 1e-5);
            let opts = CsaOptions { stripe_size: s.cfg.model.stripe_size, attn_impl: imp, ..CsaOptions::default() };
            let y = csa::csa_forward(&mut ctx, &store, qv, kvv, &params, &mut norm, &opts)?;
            out.push(ctx.value(y).clone());
        }
        Ok(max_diff(&out[0], &out[1]))
    });

    s.run("csa_reshape_free", 0.0, |s| {
        let width = s.cfg.model.width;
        let (store, params, ln, mut rng) = attn_setup(s, 9, width)?;
        let mut violations = 0u64;
        for size in [4, 8, 6] {
            let (q, kv) = maps(&mut rng, &[1, width, size, size]);
            for imp in [AttnImpl::Gather, AttnImpl::Reshape] {
                let mut ctx = s.ctx();
                let (qv, kvv) = (ctx.input(q.clone())?, ctx.input(kv.clone())?);
                let mut norm = NormHandle::new(ln, 1e-5);
                let opts = CsaOptions { stripe_size: s.cfg.model.stripe_size, attn_impl: imp, ..CsaOptions::default() };
                csa::csa_forward(&mut ctx, &store, qv, kvv, &params, &mut norm, &opts)?;
                let r = ctx.counters().reshapes;
                violations += match imp {
                    AttnImpl::Gather => r,
                    AttnImpl::Reshape => u64::from(r < 2),
                };
            }
        }
        Ok(violations as f64)
    });

    let shared_vs_separate = |s: &Suite| -> Result<(f64, f64)> {
        let shared_cfg = MeaConfig { shared_ln: true, ..s.block_cfg(s.cfg.model.width, 1) };
        let sep_cfg = MeaConfig { shared_ln: false, ..shared_cfg };
        let (store_a, pa) = block(&shared_cfg, s.cfg.seed)?;
        let (mut store_b, pb) = block(&sep_cfg, s.cfg.seed)?;
        let shared = pa.ln.expect("shared norm");
        for sep in [pb.ln, pb.ffn_ln].into_iter().flatten() {
            store_b.get_mut(sep.gain).value = store_a.get(shared.gain).value.clone();
            store_b.get_mut(sep.bias).value = store_a.get(shared.bias).value.clone();
        }
        let mut rng = s.rng(10);
        let (q, kv) = maps(&mut rng, &[1, s.cfg.model.width, 8, 8]);
        let run = |store: &ParamStore<f64>, p: &MeaParams, cfg: &MeaConfig| -> Result<(Tensor<f64>, u64)> {
            let mut ctx = s.ctx();
            let (qv, kvv) = (ctx.input(q.clone())?, ctx.input(kv.clone())?);
            let y = mea_forward(&mut ctx, store, qv, kvv, p, cfg)?;
            Ok((ctx.value(y).clone(), ctx.counters().ln_passes))
        };
        let (ya, na) = run(&store_a, &pa, &shared_cfg)?;
        let (yb, nb) = run(&store_b, &pb, &sep_cfg)?;
        Ok((max_diff(&ya, &yb), (na.abs_diff(1) + nb.abs_diff(2)) as f64))
    };
    s.run("shared_ln_output_equality", 1e-12, |s| Ok(shared_vs_separate(s)?.0));
    s.run("shared_ln_pass_count", 0.0, |s| Ok(shared_vs_separate(s)?.1));

    s.run("mea_branch_compositionality", 1e-6, |s| {
        let cfg = s.block_cfg(s.cfg.model.width, 1);
        let (store, p) = block(&cfg, s.cfg.seed ^ 11)?;
        let mut rng = s.rng(11);
        let (q, kv) = maps(&mut rng, &[1, cfg.width, 8, 8]);
        let mut ctx = s.ctx();
        let (qv, kvv) = (ctx.input(q.clone())?, ctx.input(kv.clone())?);
        let fused = mea_forward_parts(&mut ctx, &store, qv, kvv, &p, &cfg)?.fused;
        let fused = ctx.value(fused).clone();

        let mut ctx = s.ctx();
        let (qv, kvv) = (ctx.input(q)?, ctx.input(kv)?);
        let mut n1 = NormHandle::new(p.ln.expect("norm"), cfg.ln_eps);
        let a = mea::attn_branch(&mut ctx, &store, qv, kvv, p.attn.as_ref().expect("attn"), &mut n1, &cfg)?;
        let mut n2 = NormHandle::new(p.ffn_ln.or(p.ln).expect("norm"), cfg.ln_eps);
        let f = mea::ffn_branch(&mut ctx, &store, qv, kvv, p.ffn.as_ref().expect("ffn"), &mut n2, cfg.activation)?;
        let c = mea::conv_branch(&mut ctx, &store, qv, kvv, p.conv.as_ref().expect("conv"), cfg.activation)?;
        let y = mea::fuse(&mut ctx, &store, &p, [Some(a), Some(f), Some(c)], qv, kvv)?;
        Ok(max_diff(&fused, ctx.value(y)))
    });

    let cascade_setup = |s: &Suite| -> Result<(MeaConfig, ParamStore<f64>, CascadeParams, Tensor<f64>, Tensor<f64>)> {
        let heads = if s.cfg.model.width.is_multiple_of(2) { 2 } else { 1 };
        let cfg = MeaConfig { enable_cascade: true, ..s.block_cfg(s.cfg.model.width, heads) };
        let mut store = ParamStore::new();
        let mut rng = s.rng(12);
        let params = CascadeParams::init(&mut store, "cascade", &cfg, false, &mut rng)?;
        let (q, kv) = maps(&mut rng, &[1, cfg.width, 8, 8]);
        Ok((cfg, store, params, q, kv))
    };

    s.run("cascade_recurrence", 1e-10, |s| {
        let (cfg, store, params, q, kv) = cascade_setup(s)?;
        let mut ctx = s.ctx();
        let (qv, kvv) = (ctx.input(q)?, ctx.input(kv)?);
        let y = cascade_forward(&mut ctx, &store, qv, kvv, &params, &cfg, CarryMode::Cascade)?;
        let d = params.head_width();
        let mut outs = Vec::new();
        for (h, head) in params.heads.iter().enumerate() {
            let mut hq = ctx.slice_channels(qv, h * d, d)?;
            let mut hkv = ctx.slice_channels(kvv, h * d, d)?;
            if h > 0 {
                hq = ctx.add(hq, outs[h - 1])?;
                hkv = ctx.add(hkv, outs[h - 1])?;
            }
            outs.push(mea_forward(&mut ctx, &store, hq, hkv, head, &cfg)?);
        }
        let cat = ctx.concat_channels(&outs)?;
        let unrolled = params.proj.conv3x3(&mut ctx, &store, cat)?;
        Ok(max_diff(ctx.value(y), ctx.value(unrolled)))
    });

    s.run("cascade_zeroed_equals_parallel_heads", 0.0, |s| {
        let (cfg, store, params, q, kv) = cascade_setup(s)?;
        let mut ctx = s.ctx();
        let (qv, kvv) = (ctx.input(q)?, ctx.input(kv)?);
        let y = cascade_forward(&mut ctx, &store, qv, kvv, &params, &cfg, CarryMode::Zeroed)?;
        let d = params.head_width();
        let outs = params
            .heads
            .iter()
            .enumerate()
            .map(|(h, head)| {
                let hq = ctx.slice_channels(qv, h * d, d)?;
                let hkv = ctx.slice_channels(kvv, h * d, d)?;
                mea_forward(&mut ctx, &store, hq, hkv, head, &cfg)
            })
            .collect::<Result<Vec<_>>>()?;
        let cat = ctx.concat_channels(&outs)?;
        let parallel = params.proj.conv3x3(&mut ctx, &store, cat)?;
        Ok(max_diff(ctx.value(y), ctx.value(parallel)))
    });

    s.run("adapter_identity_at_init", 0.0, |s| {
        let state = AdapterState::<f64>::init(s.cfg.adapter(), s.cfg.seed)?;
        let size = s.cfg.task.image_size;
        let mut rng = s.rng(13);
        let image = Tensor::<f64>::uniform(&[1, 3, size, size], 1.0, &mut rng);
        let mut ctx = s.ctx();
        let img = ctx.input(image)?;
        let adapted = adapter_full_forward(&mut ctx, &state, img)?;
        let plain = backbone_forward(&mut ctx, &state, img)?;
        let mut worst = 0.0f64;
        for (a, b) in adapted.vit.iter().zip(&plain) {
            let (a, b) = (ctx.value(*a), ctx.value(*b));
            let exact = a.dims() == b.dims() && a.data().iter().zip(b.data()).all(|(x, y)| x == y);
            if !exact {
                worst = worst.max(max_diff(a, b).max(f64::MIN_POSITIVE));
            }
        }
        Ok(worst)
    });

    s.run("parameter_accounting", 0.0, |s| {
        let mut mismatches = 0usize;
        let mut store = ParamStore::<f64>::new();
        let mut rng = s.rng(14);
        ConvParams::init(&mut store, "fuse", (256, 1280, 3), Component::Adapter, &mut rng)?;
        mismatches += usize::from(count_params(&store, Scope::All) != 2_949_376);
        mismatches += usize::from(count_params(&store, Scope::Backbone) != 0);

        let full = s.block_cfg(8, 1);
        let (full_store, full_params) = block(&full, 0)?;
        let total = count_params(&full_store, Scope::All);
        let fuse_per_operand = 8 * 8 * 9;
        for (group, toggled) in [
            (ParamGroup::Attn, MeaConfig { enable_attn: false, ..full }),
            (ParamGroup::Ffn, MeaConfig { enable_ffn: false, ..full }),
            (ParamGroup::Conv, MeaConfig { enable_conv: false, ..full }),
        ] {
            let (st, _) = block(&toggled, 0)?;
            let own_norm = if group != ParamGroup::Conv && !full.shared_ln { 2 * 8 } else { 0 };
            let expected = total - count_ids(&full_store, &full_params.group_ids(group)) - fuse_per_operand - own_norm;
            mismatches += usize::from(count_params(&st, Scope::All) != expected);
        }
        let (sep, _) = block(&MeaConfig { shared_ln: !full.shared_ln, ..full }, 0)?;
        mismatches += usize::from(count_params(&sep, Scope::All).abs_diff(total) != 2 * 8);

        let state = AdapterState::<f32>::init(s.cfg.adapter(), s.cfg.seed)?;
        let (a, b, all) = (
            count_params(&state.store, Scope::Adapter),
            count_params(&state.store, Scope::Backbone),
            count_params(&state.store, Scope::All),
        );
        mismatches += usize::from(a + b != all);
        Ok(mismatches as f64)
    });

    s.run("entropy_plugin_identity", 1e-12, |s| {
        let mut rng = s.rng(15);
        let x: Vec<f64> = (0..5000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| v * v + rng.gen_range(-0.2..0.2)).collect();
        let r = entropy_report(&x, &y, s.cfg.diag.bins)?;
        let identity = (r.h_joint - (r.h_vit + r.h_con - r.mi)).abs();
        Ok(if r.mi < 0.0 { f64::INFINITY } else { identity })
    });

    s.run("entropy_joint_bounds_on_block_features", 1e-9, |s| {
        let cfg = s.block_cfg(s.cfg.model.width, 1);
        let (store, p) = block(&cfg, s.cfg.seed ^ 16)?;
        let mut rng = s.rng(16);
        let (q, kv) = maps(&mut rng, &[1, cfg.width, 8, 8]);
        let mut ctx = s.ctx();
        let (qv, kvv) = (ctx.input(q)?, ctx.input(kv)?);
        let parts = mea_forward_parts(&mut ctx, &store, qv, kvv, &p, &cfg)?;
        let vit = ctx.add(parts.attn.expect("attn"), parts.ffn.expect("ffn"))?;
        let con = parts.conv.expect("conv");
        let r = entropy_report(ctx.value(vit).data(), ctx.value(con).data(), s.cfg.diag.bins)?;
        Ok((r.h_vit.max(r.h_con) - r.h_joint).max(0.0))
    });

    s.run("counters_deterministic", 0.0, |s| {
        let cfg = s.block_cfg(s.cfg.model.width, 1);
        let (store, p) = block(&cfg, s.cfg.seed)?;
        let mut rng = s.rng(17);
        let (q, kv) = maps(&mut rng, &[1, cfg.width, 8, 8]);
        let fault = s.fault;
        let model = |ctx: &mut Context<f64>| -> Result<Var> {
            ctx.set_fault(fault);
            let (qv, kvv) = (ctx.input(q.clone())?, ctx.input(kv.clone())?);
            mea_forward(ctx, &store, qv, kvv, &p, &cfg)
        };
        let cmp = compare_memory_ops(model, model)?;
        Ok(if cmp.delta.is_zero() { 0.0 } else { 1.0 })
    });

    s.run("checkpoint_round_trip", 0.0, |s| {
        let state = AdapterState::<f32>::init(s.cfg.adapter(), s.cfg.seed)?;
        let dir = scratch_dir(&s.cfg.hash());
        let result = (|| -> Result<f64> {
            io::save_checkpoint(&dir, &state.store)?;
            let loaded: ParamStore<f32> = io::load_checkpoint(&dir)?;
            let mut diffs = usize::from(loaded.len() != state.store.len());
            for ((_, a), (_, b)) in state.store.iter().zip(loaded.iter()) {
                let same = a.name == b.name
                    && a.role == b.role
                    && a.component == b.component
                    && a.value.dims() == b.value.dims()
                    && a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits());
                diffs += usize::from(!same);
            }
            Ok(diffs as f64)
        })();
        let _ = std::fs::remove_dir_all(&dir);
        result
    });

    if let Some(dir) = s.cfg.check.checkpoint.clone() {
        s.run("checkpoint_loadable", 0.0, |s| {
            let mut state = AdapterState::<f32>::init(s.cfg.adapter(), s.cfg.seed)?;
            io::restore_into(&dir, &mut state.store)?;
            let task = crate::data::RectangleTask::new(s.cfg.task.image_size, s.cfg.task.classes, s.cfg.seed)?;
            let (image, labels) = task.batch::<f32>(0, 1);
            let mut ctx = Context::new();
            let loss = forward_loss(&mut ctx, &state, &image, &labels)?;
            Ok(if ctx.value(loss).is_finite() { 0.0 } else { 1.0 })
        });
    }

    let passed = s.results.iter().all(|r| r.status == Status::Pass);
    Ok(CheckReport { config_hash: cfg.hash(), seed: cfg.seed, passed, invariants: s.results })
}

fn scratch_dir(tag: &str) -> PathBuf {
    let nanos = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_nanos()).unwrap_or(0);
    std::env::temp_dir().join(format!("meta-check-{tag}-{}-{nanos}", std::process::id()))
}
