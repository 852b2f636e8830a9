//! Counter sweep over normalization sharing, attention layout and map size.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::RunConfig;
use crate::counters::OpCounters;
use crate::csa::AttnImpl;
use crate::error::Result;
use crate::graph::Context;
use crate::instrument::{count_params, Scope};
use crate::mea::{mea_forward, MeaConfig, MeaParams};
use crate::tensor::{Component, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub config_hash: String,
    pub ln_mode: &'static str,
    pub attn_impl: &'static str,
    pub size: usize,
    pub width: usize,
    pub ln_passes: u64,
    pub reshapes: u64,
    pub gathers: u64,
    pub concats: u64,
    pub allocations: u64,
    pub copied_bytes: u64,
    pub flops: u64,
    pub params: u64,
    pub wall_clock: f64,
}

fn measure(cfg: &MeaConfig, size: usize, seed: u64, repeats: usize) -> Result<(OpCounters, u64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f32>::new();
    let params = MeaParams::init(&mut store, "block", cfg.width, cfg, Component::Adapter, &mut rng)?;
    let q = Tensor::<f32>::uniform(&[1, cfg.width, size, size], 1.0, &mut rng);
    let kv = Tensor::<f32>::uniform(&[1, cfg.width, size, size], 1.0, &mut rng);
    let mut counters = None;
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let mut ctx = Context::new();
        let (qv, kvv) = (ctx.input(q.clone())?, ctx.input(kv.clone())?);
        ctx.reset_counters();
        let start = Instant::now();
        mea_forward(&mut ctx, &store, qv, kvv, &params, cfg)?;
        best = best.min(start.elapsed().as_secs_f64());
        counters = Some(*ctx.counters());
    }
    Ok((counters.expect("at least one repeat"), count_params(&store, Scope::All) as u64, best))
}

pub fn bench_rows(cfg: &RunConfig) -> Result<Vec<BenchRow>> {
    let hash = cfg.hash();
    let mut rows = Vec::new();
    for shared_ln in [true, false] {
        for attn_impl in [AttnImpl::Gather, AttnImpl::Reshape] {
            for &size in &cfg.bench.sizes {
                let mea = MeaConfig { width: cfg.bench.width, head_count: 1, shared_ln, attn_impl, ..cfg.mea() };
                let (c, params, wall_clock) = measure(&mea, size, cfg.seed, cfg.bench.repeats)?;
                rows.push(BenchRow {
                    config_hash: hash.clone(),
                    ln_mode: if shared_ln { "shared" } else { "separate" },
                    attn_impl: match attn_impl {
                        AttnImpl::Gather => "gather",
                        AttnImpl::Reshape => "reshape",
                    },
                    size,
                    width: cfg.bench.width,
                    ln_passes: c.ln_passes,
                    reshapes: c.reshapes,
                    gathers: c.gathers,
                    concats: c.concats,
                    allocations: c.allocations,
                    copied_bytes: c.copied_bytes,
                    flops: c.flops,
                    params,
                    wall_clock,
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_csv<W: Write>(rows: &[BenchRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn run_bench(cfg: &RunConfig, out: &Path) -> Result<Vec<BenchRow>> {
    let rows = bench_rows(cfg)?;
    let file = std::fs::File::create(out)?;
    write_csv(&rows, std::io::BufWriter::new(file))?;
    Ok(rows)
}
