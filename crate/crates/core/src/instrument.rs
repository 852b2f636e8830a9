//! Parameter and operation accounting, and plug-in histogram estimates of
//! entropy and mutual information.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::counters::{CounterDelta, OpCounters};
use crate::error::{Error, Result};
use crate::graph::{Context, Var};
use crate::scalar::Scalar;
use crate::tensor::{Component, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    Adapter,
    Backbone,
    All,
}

pub fn count_params<T: Scalar>(store: &ParamStore<T>, scope: Scope) -> usize {
    store
        .iter()
        .filter(|(_, p)| match scope {
            Scope::All => true,
            Scope::Adapter => p.component == Component::Adapter,
            Scope::Backbone => p.component == Component::Backbone,
        })
        .map(|(_, p)| p.value.len())
        .sum()
}

pub fn count_ids<T: Scalar>(store: &ParamStore<T>, ids: &[ParamId]) -> usize {
    ids.iter().map(|&id| store.get(id).value.len()).sum()
}

pub fn count_trainable<T: Scalar>(store: &ParamStore<T>) -> usize {
    store.iter().filter(|(_, p)| !p.frozen).map(|(_, p)| p.value.len()).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub params_total: u64,
    pub params_trainable: u64,
    pub flops_forward: u64,
    pub counters: OpCounters,
    pub wall_clock: f64,
}

/// Runs one forward pass in a fresh context and reports its cost.
pub fn cost_report<T, F>(store: &ParamStore<T>, forward: F) -> Result<CostReport>
where
    T: Scalar,
    F: FnOnce(&mut Context<T>) -> Result<Var>,
{
    let mut ctx = Context::new();
    let start = Instant::now();
    forward(&mut ctx)?;
    let wall_clock = start.elapsed().as_secs_f64();
    let counters = *ctx.counters();
    Ok(CostReport {
        params_total: count_params(store, Scope::All) as u64,
        params_trainable: count_trainable(store) as u64,
        flops_forward: counters.flops,
        counters,
        wall_clock,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryComparison {
    pub a: OpCounters,
    pub b: OpCounters,
    /// `b - a`, field by field.
    pub delta: CounterDelta,
}

fn counters_of<T: Scalar, F>(f: &F) -> Result<OpCounters>
where
    F: Fn(&mut Context<T>) -> Result<Var>,
{
    let mut ctx = Context::new();
    f(&mut ctx)?;
    let first = *ctx.counters();
    ctx.reset();
    f(&mut ctx)?;
    if *ctx.counters() != first {
        return Err(Error::NonDeterministic { first: first.allocations as f64, second: ctx.counters().allocations as f64 });
    }
    Ok(first)
}

/// Counter snapshots of two forward callables, each run twice in fresh
/// contexts to confirm they are deterministic.
pub fn compare_memory_ops<T, A, B>(model_a: A, model_b: B) -> Result<MemoryComparison>
where
    T: Scalar,
    A: Fn(&mut Context<T>) -> Result<Var>,
    B: Fn(&mut Context<T>) -> Result<Var>,
{
    let a = counters_of(&model_a)?;
    let b = counters_of(&model_b)?;
    Ok(MemoryComparison { a, b, delta: b - a })
}

/// Equal-width binning over the observed range. A constant sample falls
/// entirely into bin 0.
#[derive(Clone, Copy, Debug)]
struct Binning {
    min: f64,
    width: f64,
    bins: usize,
}

impl Binning {
    fn fit(x: &[f64], bins: usize) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::Invalid("entropy of an empty sample".into()));
        }
        if bins == 0 {
            return Err(Error::Invalid("bin count must be positive".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("entropy sample"));
        }
        let min = x.iter().copied().fold(f64::INFINITY, f64::min);
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Binning { min, width: (max - min) / bins as f64, bins })
    }

    fn bin(&self, v: f64) -> usize {
        if self.width <= 0.0 {
            return 0;
        }
        (((v - self.min) / self.width) as usize).min(self.bins - 1)
    }
}

fn plugin_entropy(counts: &[usize], n: usize) -> f64 {
    let n = n as f64;
    0.0 - counts.iter().filter(|&&c| c > 0).map(|&c| (c as f64 / n) * (c as f64 / n).ln()).sum::<f64>()
}

/// Plug-in histogram entropy in nats.
pub fn entropy_estimate(x: &[f64], bins: usize) -> Result<f64> {
    let b = Binning::fit(x, bins)?;
    let mut counts = vec![0usize; bins];
    for &v in x {
        counts[b.bin(v)] += 1;
    }
    Ok(plugin_entropy(&counts, x.len()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub h_vit: f64,
    pub h_con: f64,
    pub h_joint: f64,
    pub mi: f64,
    pub bin_count: usize,
}

/// Marginal, joint and mutual information estimates on a shared binning.
///
/// The mutual information is summed directly as
/// `Σ p(x,y) ln(p(x,y) / (p(x) p(y)))`, independently of the entropies, and
/// floored at zero to absorb rounding.
pub fn entropy_report(x: &[f64], y: &[f64], bins: usize) -> Result<EntropyReport> {
    if x.len() != y.len() {
        return Err(Error::shape("mutual information", format!("{} vs {} samples", x.len(), y.len())));
    }
    let (bx, by) = (Binning::fit(x, bins)?, Binning::fit(y, bins)?);
    let n = x.len();
    let mut cx = vec![0usize; bins];
    let mut cy = vec![0usize; bins];
    let mut cxy = vec![0usize; bins * bins];
    for (&u, &v) in x.iter().zip(y) {
        let (i, j) = (bx.bin(u), by.bin(v));
        cx[i] += 1;
        cy[j] += 1;
        cxy[i * bins + j] += 1;
    }
    let nf = n as f64;
    let mut mi = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            let c = cxy[i * bins + j];
            if c > 0 {
                let p = c as f64 / nf;
                mi += p * ((c as f64 * nf) / (cx[i] as f64 * cy[j] as f64)).ln();
            }
        }
    }
    Ok(EntropyReport {
        h_vit: plugin_entropy(&cx, n),
        h_con: plugin_entropy(&cy, n),
        h_joint: plugin_entropy(&cxy, n),
        mi: mi.max(0.0),
        bin_count: bins,
    })
}

pub fn mutual_info_estimate(x: &[f64], y: &[f64], bins: usize) -> Result<f64> {
    Ok(entropy_report(x, y, bins)?.mi)
}
