//! Entropy diagnostic between the attention/feed-forward and conv branches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::graph::Context;
use crate::instrument::{entropy_report, EntropyReport};
use crate::mea::{mea_forward_parts, MeaConfig, MeaParams};
use crate::tensor::{Component, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiagReport {
    pub config_hash: String,
    pub seed: u64,
    pub samples: usize,
    #[serde(flatten)]
    pub entropy: EntropyReport,
}

/// One block forward on a random batch. The transformer-side sample is the
/// elementwise sum of the attention and feed-forward outputs; the conv-side
/// sample is the conv branch output.
pub fn run_diag(cfg: &RunConfig) -> Result<DiagReport> {
    let mea = MeaConfig { head_count: 1, ..cfg.mea() };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::<f64>::new();
    let params = MeaParams::init(&mut store, "block", mea.width, &mea, Component::Adapter, &mut rng)?;
    let dims = [2, mea.width, cfg.diag.size, cfg.diag.size];
    let q = Tensor::<f64>::uniform(&dims, 1.0, &mut rng);
    let kv = Tensor::<f64>::uniform(&dims, 1.0, &mut rng);
    let mut ctx = Context::new();
    let (qv, kvv) = (ctx.input(q)?, ctx.input(kv)?);
    let parts = mea_forward_parts(&mut ctx, &store, qv, kvv, &params, &mea)?;
    let vit = match (parts.attn, parts.ffn) {
        (Some(a), Some(f)) => ctx.add(a, f)?,
        (Some(x), None) | (None, Some(x)) => x,
        (None, None) => return Err(Error::Config("diag needs the attention or feed-forward branch".into())),
    };
    let con = parts.conv.ok_or_else(|| Error::Config("diag needs the conv branch".into()))?;
    let (x, y) = (ctx.value(vit).data(), ctx.value(con).data());
    let entropy = entropy_report(x, y, cfg.diag.bins)?;
    Ok(DiagReport { config_hash: cfg.hash(), seed: cfg.seed, samples: x.len(), entropy })
}
