//! Toy segmentation training on the synthetic rectangles task.

use std::path::Path;

use serde::Serialize;

use super::config::RunConfig;
use crate::adapter::{forward_loss, AdapterState};
use crate::data::RectangleTask;
use crate::error::{Error, Result};
use crate::graph::Context;
use crate::instrument::{count_params, count_trainable, Scope};
use crate::io;
use crate::optim::Adam;

pub const LOSS_CSV: &str = "loss.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const SUMMARY_JSON: &str = "summary.json";

/// Steps averaged for the reported final loss.
const TAIL: usize = 10;

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub seed: u64,
    pub steps: usize,
    pub initial_loss: f64,
    /// Mean loss over the last ten steps (or all steps if fewer).
    pub final_loss: f64,
    pub ratio: f64,
    pub params_total: u64,
    pub params_trainable: u64,
    pub params_adapter: u64,
}

/// Trains and returns the per-step losses. Fails with [`Error::NonFinite`] on
/// divergence.
pub fn train_losses(cfg: &RunConfig) -> Result<(AdapterState<f32>, Vec<f32>)> {
    let mut state = AdapterState::<f32>::init(cfg.adapter(), cfg.seed)?;
    let task = RectangleTask::new(cfg.task.image_size, cfg.task.classes, cfg.seed)?;
    let mut adam = Adam::new(cfg.task.lr);
    let mut losses = Vec::with_capacity(cfg.task.steps);
    for step in 0..cfg.task.steps {
        let (image, labels) = task.batch::<f32>(step as u64, cfg.task.batch);
        let mut ctx = Context::new();
        let loss = forward_loss(&mut ctx, &state, &image, &labels)?;
        let value = ctx.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        ctx.backward(loss)?;
        state.store.zero_grads();
        ctx.write_param_grads(&mut state.store);
        adam.step(&mut state.store);
        losses.push(value);
    }
    Ok((state, losses))
}

pub fn summarize(cfg: &RunConfig, state: &AdapterState<f32>, losses: &[f32]) -> TrainSummary {
    let initial_loss = losses.first().copied().unwrap_or(f32::NAN) as f64;
    let tail = &losses[losses.len().saturating_sub(TAIL)..];
    let final_loss = tail.iter().map(|&l| l as f64).sum::<f64>() / tail.len().max(1) as f64;
    TrainSummary {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        steps: losses.len(),
        initial_loss,
        final_loss,
        ratio: final_loss / initial_loss,
        params_total: count_params(&state.store, Scope::All) as u64,
        params_trainable: count_trainable(&state.store) as u64,
        params_adapter: count_params(&state.store, Scope::Adapter) as u64,
    }
}

pub fn write_loss_csv(path: &Path, losses: &[f32]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    w.write_record(["step", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([i.to_string(), format!("{l:?}")])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `loss.csv`, `checkpoint/` and `summary.json` under `out`.
pub fn run_train_toy(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    std::fs::create_dir_all(out)?;
    let (state, losses) = train_losses(cfg)?;
    write_loss_csv(&out.join(LOSS_CSV), &losses)?;
    io::save_checkpoint(&out.join(CHECKPOINT_DIR), &state.store)?;
    let summary = summarize(cfg, &state, &losses);
    std::fs::write(out.join(SUMMARY_JSON), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}
