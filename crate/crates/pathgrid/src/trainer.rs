//! Minibatch training over corpus records.
//!
//! Per-example gradients run in parallel and are reduced in batch order, so
//! results do not depend on the thread count.

use pathgrid_core::corpus::CorpusRecord;
use pathgrid_core::model::{
    example_gradients, train_step_with, Example, LossBreakdown, LossConfig, LossTarget, OptimizerConfig,
    OptimizerKind,
};
use pathgrid_core::rng::{derive_seed, rng_from_seed};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    /// Learning rate multiplier reached at the last epoch (linear decay).
    pub final_lr_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 16,
            loss: LossConfig::default(),
            optimizer: OptimizerConfig {
                kind: OptimizerKind::Sgd,
                learning_rate: 0.3,
                weight_decay: 0.0,
                grad_clip: Some(1.0),
            },
            final_lr_factor: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("training.batch_size must be positive".into()));
        }
        if !(self.final_lr_factor.is_finite() && self.final_lr_factor >= 0.0) {
            return Err(Error::Config("training.final_lr_factor must be finite and non-negative".into()));
        }
        self.loss.validate()?;
        self.optimizer.validate()?;
        Ok(())
    }
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u64,
    pub step: u64,
    pub learning_rate: f64,
    pub seq: f64,
    pub coord: f64,
    pub valid: f64,
    pub cov: f64,
    pub len: f64,
    pub total: f64,
}

fn examples(records: &[CorpusRecord]) -> Vec<Example<'_>> {
    records
        .iter()
        .map(|r| Example {
            workspace: &r.workspace,
            context: &r.context,
            points: r.trajectory.points(),
        })
        .collect()
}

fn lr_at(cfg: &TrainConfig, epoch: u64) -> f64 {
    let base = cfg.optimizer.learning_rate;
    if cfg.epochs <= 1 {
        return base;
    }
    let frac = epoch.min(cfg.epochs - 1) as f64 / (cfg.epochs - 1) as f64;
    base * (1.0 + (cfg.final_lr_factor - 1.0) * frac)
}

/// Train `ckpt` for `cfg.epochs` more epochs on `records`.
///
/// Epoch `e` (counted over the checkpoint's whole life) shuffles with
/// `derive_seed(shuffle_seed, e)`, so resuming continues the same sequence.
/// The learning-rate decay runs over the epochs of this call only; a resumed
/// run matches an uninterrupted one when the rate is constant.
pub fn train(
    ckpt: &mut Checkpoint,
    records: &[CorpusRecord],
    cfg: &TrainConfig,
    shuffle_seed: u64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if records.is_empty() && cfg.epochs > 0 {
        return Err(Error::Config("no training records".into()));
    }
    let all = examples(records);
    let mut logs = Vec::new();
    let start = ckpt.epochs_completed;
    for local in 0..cfg.epochs {
        let epoch = start + local;
        let mut order: Vec<usize> = (0..all.len()).collect();
        order.shuffle(&mut rng_from_seed(derive_seed(shuffle_seed, epoch)));
        let mut opt = cfg.optimizer;
        opt.learning_rate = lr_at(cfg, local);
        let mut sum = LossBreakdown::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Example<'_>> = chunk.iter().map(|&i| all[i]).collect();
            let b = train_step_with(&mut ckpt.model, &batch, &cfg.loss, &opt, &mut ckpt.state, |m, batch, lc| {
                batch
                    .par_iter()
                    .map(|ex| example_gradients(m, ex, lc, LossTarget::Total))
                    .collect()
            })?;
            let w = chunk.len() as f64 / all.len() as f64;
            sum.seq += w * b.seq;
            sum.coord += w * b.coord;
            sum.valid += w * b.valid;
            sum.cov += w * b.cov;
            sum.len += w * b.len;
            sum.total += w * b.total;
        }
        ckpt.epochs_completed = epoch + 1;
        ckpt.optimizer = cfg.optimizer;
        let log = EpochLog {
            epoch: epoch + 1,
            step: ckpt.state.step,
            learning_rate: opt.learning_rate,
            seq: sum.seq,
            coord: sum.coord,
            valid: sum.valid,
            cov: sum.cov,
            len: sum.len,
            total: sum.total,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// Write the loss log as comma-separated text with a header row.
pub fn write_loss_log(path: &std::path::Path, logs: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for l in logs {
        w.serialize(l).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
