use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::loss::{example_gradients, reduce, Example, LossBreakdown, LossConfig, LossTarget};
use super::{ModelError, PathModel};

/// Per-tensor gradient buffers in declared parameter order.
pub type Gradients = Vec<Vec<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Momentum { beta: f64 },
    /// Adam with decoupled weight decay.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Rescale the global gradient norm down to this value when exceeded.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate: 0.05,
            weight_decay: 0.0,
            grad_clip: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(ModelError::InvalidConfig("learning_rate must be finite and non-negative"));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(ModelError::InvalidConfig("weight_decay must be finite and non-negative"));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(ModelError::InvalidConfig("grad_clip must be positive"));
            }
        }
        match self.kind {
            OptimizerKind::Sgd => {}
            OptimizerKind::Momentum { beta } => {
                if !(0.0..1.0).contains(&beta) {
                    return Err(ModelError::InvalidConfig("momentum beta must lie in [0, 1)"));
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                    return Err(ModelError::InvalidConfig("adam betas must lie in [0, 1) and eps be positive"));
                }
            }
        }
        Ok(())
    }
}

/// Step counter plus first/second moment buffers (empty until needed).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }
}

fn ensure(buf: &mut Vec<Vec<f64>>, model: &PathModel) {
    if buf.len() != model.params().len() {
        *buf = model.params().iter().map(|t| vec![0.0; t.len()]).collect();
    }
}

/// Apply one update with already computed gradients.
pub fn apply_update(
    model: &mut PathModel,
    grads: &Gradients,
    cfg: &OptimizerConfig,
    state: &mut OptimizerState,
) -> Result<(), ModelError> {
    cfg.validate()?;
    if grads.len() != model.params().len() || grads.iter().zip(model.params()).any(|(g, p)| g.len() != p.len()) {
        return Err(ModelError::LayoutMismatch);
    }
    let mut scale = 1.0;
    if let Some(clip) = cfg.grad_clip {
        let norm = libm::sqrt(grads.iter().flatten().map(|g| g * g).sum::<f64>());
        if norm > clip {
            scale = clip / norm;
        }
    }
    state.step += 1;
    let lr = cfg.learning_rate;
    let decay = 1.0 - lr * cfg.weight_decay;
    match cfg.kind {
        OptimizerKind::Sgd => {
            for (p, g) in model.params_mut().iter_mut().zip(grads) {
                for (w, g) in p.data.iter_mut().zip(g) {
                    *w = *w * decay - lr * scale * g;
                }
            }
        }
        OptimizerKind::Momentum { beta } => {
            ensure(&mut state.first_moment, model);
            for ((p, g), m) in model.params_mut().iter_mut().zip(grads).zip(&mut state.first_moment) {
                for ((w, g), m) in p.data.iter_mut().zip(g).zip(m.iter_mut()) {
                    *m = beta * *m + scale * g;
                    *w = *w * decay - lr * *m;
                }
            }
        }
        OptimizerKind::Adam { beta1, beta2, eps } => {
            ensure(&mut state.first_moment, model);
            ensure(&mut state.second_moment, model);
            let t = state.step as f64;
            let c1 = 1.0 - libm::pow(beta1, t);
            let c2 = 1.0 - libm::pow(beta2, t);
            for (((p, g), m), v) in model
                .params_mut()
                .iter_mut()
                .zip(grads)
                .zip(&mut state.first_moment)
                .zip(&mut state.second_moment)
            {
                for (((w, g), m), v) in p.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                    let g = scale * g;
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mh = *m / c1;
                    let vh = *v / c2;
                    *w = *w * decay - lr * mh / (libm::sqrt(vh) + eps);
                }
            }
        }
    }
    Ok(())
}

/// One optimizer step on the mean total loss of `batch`.
pub fn train_step(
    model: &mut PathModel,
    batch: &[Example<'_>],
    loss_cfg: &LossConfig,
    opt_cfg: &OptimizerConfig,
    state: &mut OptimizerState,
) -> Result<LossBreakdown, ModelError> {
    train_step_with(model, batch, loss_cfg, opt_cfg, state, |m, batch, cfg| {
        batch
            .iter()
            .map(|ex| example_gradients(m, ex, cfg, LossTarget::Total))
            .collect()
    })
}

/// Like [`train_step`] but per-example gradients come from `per_example`,
/// which must return them in batch order (the reduction is ordered).
pub fn train_step_with<F>(
    model: &mut PathModel,
    batch: &[Example<'_>],
    loss_cfg: &LossConfig,
    opt_cfg: &OptimizerConfig,
    state: &mut OptimizerState,
    per_example: F,
) -> Result<LossBreakdown, ModelError>
where
    F: FnOnce(&PathModel, &[Example<'_>], &LossConfig) -> Result<Vec<(LossBreakdown, Gradients)>, ModelError>,
{
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    loss_cfg.validate()?;
    opt_cfg.validate()?;
    let parts = per_example(model, batch, loss_cfg)?;
    if parts.len() != batch.len() {
        return Err(ModelError::LayoutMismatch);
    }
    let (loss, grads) = reduce(parts)?;
    apply_update(model, &grads, opt_cfg, state)?;
    Ok(loss)
}
