use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::params::{Gradients, Param, ParameterSet};
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// RMSProp whose squared-gradient statistics live with the global parameters.
    RmsProp,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    /// Global-norm gradient clipping; `None` disables it.
    pub clip_norm: Option<f64>,
    /// Reject non-finite gradients instead of applying them.
    pub checked: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { kind: OptimizerKind::RmsProp, lr: 7e-4, decay: 0.99, eps: 1e-5, clip_norm: Some(40.0), checked: true }
    }
}

fn check(params_len: usize, grads: &Gradients, cfg: &OptimConfig) -> Result<(), NnError> {
    if grads.tensors.len() != params_len {
        return Err(NnError::Shape(format!("{} gradient tensors for {params_len} parameters", grads.tensors.len())));
    }
    if cfg.checked && !grads.is_finite() {
        return Err(NnError::NonFinite("gradients".into()));
    }
    Ok(())
}

fn clipped(grads: &Gradients, cfg: &OptimConfig) -> Gradients {
    let mut g = grads.clone();
    if let Some(max) = cfg.clip_norm {
        g.clip_global_norm(max);
    }
    g
}

fn update(param: &mut Param, grad: &[f64], cfg: &OptimConfig) -> Result<(), NnError> {
    if grad.len() != param.value.len() {
        return Err(NnError::Shape(format!("gradient of length {} for {:?}", grad.len(), param.value.shape())));
    }
    match cfg.kind {
        OptimizerKind::Sgd => {
            for (w, g) in param.value.data_mut().iter_mut().zip(grad) {
                *w -= cfg.lr * g;
            }
        }
        OptimizerKind::RmsProp => {
            let Param { value, accum } = param;
            for ((w, s), g) in value.data_mut().iter_mut().zip(accum.iter_mut()).zip(grad) {
                *s = cfg.decay * *s + (1.0 - cfg.decay) * g * g;
                *w -= cfg.lr * g / (*s + cfg.eps).sqrt();
            }
        }
    }
    Ok(())
}

/// Applies one optimizer step in place.
pub fn apply_gradients(params: &mut ParameterSet, grads: &Gradients, cfg: &OptimConfig) -> Result<(), NnError> {
    check(params.len(), grads, cfg)?;
    let g = clipped(grads, cfg);
    for (i, grad) in g.tensors.iter().enumerate() {
        update(params.param_mut(i), grad, cfg)?;
    }
    Ok(())
}

/// Global parameters shared between workers, locked per tensor.
///
/// Snapshots copy one tensor at a time, so a snapshot may mix versions of
/// different tensors; each tensor on its own is always consistent.
#[derive(Debug)]
pub struct SharedParams {
    template: ParameterSet,
    slots: Vec<Mutex<Param>>,
}

impl SharedParams {
    pub fn new(params: ParameterSet) -> Self {
        let slots = params.iter().map(|(_, p)| Mutex::new(p.clone())).collect();
        SharedParams { template: params, slots }
    }

    pub fn snapshot(&self) -> ParameterSet {
        let mut out = self.template.clone();
        for (i, slot) in self.slots.iter().enumerate() {
            let p = slot.lock().unwrap_or_else(|e| e.into_inner());
            *out.param_mut(i) = p.clone();
        }
        out
    }

    /// Copies current values into `local`, leaving its layout untouched.
    pub fn sync_into(&self, local: &mut ParameterSet) {
        for (i, slot) in self.slots.iter().enumerate() {
            let p = slot.lock().unwrap_or_else(|e| e.into_inner());
            local.param_mut(i).value.data_mut().copy_from_slice(p.value.data());
        }
    }

    pub fn apply(&self, grads: &Gradients, cfg: &OptimConfig) -> Result<(), NnError> {
        check(self.slots.len(), grads, cfg)?;
        let g = clipped(grads, cfg);
        for (slot, grad) in self.slots.iter().zip(&g.tensors) {
            let mut p = slot.lock().unwrap_or_else(|e| e.into_inner());
            update(&mut p, grad, cfg)?;
        }
        Ok(())
    }

    pub fn into_inner(self) -> ParameterSet {
        let mut out = self.template;
        for (i, slot) in self.slots.into_iter().enumerate() {
            *out.param_mut(i) = slot.into_inner().unwrap_or_else(|e| e.into_inner());
        }
        out
    }
}
