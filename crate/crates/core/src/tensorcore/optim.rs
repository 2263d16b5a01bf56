use std::collections::BTreeMap;

use super::params::{ParamRef, ParamStore};
use crate::error::{Error, Result};
use crate::pruner::MaskSet;

/// Momentum SGD: `v ← μ·v + g`, `w ← w − lr·v`. Gradients are read from each
/// tensor's grad buffer; tensors without one are left untouched.
#[derive(Clone, Debug)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: BTreeMap<ParamRef, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    /// One update. Masked positions have their gradient and velocity zeroed
    /// and are held at exactly 0.0.
    pub fn step(&mut self, params: &mut ParamStore, masks: &MaskSet) -> Result<()> {
        for (r, tensor) in params.iter_mut() {
            let Some(grad) = tensor.grad() else {
                continue;
            };
            let mut grad = grad.to_vec();
            let mask = masks.get(r);
            if let Some(m) = mask {
                if m.len() != grad.len() {
                    return Err(Error::usage(format!(
                        "mask for {r} has {} entries, tensor has {}",
                        m.len(),
                        grad.len()
                    )));
                }
                for (g, &keep) in grad.iter_mut().zip(m) {
                    if !keep {
                        *g = 0.0;
                    }
                }
            }
            let v = self
                .velocity
                .entry(r.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let lr = self.lr;
            let mu = self.momentum;
            for ((w, vi), g) in tensor.data_mut().iter_mut().zip(v.iter_mut()).zip(&grad) {
                *vi = mu * *vi + g;
                *w -= lr * *vi;
            }
            if let Some(m) = mask {
                for ((w, vi), &keep) in tensor.data_mut().iter_mut().zip(v.iter_mut()).zip(m) {
                    if !keep {
                        *w = 0.0;
                        *vi = 0.0;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Single stateless step (fresh velocity), for callers that do not keep an
/// optimizer around.
pub fn sgd_step(params: &mut ParamStore, lr: f64, momentum: f64, masks: &MaskSet) -> Result<()> {
    Sgd::new(lr, momentum)?.step(params, masks)
}
