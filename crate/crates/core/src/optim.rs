//! SGD with momentum and Adam over a [`ParamState`].

use serde::{Deserialize, Serialize};

use crate::backbone::ParamState;
use crate::error::Result;

/// `v ← μ v + g; θ ← θ − lr · v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: ParamState,
}

impl Sgd {
    pub fn new(params: &ParamState, lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ParamState, grads: &ParamState) -> Result<()> {
        for (name, p) in params.iter_mut() {
            let g = grads.get(name)?;
            let v = self.velocity.get_mut(name)?;
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: ParamState,
    pub v: ParamState,
}

impl Adam {
    pub fn new(params: &ParamState, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// Updates every tensor of `params` that has a gradient in `grads`.
    pub fn step(&mut self, params: &mut ParamState, grads: &ParamState) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let Ok(g) = grads.get(name) else { continue };
            let m = self.m.get_mut(name)?;
            let v = self.v.get_mut(name)?;
            for (((pv, mv), vv), gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                *pv -= self.lr * (*mv / c1) / ((*vv / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
