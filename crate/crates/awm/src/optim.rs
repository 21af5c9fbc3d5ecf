//! SGD with Nesterov momentum and coupled weight decay.
//!
//! Per step, with decayed gradient d = g + wd*p:
//!   v <- mu*v + d
//!   p <- p - lr*(d + mu*v)
//!
//! `step` only touches parameters accepted by the group filter; everything
//! else keeps its value, velocity, and (cleared) gradient untouched, which
//! is what makes the alternating-freeze schedule bit-exact on the frozen
//! side.

use crate::autodiff::{Param, ParamGroup};
use crate::error::{Error, Result};

pub struct SgdNesterov {
    params: Vec<Param>,
    velocities: Vec<Vec<f64>>,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdNesterov {
    pub fn new(params: Vec<Param>, momentum: f64, weight_decay: f64) -> SgdNesterov {
        let velocities = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        SgdNesterov { params, velocities, momentum, weight_decay }
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    /// Apply one update to every parameter passing `active`, then clear all
    /// gradients (including those of inactive parameters, which would
    /// otherwise leak into the next step's accumulation).
    pub fn step(&mut self, lr: f64, active: impl Fn(ParamGroup) -> bool) -> Result<()> {
        let mu = self.momentum;
        let wd = self.weight_decay;
        for (p, v) in self.params.iter().zip(self.velocities.iter_mut()) {
            if !active(p.group()) {
                p.zero_grad();
                continue;
            }
            let Some(g) = p.grad() else { continue };
            if !g.all_finite() {
                return Err(Error::Numerical(format!("non-finite gradient for {}", p.name())));
            }
            let gd = g.data();
            p.update(|value| {
                let vd = value.data_mut();
                for i in 0..vd.len() {
                    let d = gd[i] + wd * vd[i];
                    v[i] = mu * v[i] + d;
                    vd[i] -= lr * (d + mu * v[i]);
                }
            });
            p.zero_grad();
        }
        Ok(())
    }

    /// Flat velocity state in parameter order, for checkpoints.
    pub fn velocities(&self) -> &[Vec<f64>] {
        &self.velocities
    }

    pub fn set_velocities(&mut self, v: Vec<Vec<f64>>) -> Result<()> {
        if v.len() != self.params.len()
            || v.iter().zip(&self.params).any(|(a, p)| a.len() != p.numel())
        {
            return Err(Error::Checkpoint("velocity state does not match parameter list".into()));
        }
        self.velocities = v;
        Ok(())
    }
}
