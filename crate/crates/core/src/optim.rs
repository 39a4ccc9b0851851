//! AdamW with decoupled weight decay and global gradient-norm clipping.

use crate::autodiff::Array;
use crate::params::ParamSet;
use crate::{Error, Result};

pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 gradient-norm ceiling; gradients are rescaled when the norm
    /// across all parameters exceeds it.
    pub grad_clip: f64,
    step: u64,
    m: Vec<Array>,
    v: Vec<Array>,
}

#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    /// Pre-clip global gradient norm.
    pub grad_norm: f64,
    pub clipped: bool,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, grad_clip: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            grad_clip,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update. `grads` must align with `params` registration order;
    /// `None` entries (parameters absent from the graph) are skipped.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Array>]) -> Result<StepStats> {
        if grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer got {} grads for {} params",
                grads.len(),
                params.len()
            )));
        }
        if self.m.is_empty() {
            for (_, value) in params.iter() {
                self.m.push(Array::zeros(value.shape()));
                self.v.push(Array::zeros(value.shape()));
            }
        }

        let mut sq = 0.0;
        for g in grads.iter().flatten() {
            if !g.all_finite() {
                return Err(Error::NonFinite("gradient".into()));
            }
            sq += g.sq_norm();
        }
        let norm = sq.sqrt();
        let clipped = self.grad_clip > 0.0 && norm > self.grad_clip;
        let scale = if clipped { self.grad_clip / norm } else { 1.0 };

        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);

        for i in 0..params.len() {
            let Some(g) = &grads[i] else { continue };
            let id = crate::params::PId(i);
            let mut value = (**params.get(id)).clone();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for (((p, gi), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gs = gi * scale;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gs;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gs * gs;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                // decoupled decay: shrink weights directly, not through the moments
                *p -= self.lr * self.weight_decay * *p;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            params.set(id, value)?;
        }
        Ok(StepStats {
            grad_norm: norm,
            clipped,
        })
    }
}
