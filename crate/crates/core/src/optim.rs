//! AdamW with decoupled weight decay and two learning-rate groups.
//!
//! The encoder trains an order of magnitude slower than the decoder, so each
//! parameter is routed to a group by name prefix at construction. Decay is
//! applied multiplicatively before the Adam update (never through the
//! moments), and parameters that saw no gradient this step are left alone
//! entirely: no decay, no moment update.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Encoder,
    Decoder,
}

pub fn group_of(name: &str) -> Group {
    if name.starts_with("encoder.") {
        Group::Encoder
    } else {
        Group::Decoder
    }
}

struct Slot<T: Scalar> {
    name: String,
    param: Tensor<T>,
    group: Group,
    m: Vec<T>,
    v: Vec<T>,
}

pub struct AdamW<T: Scalar> {
    slots: Vec<Slot<T>>,
    pub weight_decay: f64,
    step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(named_params: Vec<(String, Tensor<T>)>, weight_decay: f64) -> Self {
        let slots = named_params
            .into_iter()
            .map(|(name, param)| {
                let n = param.numel();
                Slot {
                    group: group_of(&name),
                    name,
                    param,
                    m: vec![T::zero(); n],
                    v: vec![T::zero(); n],
                }
            })
            .collect();
        AdamW { slots, weight_decay, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn zero_grad(&self) {
        for s in &self.slots {
            s.param.zero_grad();
        }
    }

    /// One update over every parameter that carries a gradient.
    ///
    /// Validates all gradients first so a NaN aborts before any mutation.
    pub fn step(&mut self, lr_encoder: f64, lr_decoder: f64) -> Result<()> {
        let grads: Vec<Option<Vec<T>>> = self.slots.iter().map(|s| s.param.grad()).collect();
        for (s, g) in self.slots.iter().zip(&grads) {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::domain(
                        "adamw",
                        format!("non-finite gradient in {}", s.name),
                    ));
                }
            }
        }

        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        for (s, g) in self.slots.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            let lr = match s.group {
                Group::Encoder => lr_encoder,
                Group::Decoder => lr_decoder,
            };
            let decay = T::from_f64c(1.0 - lr * self.weight_decay);
            let b1 = T::from_f64c(BETA1);
            let b2 = T::from_f64c(BETA2);
            let nb1 = T::from_f64c(1.0 - BETA1);
            let nb2 = T::from_f64c(1.0 - BETA2);
            let lr_t = T::from_f64c(lr);
            let inv_bc1 = T::from_f64c(1.0 / bc1);
            let inv_bc2 = T::from_f64c(1.0 / bc2);
            let eps = T::from_f64c(EPS);
            let mut p = s.param.data_mut();
            for i in 0..p.len() {
                s.m[i] = b1 * s.m[i] + nb1 * g[i];
                s.v[i] = b2 * s.v[i] + nb2 * g[i] * g[i];
                let mhat = s.m[i] * inv_bc1;
                let vhat = s.v[i] * inv_bc2;
                p[i] = p[i] * decay - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moment buffers for persistence, keyed by parameter name.
    pub fn visit_state(&self, f: &mut dyn FnMut(&str, &[T], &[T])) {
        for s in &self.slots {
            f(&s.name, &s.m, &s.v);
        }
    }

    /// Restores moment buffers and the step counter from a checkpoint.
    pub fn load_state(
        &mut self,
        step: u64,
        mut lookup: impl FnMut(&str) -> Option<(Vec<T>, Vec<T>)>,
    ) -> Result<()> {
        for s in &mut self.slots {
            let (m, v) = lookup(&s.name)
                .ok_or_else(|| Error::Integrity(format!("missing optimizer state for {}", s.name)))?;
            if m.len() != s.m.len() || v.len() != s.v.len() {
                return Err(Error::Integrity(format!("optimizer state size mismatch for {}", s.name)));
            }
            s.m = m;
            s.v = v;
        }
        self.step = step;
        Ok(())
    }
}
