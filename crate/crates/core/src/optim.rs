//! Adam with bias correction, and step learning-rate decay.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{DkghError, Result};
use crate::nn::Module;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments<T> {
    first: Vec<T>,
    second: Vec<T>,
    step: u64,
}

/// Per-parameter moment buffers, in the module's visiting order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    moments: Vec<Moments<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new<M: Module<T>>(model: &M, config: AdamConfig) -> Self {
        let mut moments = Vec::new();
        model.visit("", &mut |_, t| {
            moments.push(Moments {
                first: vec![T::zero(); t.numel()],
                second: vec![T::zero(); t.numel()],
                step: 0,
            })
        });
        AdamState { config, moments }
    }

    /// Number of updates applied to parameter `i`.
    pub fn steps(&self, i: usize) -> u64 {
        self.moments[i].step
    }

    /// Applies one update to every parameter that holds a gradient.
    ///
    /// Parameters without a gradient (experts no sample selected) keep their
    /// values and moments. A non-finite gradient aborts before anything is
    /// modified.
    pub fn step<M: Module<T>>(&mut self, model: &mut M, lr: f64) -> Result<()> {
        let mut bad: Option<String> = None;
        let mut count = 0;
        model.visit("", &mut |name, t| {
            count += 1;
            if bad.is_none() {
                if let Some(g) = t.grad() {
                    if g.iter().any(|v| !v.is_finite()) {
                        bad = Some(name);
                    }
                }
            }
        });
        if let Some(name) = bad {
            return Err(DkghError::Validation(alloc::format!(
                "non-finite gradient in parameter `{name}`"
            )));
        }
        if count != self.moments.len() {
            return Err(DkghError::Contract("optimizer state does not match the model".into()));
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        let (b1, b2, eps) = (T::lit(beta1), T::lit(beta2), T::lit(eps));
        let one = T::one();
        let mut i = 0;
        let moments = &mut self.moments;
        model.visit_mut("", &mut |_, t| {
            let m = &mut moments[i];
            i += 1;
            let (data, grad) = t.data_and_grad();
            let Some(grad) = grad else {
                return;
            };
            m.step += 1;
            let c1 = one - T::lit(Float::powi(beta1, m.step as i32));
            let c2 = one - T::lit(Float::powi(beta2, m.step as i32));
            let lr = T::lit(lr);
            for (((p, &g), mf), ms) in data.iter_mut().zip(grad).zip(&mut m.first).zip(&mut m.second) {
                *mf = b1 * *mf + (one - b1) * g;
                *ms = b2 * *ms + (one - b2) * g * g;
                let m_hat = *mf / c1;
                let v_hat = *ms / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
        Ok(())
    }
}

/// One Adam update over `model` (see [`AdamState::step`]).
pub fn adam_step<T: Real, M: Module<T>>(state: &mut AdamState<T>, model: &mut M, lr: f64) -> Result<()> {
    state.step(model, lr)
}

/// `base_lr · gamma^⌊epoch / step_size⌋`.
pub fn step_lr(epoch: usize, base_lr: f64, step_size: usize, gamma: f64) -> f64 {
    let drops = epoch / step_size.max(1);
    base_lr * Float::powi(gamma, drops as i32)
}
