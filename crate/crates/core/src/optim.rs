//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments for every parameter of one store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn for_store(store: &ParamStore<T>) -> Self {
        let zeros: Vec<_> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self { first: zeros.clone(), second: zeros, step: 0 }
    }

    fn check(&self, store: &ParamStore<T>) -> Result<()> {
        if self.first.len() != store.len() || self.second.len() != store.len() {
            return Err(Error::Shape(format!(
                "adam state holds {} moments for {} parameters",
                self.first.len(),
                store.len()
            )));
        }
        for ((p, m), v) in store.iter().zip(&self.first).zip(&self.second) {
            if p.value.shape() != m.shape() || p.value.shape() != v.shape() {
                return Err(Error::Shape(format!("adam moments for {} have the wrong shape", p.name)));
            }
        }
        Ok(())
    }
}

/// One Adam update over every trainable parameter of `store`, using the
/// gradients accumulated in their `grad` slots.
///
/// A parameter whose gradient is entirely zero keeps its value; only its
/// moments decay.
pub fn adam_step<T: Real>(
    store: &mut ParamStore<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    state.check(store)?;
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::c(cfg.beta1), T::c(cfg.beta2));
    let c1 = T::one() - T::c(cfg.beta1.powi(t));
    let c2 = T::one() - T::c(cfg.beta2.powi(t));
    let (lr, eps) = (T::c(lr), T::c(cfg.eps));
    for ((p, m), v) in store.iter_mut().zip(&mut state.first).zip(&mut state.second) {
        if !p.trainable {
            continue;
        }
        let any_grad = p.grad.data().iter().any(|&g| g != T::zero());
        let (md, vd) = (m.data_mut(), v.data_mut());
        for (i, &g) in p.grad.data().iter().enumerate() {
            md[i] = b1 * md[i] + (T::one() - b1) * g;
            vd[i] = b2 * vd[i] + (T::one() - b2) * g * g;
        }
        if !any_grad {
            continue;
        }
        for (i, x) in p.value.data_mut().iter_mut().enumerate() {
            let mhat = md[i] / c1;
            let vhat = vd[i] / c2;
            *x -= lr * mhat / (vhat.sqrt() + eps);
        }
        if !p.value.is_finite() {
            return Err(Error::NonFinite(format!("adam update of {}", p.name)));
        }
    }
    Ok(())
}
