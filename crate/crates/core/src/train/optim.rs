//! AdamW with bias correction and decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Params;
use crate::tensor::{Mat, Scalar};

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: Vec<Mat<T>>,
    pub v: Vec<Mat<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &Params<T>) -> Self {
        let zeros = || {
            params
                .arrays()
                .iter()
                .map(|a| Mat::zeros(a.rows(), a.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One update. Frozen arrays are left alone. Non-finite gradients reject
/// the whole step before anything is modified.
pub fn adamw_step<T: Scalar>(
    params: &mut Params<T>,
    grads: &[Mat<T>],
    state: &mut OptimizerState<T>,
    hp: &AdamW,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} gradients / {} moments for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for ((s, a), g) in params.specs().iter().zip(params.arrays()).zip(grads) {
        if a.shape() != g.shape() {
            return Err(Error::ShapeMismatch(format!(
                "gradient of `{}` is {:?}, parameter is {:?}",
                s.name,
                g.shape(),
                a.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(s.name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    let lr = hp.learning_rate;
    let trainable: Vec<bool> = params.specs().iter().map(|s| s.trainable()).collect();
    for (i, p) in params.arrays_mut().iter_mut().enumerate() {
        if !trainable[i] {
            continue;
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, (theta, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            let g = g.f64();
            let mk = hp.beta1 * m[k].f64() + (1.0 - hp.beta1) * g;
            let vk = hp.beta2 * v[k].f64() + (1.0 - hp.beta2) * g * g;
            m[k] = T::of(mk);
            v[k] = T::of(vk);
            let th = theta.f64();
            let update = (mk / bc1) / ((vk / bc2).sqrt() + ADAM_EPS);
            *theta = T::of(th - lr * update - lr * hp.weight_decay * th);
        }
    }
    Ok(())
}
