//! Bias-corrected Adam.

use crate::error::{Result, TensorError};
use crate::param::ParamSet;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates, one entry per trainable parameter in
/// [`ParamSet`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub names: Vec<String>,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
    pub config: AdamConfig,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>, config: AdamConfig) -> Self {
        let trainable: Vec<_> = params.trainable().collect();
        AdamState {
            names: trainable.iter().map(|p| p.name.clone()).collect(),
            m: trainable.iter().map(|p| vec![T::zero(); p.tensor.shape().numel()]).collect(),
            v: trainable.iter().map(|p| vec![T::zero(); p.tensor.shape().numel()]).collect(),
            step: 0,
            config,
        }
    }

    fn check(&self, params: &ParamSet<T>) -> Result<()> {
        let trainable: Vec<_> = params.trainable().collect();
        if trainable.len() != self.names.len() {
            return Err(TensorError::OptimizerState(format!(
                "{} moment slots for {} trainable parameters",
                self.names.len(),
                trainable.len()
            )));
        }
        for (i, p) in trainable.iter().enumerate() {
            let n = p.tensor.shape().numel();
            if p.name != self.names[i] || self.m[i].len() != n || self.v[i].len() != n {
                return Err(TensorError::OptimizerState(format!("slot {i} does not match `{}`", p.name)));
            }
        }
        Ok(())
    }
}

/// One Adam update of every trainable parameter from its accumulated gradient.
pub fn adam_step<T: Scalar>(params: &mut ParamSet<T>, state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(TensorError::Argument { op: "adam_step", detail: format!("learning rate must be positive, got {lr}") });
    }
    state.check(params)?;
    if let Some(p) = params.trainable().find(|p| p.tensor.grad().is_none()) {
        return Err(TensorError::MissingGrad(p.name.clone()));
    }

    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);

    for (slot, p) in params.iter_mut().filter(|p| p.trainable).enumerate() {
        let grad = p.tensor.grad().expect("checked above").to_vec();
        let (m, v) = (&mut state.m[slot], &mut state.v[slot]);
        for (((theta, g), m), v) in p.tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = g.as_f64();
            let mi = beta1 * m.as_f64() + (1.0 - beta1) * g;
            let vi = beta2 * v.as_f64() + (1.0 - beta2) * g * g;
            *m = T::lit(mi);
            *v = T::lit(vi);
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
            *theta = T::lit(theta.as_f64() - update);
        }
    }
    if !params.all_finite() {
        return Err(TensorError::NonFinite { op: "adam_step" });
    }
    Ok(())
}
