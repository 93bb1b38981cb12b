//! Adam and the step-decay learning-rate schedule.

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// `lr0 · factor^floor(epoch / every)`.
pub fn lr_at(epoch: usize, lr0: f64, factor: f64, every: usize) -> f64 {
    lr0 * factor.powi((epoch / every.max(1)) as i32)
}

/// First and second moments for every parameter, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn check_matches(&self, params: &ParamSet) -> Result<()> {
        let ok = self.m.len() == params.len()
            && self.v.len() == params.len()
            && params
                .tensors()
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(p, (m, v))| p.shape() == m.shape() && p.shape() == v.shape());
        if !ok {
            return Err(Error::Mismatch("optimizer state does not match the parameters".into()));
        }
        Ok(())
    }

    /// Rounds the moments to f32, the precision they are stored at.
    pub fn quantize_f32(&mut self) {
        for t in self.m.iter_mut().chain(&mut self.v) {
            for x in t.data_mut() {
                *x = *x as f32 as f64;
            }
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut ParamSet, grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Mismatch(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    state.check_matches(params)?;
    for (p, g) in params.tensors().iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (i, g) in grads.iter().enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let p = params.tensors_mut()[i].data_mut();
        for j in 0..p.len() {
            let gj = g.data()[j];
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            p[j] -= lr * mhat / (vhat.sqrt() + EPSILON);
        }
    }
    Ok(())
}
