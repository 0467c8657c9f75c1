use crate::tensor::invalid;
use crate::TensorError;

fn check(op: &'static str, params: usize, grads: usize) -> Result<(), TensorError> {
    if params != grads {
        return Err(invalid(op, format!("{params} parameters but {grads} gradients")));
    }
    Ok(())
}

/// Plain gradient descent: `w -= lr * g`.
pub fn sgd_step(params: &mut [f32], grads: &[f32], lr: f32) -> Result<(), TensorError> {
    check("sgd_step", params.len(), grads.len())?;
    for (w, g) in params.iter_mut().zip(grads) {
        *w -= lr * g;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u32,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [f32], grads: &[f32], state: &mut AdamState, lr: f32, cfg: AdamConfig) -> Result<(), TensorError> {
    check("adam_step", params.len(), grads.len())?;
    check("adam_step", params.len(), state.m.len())?;
    state.t += 1;
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32) as f32;
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32) as f32;
    let eps = cfg.eps as f32;
    for (((w, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
    }
    Ok(())
}
