use super::Tensor;
use crate::error::{Error, Result};

/// Adam moments and hyperparameters for one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

/// One bias-corrected Adam update over every parameter that requires grad; grads are zeroed afterwards.
pub fn adam_step<'a>(params: impl IntoIterator<Item = &'a mut Tensor>, state: &mut AdamState) -> Result<()> {
    let mut params: Vec<&mut Tensor> = params.into_iter().filter(|p| p.requires_grad()).collect();
    if let Some(p) = params.iter().find(|p| p.grad().is_none()) {
        return Err(Error::Contract(format!(
            "adam_step: parameter of shape {:?} has no gradient",
            p.shape()
        )));
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        state.v = state.m.clone();
    }
    let mirrors = state.m.len() == params.len() && state.m.iter().zip(&params).all(|(m, p)| m.len() == p.numel());
    if !mirrors {
        return Err(Error::Contract("adam_step: moment buffers do not mirror the parameter set".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let g = p.grad().expect("checked above").to_vec();
        let data = p.data_mut();
        for i in 0..data.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            data[i] -= state.lr * mhat / (vhat.sqrt() + state.eps);
        }
        p.zero_grad();
    }
    Ok(())
}
