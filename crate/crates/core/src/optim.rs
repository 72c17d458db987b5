//! Named parameter collections and the Adam optimizer.

use crate::error::{contract_err, Result};
use crate::tensor::Tensor;

/// Ordered, named set of trainable leaves.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new trainable leaf and returns a handle to it.
    pub fn add(&mut self, name: impl Into<String>, data: Vec<f64>, shape: &[usize]) -> Tensor {
        let name = name.into();
        assert!(self.get(&name).is_none(), "duplicate parameter name {name}");
        let t = Tensor::param(data, shape);
        self.entries.push((name, t.clone()));
        t
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&self) {
        self.entries.iter().for_each(|(_, t)| t.zero_grad());
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet, lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update, in place; gradients are cleared afterwards.
pub fn adam_step(params: &ParamSet, state: &mut AdamState) -> Result<()> {
    if state.m.len() != params.len() {
        return contract_err(format!(
            "Adam state tracks {} tensors but the parameter set has {}",
            state.m.len(),
            params.len()
        ));
    }
    let grads: Vec<Vec<f64>> = params
        .iter()
        .map(|(name, t)| {
            t.grad()
                .ok_or_else(|| crate::Error::Contract(format!("parameter '{name}' has no gradient")))
        })
        .collect::<Result<_>>()?;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (i, ((_, p), g)) in params.iter().zip(&grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        p.update_data(|data| {
            for j in 0..data.len() {
                m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
                v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] -= state.lr * mhat / (vhat.sqrt() + state.eps);
            }
        });
        p.zero_grad();
    }
    Ok(())
}
