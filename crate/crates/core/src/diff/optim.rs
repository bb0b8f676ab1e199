use serde::{Deserialize, Serialize};

use super::{DiffArray, Scalar};
use crate::error::{Error, Result};

/// Which part of the network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    FeatureExtractor,
    Discriminator,
    Classifier,
}

/// Named, ordered parameters sharing one role.
#[derive(Debug, Clone)]
pub struct ParamGroup<T: Scalar> {
    pub name: String,
    pub role: Role,
    entries: Vec<(String, DiffArray<T>)>,
}

impl<T: Scalar> ParamGroup<T> {
    pub fn new(name: impl Into<String>, role: Role) -> Self {
        Self {
            name: name.into(),
            role,
            entries: Vec::new(),
        }
    }

    /// Registers a parameter; names must be unique within the group.
    pub fn push(&mut self, name: impl Into<String>, param: DiffArray<T>) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::invalid("param_group", format!("duplicate parameter `{name}`")));
        }
        if !param.requires_grad() {
            return Err(Error::invalid("param_group", format!("`{name}` is not trainable")));
        }
        self.entries.push((name, param));
        Ok(())
    }

    pub fn entries(&self) -> &[(String, DiffArray<T>)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&DiffArray<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, p)| p.len()).sum()
    }

    pub fn zero_grad(&self) {
        self.entries.iter().for_each(|(_, p)| p.zero_grad());
    }
}

/// Adam moments for one [`ParamGroup`].
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    /// β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn new(group: &ParamGroup<T>, lr: f64) -> Self {
        let zeros = || {
            group
                .entries()
                .iter()
                .map(|(_, p)| vec![T::zero(); p.len()])
                .collect::<Vec<_>>()
        };
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update of every parameter in `group`.
/// Gradients are left in place.
pub fn adam_step<T: Scalar>(group: &ParamGroup<T>, state: &mut AdamState<T>) -> Result<()> {
    if !(state.lr > 0.0) {
        return Err(Error::invalid("adam_step", format!("learning rate {} must be positive", state.lr)));
    }
    if state.m.len() != group.len() {
        return Err(Error::invalid("adam_step", "state does not match the parameter group"));
    }
    let grads = group
        .entries()
        .iter()
        .map(|(name, p)| p.grad().ok_or_else(|| Error::MissingGradient(name.clone())))
        .collect::<Result<Vec<_>>>()?;

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(state.beta1), T::lit(state.beta2));
    let one = T::one();
    let bc1 = one - b1.powi(t);
    let bc2 = one - b2.powi(t);
    let lr = T::lit(state.lr);
    let eps = T::lit(state.eps);

    for (((_, p), g), (m, v)) in group
        .entries()
        .iter()
        .zip(&grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let mut w = p.data_mut();
        for i in 0..w.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            w[i] = w[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
