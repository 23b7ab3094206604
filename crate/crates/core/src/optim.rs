use std::collections::BTreeMap;

use crate::autodiff::{Gradients, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Plain gradient descent on every parameter that has a gradient.
pub fn sgd_step(store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
    for (name, g) in grads.params() {
        let p = store
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("gradient for unknown parameter `{name}`")))?;
        for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads.params() {
            let p = store
                .get_mut(name)
                .ok_or_else(|| Error::State(format!("gradient for unknown parameter `{name}`")))?;
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((w, &d), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * d;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * d * d;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Moment buffers and the step counter as named tensors, for checkpoints.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![(
            "optim.adam.step".to_string(),
            Tensor::scalar(self.step as f64),
        )];
        for (name, (m, v)) in &self.moments {
            out.push((
                format!("optim.adam.m.{name}"),
                Tensor::from_parts(vec![m.len()], m.clone()),
            ));
            out.push((
                format!("optim.adam.v.{name}"),
                Tensor::from_parts(vec![v.len()], v.clone()),
            ));
        }
        out
    }

    pub fn restore(lr: f64, tensors: &[(String, Tensor)]) -> Result<Self> {
        let mut adam = Self::new(lr);
        for (name, t) in tensors {
            if name == "optim.adam.step" {
                adam.step = t.item()? as u64;
            } else if let Some(p) = name.strip_prefix("optim.adam.m.") {
                adam.moments.entry(p.to_string()).or_default().0 = t.data().to_vec();
            } else if let Some(p) = name.strip_prefix("optim.adam.v.") {
                adam.moments.entry(p.to_string()).or_default().1 = t.data().to_vec();
            }
        }
        Ok(adam)
    }
}

/// Either optimizer behind one interface.
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam(Adam),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(lr)),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        match self {
            Optimizer::Sgd { lr } => sgd_step(store, grads, *lr),
            Optimizer::Adam(adam) => adam.step(store, grads),
        }
    }

    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        match self {
            Optimizer::Sgd { .. } => Vec::new(),
            Optimizer::Adam(adam) => adam.state_tensors(),
        }
    }
}
