use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::param::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// `value ← value − lr·(grad + weight_decay·value)`
pub fn sgd_step(store: &mut ParamStore, ids: &[ParamId], lr: f64, weight_decay: f64) -> Result<()> {
    check_lr(lr)?;
    for &id in ids {
        let grad = store.grad(id).clone();
        let value = store.value_mut(id);
        for (v, g) in value.data_mut().iter_mut().zip(grad.data()) {
            *v -= lr * (g + weight_decay * *v);
        }
    }
    Ok(())
}

fn check_lr(lr: f64) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// First and second moment estimates per parameter, plus the step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    step: u64,
    moments: HashMap<ParamId, (Tensor, Tensor)>,
}

impl AdamState {
    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// One Adam update with L2 weight decay folded into the gradient.
pub fn adam_step(store: &mut ParamStore, ids: &[ParamId], cfg: &AdamConfig, state: &mut AdamState) -> Result<()> {
    check_lr(cfg.lr)?;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for &id in ids {
        let grad = store.grad(id).clone();
        let (rows, cols) = grad.shape();
        let (m, v) = state
            .moments
            .entry(id)
            .or_insert_with(|| (Tensor::zeros(rows, cols), Tensor::zeros(rows, cols)));
        let value = store.value_mut(id);
        for (((p, &g), mi), vi) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let g = g + cfg.weight_decay * *p;
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Either optimizer behind one interface, bound to a parameter group.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub config: AdamConfig,
    pub ids: Vec<ParamId>,
    state: AdamState,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, ids: Vec<ParamId>, lr: f64, weight_decay: f64) -> Result<Self> {
        check_lr(lr)?;
        Ok(Optimizer {
            kind,
            config: AdamConfig::new(lr, weight_decay),
            ids,
            state: AdamState::default(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        match self.kind {
            OptimizerKind::Sgd => sgd_step(store, &self.ids, self.config.lr, self.config.weight_decay),
            OptimizerKind::Adam => adam_step(store, &self.ids, &self.config, &mut self.state),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(value: f64, grad: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(value));
        s.grad_mut(id).data_mut()[0] = grad;
        (s, id)
    }

    #[test]
    fn sgd_rule() {
        let (mut s, id) = one(1.0, 0.5);
        sgd_step(&mut s, &[id], 0.1, 0.0).unwrap();
        assert!((s.value(id).data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn sgd_weight_decay() {
        let (mut s, id) = one(1.0, 0.0);
        sgd_step(&mut s, &[id], 0.1, 5e-4).unwrap();
        assert!((s.value(id).data()[0] - 0.99995).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        for g in [1e-3, 0.5, 40.0, -7.0] {
            let (mut s, id) = one(2.0, g);
            let mut st = AdamState::default();
            adam_step(&mut s, &[id], &AdamConfig::new(0.01, 0.0), &mut st).unwrap();
            let delta = (s.value(id).data()[0] - 2.0).abs();
            assert!((delta - 0.01).abs() < 1e-6, "g={g} delta={delta}");
            assert_eq!(st.steps(), 1);
        }
    }

    #[test]
    fn non_positive_lr_rejected() {
        let (mut s, id) = one(1.0, 1.0);
        assert!(matches!(sgd_step(&mut s, &[id], 0.0, 0.0), Err(Error::Config(_))));
        assert!(Optimizer::new(OptimizerKind::Adam, vec![id], -1.0, 0.0).is_err());
    }
}
