//! AdamW with decoupled weight decay and a learning rate per parameter group.

use crate::autodiff::{ParamGroup, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr_backbone: f64,
    pub lr_transformer: f64,
    pub lr_head: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Backbone => self.lr_backbone,
            ParamGroup::Transformer => self.lr_transformer,
            ParamGroup::Head => self.lr_head,
        }
    }
}

/// First and second moments per parameter (in store order) and the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// Checks moment count and shapes against `store`.
    pub fn matches(&self, store: &ParamStore) -> bool {
        self.m.len() == store.len()
            && self.v.len() == store.len()
            && store
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(p, (m, v))| m.shape() == p.value.shape() && v.shape() == p.value.shape())
    }
}

/// One update of every parameter:
/// `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`,
/// `theta <- theta - lr (m_hat / (sqrt(v_hat) + eps)) - lr wd theta`.
pub fn adamw_step(store: &mut ParamStore, state: &mut OptimizerState, cfg: &AdamWConfig) -> Result<()> {
    if !state.matches(store) {
        return Err(Error::Other("optimizer state does not match the parameter set".into()));
    }
    if let Some(p) = store.iter().find(|p| p.grad.is_none()) {
        return Err(Error::MissingGradient(p.name.clone()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in store.iter_mut().enumerate() {
        let lr = cfg.lr(p.group);
        let g = p.grad.as_ref().expect("checked above").data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let theta = p.value.data_mut();
        for k in 0..theta.len() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            let decay = lr * cfg.weight_decay * theta[k];
            theta[k] = theta[k] - lr * (m_hat / (v_hat.sqrt() + cfg.eps)) - decay;
        }
    }
    Ok(())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let sq: f64 = store
        .iter()
        .filter_map(|p| p.grad.as_ref())
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for p in store.iter_mut() {
            if let Some(g) = p.grad.as_mut() {
                for x in g.data_mut() {
                    *x *= s;
                }
            }
        }
    }
    norm
}
