use crate::error::{Error, Result};

use super::{ParamStore, Tensor};

fn missing(store: &ParamStore) -> Option<&str> {
    store.ids().find(|&id| store.grad(id).is_none()).map(|id| store.name(id))
}

/// Plain gradient descent, `θ ← θ − lr·∇θ`.
pub fn sgd_step(store: &mut ParamStore, lr: f64) -> Result<()> {
    if let Some(name) = missing(store) {
        return Err(Error::contract(format!("no gradient for parameter `{name}`")));
    }
    for i in 0..store.len() {
        let g = store.grads[i].as_ref().expect("checked above").clone();
        store.values[i].axpy(-lr, &g);
    }
    Ok(())
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self::with_params(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_params(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some(name) = missing(store) {
            return Err(Error::contract(format!("no gradient for parameter `{name}`")));
        }
        if self.m.len() != store.len() {
            self.m = store.values.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..store.len() {
            let g = store.grads[i].as_ref().expect("checked above");
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let theta = store.values[i].data_mut();
            for k in 0..theta.len() {
                let gk = g.data()[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                theta[k] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
