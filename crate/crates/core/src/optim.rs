//! Adam with bias correction.

use crate::model::ParamStore;
use crate::tensor::{Element, Gradients, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; 0 disables it.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<E: Element = f32> {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Tensor<E>>,
    v: Vec<Tensor<E>>,
}

impl<E: Element> Adam<E> {
    pub fn new(cfg: AdamConfig, params: &ParamStore<E>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<E>], &[Tensor<E>]) {
        (&self.m, &self.v)
    }

    /// Restores state saved from [`Adam::step_count`] and [`Adam::moments`].
    pub fn restore(&mut self, step: u64, m: Vec<Tensor<E>>, v: Vec<Tensor<E>>) -> Result<()> {
        let ok = |xs: &[Tensor<E>]| {
            xs.len() == self.m.len() && xs.iter().zip(&self.m).all(|(a, b)| a.shape() == b.shape())
        };
        if !ok(&m) || !ok(&v) {
            return Err(Error::Param("optimizer state does not match parameters".into()));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// Applies one update. Parameters without a gradient are left alone
    /// but still count toward the step.
    pub fn update(&mut self, params: &mut ParamStore<E>, grads: &Gradients<E>) {
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (E::from_f64(c.beta1), E::from_f64(c.beta2));
        let (ob1, ob2) = (E::from_f64(1.0 - c.beta1), E::from_f64(1.0 - c.beta2));
        let lr = E::from_f64(c.lr);
        let (ibc1, ibc2) = (E::from_f64(1.0 / bc1), E::from_f64(1.0 / bc2));
        let (eps, wd) = (E::from_f64(c.eps), E::from_f64(c.weight_decay * c.lr));
        for (i, g) in grads.params() {
            let p = params.get_mut(i).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
                let mh = *m * ibc1;
                let vh = *v * ibc2;
                *p = *p - lr * mh / (vh.sqrt() + eps) - wd * *p;
            }
        }
    }
}
