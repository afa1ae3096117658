use crate::{Gradients, ParamId, ParamStore, Scalar, Tensor};

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam over a fixed group of parameters.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    params: Vec<ParamId>,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    steps: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, params: Vec<ParamId>, config: AdamConfig) -> Self {
        let m = params.iter().map(|&id| Tensor::zeros(store.get(id).shape())).collect::<Vec<_>>();
        let v = m.clone();
        Self { config, params, m, v, steps: 0 }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// First and second moment buffers, aligned with [`Adam::params`].
    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// Restores state saved from [`Adam::moments`] and [`Adam::steps`].
    pub fn restore(&mut self, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>, steps: u64) {
        assert_eq!(m.len(), self.params.len());
        assert_eq!(v.len(), self.params.len());
        self.m = m;
        self.v = v;
        self.steps = steps;
    }

    /// Applies one update. Parameters without a gradient are left untouched
    /// but still share the step counter.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) {
        self.steps += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.steps as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.steps as i32));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        for (slot, &id) in self.params.iter().enumerate() {
            let Some(g) = grads.param(id) else { continue };
            let m = self.m[slot].data_mut();
            let v = self.v[slot].data_mut();
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}
