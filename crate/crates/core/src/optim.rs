//! Adam over a [`ParamStore`].

use fcf_tensor::{Scalar, Tensor};

use crate::config::TrainConfig;
use crate::nn::{ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub steps: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, c: &TrainConfig) -> Self {
        let zeros: Vec<Tensor<T>> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Self {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            steps: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected update. Parameters without a gradient keep their
    /// values and moments.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (id, g) in grads {
            let i = id.index();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = store.get_mut(*id);
            assert_eq!(g.shape(), p.shape(), "gradient shape for parameter {i}");
            for (((pv, mv), vv), &gv) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                let gf = gv.to_f64_lossy();
                let mf = b1 * mv.to_f64_lossy() + (1.0 - b1) * gf;
                let vf = b2 * vv.to_f64_lossy() + (1.0 - b2) * gf * gf;
                *mv = T::lit(mf);
                *vv = T::lit(vf);
                let update = lr * (mf / c1) / ((vf / c2).sqrt() + eps);
                *pv = T::lit(pv.to_f64_lossy() - update);
            }
        }
    }
}
