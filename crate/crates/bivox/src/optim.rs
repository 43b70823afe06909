//! Adaptive-moment optimizer with decoupled weight decay.

use crate::model::Model;
use crate::scalar::{fl, Scalar};
use crate::tensor::Tensor;
use indexmap::IndexMap;

pub struct AdamW<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: IndexMap<String, Tensor<S>>,
    v: IndexMap<String, Tensor<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(model: &Model<S>) -> Self {
        let mut m = IndexMap::new();
        let mut v = IndexMap::new();
        for (name, t) in model.iter() {
            m.insert(name.to_string(), Tensor::zeros(t.rows(), t.cols()));
            v.insert(name.to_string(), Tensor::zeros(t.rows(), t.cols()));
        }
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            t: 0,
            m,
            v,
        }
    }

    /// One update over every trainable parameter. A zero learning rate
    /// leaves parameters bitwise unchanged; frozen parameters (and their
    /// moments) are never touched.
    pub fn step<F: Fn(&str) -> bool>(
        &mut self,
        model: &mut Model<S>,
        grads: &IndexMap<String, Tensor<S>>,
        lr: f64,
        trainable: F,
    ) {
        self.t += 1;
        let b1 = fl::<S>(self.beta1);
        let b2 = fl::<S>(self.beta2);
        let one = S::one();
        let eps = fl::<S>(self.eps);
        let bc1 = fl::<S>(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = fl::<S>(1.0 - self.beta2.powi(self.t as i32));
        let lr_s = fl::<S>(lr);
        let wd = fl::<S>(self.weight_decay);

        for (name, theta) in model.iter_mut() {
            if !trainable(name) {
                continue;
            }
            let g = match grads.get(name) {
                Some(g) => g,
                None => continue,
            };
            let m = self.m.get_mut(name).expect("moment exists");
            let v = self.v.get_mut(name).expect("moment exists");
            for i in 0..theta.len() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + (one - b1) * gi;
                let vi = b2 * v.data()[i] + (one - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                if lr != 0.0 {
                    let m_hat = mi / bc1;
                    let v_hat = vi / bc2;
                    let p = theta.data()[i];
                    theta.data_mut()[i] = p - lr_s * (m_hat / (v_hat.sqrt() + eps) + wd * p);
                }
            }
        }
    }
}
