use alloc::collections::BTreeMap;
use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tensor::Tensor;

/// Adam with bias-corrected first and second moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads` must carry exactly the keys of `params`.
    pub fn step(&mut self, params: &mut ModelParams, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        if let Some(k) = grads.keys().find(|k| !params.contains(k)) {
            return Err(Error::KeyMismatch(k.clone()));
        }
        if let Some(k) = params.keys().find(|k| !grads.contains_key(*k)) {
            return Err(Error::KeyMismatch(k.clone()));
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - libm::pow(self.beta1, t);
        let bc2 = 1.0 - libm::pow(self.beta2, t);
        for (key, p) in params.iter_mut() {
            let g = &grads[key];
            if g.shape() != p.shape() {
                return Err(Error::shape("adam", p.shape(), g.shape()));
            }
            let m = self
                .m
                .entry(key.clone())
                .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            let v = self
                .v
                .entry(key.clone())
                .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            for i in 0..p.len() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                p.data_mut()[i] -= self.lr * m_hat / (libm::sqrt(v_hat) + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn one(key: &str, v: f64) -> ModelParams {
        let mut p = ModelParams::new();
        p.insert(key, Tensor::new([2], vec![v, -v]).unwrap());
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = one("w", 1.5);
        let before = p.clone();
        let mut g = BTreeMap::new();
        g.insert("w".into(), Tensor::zeros([2]));
        Adam::new(0.1).step(&mut p, &g).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_lr_times_sign() {
        let mut p = one("w", 0.0);
        let mut g = BTreeMap::new();
        g.insert("w".into(), Tensor::new([2], vec![3.0, -0.02]).unwrap());
        Adam::new(0.01).step(&mut p, &g).unwrap();
        // m_hat = g, v_hat = g^2 at t = 1, so the step is lr * g / (|g| + eps).
        assert!((p.get("w").unwrap().data()[0] + 0.01).abs() < 1e-9);
        assert!((p.get("w").unwrap().data()[1] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn two_steps_reduce_quadratic() {
        let mut p = ModelParams::new();
        p.insert("x", Tensor::scalar(2.0));
        let mut adam = Adam::new(0.1);
        let f = |p: &ModelParams| p.get("x").unwrap().data()[0].powi(2);
        let start = f(&p);
        for _ in 0..2 {
            let x = p.get("x").unwrap().data()[0];
            let mut g = BTreeMap::new();
            g.insert("x".into(), Tensor::scalar(2.0 * x));
            adam.step(&mut p, &g).unwrap();
        }
        assert!(f(&p) < start);
        assert_eq!(adam.steps_taken(), 2);
    }

    #[test]
    fn key_mismatch_is_reported() {
        let mut p = one("w", 1.0);
        let mut g = BTreeMap::new();
        g.insert("other".into(), Tensor::zeros([2]));
        assert_eq!(
            Adam::new(0.1).step(&mut p, &g).unwrap_err(),
            Error::KeyMismatch("other".into())
        );
    }
}
