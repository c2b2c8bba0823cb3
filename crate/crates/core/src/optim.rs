use std::collections::BTreeMap;

use ndarray::{ArrayD, Zip};

use crate::nn::ParamStore;
use crate::tensor::Float;

/// Adam with bias correction. State is keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Learning rates for parameters whose names start with a prefix; the
    /// first matching prefix wins.
    pub prefix_lr: Vec<(String, f64)>,
    step: u64,
    first: BTreeMap<String, ArrayD<T>>,
    second: BTreeMap<String, ArrayD<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            prefix_lr: Vec::new(),
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn with_prefix_lr(mut self, prefix: impl Into<String>, lr: f64) -> Self {
        self.prefix_lr.push((prefix.into(), lr));
        self
    }

    fn lr_for(&self, name: &str) -> f64 {
        self.prefix_lr
            .iter()
            .find(|(prefix, _)| name.starts_with(prefix.as_str()))
            .map_or(self.lr, |&(_, lr)| lr)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, ArrayD<T>>) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(t));
        let c2 = T::of(1.0 - self.beta2.powi(t));
        let eps = T::of(self.eps);
        for (name, grad) in grads {
            let lr = T::of(self.lr_for(name));
            let Some(param) = params.get_mut(name) else {
                continue;
            };
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(param.raw_dim()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(param.raw_dim()));
            Zip::from(param)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut params = ParamStore::<f64>::new();
        params.insert("w", ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.0, -1.0]).unwrap());
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.3, -7.0]).unwrap());
        let mut adam = Adam::new(0.1, 0.5, 0.999);
        adam.step(&mut params, &grads);
        let w = params.get("w").unwrap();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn prefixed_parameters_use_their_own_rate() {
        let mut params = ParamStore::<f64>::new();
        params.insert("text.embed", ArrayD::zeros(IxDyn(&[1])));
        params.insert("mask.proj", ArrayD::zeros(IxDyn(&[1])));
        let grads = BTreeMap::from([
            ("text.embed".to_string(), ArrayD::from_elem(IxDyn(&[1]), 2.0)),
            ("mask.proj".to_string(), ArrayD::from_elem(IxDyn(&[1]), 2.0)),
        ]);
        let mut adam = Adam::new(0.1, 0.5, 0.999).with_prefix_lr("text.", 0.01);
        adam.step(&mut params, &grads);
        assert!((params.get("text.embed").unwrap()[0] + 0.01).abs() < 1e-9);
        assert!((params.get("mask.proj").unwrap()[0] + 0.1).abs() < 1e-9);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut params = ParamStore::<f64>::new();
        params.insert("x", ArrayD::from_elem(IxDyn(&[3]), 5.0));
        let mut adam = Adam::new(0.05, 0.9, 0.999);
        for _ in 0..2000 {
            let g = params.get("x").unwrap().mapv(|x| 2.0 * (x - 1.5));
            let grads = BTreeMap::from([("x".to_string(), g)]);
            adam.step(&mut params, &grads);
        }
        assert!(params.get("x").unwrap().iter().all(|&x| (x - 1.5).abs() < 1e-3));
    }
}
