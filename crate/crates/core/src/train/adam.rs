//! Adam with bias correction and a constant learning rate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::{Gradients, ParamStore};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Scalar settings and step count; moment tensors live beside them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamSettings {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub settings: AdamSettings,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            settings: AdamSettings {
                learning_rate,
                beta1: BETA1,
                beta2: BETA2,
                epsilon: EPSILON,
                step: 0,
            },
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter accepted by `trainable`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, trainable: impl Fn(&str) -> bool) {
        let s = &mut self.settings;
        s.step += 1;
        let t = s.step as i32;
        let (b1, b2, eps, lr) = (s.beta1, s.beta2, s.epsilon, s.learning_rate);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (name, g) in grads.iter() {
            if !trainable(name) {
                continue;
            }
            let Ok(p) = params.get_mut(name) else { continue };
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let (m, v) = (m.values_mut(), v.values_mut());
            for (i, (p, &g)) in p.values_mut().iter_mut().zip(g.values()).enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn quad(params: &ParamStore) -> Gradients {
        // d/dx of sum((x - 3)^2)
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, |_| true);
        let x = bound.var("x").unwrap();
        let shift = tape.constant(Tensor::filled(&[2], -3.0));
        let d = tape.add(x, shift).unwrap();
        let sq = tape.mul(d, d).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        bound.gradients(&tape)
    }

    #[test]
    fn first_step_moves_by_the_learning_rate() {
        // with bias correction the first step is lr * g / (|g| + eps)
        let mut p = ParamStore::new();
        p.insert("x", Tensor::vector(vec![0.0, 5.0]));
        let mut adam = Adam::new(0.1);
        let g = quad(&p);
        adam.step(&mut p, &g, |_| true);
        let x = p.get("x").unwrap().values();
        assert!((x[0] - 0.1).abs() < 1e-9);
        assert!((x[1] - 4.9).abs() < 1e-9);
    }

    #[test]
    fn converges_on_a_quadratic() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::vector(vec![0.0, 5.0]));
        let mut adam = Adam::new(0.05);
        for _ in 0..2000 {
            let g = quad(&p);
            adam.step(&mut p, &g, |_| true);
        }
        for &x in p.get("x").unwrap().values() {
            assert!((x - 3.0).abs() < 1e-3, "{x}");
        }
    }

    #[test]
    fn zero_rate_and_frozen_params_are_untouched() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::vector(vec![0.25, -1.5]));
        let before = p.clone();
        let g = quad(&p);
        Adam::new(0.0).step(&mut p, &g, |_| true);
        assert_eq!(p, before);
        Adam::new(1.0).step(&mut p, &g, |_| false);
        assert_eq!(p, before);
    }
}
