use std::collections::BTreeMap;

use super::tape::{Gradients, ParamKey};

/// Anything exposing its trainable parameters as keyed slices.
pub trait Parameters {
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(ParamKey, &mut [f64]));
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: BTreeMap<ParamKey, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update. Parameters without a gradient entry are left
    /// untouched.
    pub fn step(&mut self, params: &mut dyn Parameters, grads: &Gradients) {
        self.t += 1;
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let moments = &mut self.moments;
        params.visit_params_mut(&mut |key, p| {
            let Some(g) = grads.get(&key) else { return };
            let (m, v) = moments
                .entry(key)
                .or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
            for (((p, g), m), v) in p.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Activation, DenseNet, GradTape, Matrix};

    struct One(DenseNet);

    impl Parameters for One {
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(ParamKey, &mut [f64])) {
            self.0.visit_params_mut(0, f);
        }
    }

    #[test]
    fn fits_a_linear_map() {
        let mut net = One(DenseNet::zeros(&[1, 1], &[Activation::Identity]).unwrap());
        let mut opt = Adam::new(0.05);
        for _ in 0..2000 {
            let mut tape = GradTape::new();
            let x = tape.constant(Matrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap());
            let y = net.0.record(&mut tape, x, 0).unwrap();
            // target y = 3x - 1
            let pred = tape.value(y).clone();
            let g = Matrix::from_vec(2, 1, vec![pred.get(0, 0) - 2.0, pred.get(1, 0) - 5.0]).unwrap();
            let grads = tape.backward_from(y, &g).unwrap();
            opt.step(&mut net, &grads);
        }
        let l = &net.0.layers()[0];
        assert!((l.weight.get(0, 0) - 3.0).abs() < 1e-3);
        assert!((l.bias[0] + 1.0).abs() < 1e-3);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut net = One(DenseNet::new(&[2, 2], &[Activation::Tanh], &mut crate::numerics::Rng::new(1)).unwrap());
        let before = net.0.clone();
        let mut opt = Adam::new(0.0);
        let mut tape = GradTape::new();
        net.0.forward(&[1.0, 2.0], Some(&mut tape)).unwrap();
        let grads = tape.backward(&Matrix::row_vector(&[1.0, 1.0])).unwrap();
        opt.step(&mut net, &grads);
        assert_eq!(net.0, before);
    }
}
