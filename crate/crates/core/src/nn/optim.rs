use serde::{Deserialize, Serialize};

use super::{Params, Real};

/// Adam with bias correction and a constant learning rate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of `params` from `grads` (same structure).
    pub fn step<T: Real, P: Params<T>>(&mut self, params: &mut P, grads: &P) {
        let mut flat: Vec<Vec<f64>> = Vec::new();
        grads.visit(&mut |_, t| flat.push(t.data.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()));
        if self.m.is_empty() {
            self.m = flat.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), flat.len(), "optimizer/parameter structure mismatch");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let mut idx = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        params.visit_mut(&mut |_, t| {
            let g = &flat[idx];
            let m = &mut ms[idx];
            let v = &mut vs[idx];
            assert_eq!(g.len(), t.data.len(), "optimizer/parameter structure mismatch");
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let update = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                t.data[i] -= T::of(update);
            }
            idx += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    #[derive(Clone)]
    struct Scalar(Tensor<f64>);
    impl Params<f64> for Scalar {
        fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor<f64>)) {
            f("x", &self.0)
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<f64>)) {
            f("x", &mut self.0)
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Scalar(Tensor::from_vec(&[1], vec![1.0]));
        let g = Scalar(Tensor::from_vec(&[1], vec![0.3]));
        let mut opt = Adam::new(0.01);
        opt.step(&mut p, &g);
        assert!((p.0.data[0] - 0.99).abs() < 1e-6);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = Scalar(Tensor::from_vec(&[2], vec![3.0, -2.0]));
        let mut opt = Adam::new(0.05);
        for _ in 0..2000 {
            let g = Scalar(Tensor::from_vec(&[2], p.0.data.iter().map(|x| 2.0 * (x - 0.5)).collect()));
            opt.step(&mut p, &g);
        }
        assert!(p.0.data.iter().all(|x| (x - 0.5).abs() < 1e-2));
    }
}
