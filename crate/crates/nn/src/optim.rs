//! Adaptive-moment optimizer over a module's parameters.

use crate::float::Float;
use crate::param::{Module, Param};

#[derive(Clone, Debug)]
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
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step<T: Float, M: Module<T> + ?Sized>(&mut self, module: &mut M) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let first = self.m.is_empty();
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        module.visit_mut("", &mut |_, p: &mut Param<T>| {
            if first {
                ms.push(vec![0.0; p.len()]);
                vs.push(vec![0.0; p.len()]);
            }
            assert!(idx < ms.len() && ms[idx].len() == p.len(), "parameter set changed between steps");
            let (m, v) = (&mut ms[idx], &mut vs[idx]);
            for j in 0..p.value.len() {
                let g = p.grad[j].to_f64_lossy();
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let update = lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
                p.value[j] -= T::lit(update);
                p.grad[j] = T::zero();
            }
            idx += 1;
        });
        assert_eq!(idx, self.m.len(), "parameter set changed between steps");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quad {
        x: Param<f64>,
    }

    impl Module<f64> for Quad {
        fn visit(&self, _: &str, f: &mut dyn FnMut(&str, &Param<f64>)) {
            f("x", &self.x);
        }
        fn visit_mut(&mut self, _: &str, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
            f("x", &mut self.x);
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut q = Quad { x: Param::from_values(&[2], vec![3.0, -2.0]) };
        let mut opt = Adam::new(0.05);
        for _ in 0..2000 {
            for j in 0..2 {
                q.x.grad[j] = 2.0 * (q.x.value[j] - 1.0);
            }
            opt.step(&mut q);
        }
        assert!((q.x.value[0] - 1.0).abs() < 1e-3);
        assert!((q.x.value[1] - 1.0).abs() < 1e-3);
        assert!(q.x.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut q = Quad { x: Param::from_values(&[2], vec![0.0, 0.0]) };
        q.x.grad = vec![5.0, -0.1];
        let mut opt = Adam::new(1e-3);
        opt.step(&mut q);
        assert!((q.x.value[0] + 1e-3).abs() < 1e-9);
        assert!((q.x.value[1] - 1e-3).abs() < 1e-9);
    }
}
