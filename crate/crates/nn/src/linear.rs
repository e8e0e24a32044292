use rand::Rng;

use crate::float::Float;
use crate::mat::{gemm, matmul, MatMut, MatRef};
use crate::param::{join, Module, Param};

/// Affine map over the last axis; weight is stored `in × out`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl<T: Float> Linear<T> {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, bias: bool, rng: &mut R) -> Self {
        let std = 1.0 / (in_dim as f64).sqrt();
        Self {
            weight: Param::randn(&[in_dim, out_dim], std, rng),
            bias: bias.then(|| Param::zeros(&[out_dim])),
            in_dim,
            out_dim,
        }
    }

    /// Zero-initialized map; used for output heads so an untrained network
    /// predicts exactly zero.
    pub fn zeroed(in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Self {
            weight: Param::zeros(&[in_dim, out_dim]),
            bias: bias.then(|| Param::zeros(&[out_dim])),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, x: &[T], rows: usize) -> Vec<T> {
        debug_assert_eq!(x.len(), rows * self.in_dim);
        let mut y = matmul(x, rows, self.in_dim, &self.weight.value, self.out_dim);
        if let Some(b) = &self.bias {
            for row in y.chunks_exact_mut(self.out_dim) {
                for (v, bb) in row.iter_mut().zip(&b.value) {
                    *v += *bb;
                }
            }
        }
        y
    }

    /// Accumulates parameter gradients when `train` is set and returns the
    /// input gradient when `need_dx` is set.
    pub fn backward(&mut self, x: &[T], dy: &[T], rows: usize, train: bool, need_dx: bool) -> Option<Vec<T>> {
        debug_assert_eq!(dy.len(), rows * self.out_dim);
        if train {
            gemm(
                T::one(),
                MatRef::rm(x, rows, self.in_dim).t(),
                MatRef::rm(dy, rows, self.out_dim),
                T::one(),
                MatMut::rm(&mut self.weight.grad, self.in_dim, self.out_dim),
            );
            if let Some(b) = &mut self.bias {
                for row in dy.chunks_exact(self.out_dim) {
                    for (g, d) in b.grad.iter_mut().zip(row) {
                        *g += *d;
                    }
                }
            }
        }
        need_dx.then(|| {
            let mut dx = vec![T::zero(); rows * self.in_dim];
            gemm(
                T::one(),
                MatRef::rm(dy, rows, self.out_dim),
                MatRef::rm(&self.weight.value, self.in_dim, self.out_dim).t(),
                T::zero(),
                MatMut::rm(&mut dx, rows, self.in_dim),
            );
            dx
        })
    }
}

impl<T: Float> Module<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}
