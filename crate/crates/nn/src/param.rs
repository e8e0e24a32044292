//! Trainable tensors and the visitor used for optimizers, hashing and
//! serialization.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::float::Float;

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub shape: Vec<usize>,
}

impl<T: Float> Param<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { value: vec![T::zero(); n], grad: vec![T::zero(); n], shape: shape.to_vec() }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        let mut p = Self::zeros(shape);
        p.value.iter_mut().for_each(|x| *x = v);
        p
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(shape);
        for x in p.value.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *x = T::lit(z * std);
        }
        p
    }

    pub fn from_values(shape: &[usize], value: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len(), "shape/value length mismatch");
        let n = value.len();
        Self { value, grad: vec![T::zero(); n], shape: shape.to_vec() }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Anything that owns parameters. Visit order must be stable: it defines the
/// serialized layout and the optimizer state alignment.
pub trait Module<T: Float> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn param_count<T: Float, M: Module<T> + ?Sized>(m: &M) -> usize {
    let mut n = 0;
    m.visit("", &mut |_, p| n += p.len());
    n
}

pub fn zero_grads<T: Float, M: Module<T> + ?Sized>(m: &mut M) {
    m.visit_mut("", &mut |_, p| p.zero_grad());
}

/// All parameter values in visit order, widened to f64.
pub fn flatten_values<T: Float, M: Module<T> + ?Sized>(m: &M) -> Vec<f64> {
    let mut out = Vec::with_capacity(param_count(m));
    m.visit("", &mut |_, p| out.extend(p.value.iter().map(|v| v.to_f64_lossy())));
    out
}

/// Names and shapes in visit order.
pub fn layout<T: Float, M: Module<T> + ?Sized>(m: &M) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    m.visit("", &mut |name, p| out.push((name.to_string(), p.shape.clone())));
    out
}

/// Overwrite every parameter from a flat list produced by [`flatten_values`].
pub fn load_values<T: Float, M: Module<T> + ?Sized>(m: &mut M, values: &[f64]) -> Result<(), String> {
    let expected = param_count(m);
    if expected != values.len() {
        return Err(format!("expected {expected} parameter values, got {}", values.len()));
    }
    let mut off = 0;
    m.visit_mut("", &mut |_, p| {
        let n = p.len();
        for (dst, src) in p.value.iter_mut().zip(&values[off..off + n]) {
            *dst = T::lit(*src);
        }
        off += n;
    });
    Ok(())
}

/// Copy parameters between two structurally identical modules of possibly
/// different precision.
pub fn copy_params<A: Float, B: Float, MA: Module<A> + ?Sized, MB: Module<B> + ?Sized>(src: &MA, dst: &mut MB) {
    let la = layout(src);
    let lb = layout(dst);
    assert_eq!(la, lb, "module layouts differ");
    let vals = flatten_values(src);
    load_values(dst, &vals).expect("layouts already compared");
}

/// SHA-256 over names, shapes and f32 little-endian values in visit order.
pub fn content_hash<T: Float, M: Module<T> + ?Sized>(m: &M) -> [u8; 32] {
    let mut h = Sha256::new();
    m.visit("", &mut |name, p| {
        h.update((name.len() as u32).to_le_bytes());
        h.update(name.as_bytes());
        h.update((p.shape.len() as u32).to_le_bytes());
        for d in &p.shape {
            h.update((*d as u64).to_le_bytes());
        }
        for v in &p.value {
            h.update((v.to_f64_lossy() as f32).to_le_bytes());
        }
    });
    h.finalize().into()
}

/// Squared L2 norm of all gradients.
pub fn grad_norm_sq<T: Float, M: Module<T> + ?Sized>(m: &M) -> f64 {
    let mut s = 0.0;
    m.visit("", &mut |_, p| s += p.grad.iter().map(|g| g.to_f64_lossy().powi(2)).sum::<f64>());
    s
}

pub fn scale_grads<T: Float, M: Module<T> + ?Sized>(m: &mut M, k: f64) {
    let k = T::lit(k);
    m.visit_mut("", &mut |_, p| p.grad.iter_mut().for_each(|g| *g *= k));
}
